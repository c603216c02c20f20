"""``tpcbench`` command line."""

from __future__ import annotations

import argparse
import datetime as dt
import logging
import signal
import sys
import threading
from pathlib import Path

log = logging.getLogger("tpcbench")


def _ssl_from_args(args):
    from .ca import load_credential, load_trust
    from .tls import client_context

    trust = load_trust(args.ca) if args.ca else None
    cred = load_credential(args.cert, args.key) if args.cert and args.key else None
    return client_context(trust, cred)


def _wait_forever(stop_msg: str) -> None:
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    print(stop_msg, flush=True)
    stop.wait()


# -- ca ------------------------------------------------------------------


def cmd_ca_init(args) -> int:
    from .ca import create_authority, export_authority

    ca = create_authority(args.subject, args.days)
    crt, key = export_authority(ca, args.out)
    print(f"wrote {crt} and {key}")
    return 0


def cmd_ca_issue(args) -> int:
    from .ca import export_credential, issue_host_credential, load_authority

    ca = load_authority(args.ca)
    cred = issue_host_credential(ca, args.host, args.days)
    crt, key = export_credential(cred, args.out, args.name)
    print(f"wrote {crt} and {key}")
    return 0


# -- endpoint --------------------------------------------------------------


def cmd_endpoint_serve(args) -> int:
    from .ca import load_credential, load_trust
    from .endpoint import EndpointConfig, serve
    from .storage import make_storage
    from .transfer import ProbeResponder

    config = EndpointConfig(
        storage=make_storage(args.storage, args.capacity),
        credential=load_credential(args.cert, args.key),
        trust=load_trust(args.ca),
        listen_port=args.port,
        listen_host=args.host,
        require_client_cert=args.mutual_tls,
        marker_period=args.marker_period,
        max_sessions=args.max_sessions,
    )
    handle = serve(config)
    probe = None
    if args.probe_port is not None:
        probe = ProbeResponder(args.host, args.probe_port).start()
    try:
        extra = f", probe responder on {probe.address}" if probe else ""
        _wait_forever(f"endpoint listening on {handle.base_url}{extra}")
    finally:
        handle.stop()
        if probe:
            probe.stop()
    return 0


# -- probes / transfers ----------------------------------------------------


def cmd_probe_rtt(args) -> int:
    from .transfer import measure_rtt

    print(f"rtt_ms,{measure_rtt(args.peer, args.samples):.3f}")
    return 0


def cmd_probe_throughput(args) -> int:
    from .transfer import raw_throughput_probe

    gbps = raw_throughput_probe(args.peer, args.streams, args.seconds)
    print(f"gbps,{gbps:.6f}")
    return 0


def cmd_probe_serve(args) -> int:
    from .transfer import ProbeResponder, parse_address

    host, port = parse_address(args.listen)
    responder = ProbeResponder(host, port).start()
    try:
        _wait_forever(f"probe responder on {responder.address}")
    finally:
        responder.stop()
    return 0


def cmd_transfer(args) -> int:
    from .transfer import HttpsTpcAdapter, TransferSpec, tpc_transfer

    spec = TransferSpec(args.source, args.dest, args.streams, None, args.verify, args.timeout)
    result = tpc_transfer(HttpsTpcAdapter(_ssl_from_args(args)), spec)
    print(
        f"status={result.status} bytes={result.bytes_transferred} duration_s={result.duration_s:.3f} "
        f"markers={len(result.markers)}" + (f" reason={result.reason}" if result.reason else "")
    )
    return 0 if result.succeeded else 1


def cmd_localbench(args) -> int:
    from .transfer import local_copy_benchmark

    points = []
    print("concurrency,size_bytes,gbps")
    for n in args.concurrency:
        gbps = local_copy_benchmark(n, args.size, args.backend)
        points.append((n, gbps))
        print(f"{n},{args.size},{gbps:.6f}", flush=True)
    if args.figure:
        from .figures import plot_concurrency_sweep

        plot_concurrency_sweep(points, args.figure, label=f"{args.backend} copy")
    return 0


def cmd_shaper_run(args) -> int:
    from .shaper import ShaperConfig, start_relay

    relay = start_relay(
        ShaperConfig(
            forward_address=args.forward,
            listen_address=args.listen,
            rtt_ms=args.rtt_ms,
            bandwidth_cap_bps=args.bw_bps,
            per_connection=args.per_connection,
            window_bytes=args.window_bytes,
        )
    )
    try:
        _wait_forever(f"relay {relay.address} -> {args.forward}")
    finally:
        relay.stop()
    return 0


def cmd_orchestrate(args) -> int:
    from .orchestrator import Orchestrator, load_mesh_config

    config = load_mesh_config(args.mesh)
    if args.interval_hours is not None:
        config.interval_hours = args.interval_hours
    orch = Orchestrator(config)
    stop = threading.Event()
    for sig in (signal.SIGINT, signal.SIGTERM):
        signal.signal(sig, lambda *_: stop.set())
    try:
        stats = orch.schedule_campaign(once=args.once, stop=stop)
    except RuntimeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"sweeps={stats['sweeps']} skipped={stats['skipped']} results={config.results_path}")
    return 0


# -- reports -----------------------------------------------------------------


def _load(path):
    from .orchestrator import CampaignStore

    return CampaignStore(path).load()


def _when(text):
    if text is None:
        return None
    t = dt.datetime.fromisoformat(text.replace("Z", "+00:00"))
    return t if t.tzinfo else t.replace(tzinfo=dt.timezone.utc)


def cmd_report_grid(args) -> int:
    from .reporting import Thresholds, render_grid

    doc = render_grid(
        _load(args.inp),
        Thresholds(args.good, args.warn),
        adapter=args.adapter,
        stream_count=args.streams,
        since=_when(args.since),
        until=_when(args.until),
    )
    Path(args.out).write_text(doc, encoding="utf-8")
    print(f"wrote {args.out}")
    return 0


def cmd_report_latency(args) -> int:
    from .reporting import latency_curve

    series, text = latency_curve(_load(args.inp), args.bucket_ms, args.adapter, args.streams)
    Path(args.out).write_text(text, encoding="utf-8")
    print(f"wrote {args.out}")
    if not args.no_figure:
        from .figures import plot_latency_curves

        fig = args.figure or str(Path(args.out).with_suffix(".png"))
        plot_latency_curves(series, fig)
        print(f"wrote {fig}")
    return 0


def cmd_report_streams(args) -> int:
    from .reporting import compare_streams

    records = _load(args.inp)
    try:
        s = compare_streams(records, args.adapter)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print("adapter,mean_single_gbps,mean_multi_gbps,advantage_percent,single_count,multi_count")
    print(
        f"{s.adapter},{s.mean_single_gbps!r},{s.mean_multi_gbps!r},{s.advantage_percent!r},"
        f"{s.single_count},{s.multi_count}"
    )
    if args.figure:
        from .figures import plot_stream_comparison

        plot_stream_comparison(records, args.adapter, args.figure)
    return 0


def cmd_report_adapters(args) -> int:
    from .reporting import compare_adapters

    try:
        c = compare_adapters(_load(args.inp), args.adapter, args.baseline, args.streams)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print("adapter,baseline,mean_gbps,baseline_mean_gbps,difference_gbps,advantage_percent")
    print(
        f"{c.adapter},{c.baseline},{c.mean_gbps!r},{c.baseline_mean_gbps!r},"
        f"{c.difference_gbps!r},{c.advantage_percent!r}"
    )
    return 0


def _int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not values or any(v < 1 for v in values):
        raise argparse.ArgumentTypeError("values must be positive integers")
    return values


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tpcbench", description=__doc__)
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    def tls_opts(sp):
        sp.add_argument("--ca", help="CA certificate (PEM) to trust")
        sp.add_argument("--cert", help="client certificate for mutual TLS")
        sp.add_argument("--key", help="client key for mutual TLS")

    ca = sub.add_parser("ca", help="test certificate authority").add_subparsers(dest="ca_cmd", required=True)
    sp = ca.add_parser("init", help="create a CA")
    sp.add_argument("--subject", required=True)
    sp.add_argument("--days", type=int, default=365)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_ca_init)
    sp = ca.add_parser("issue", help="issue a host credential")
    sp.add_argument("--ca", required=True, help="directory holding ca.crt and ca.key")
    sp.add_argument("--host", action="append", required=True)
    sp.add_argument("--days", type=int, default=30)
    sp.add_argument("--out", required=True)
    sp.add_argument("--name", help="file stem (default: first --host)")
    sp.set_defaults(func=cmd_ca_issue)

    ep = sub.add_parser("endpoint", help="TPC storage endpoint").add_subparsers(dest="ep_cmd", required=True)
    sp = ep.add_parser("serve")
    sp.add_argument("--port", type=int, required=True)
    sp.add_argument("--host", default="127.0.0.1")
    sp.add_argument("--storage", default="memory", help="memory or disk:<root>")
    sp.add_argument("--capacity", type=int, default=None, help="storage limit in bytes")
    sp.add_argument("--cert", required=True)
    sp.add_argument("--key", required=True)
    sp.add_argument("--ca", required=True)
    sp.add_argument("--mutual-tls", action="store_true")
    sp.add_argument("--marker-period", type=float, default=5.0)
    sp.add_argument("--max-sessions", type=int, default=64)
    sp.add_argument("--probe-port", type=int, default=None, help="also run a probe responder")
    sp.set_defaults(func=cmd_endpoint_serve)

    pr = sub.add_parser("probe", help="RTT and raw throughput probes").add_subparsers(dest="probe_cmd", required=True)
    sp = pr.add_parser("rtt")
    sp.add_argument("--peer", required=True)
    sp.add_argument("--samples", type=int, default=5)
    sp.set_defaults(func=cmd_probe_rtt)
    sp = pr.add_parser("throughput")
    sp.add_argument("--peer", required=True)
    sp.add_argument("--streams", type=int, default=8)
    sp.add_argument("--seconds", type=float, default=10.0)
    sp.set_defaults(func=cmd_probe_throughput)
    sp = pr.add_parser("serve", help="run a probe responder")
    sp.add_argument("--listen", default="127.0.0.1:9000")
    sp.set_defaults(func=cmd_probe_serve)

    sp = sub.add_parser("transfer", help="run one third-party copy")
    sp.add_argument("--source", required=True)
    sp.add_argument("--dest", required=True)
    sp.add_argument("--streams", type=int, default=8)
    sp.add_argument("--verify", action="store_true")
    sp.add_argument("--timeout", type=float, default=300.0)
    tls_opts(sp)
    sp.set_defaults(func=cmd_transfer)

    sp = sub.add_parser("localbench", help="in-process copy saturation benchmark")
    sp.add_argument("--concurrency", type=_int_list, default=[1])
    sp.add_argument("--size", type=int, required=True)
    sp.add_argument("--backend", choices=("memory", "disk"), default="memory")
    sp.add_argument("--figure", help="write a throughput-vs-concurrency plot")
    sp.set_defaults(func=cmd_localbench)

    sh = sub.add_parser("shaper", help="latency/bandwidth relay").add_subparsers(dest="sh_cmd", required=True)
    sp = sh.add_parser("run")
    sp.add_argument("--listen", required=True)
    sp.add_argument("--forward", required=True)
    sp.add_argument("--rtt-ms", type=float, default=0.0)
    sp.add_argument("--bw-bps", type=float, default=None)
    sp.add_argument("--per-connection", action="store_true")
    sp.add_argument("--window-bytes", type=int, default=None)
    sp.set_defaults(func=cmd_shaper_run)

    sp = sub.add_parser("orchestrate", help="run measurement sweeps over a mesh")
    sp.add_argument("--mesh", required=True)
    sp.add_argument("--once", action="store_true")
    sp.add_argument("--interval-hours", type=float, default=None)
    sp.set_defaults(func=cmd_orchestrate)

    rp = sub.add_parser("report", help="reports over a results store").add_subparsers(dest="rep_cmd", required=True)
    sp = rp.add_parser("grid")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--adapter")
    sp.add_argument("--streams", type=int)
    sp.add_argument("--good", type=float, default=20.0)
    sp.add_argument("--warn", type=float, default=5.0)
    sp.add_argument("--since")
    sp.add_argument("--until")
    sp.set_defaults(func=cmd_report_grid)
    sp = rp.add_parser("latency")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--bucket-ms", type=float, default=10.0)
    sp.add_argument("--adapter")
    sp.add_argument("--streams", type=int)
    sp.add_argument("--figure", help="plot path (default: CSV path with .png)")
    sp.add_argument("--no-figure", action="store_true")
    sp.set_defaults(func=cmd_report_latency)
    sp = rp.add_parser("streams")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--adapter", required=True)
    sp.add_argument("--figure")
    sp.set_defaults(func=cmd_report_streams)
    sp = rp.add_parser("adapters")
    sp.add_argument("--in", dest="inp", required=True)
    sp.add_argument("--adapter", required=True)
    sp.add_argument("--baseline", required=True)
    sp.add_argument("--streams", type=int)
    sp.set_defaults(func=cmd_report_adapters)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
