import json
import threading

import pytest

from fakes import ScriptedAdapter
from oracles import brute_group_means
from tpcbench.orchestrator import (
    AllTransfersFailed,
    CampaignStore,
    Measurement,
    MeshConfig,
    MeshEndpoint,
    NoReachableEndpoints,
    Orchestrator,
    aggregate,
    compute_throughput_gbps,
    load_mesh_config,
)


def mesh(n=2, **kw):
    eps = [MeshEndpoint(f"ep{i}", f"https://127.0.0.1:{9000 + i}") for i in range(n)]
    return MeshConfig(eps, **kw)


def orch(tmp_path, config=None, adapter=None, **kw):
    config = config or mesh(adapters=["scripted"])
    adapter = adapter or ScriptedAdapter()
    kw.setdefault("rtt_probe", lambda addr: 12.5)
    kw.setdefault("reachable", lambda e: True)
    return Orchestrator(config, {adapter.name: adapter}, CampaignStore(tmp_path / "r.jsonl"), **kw), adapter


def meas(src="a", dst="b", adapter="https-tpc", streams=8, gbps=1.0, rtt=10.0, ts="2024-01-01T00:00:00+00:00"):
    return Measurement(src, dst, adapter, streams, 11, 1000, gbps, rtt, [1.0], 0, ts)


def test_throughput_examples():
    assert compute_throughput_gbps([1.0], 10**9) == 8.0
    assert compute_throughput_gbps([1.0, 2.0, 3.0], 10**9) == 12.0
    with pytest.raises(ValueError):
        compute_throughput_gbps([], 1)


def test_defaults():
    c = mesh()
    assert (c.concurrency, c.file_size_bytes, c.stream_settings, c.interval_hours) == (11, 10**9, [8, 1], 12)


@pytest.mark.parametrize(
    "kw",
    [dict(concurrency=0), dict(stream_settings=[]), dict(stream_settings=[0]), dict(file_size_bytes=0), dict(adapters=[])],
)
def test_config_validation(kw):
    with pytest.raises(ValueError):
        mesh(**kw)


def test_config_needs_two_unique_endpoints():
    with pytest.raises(ValueError):
        MeshConfig([MeshEndpoint("a", "https://x")])
    with pytest.raises(ValueError):
        MeshConfig([MeshEndpoint("a", "https://x"), MeshEndpoint("a", "https://y")])


def test_load_mesh_config(tmp_path):
    (tmp_path / "mesh.json").write_text(json.dumps({
        "endpoints": [{"name": "a", "base_url": "https://h1:1"}, {"name": "b", "base_url": "https://h2:2", "probe_address": "h2:3"}],
        "results_path": "out/results.jsonl",
        "concurrency": 3,
    }))
    c = load_mesh_config(tmp_path / "mesh.json")
    assert c.results_path == str(tmp_path / "out/results.jsonl")
    assert c.endpoints[1].probe_address == "h2:3"
    assert c.concurrency == 3


def test_measurement_validation():
    with pytest.raises(ValueError):
        meas(src="a", dst="a")
    with pytest.raises(ValueError):
        meas(gbps=0)
    with pytest.raises(ValueError):
        Measurement("a", "b", "x", 1, 2, 1, 1.0, None, [], 3, "2024-01-01T00:00:00Z")


def test_run_measurement_records(tmp_path):
    o, adapter = orch(tmp_path, adapter=ScriptedAdapter([1.0, 2.0, 3.0]))
    m = o.run_measurement("ep0", "ep1", "scripted", 8, concurrency=3, file_size_bytes=10**9)
    assert m.throughput_gbps == pytest.approx(12.0)
    assert m.failures == 0 and m.rtt_ms == 12.5
    assert len({s.source_url for s in adapter.calls}) == 3
    assert len(adapter.cleaned) == 3
    assert o.store.load() == [m]


def test_partial_failure_counts(tmp_path):
    o, _ = orch(tmp_path, adapter=ScriptedAdapter([1.0, None, 1.0]))
    m = o.run_measurement("ep0", "ep1", "scripted", 1, concurrency=3, file_size_bytes=10**9)
    assert m.failures == 1
    assert m.throughput_gbps == pytest.approx(16.0)
    assert len(m.transfer_durations_s) == 2


def test_all_failed_raises_and_records_nothing(tmp_path):
    o, _ = orch(tmp_path, adapter=ScriptedAdapter([None]))
    with pytest.raises(AllTransfersFailed):
        o.run_measurement("ep0", "ep1", "scripted", 1, concurrency=2)
    assert o.store.load() == []


def test_same_endpoint_rejected(tmp_path):
    o, _ = orch(tmp_path)
    with pytest.raises(ValueError):
        o.run_measurement("ep0", "ep0", "scripted", 1)


def test_rtt_absent_without_probe_address(tmp_path):
    o, _ = orch(tmp_path, rtt_probe=None)
    o.rtt_probe = o._probe_rtt
    m = o.run_measurement("ep0", "ep1", "scripted", 1, concurrency=1)
    assert m.rtt_ms is None


def test_sweep_counts(tmp_path):
    o, adapter = orch(tmp_path, config=mesh(3, adapters=["scripted"], concurrency=2))
    out = o.run_mesh_sweep()
    assert len(out) == 12
    order = [(m.source, m.destination, m.stream_count) for m in out]
    assert order[:2] == [("ep0", "ep1", 8), ("ep0", "ep1", 1)]
    assert len(o.store.load()) == 12


def test_sweep_isolates_failures(tmp_path):
    class Flaky(ScriptedAdapter):
        def transfer(self, spec):
            if ":9001" in spec.dest_url:
                return super().transfer(spec).__class__(spec, "failed", 0, 0, 0, "down", [], self.name)
            return super().transfer(spec)

    config = mesh(2, adapters=["scripted"], stream_settings=[1], concurrency=1)
    o, _ = orch(tmp_path, config=config, adapter=Flaky(), reachable=lambda e: e.name == "ep0")
    out = o.run_mesh_sweep()
    assert [(m.source, m.destination) for m in out] == [("ep1", "ep0")]


def test_sweep_no_reachable(tmp_path):
    o, _ = orch(tmp_path, reachable=lambda e: False)
    with pytest.raises(NoReachableEndpoints):
        o.run_mesh_sweep()


def test_store_round_trip_and_header(tmp_path):
    store = CampaignStore(tmp_path / "s.jsonl", meta={"source_objects": "distinct"})
    a, b = meas(gbps=1.5), meas(gbps=2.5, rtt=None)
    store.append(a)
    store.append(b)
    assert store.load() == [a, b]
    assert store.meta()["source_objects"] == "distinct"
    assert json.loads((tmp_path / "s.jsonl").read_text().splitlines()[0])["_meta"]["format"]


def test_aggregate_examples():
    stats = aggregate([meas(gbps=44.0)] * 3, ("adapter",))
    assert stats[("https-tpc",)].mean == 44.0
    assert stats[("https-tpc",)].stddev == 0.0
    with pytest.raises(ValueError):
        aggregate([], ("adapter",))
    with pytest.raises(ValueError):
        aggregate([meas()], ("colour",))


def test_aggregate_latency_buckets():
    ms = [meas(rtt=9.9, gbps=1), meas(rtt=10.0, gbps=3), meas(rtt=19.9, gbps=5), meas(rtt=None, gbps=100)]
    stats = aggregate(ms, ("latency_bucket",), 10)
    assert set(stats) == {(0,), (1,)}
    assert stats[(0,)].mean == 1 and stats[(1,)].mean == 4 and stats[(1,)].count == 2
    # without a latency key, RTT-less records count
    assert aggregate(ms, ("adapter",))[("https-tpc",)].count == 4


def test_aggregate_matches_brute_force():
    import random

    rng = random.Random(3)
    ms = [
        meas(src=rng.choice("abc"), dst="z", adapter=rng.choice(["x", "y"]), streams=rng.choice([1, 8]),
             gbps=rng.uniform(0.1, 50), rtt=rng.uniform(0, 100))
        for _ in range(300)
    ]
    got = aggregate(ms, ("adapter", "stream_count", "source"))
    want = brute_group_means(ms, lambda m: (m.adapter, m.stream_count, m.source))
    assert set(got) == set(want)
    for k, (mean, count, sd) in want.items():
        assert got[k].count == count
        assert got[k].mean == pytest.approx(mean, rel=1e-12)
        assert got[k].stddev == pytest.approx(sd, rel=1e-9, abs=1e-12)


class FakeClock:
    def __init__(self):
        self.t = 0.0

    def __call__(self):
        return self.t


def test_schedule_once(tmp_path):
    o, _ = orch(tmp_path)
    calls = []
    stats = o.schedule_campaign(once=True, sweep=lambda: calls.append(1))
    assert stats["sweeps"] == 1 and calls == [1]


def test_schedule_interval_and_skip(tmp_path):
    o, _ = orch(tmp_path, config=mesh(adapters=["scripted"], interval_hours=1))
    clock = FakeClock()
    durations = iter([10.0, 5000.0, 10.0, 10.0])
    stop = threading.Event()

    class Ev(threading.Event):
        def wait(self, timeout=None):
            clock.t += timeout
            return False

    def sweep():
        clock.t += next(durations)

    stats = o.schedule_campaign(stop=Ev(), clock=clock, sweep=sweep, max_sweeps=4)
    starts = stats["starts"]
    assert starts[0] == 0 and starts[1] == 3600
    # second sweep ran 5000 s, past the 7200 s slot, so that slot is skipped
    assert stats["skipped"] == 1
    assert starts[2] == 3 * 3600
    assert all(b - a >= 3600 for a, b in zip(starts, starts[1:]))
    assert not stop.is_set()


def test_schedule_unwritable_store(tmp_path):
    o, _ = orch(tmp_path)
    (tmp_path / "plainfile").write_text("")
    o.store.path = tmp_path / "plainfile" / "r.jsonl"
    with pytest.raises(RuntimeError, match="not writable"):
        o.schedule_campaign(once=True, sweep=lambda: None)
