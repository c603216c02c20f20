import os

import pytest

from tpcbench.shaper import ShaperConfig, start_relay
from tpcbench.storage import generate_test_file
from tpcbench.transfer import (
    HttpsTpcAdapter,
    ProbeResponder,
    RawStreamAdapter,
    TransferSpec,
    local_copy_benchmark,
    make_adapter,
    measure_rtt,
    parse_address,
    raw_throughput_probe,
    tpc_transfer,
)


def test_parse_address():
    assert parse_address("127.0.0.1:80") == ("127.0.0.1", 80)
    assert parse_address("tcp://[::1]:9") == ("::1", 9)
    with pytest.raises(ValueError):
        parse_address("nohost")


def test_spec_validation():
    with pytest.raises(ValueError):
        TransferSpec("a", "b", stream_count=0)
    with pytest.raises(ValueError):
        TransferSpec("a", "b", timeout=0)


def test_make_adapter():
    assert isinstance(make_adapter("https-tpc"), HttpsTpcAdapter)
    assert isinstance(make_adapter("raw-stream"), RawStreamAdapter)
    with pytest.raises(ValueError, match="unknown adapter"):
        make_adapter("gridftp")


def test_https_copy_succeeds(pair, ctx):
    src, dst = pair
    digest = generate_test_file(src.storage, "/f", 3_000_000, 9)
    res = tpc_transfer(HttpsTpcAdapter(ctx), TransferSpec(src.url("/f"), dst.url("/g"), 4, 3_000_000, True))
    assert res.succeeded, res.reason
    assert res.bytes_transferred == 3_000_000
    assert res.duration_s > 0
    assert dst.storage.digest("/g") == digest
    assert res.markers and {m.total_stripe_count for m in res.markers} == {4}


def test_stream_count_larger_than_size(pair, ctx):
    src, dst = pair
    src.storage.put("/tiny", b"abc")
    res = tpc_transfer(HttpsTpcAdapter(ctx), TransferSpec(src.url("/tiny"), dst.url("/t"), 8, 3))
    assert res.succeeded
    assert dst.storage.read_all("/t") == b"abc"
    ranges = [r.byte_range for r in src.access_log if r.method == "GET"]
    assert sorted(ranges) == [(0, 0), (1, 1), (2, 2)]


def test_cleanup_deletes_destination(pair, ctx):
    src, dst = pair
    src.storage.put("/x", b"data")
    adapter = HttpsTpcAdapter(ctx)
    spec = TransferSpec(src.url("/x"), dst.url("/y"), 1)
    assert adapter.transfer(spec).succeeded
    adapter.cleanup(spec)
    assert not dst.storage.exists("/y")


def test_destination_unreachable(ctx):
    res = tpc_transfer(HttpsTpcAdapter(ctx), TransferSpec("https://127.0.0.1:9/x", "https://127.0.0.1:9/y", 1))
    assert not res.succeeded
    assert "cannot reach destination" in res.reason


def test_non_https_dest_rejected(ctx):
    res = HttpsTpcAdapter(ctx).transfer(TransferSpec("https://a/x", "http://b/y"))
    assert not res.succeeded


def test_timeout_reported(pair, ctx):
    src, dst = pair
    generate_test_file(src.storage, "/slow", 2_000_000, 1)
    with start_relay(ShaperConfig(f"127.0.0.1:{src.port}", bandwidth_cap_bps=1e6)) as relay:
        url = f"https://127.0.0.1:{relay.port}/slow"
        res = HttpsTpcAdapter(ctx).transfer(TransferSpec(url, dst.url("/o"), 1, timeout=1.0))
    assert not res.succeeded
    assert "timed out" in res.reason


def test_stripe_retry_after_single_kill(pair, ctx):
    """One reset connection is retried from its offset and the copy still succeeds."""
    src, dst = pair
    digest = generate_test_file(src.storage, "/r", 2_000_000, 4)
    with start_relay(ShaperConfig(f"127.0.0.1:{src.port}", bandwidth_cap_bps=8e6)) as relay:
        import threading
        import time

        url = f"https://127.0.0.1:{relay.port}/r"
        out = {}
        t = threading.Thread(target=lambda: out.setdefault("r", HttpsTpcAdapter(ctx).transfer(TransferSpec(url, dst.url("/r2"), 2, 2_000_000))))
        t.start()
        deadline = time.monotonic() + 5
        while relay.active_connections < 2 and time.monotonic() < deadline:
            time.sleep(0.02)
        time.sleep(0.3)
        relay.kill_connections(1)
        t.join()
    assert out["r"].succeeded, out["r"].reason
    assert dst.storage.digest("/r2") == digest


def test_raw_stream_adapter():
    with ProbeResponder() as p:
        adapter = RawStreamAdapter()
        url = adapter.dest_url("https://x", p.address, "/p")
        res = adapter.transfer(TransferSpec(adapter.source_url("", None, "/p"), url, 3, 1_000_001))
    assert res.succeeded
    assert res.bytes_transferred == 1_000_001
    with pytest.raises(ValueError):
        adapter.dest_url("https://x", None, "/p")


def test_probe_functions():
    with ProbeResponder() as p:
        assert measure_rtt(p.address, samples=3) < 50
        assert raw_throughput_probe(p.address, 2, 0.3) > 0
    with pytest.raises(ValueError):
        measure_rtt("127.0.0.1:1", samples=2)


@pytest.mark.parametrize("backend", ["memory", "disk"])
def test_local_copy_benchmark(backend, tmp_path):
    gbps = local_copy_benchmark(3, 1_000_000, backend, root=tmp_path if backend == "disk" else None)
    assert gbps > 0


def test_local_copy_memory_guard():
    with pytest.raises(MemoryError):
        local_copy_benchmark(4, 1 << 50, "memory")
