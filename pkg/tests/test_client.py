import threading
import time

import pytest

from spotstore.client import MetadataCache, RetryPolicy
from spotstore.core import AlreadyExists, DataUnavailable, NotFound, ObjectMetadata, StaleLocation

MIB = 1 << 20


def blob(n, seed=0):
    return bytes((seed * 7 + i) % 253 for i in range(n))


def test_put_get_layout(make_cluster):
    cluster = make_cluster(datanodes=3, egress_bytes_per_sec=None)
    c = cluster.client()
    data = blob(int(2.5 * MIB))
    meta = c.put_object("a/b", data)
    assert [b.length for b in meta.blocks] == [MIB, MIB, MIB // 2]
    assert len({b.datanode for b in meta.blocks}) == 3
    assert c.get_object("a/b") == data
    empty = c.put_object("empty", b"")
    assert empty.size == 0 and empty.blocks == ()
    assert c.get_object("empty") == b""
    with pytest.raises(AlreadyExists):
        c.put_object("a/b", b"x")


def test_missing_and_delete(make_cluster):
    cluster = make_cluster(datanodes=2, egress_bytes_per_sec=None)
    c = cluster.client()
    with pytest.raises(NotFound):
        c.get_object("never")
    c.put_object("x", b"123")
    c.delete_object("x")
    with pytest.raises(NotFound):
        c.get_object("x")
    with pytest.raises(NotFound):
        c.delete_object("x")
    lenient = cluster.client(idempotent_delete=True)
    lenient.delete_object("x")


def test_stale_cache_refetches_once_after_relocation(make_cluster):
    cluster = make_cluster(datanodes=3, egress_bytes_per_sec=None)
    c = cluster.client()
    data = blob(3 * MIB, 1)
    meta = c.put_object("obj", data)
    victim = meta.blocks[0].datanode
    cluster.drain(victim, 0.5)
    before = c.stats.metadata_fetches
    assert c.get_object("obj") == data
    assert c.stats.metadata_fetches - before == 1


def test_read_of_lost_block_is_data_unavailable(make_cluster):
    cluster = make_cluster(datanodes=2, egress_bytes_per_sec=None)
    c = cluster.client()
    meta = c.put_object("obj", blob(2 * MIB))
    cluster.terminate(meta.blocks[0].datanode)
    with pytest.raises(DataUnavailable):
        c.get_object("obj")
    c.delete_object("obj")  # deleting a partially lost object works


def test_delete_during_drain(make_cluster):
    cluster = make_cluster(datanodes=2, egress_bytes_per_sec=2 * MIB)
    c = cluster.client()
    for i in range(6):
        c.put_object(f"o{i}", blob(MIB, i))
    victim = cluster.live_ids()[0]
    fut = cluster.notice(victim, 5.0)
    time.sleep(0.3)
    for i in range(6):
        c.delete_object(f"o{i}")
    report = fut.result(timeout=20)
    assert report.blocks_lost == 0
    assert report.blocks_moved + report.blocks_skipped == report.blocks_total
    assert cluster.namenode.block_count() == 0


def test_put_racing_drain_reallocates(make_cluster):
    cluster = make_cluster(datanodes=3, egress_bytes_per_sec=None)
    c = cluster.client()
    victim = cluster.live_ids()[0]
    # fence the datanode only, so the namenode still places blocks there
    cluster.datanode(victim).node.enter_draining(0.0)
    data = blob(6 * MIB, 3)
    meta = c.put_object("racer", data)
    assert victim not in {b.datanode for b in meta.blocks}
    assert 1 <= c.stats.reallocations <= c.retry.max_retries * len(meta.blocks)
    assert c.get_object("racer") == data


def test_lookup_fresh_replaces_older_cache():
    cache = MetadataCache()
    cache.put(ObjectMetadata("n", 0, 3, ()))
    cache.put(ObjectMetadata("n", 0, 2, ()))
    assert cache.get("n").version == 3
    cache.put(ObjectMetadata("n", 0, 5, ()))
    assert cache.get("n").version == 5
    cache.invalidate("absent")


def test_lookup_fresh_against_server(make_cluster):
    cluster = make_cluster(datanodes=2, egress_bytes_per_sec=None)
    c = cluster.client()
    v1 = c.put_object("k", blob(MIB)).version
    blk = cluster.namenode.get_metadata("k").blocks[0]
    other = next(n for n in cluster.live_ids() if n != blk.datanode)
    res = cluster.namenode.allocate_block("k", exclude={blk.datanode})
    cluster.namenode.commit_relocation(blk.block_id, other, blk.version, res.block_id)
    assert c.lookup("k").version == v1
    fresh = c.lookup_fresh("k")
    assert fresh.version > v1 and c.lookup("k") == fresh


def test_cache_is_bounded():
    cache = MetadataCache(capacity=3)
    for i in range(5):
        cache.put(ObjectMetadata(f"n{i}", 0, 1, ()))
    assert len(cache) == 3 and cache.get("n0") is None


def test_versions_monotonic_across_relocation_storm(make_cluster):
    cluster = make_cluster(datanodes=3, egress_bytes_per_sec=None)
    c = cluster.client()
    data = blob(MIB, 5)
    c.put_object("storm", data)
    nn = cluster.namenode
    stop = threading.Event()
    seen = []

    def mover():
        for _ in range(100):
            blk = nn.get_metadata("storm").blocks[0]
            res = nn.allocate_block("storm", exclude={blk.datanode})
            src = cluster.datanode(blk.datanode).node
            payload, crc = src.read_block(blk.block_id, 0, blk.length)
            cluster.datanode(res.datanode).node.write_block(blk.block_id, 0, payload, crc)
            nn.commit_relocation(blk.block_id, res.datanode, blk.version, res.block_id)
        stop.set()

    th = threading.Thread(target=mover)
    th.start()
    while not stop.is_set():
        assert c.get_object("storm") == data
        seen.append(c.lookup("storm").version)
        if len(seen) % 3 == 0:
            seen.append(c.lookup_fresh("storm").version)
    th.join()
    seen.append(c.lookup_fresh("storm").version)
    assert seen == sorted(seen)
    assert nn.get_metadata("storm").blocks[0].version == 101


def test_unreachable_location_maps_to_stale_location(make_cluster):
    cluster = make_cluster(datanodes=2, egress_bytes_per_sec=None)
    c = cluster.client(retry=RetryPolicy(max_retries=3, backoff=(0.0,)))
    meta = c.put_object("obj", blob(1000))
    # datanode dies but the namenode never hears about it
    cluster.datanode(meta.blocks[0].datanode).terminate()
    with pytest.raises(StaleLocation):
        c.get_object("obj")
    assert c.stats.retries == 3


def test_recompute_hook(make_cluster):
    cluster = make_cluster(datanodes=2, egress_bytes_per_sec=None)
    c = cluster.client()
    data = blob(2 * MIB, 8)
    c.put_object("lin", data)
    calls = []

    def gen():
        calls.append(1)
        return data

    assert c.recompute_hook("lin", gen) == data and calls == []
    cluster.terminate(c.lookup("lin").blocks[0].datanode)
    assert c.recompute_hook("lin", gen) == data
    assert calls == [1]
    assert c.get_object("lin") == data


def test_concurrent_recompute(make_cluster):
    cluster = make_cluster(datanodes=3, egress_bytes_per_sec=None)
    data = blob(3 * MIB, 2)
    cluster.client().put_object("shared", data)
    victim = cluster.namenode.get_metadata("shared").blocks[0].datanode
    cluster.terminate(victim)
    results, errors = [], []

    def caller():
        try:
            results.append(cluster.client().recompute_hook("shared", lambda: data))
        except Exception as e:  # pragma: no cover
            errors.append(e)

    threads = [threading.Thread(target=caller) for _ in range(2)]
    for t in threads:
        t.start()
    for t in threads:
        t.join(30)
    assert not errors and results == [data, data]
    assert cluster.client().get_object("shared") == data


def test_retry_policy():
    p = RetryPolicy(max_retries=3, backoff=(0.0, 0.5))
    assert [p.delay(i) for i in range(4)] == [0.0, 0.5, 0.5, 0.5]
    with pytest.raises(ValueError):
        RetryPolicy(max_retries=0)
