import json
import zlib

import pytest

from spotstore.clock import VirtualClock
from spotstore.core import BlockDescriptor, DatanodeState
from spotstore.relocator import (
    DeadlineExceeded,
    Outcome,
    RelocationReport,
    RelocationTask,
    Relocator,
    TaskResult,
    schedule,
)

MIB = 1 << 20


def tasks(n, length=MIB):
    return [RelocationTask(f"o{i}", BlockDescriptor(i + 1, 1, length, 0, 1, "x:1"), 1) for i in range(n)]


def timed(clock, latency):
    def execute(task, window):
        clock.sleep(latency)
        with window.open():
            return TaskResult(task, Outcome.MOVED, bytes_moved=task.block.length, finished_at=clock.now())
    return execute


def test_empty_schedule_returns_immediately():
    clock = VirtualClock()
    assert schedule([], 10.0, 4, timed(clock, 1.0), clock) == []
    assert clock.now() == 0.0


@pytest.mark.parametrize("deadline", [2.0, 2.5])
def test_serial_schedule_loses_what_does_not_fit(deadline):
    clock = VirtualClock()
    ts = tasks(3)
    res = schedule(ts, deadline, 1, timed(clock, 1.0), clock)
    by_task = {r.task.object: r for r in res}
    assert [by_task[f"o{i}"].outcome for i in range(3)] == [Outcome.MOVED, Outcome.MOVED, Outcome.LOST]
    assert by_task["o2"].reason == "deadline"


def test_parallel_finishes_earlier():
    finish = {}
    for p in (1, 4):
        clock = VirtualClock()
        res = schedule(tasks(8), 100.0, p, timed(clock, 1.0), clock)
        assert all(r.outcome is Outcome.MOVED for r in res)
        finish[p] = max(r.finished_at for r in res)
    assert finish[4] < finish[1]
    assert finish == {1: 8.0, 4: 2.0}


def test_largest_blocks_go_first():
    clock = VirtualClock()
    ts = [RelocationTask(f"o{n}", BlockDescriptor(n, 1, n * 1000, 0, 1, "x:1"), 1) for n in (1, 5, 3)]
    res = schedule(ts, 1.5, 1, timed(clock, 1.0), clock)
    moved = [r.task.block.length for r in res if r.outcome is Outcome.MOVED]
    assert moved == [5000]


def test_commit_after_close_is_refused():
    clock = VirtualClock()
    seen = []

    def execute(task, window):
        clock.sleep(5.0)
        try:
            with window.open():
                seen.append("committed")
        except DeadlineExceeded:
            seen.append("refused")
            raise
        return TaskResult(task, Outcome.MOVED)

    res = schedule(tasks(1), 1.0, 1, execute, clock)
    assert res[0].outcome is Outcome.LOST
    assert seen in ([], ["refused"])


def test_report_json_round_trip():
    rep = RelocationReport(3, 10, 8, 2, 0, 8 * MIB, 1.5, False, {"deadline": 2})
    assert json.loads(rep.to_json())["lost_reasons"] == {"deadline": 2}


# -- against a live cluster ---------------------------------------------------

def _data(n, seed=0):
    return bytes((seed + i) % 251 for i in range(n))


def test_drain_moves_everything_with_ample_time(make_cluster):
    cluster = make_cluster(datanodes=3, egress_bytes_per_sec=None)
    client = cluster.client()
    for i in range(10):
        client.put_object(f"o{i}", _data(MIB, i))
    victim = max(cluster.live_ids(), key=lambda n: len(cluster.namenode.list_blocks_on_node(n)))
    nblocks = len(cluster.namenode.list_blocks_on_node(victim))
    reloc = Relocator(cluster.namenode_address, terminate_at_deadline=False)
    deadline = reloc.clock.now() + 30.0
    report = reloc.handle_notice(victim, deadline)
    assert (report.blocks_total, report.blocks_moved, report.blocks_lost) == (nblocks, nblocks, 0)
    assert report.deadline_met
    cluster.terminate(victim)
    fresh = cluster.client()
    for i in range(10):
        assert fresh.get_object(f"o{i}") == _data(MIB, i)
    reloc.close()


def test_relocate_block_preserves_bytes_and_bumps_version(make_cluster):
    cluster = make_cluster(datanodes=2, egress_bytes_per_sec=None)
    client = cluster.client()
    data = _data(MIB, 9)
    meta = client.put_object("one", data)
    blk = meta.blocks[0]
    cluster.namenode.begin_drain(blk.datanode, 1e12)
    reloc = Relocator(cluster.namenode_address)
    res = reloc.relocate_block(RelocationTask("one", blk, blk.datanode), reloc.clock.now() + 30)
    assert res.outcome is Outcome.MOVED and res.bytes_moved == MIB
    after = cluster.namenode.get_metadata("one").blocks[0]
    assert after.datanode != blk.datanode and after.version == blk.version + 1
    stored, crc = cluster.datanode(after.datanode).node.read_block(blk.block_id, 0, MIB)
    assert crc == zlib.crc32(data) and stored == data
    reloc.close()


def test_deleted_source_is_skipped(make_cluster):
    cluster = make_cluster(datanodes=2, egress_bytes_per_sec=None)
    client = cluster.client()
    blk = client.put_object("gone", _data(1000)).blocks[0]
    listed = cluster.namenode.list_blocks_on_node(blk.datanode)
    client.delete_object("gone")
    reloc = Relocator(cluster.namenode_address)
    name, desc = listed[0]
    res = reloc.relocate_block(RelocationTask(name, desc, desc.datanode), reloc.clock.now() + 10)
    assert res.outcome is Outcome.SKIPPED
    reloc.close()


def test_no_destination_means_lost_capacity(make_cluster):
    cluster = make_cluster(datanodes=1, egress_bytes_per_sec=None)
    client = cluster.client()
    client.put_object("solo", _data(2 * MIB))
    (node,) = cluster.live_ids()
    reloc = Relocator(cluster.namenode_address, terminate_at_deadline=False)
    report = reloc.handle_notice(node, reloc.clock.now() + 5)
    assert report.blocks_lost == 2 and report.lost_reasons == {"capacity": 2}
    assert cluster.namenode.reservation_count() == 0
    reloc.close()


def test_empty_node_report_and_termination(make_cluster):
    cluster = make_cluster(datanodes=2)
    node = cluster.live_ids()[0]
    report = cluster.notice(node, 0.3).result(timeout=10)
    assert (report.blocks_total, report.blocks_moved, report.blocks_lost, report.blocks_skipped) == (0, 0, 0, 0)
    assert cluster.namenode.datanode(node).state == DatanodeState.TERMINATED
    assert cluster.reports == [report]


def test_second_notice_returns_same_report(make_cluster):
    cluster = make_cluster(datanodes=2)
    node = cluster.live_ids()[0]
    first = cluster.notice(node, 0.3)
    second = cluster.relocator.submit_notice(node, 0.0)
    assert first.result(timeout=10) == second.result(timeout=10)
