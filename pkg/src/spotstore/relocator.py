"""Drains a datanode that received a preemption notice.

The victim is fenced first (namenode stops placing blocks on it, the datanode
refuses writes), its block list is fetched once, and then blocks are moved
one by one: read from the victim, write to a freshly allocated location,
compare-and-set the new location at the namenode. Whatever has not been
committed when the deadline arrives is lost with the node.
"""

from __future__ import annotations

import enum
import json
import logging
import sys
import threading
from concurrent.futures import Future
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

from spotstore import wire
from spotstore.clock import RealClock
from spotstore.core import (
    BlockDescriptor,
    CapacityExhausted,
    Conflict,
    DatanodeState,
    NodeDraining,
    NotFound,
    ProtocolError,
    StaleLocation,
    StoreError,
)
from spotstore.remote import DataNodeProxy, NameNodeProxy
from spotstore.rpc import ConnectionLost, ConnectionPool, RpcServer

log = logging.getLogger(__name__)

DEFAULT_PARALLELISM = 4


class Outcome(enum.Enum):
    MOVED = "moved"
    LOST = "lost"
    SKIPPED = "skipped"


@dataclass
class RelocationTask:
    object: str
    block: BlockDescriptor
    source: int
    attempt: int = 0


@dataclass(frozen=True)
class TaskResult:
    task: RelocationTask
    outcome: Outcome
    reason: str = ""
    bytes_moved: int = 0
    finished_at: float = 0.0


@dataclass
class RelocationReport:
    node: int
    blocks_total: int = 0
    blocks_moved: int = 0
    blocks_lost: int = 0
    blocks_skipped: int = 0
    bytes_moved: int = 0
    elapsed: float = 0.0
    deadline_met: bool = True
    lost_reasons: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


class DeadlineExceeded(Exception):
    pass


class _Window:
    """Closes at the deadline; commits must happen while it is open."""

    def __init__(self):
        self.lock = threading.Lock()
        self.closed = False
        self.committed: dict[int, TaskResult] = {}

    @contextmanager
    def open(self):
        with self.lock:
            if self.closed:
                raise DeadlineExceeded("drain window closed")
            yield


def schedule(tasks: Sequence[RelocationTask], deadline: float, parallelism: int,
             execute: Callable[[RelocationTask, _Window], TaskResult], clock=None) -> list[TaskResult]:
    """Run ``tasks`` largest-first on ``parallelism`` workers until done or ``deadline``.

    No task starts at or after the deadline; tasks still running then are
    abandoned and reported LOST. Results come back in completion order, with
    abandoned and never-started tasks appended in schedule order.
    """
    if parallelism < 1:
        raise ValueError("parallelism must be >= 1")
    clock = clock or RealClock()
    order = sorted(tasks, key=lambda t: -t.block.length)
    window = _Window()
    results: list[TaskResult] = []
    pending = list(reversed(order))
    running = [0]

    def take() -> RelocationTask | None:
        now = clock.now()
        with window.lock:
            if window.closed or not pending or now >= deadline:
                return None
            running[0] += 1
            return pending.pop()

    def worker() -> None:
        try:
            while (task := take()) is not None:
                try:
                    res = execute(task, window)
                except DeadlineExceeded:
                    res = TaskResult(task, Outcome.LOST, "deadline", finished_at=clock.now())
                with window.lock:
                    if not window.closed:
                        results.append(res)
                    running[0] -= 1
                clock.notify()
        finally:
            clock.unregister()

    def finished() -> bool:
        # runs under the clock's lock: must not take window.lock
        return running[0] == 0 and (not pending or clock.now() >= deadline)

    with clock.participant():
        threads = []
        for i in range(min(parallelism, len(order))):
            clock.register()
            t = threading.Thread(target=worker, name=f"relocate-{i}", daemon=True)
            threads.append(t)
            t.start()
        if threads:
            clock.wait_until(finished, deadline)
        now = clock.now()
        with window.lock:
            window.closed = True
            done = {id(r.task) for r in results}
            for t in order:
                if id(t) in done:
                    continue
                committed = window.committed.get(id(t))
                if committed is not None:
                    results.append(committed)
                else:
                    results.append(TaskResult(t, Outcome.LOST, "deadline", finished_at=now))
    return results


class Relocator:
    def __init__(self, namenode: str, parallelism: int = DEFAULT_PARALLELISM, clock=None,
                 terminate_at_deadline: bool = True, report_sink: Callable[[RelocationReport], None] | None = None,
                 timeout: float = 30.0):
        self.pool = ConnectionPool(timeout=timeout)
        self.namenode = NameNodeProxy(namenode, self.pool)
        self.datanodes = DataNodeProxy(self.pool)
        self.parallelism = parallelism
        self.clock = clock or RealClock()
        self.terminate_at_deadline = terminate_at_deadline
        self.report_sink = report_sink
        self._drains: dict[int, Future] = {}
        self._lock = threading.Lock()

    # -- single block ----------------------------------------------------------

    def relocate_block(self, task: RelocationTask, deadline: float, window: _Window | None = None,
                       source_address: str | None = None) -> TaskResult:
        clock = self.clock
        window = window or _Window()
        block = task.block
        src = source_address or block.address

        def result(outcome, reason="", nbytes=0):
            return TaskResult(task, outcome, reason, nbytes, clock.now())

        if clock.now() >= deadline:
            return result(Outcome.LOST, "deadline")
        try:
            data = self.datanodes.read_block(src, block.block_id, 0, block.length)
        except NotFound:
            return result(Outcome.SKIPPED, "deleted")
        except (ConnectionLost, ProtocolError) as e:
            return result(Outcome.LOST, f"source: {type(e).__name__}")

        version = block.version
        for attempt in range(2):
            task.attempt = attempt
            if clock.now() >= deadline:
                return result(Outcome.LOST, "deadline")
            try:
                target = self.namenode.allocate_block(task.object, exclude={task.source})
            except CapacityExhausted:
                return result(Outcome.LOST, "capacity")
            except NotFound:
                return result(Outcome.SKIPPED, "deleted")
            if target.datanode == task.source:
                raise AssertionError("namenode placed a relocation on the draining node")
            if clock.now() >= deadline:
                self._release(target.block_id)
                return result(Outcome.LOST, "deadline")
            try:
                self.datanodes.write_block(target.address, block.block_id, data)
            except (ConnectionLost, NodeDraining, CapacityExhausted, ProtocolError) as e:
                self._release(target.block_id)
                log.info("write of block %d to node %d failed (%s), retrying", block.block_id, target.datanode, e)
                continue
            committed_at = clock.now()
            try:
                with window.open():
                    self.namenode.commit_relocation(block.block_id, target.datanode, version, target.block_id)
                    window.committed[id(task)] = res = TaskResult(task, Outcome.MOVED, "", len(data), committed_at)
                    return res
            except DeadlineExceeded:
                self._release(target.block_id)
                self._discard_copy(target.address, block.block_id)
                return result(Outcome.LOST, "deadline")
            except NotFound:
                self._discard_copy(target.address, block.block_id)
                return result(Outcome.SKIPPED, "deleted")
            except (StaleLocation, Conflict) as e:
                self._discard_copy(target.address, block.block_id)
                fresh = self._current(task)
                if fresh is None:
                    return result(Outcome.SKIPPED, "deleted")
                if fresh.lost:
                    return result(Outcome.LOST, "terminated")
                if fresh.datanode != task.source:
                    return result(Outcome.SKIPPED, "moved elsewhere")
                log.info("commit of block %d failed (%s), retrying once", block.block_id, e)
                version = fresh.version
        return result(Outcome.LOST, "retries exhausted")

    def _current(self, task: RelocationTask) -> BlockDescriptor | None:
        try:
            meta = self.namenode.get_metadata(task.object, include_pending=True)
        except NotFound:
            return None
        return meta.block(task.block.block_id)

    def _release(self, reservation: int) -> None:
        try:
            self.namenode.release_reservation(reservation)
        except (StoreError, ConnectionLost):
            pass

    def _discard_copy(self, address: str, block_id: int) -> None:
        try:
            self.datanodes.delete_block(address, block_id)
        except (StoreError, ConnectionLost):
            pass

    # -- whole node --------------------------------------------------------------

    def handle_notice(self, node_id: int, deadline: float) -> RelocationReport:
        """Drain ``node_id`` until ``deadline`` (on this relocator's clock) and return the report."""
        with self._lock:
            existing = self._drains.get(node_id)
            if existing is None:
                fut: Future = Future()
                self._drains[node_id] = fut
        if existing is not None:
            return existing.result()
        try:
            report = self._drain(node_id, deadline)
        except BaseException as e:
            fut.set_exception(e)
            raise
        fut.set_result(report)
        if self.report_sink:
            self.report_sink(report)
        return report

    def submit_notice(self, node_id: int, deadline: float) -> Future:
        fut: Future = Future()

        def run():
            try:
                fut.set_result(self.handle_notice(node_id, deadline))
            except BaseException as e:  # noqa: BLE001
                log.exception("drain of node %d failed", node_id)
                fut.set_exception(e)

        threading.Thread(target=run, name=f"drain-{node_id}", daemon=True).start()
        return fut

    def _drain(self, node_id: int, deadline: float) -> RelocationReport:
        clock = self.clock
        start = clock.now()
        try:
            info = self.namenode.begin_drain(node_id, deadline)
        except Conflict:
            info = self.namenode.datanode(node_id)
            if info.state == DatanodeState.TERMINATED:
                raise
        try:
            self.datanodes.enter_draining(info.address, deadline)
        except Conflict:
            pass  # the injector may have fenced the node already
        except ConnectionLost:
            log.warning("datanode %d unreachable at drain start", node_id)
        blocks = self.namenode.list_blocks_on_node(node_id)
        tasks = [RelocationTask(name, desc, node_id) for name, desc in blocks]
        log.info("draining node %d: %d blocks, %.1fs to deadline", node_id, len(tasks), deadline - start)

        results = schedule(tasks, deadline, self.parallelism,
                           lambda t, w: self.relocate_block(t, deadline, w, info.address), clock)
        report = RelocationReport(node_id, blocks_total=len(tasks))
        drained_at = max([r.finished_at for r in results], default=start)
        for r in results:
            if r.outcome is Outcome.MOVED:
                report.blocks_moved += 1
                report.bytes_moved += r.bytes_moved
            elif r.outcome is Outcome.SKIPPED:
                report.blocks_skipped += 1
            else:
                report.blocks_lost += 1
                report.lost_reasons[r.reason] = report.lost_reasons.get(r.reason, 0) + 1
        report.elapsed = drained_at - start
        report.deadline_met = report.lost_reasons.get("deadline", 0) == 0 and drained_at <= deadline
        if self.terminate_at_deadline:
            clock.sleep_until(deadline)
            try:
                self.namenode.mark_node_terminated(node_id)
            except Conflict:
                pass
        return report

    def close(self) -> None:
        self.pool.close()


class RelocatorServer:
    """Control endpoint: accepts PreemptionNotice and drains in the background."""

    def __init__(self, namenode: str, listen: str = "127.0.0.1:0", parallelism: int = DEFAULT_PARALLELISM,
                 report_file: str | None = None, stdout=sys.stdout):
        self.report_file = report_file
        self.stdout = stdout
        self._emit_lock = threading.Lock()
        self.reports: list[RelocationReport] = []
        self.relocator = Relocator(namenode, parallelism, report_sink=self._emit)
        self.rpc = RpcServer(self.handle, listen, name="relocator")
        self.address = self.rpc.address

    def start(self) -> "RelocatorServer":
        self.rpc.start()
        return self

    def close(self) -> None:
        self.rpc.close()
        self.relocator.close()

    def _emit(self, report: RelocationReport) -> None:
        line = report.to_json()
        with self._emit_lock:
            self.reports.append(report)
            if self.stdout is not None:
                print(line, file=self.stdout, flush=True)
            if self.report_file:
                with open(self.report_file, "a") as f:
                    f.write(line + "\n")

    def handle(self, msg: wire.Message, peer: str) -> wire.Message:
        if isinstance(msg, wire.PreemptionNotice):
            deadline = self.relocator.clock.now() + msg.notice_period
            self.relocator.submit_notice(msg.node_id, deadline)
            return wire.Ack()
        raise ProtocolError(f"relocator does not handle {type(msg).__name__}")
