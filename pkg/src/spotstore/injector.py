"""Spot preemption modeling and injection.

Lifetimes (time from launch to preemption notice) are drawn from an
exponential or Weibull model, or replayed from a trace. The injector walks
a single timeline: notice, then termination ``notice_period`` later, then an
optional respawn of a fresh datanode in the same slot.
"""

from __future__ import annotations

import csv
import heapq
import json
import logging
import math
import threading
from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
from scipy import stats

from spotstore import wire
from spotstore.clock import RealClock
from spotstore.core import Conflict, StoreError
from spotstore.remote import DataNodeProxy, NameNodeProxy
from spotstore.rpc import ConnectionLost, ConnectionPool

log = logging.getLogger(__name__)

DISTRIBUTIONS = ("exponential", "weibull", "trace")


@dataclass
class PreemptionModelParams:
    distribution: str = "exponential"
    mean_ttf: float = 3600.0
    shape: float = 1.0
    scale: float = 3600.0
    trace_path: str | None = None
    notice_period: float = 30.0
    respawn_delay: float | None = 60.0
    seed: int = 0

    def __post_init__(self):
        if self.distribution not in DISTRIBUTIONS:
            raise ValueError(f"distribution must be one of {DISTRIBUTIONS}")
        if min(self.mean_ttf, self.scale, self.notice_period) < 0:
            raise ValueError("mean_ttf, scale and notice_period must be >= 0")
        if self.respawn_delay is not None and self.respawn_delay < 0:
            raise ValueError("respawn_delay must be >= 0")
        if self.shape <= 0:
            raise ValueError("shape must be > 0")
        if self.distribution == "trace" and not self.trace_path:
            raise ValueError("trace distribution needs trace_path")

    @classmethod
    def from_dict(cls, d: dict) -> "PreemptionModelParams":
        d = dict(d)
        preset = d.pop("preset", None)
        base = asdict(PRESETS[preset]) if preset else {}
        base.update(d)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)

    def frozen(self):
        """The scipy distribution of lifetimes (not available for traces)."""
        if self.distribution == "exponential":
            return stats.expon(scale=self.mean_ttf)
        if self.distribution == "weibull":
            return stats.weibull_min(self.shape, scale=self.scale)
        raise ValueError("trace lifetimes have no analytic distribution")

    def cdf(self, t):
        """Analytic CDF, written out directly rather than through scipy."""
        t = np.maximum(np.asarray(t, dtype=float), 0.0)
        if self.distribution == "exponential":
            return 1.0 - np.exp(-t / self.mean_ttf)
        if self.distribution == "weibull":
            return 1.0 - np.exp(-((t / self.scale) ** self.shape))
        raise ValueError("trace lifetimes have no analytic distribution")


# Two desk-scale parameter sets. The larger instance type is preempted
# earlier: same Weibull shape, half the scale, so its CDF lies above.
PRESETS = {
    "16vcpu-like": PreemptionModelParams("weibull", shape=0.8, scale=3600.0, notice_period=30.0, respawn_delay=60.0),
    "32vcpu-like": PreemptionModelParams("weibull", shape=0.8, scale=1800.0, notice_period=30.0, respawn_delay=60.0),
}


def load_trace(path: str) -> dict[int, list[float]]:
    """Read ``slot,preemption_time_s`` rows into per-slot sorted preemption times."""
    times: dict[int, list[float]] = defaultdict(list)
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            times[int(row["slot"])].append(float(row["preemption_time_s"]))
    for slot, ts in times.items():
        if any(b < a for a, b in zip(ts, ts[1:])):
            raise ValueError(f"trace times for slot {slot} are not non-decreasing")
    return dict(times)


def trace_lifetimes(trace: dict[int, list[float]]) -> dict[int, list[float]]:
    """Per-slot gaps between consecutive preemptions, the first measured from 0."""
    return {slot: list(np.diff([0.0, *ts])) for slot, ts in trace.items()}


def sample_lifetimes(params: PreemptionModelParams, n: int) -> np.ndarray:
    """Draw ``n`` i.i.d. lifetimes in seconds; identical for identical seeds."""
    if n < 1:
        raise ValueError("n must be >= 1")
    rng = np.random.default_rng(params.seed)
    if params.distribution == "exponential":
        return rng.exponential(params.mean_ttf, n)
    if params.distribution == "weibull":
        return params.scale * rng.weibull(params.shape, n)
    pooled = [x for gaps in trace_lifetimes(load_trace(params.trace_path)).values() for x in gaps]
    if not pooled:
        raise ValueError("trace is empty")
    return np.resize(np.asarray(pooled, dtype=float), n)


def empirical_cdf(samples: Iterable[float]) -> list[tuple[float, float]]:
    """Right-continuous step points (t, F(t)) of the empirical CDF, one per distinct value."""
    xs = np.sort(np.asarray(list(samples), dtype=float))
    if xs.size == 0:
        raise ValueError("samples must be non-empty")
    values, counts = np.unique(xs, return_counts=True)
    return list(zip(values.tolist(), (np.cumsum(counts) / xs.size).tolist()))


def cdf_csv(points: Sequence[tuple[float, float]]) -> str:
    lines = ["t,F"] + [f"{t!r},{p!r}" for t, p in points]
    return "\n".join(lines) + "\n"


def ks_test(samples, params: PreemptionModelParams):
    """One-sample Kolmogorov-Smirnov test of ``samples`` against the configured model."""
    return stats.kstest(np.asarray(samples, dtype=float), params.cdf)


@dataclass(frozen=True)
class PreemptionEvent:
    node: int
    notice_at: float
    terminate_at: float


@dataclass(frozen=True)
class EventRecord:
    time: float
    slot: int
    node_id: int
    kind: str  # notice | terminate | respawn

    def to_json(self) -> str:
        return json.dumps({"time": round(self.time, 6), "slot": self.slot, "node_id": self.node_id,
                           "kind": self.kind}, sort_keys=True)


class Fleet(Protocol):
    def slots(self) -> list[int]: ...
    def node_id(self, slot: int) -> int: ...
    def notice(self, slot: int, node_id: int, notice_period: float) -> None: ...
    def terminate(self, slot: int, node_id: int) -> None: ...
    def respawn(self, slot: int) -> int: ...


class LocalFleet:
    """Slots backed by datanodes of a :class:`~spotstore.cluster.LocalCluster`."""

    def __init__(self, cluster, node_ids: Sequence[int] | None = None):
        self.cluster = cluster
        self._slots = list(node_ids if node_ids is not None else cluster.live_ids())
        self.drains = []

    def slots(self) -> list[int]:
        return list(range(len(self._slots)))

    def node_id(self, slot: int) -> int:
        return self._slots[slot]

    def notice(self, slot: int, node_id: int, notice_period: float) -> None:
        self.drains.append(self.cluster.notice(node_id, notice_period))

    def terminate(self, slot: int, node_id: int) -> None:
        self.cluster.terminate(node_id)

    def respawn(self, slot: int) -> int:
        self._slots[slot] = self.cluster.spawn_datanode()
        return self._slots[slot]

    def reports(self, timeout: float | None = None):
        return [f.result(timeout) for f in self.drains]


class RemoteFleet:
    """Slots backed by independently launched datanode processes (no respawn)."""

    def __init__(self, namenode: str, relocator: str, datanode_addresses: Sequence[str]):
        self.pool = ConnectionPool(timeout=10.0)
        self.namenode = NameNodeProxy(namenode, self.pool)
        self.datanodes = DataNodeProxy(self.pool)
        self.relocator = relocator
        by_address = {n.address: n.node_id for n in self.namenode.datanodes()}
        missing = [a for a in datanode_addresses if a not in by_address]
        if missing:
            raise ValueError(f"datanodes not registered with the namenode: {missing}")
        self._addresses = list(datanode_addresses)
        self._ids = [by_address[a] for a in datanode_addresses]

    def slots(self) -> list[int]:
        return list(range(len(self._ids)))

    def node_id(self, slot: int) -> int:
        return self._ids[slot]

    def notice(self, slot: int, node_id: int, notice_period: float) -> None:
        try:
            self.datanodes.enter_draining(self._addresses[slot], 0.0)
        except Conflict:
            pass
        self.pool.call(self.relocator, wire.PreemptionNotice(node_id, notice_period), expect=wire.Ack)

    def terminate(self, slot: int, node_id: int) -> None:
        self.datanodes.terminate(self._addresses[slot])
        try:
            self.namenode.mark_node_terminated(node_id)
        except Conflict:
            pass

    def respawn(self, slot: int) -> int:
        raise NotImplementedError("remote fleets cannot launch datanodes; set respawn_delay to null")


class SimFleet:
    """Bookkeeping-only fleet for dry runs: node ids are handed out sequentially."""

    def __init__(self, n_slots: int):
        self._ids = list(range(1, n_slots + 1))
        self._next = n_slots + 1

    def slots(self) -> list[int]:
        return list(range(len(self._ids)))

    def node_id(self, slot: int) -> int:
        return self._ids[slot]

    def notice(self, slot: int, node_id: int, notice_period: float) -> None:
        pass

    def terminate(self, slot: int, node_id: int) -> None:
        pass

    def respawn(self, slot: int) -> int:
        self._ids[slot] = self._next
        self._next += 1
        return self._ids[slot]


class PreemptionInjector:
    def __init__(self, params: PreemptionModelParams, fleet: Fleet, clock=None,
                 log_path: str | None = None, on_event: Callable[[EventRecord], None] | None = None):
        self.params = params
        self.fleet = fleet
        self.clock = clock or RealClock()
        self.log_path = log_path
        self.on_event = on_event
        self.events: list[EventRecord] = []
        self._rng = np.random.default_rng(params.seed)
        self._stopped = threading.Event()
        self._trace = trace_lifetimes(load_trace(params.trace_path)) if params.distribution == "trace" else None

    def _draw(self, slot: int) -> float:
        p = self.params
        if self._trace is not None:
            gaps = self._trace.get(slot, [])
            return gaps.pop(0) if gaps else math.inf
        if p.distribution == "exponential":
            return float(self._rng.exponential(p.mean_ttf))
        return float(p.scale * self._rng.weibull(p.shape))

    def _record(self, t: float, slot: int, node_id: int, kind: str) -> None:
        rec = EventRecord(t, slot, node_id, kind)
        self.events.append(rec)
        if self.log_path:
            with open(self.log_path, "a") as f:
                f.write(rec.to_json() + "\n")
        if self.on_event:
            self.on_event(rec)

    def _deliver(self, what: str, fn, *args):
        try:
            return fn(*args)
        except (StoreError, ConnectionLost, OSError) as e:
            log.warning("%s failed: %s", what, e)
            return None

    def run_schedule(self, duration: float, max_preemptions: int | None = None) -> list[EventRecord]:
        """Drive notices, terminations and respawns for ``duration`` seconds of clock time."""
        p = self.params
        clock = self.clock
        start = clock.now()
        queue: list[tuple[float, int, str, int, int]] = []
        seq = 0

        def push(t, kind, slot, node):
            nonlocal seq
            if math.isfinite(t):
                heapq.heappush(queue, (t, seq, kind, slot, node))
                seq += 1

        for slot in self.fleet.slots():
            push(self._draw(slot), "notice", slot, self.fleet.node_id(slot))

        preemptions = 0
        while queue:
            t, _, kind, slot, node = heapq.heappop(queue)
            if t > duration:
                break
            if clock.wait_until(self._stopped.is_set, start + t):
                break
            if kind == "notice":
                if p.notice_period > 0:
                    self._deliver("notice", self.fleet.notice, slot, node, p.notice_period)
                self._record(t, slot, node, "notice")
                push(t + p.notice_period, "terminate", slot, node)
            elif kind == "terminate":
                self._deliver("terminate", self.fleet.terminate, slot, node)
                self._record(t, slot, node, "terminate")
                preemptions += 1
                if p.respawn_delay is not None:
                    push(t + p.respawn_delay, "respawn", slot, node)
            elif kind == "respawn":
                new = self._deliver("respawn", self.fleet.respawn, slot)
                if new is None:
                    continue
                self._record(t, slot, new, "respawn")
                push(t + self._draw(slot), "notice", slot, new)
            if max_preemptions is not None and preemptions >= max_preemptions:
                # no new notices; in-flight preemptions and respawns still play out
                queue = [e for e in queue if e[2] != "notice"]
                heapq.heapify(queue)
        return self.events

    def stop(self) -> None:
        """Make a running ``run_schedule`` return before its next event."""
        self._stopped.set()
        self.clock.notify()

    def preemption_events(self) -> list[PreemptionEvent]:
        """Pair each logged notice with its termination time."""
        return [PreemptionEvent(e.node_id, e.time, e.time + self.params.notice_period)
                for e in self.events if e.kind == "notice"]
