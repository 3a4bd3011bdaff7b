"""Closed-loop workload driver.

Worker threads share one client. Each worker keeps its own counters behind a
private lock; a sampler thread swaps them out once per tick, so workers never
wait on the aggregator for longer than a counter update.
"""

from __future__ import annotations

import logging
import threading
import time
import zlib
from collections import deque
from dataclasses import asdict, dataclass, field

import numpy as np

from spotstore.client import Client, RetryPolicy
from spotstore.core import DataUnavailable, StoreError
from spotstore.rpc import ConnectionLost

log = logging.getLogger(__name__)

KINDS = ("ReadOnly", "WriteOnly", "Mixed")
LIFETIMES = ("LongLived", "ShortLived")


@dataclass
class WorkloadSpec:
    kind: str = "ReadOnly"
    write_fraction: float = 0.0  # only used by Mixed
    object_size: int = 1 << 20
    object_count: int = 64  # preloaded dataset size
    threads: int = 4
    duration: float = 10.0  # seconds; ignored when ops is set
    ops: int | None = None  # total operations across all workers
    data_lifetime: str = "LongLived"
    delete_after: int = 8  # ShortLived: a worker deletes its object this many ops after writing it
    regenerate_lost: bool = False  # ReadOnly: rewrite objects whose blocks were lost
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"kind must be one of {KINDS}")
        if self.data_lifetime not in LIFETIMES:
            raise ValueError(f"data_lifetime must be one of {LIFETIMES}")
        if self.threads < 1:
            raise ValueError("threads must be >= 1")
        if not 0.0 <= self.write_fraction <= 1.0:
            raise ValueError("write_fraction must be in [0, 1]")
        if self.object_size < 0 or self.object_count < 0:
            raise ValueError("object_size and object_count must be >= 0")
        if self.ops is None and self.duration <= 0:
            raise ValueError("set a positive duration or an op count")
        if self.delete_after < 0:
            raise ValueError("delete_after must be >= 0")

    @property
    def p_write(self) -> float:
        return {"ReadOnly": 0.0, "WriteOnly": 1.0}.get(self.kind, self.write_fraction)

    @classmethod
    def from_dict(cls, d: dict) -> "WorkloadSpec":
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class MetricsSample:
    t: float
    bytes_read: int = 0
    bytes_written: int = 0
    ops_ok: int = 0
    ops_retried: int = 0
    ops_data_unavailable: int = 0


COUNTERS = ("bytes_read", "bytes_written", "ops_ok", "ops_retried", "ops_data_unavailable",
            "reads", "writes", "deletes", "errors", "corrupt")


class _Counters:
    def __init__(self):
        self.lock = threading.Lock()
        self.values = dict.fromkeys(COUNTERS, 0)

    def add(self, **kw) -> None:
        with self.lock:
            for k, v in kw.items():
                self.values[k] += v

    def drain(self) -> dict:
        with self.lock:
            out, self.values = self.values, dict.fromkeys(COUNTERS, 0)
        return out


def object_content(name: str, size: int, seed: int = 0) -> bytes:
    """Deterministic pseudo-random bytes for ``name``."""
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    return rng.bytes(size)


def preload(client: Client, count: int, size: int, seed: int = 0, prefix: str = "data") -> dict[str, int]:
    """Write ``count`` objects; returns name -> CRC32 of the content."""
    expected = {}
    for i in range(count):
        name = f"{prefix}/{i:06d}"
        data = object_content(name, size, seed)
        client.put_object(name, data)
        expected[name] = zlib.crc32(data)
    return expected


class _Worker:
    def __init__(self, wid: int, spec: WorkloadSpec, client: Client, dataset: list[str],
                 expected: dict[str, int], counters: _Counters):
        self.wid = wid
        self.spec = spec
        self.client = client
        self.dataset = dataset
        self.expected = expected
        self.counters = counters
        self.rng = np.random.default_rng([spec.seed, wid])
        self.live: deque[tuple[int, str]] = deque()  # (op index when written, name)
        self.seq = 0

    def step(self, op: int) -> None:
        spec = self.spec
        if self.rng.random() < spec.p_write or not (self.dataset or self.live):
            self._write(op)
        else:
            self._read()
        if spec.data_lifetime == "ShortLived":
            while self.live and op - self.live[0][0] >= spec.delete_after:
                self._delete(self.live.popleft()[1])

    def _pick(self) -> str:
        pool = self.dataset if self.dataset else [n for _, n in self.live]
        return pool[int(self.rng.integers(len(pool)))]

    def _read(self) -> None:
        name = self._pick()
        before = self.client.stats.retries
        try:
            if self.spec.regenerate_lost:
                data = self.client.recompute_hook(
                    name, lambda: object_content(name, self.spec.object_size, self.spec.seed))
            else:
                data = self.client.get_object(name)
        except DataUnavailable:
            self.counters.add(ops_data_unavailable=1, reads=1)
            return
        except (StoreError, ConnectionLost) as e:
            log.warning("read of %s failed: %s", name, e)
            self.counters.add(errors=1, reads=1)
            return
        bad = name in self.expected and zlib.crc32(data) != self.expected[name]
        self.counters.add(bytes_read=len(data), ops_ok=1, reads=1, corrupt=int(bad),
                          ops_retried=int(self.client.stats.retries > before))

    def _write(self, op: int) -> None:
        name = f"w{self.spec.seed}/{self.wid}/{self.seq:08d}"
        self.seq += 1
        data = object_content(name, self.spec.object_size, self.spec.seed)
        before = self.client.stats.retries
        try:
            self.client.put_object(name, data)
        except (StoreError, ConnectionLost) as e:
            log.warning("write of %s failed: %s", name, e)
            self.counters.add(errors=1, writes=1)
            return
        self.expected[name] = zlib.crc32(data)
        self.live.append((op, name))
        self.counters.add(bytes_written=len(data), ops_ok=1, writes=1,
                          ops_retried=int(self.client.stats.retries > before))

    def _delete(self, name: str) -> None:
        self.expected.pop(name, None)
        try:
            self.client.delete_object(name)
            self.counters.add(deletes=1)
        except (StoreError, ConnectionLost) as e:
            log.warning("delete of %s failed: %s", name, e)
            self.counters.add(errors=1)


def _address(cluster) -> str:
    return cluster if isinstance(cluster, str) else cluster.namenode_address


def run_workload(spec: WorkloadSpec, cluster, dataset: dict[str, int] | None = None,
                 sample_interval: float = 1.0, stop: threading.Event | None = None,
                 client: Client | None = None) -> tuple[list[MetricsSample], dict]:
    """Drive ``spec`` against a running cluster (or a namenode address).

    ``dataset`` maps preloaded object names to their CRC32; ReadOnly needs it
    to be non-empty. Returns the per-tick samples and a summary dict.
    """
    dataset = dict(dataset or {})
    if spec.p_write == 0.0 and not dataset:
        raise ValueError("ReadOnly workload on an empty store: nothing to read")
    own_client = client is None
    client = client or Client(_address(cluster), retry=RetryPolicy(max_retries=8),
                              fanout=max(1, 8 // spec.threads))
    now = time.monotonic
    client.namenode.datanodes()  # fail fast if the namenode is unreachable

    names = sorted(dataset)
    counters = [_Counters() for _ in range(spec.threads)]
    workers = [_Worker(i, spec, client, names, dict(dataset), counters[i]) for i in range(spec.threads)]
    stop = stop or threading.Event()
    op_lock = threading.Lock()
    issued = 0
    start = now()
    samples: list[MetricsSample] = []
    totals = dict.fromkeys(COUNTERS, 0)
    stats0 = client.stats.snapshot()

    def next_op() -> int | None:
        nonlocal issued
        if stop.is_set():
            return None
        with op_lock:
            if spec.ops is not None:
                if issued >= spec.ops:
                    return None
            elif now() - start >= spec.duration:
                return None
            issued += 1
            return issued

    def work(w: _Worker) -> None:
        local = 0
        while next_op() is not None:
            w.step(local)
            local += 1

    def collect(t: float) -> None:
        merged = dict.fromkeys(COUNTERS, 0)
        for c in counters:
            for k, v in c.drain().items():
                merged[k] += v
        for k, v in merged.items():
            totals[k] += v
        samples.append(MetricsSample(t, merged["bytes_read"], merged["bytes_written"], merged["ops_ok"],
                                     merged["ops_retried"], merged["ops_data_unavailable"]))

    remaining = [len(workers)]
    done = threading.Event()

    def run(w: _Worker) -> None:
        try:
            work(w)
        finally:
            with op_lock:
                remaining[0] -= 1
                if remaining[0] == 0:
                    done.set()

    for w in workers:
        threading.Thread(target=run, args=(w,), name=f"bench-{w.wid}", daemon=True).start()
    tick = 1
    while not done.wait(timeout=max(0.0, start + tick * sample_interval - now())):
        collect((tick - 1) * sample_interval)
        tick += 1
    runtime = now() - start
    collect((tick - 1) * sample_interval)
    stats1 = client.stats.snapshot()

    # leftover short-lived objects are cleaned up so reruns start from the same state
    if spec.data_lifetime == "ShortLived":
        for w in workers:
            for _, name in w.live:
                try:
                    client.delete_object(name)
                except (StoreError, ConnectionLost):
                    pass
    if own_client:
        client.close()

    moved = totals["bytes_read"] + totals["bytes_written"]
    summary = {
        "runtime_s": runtime,
        "ops_ok": totals["ops_ok"],
        "reads": totals["reads"],
        "writes": totals["writes"],
        "deletes": totals["deletes"],
        "errors": totals["errors"],
        "corrupt_reads": totals["corrupt"],
        "bytes_read": totals["bytes_read"],
        "bytes_written": totals["bytes_written"],
        "aggregate_mb_s": moved / 1e6 / runtime if runtime > 0 else 0.0,
        "ops_retried": totals["ops_retried"],
        "ops_data_unavailable": totals["ops_data_unavailable"],
        "client_retries": stats1["retries"] - stats0["retries"],
        "client_reallocations": stats1["reallocations"] - stats0["reallocations"],
        "metadata_fetches": stats1["metadata_fetches"] - stats0["metadata_fetches"],
        "op_mix": {"read": totals["reads"], "write": totals["writes"]},
    }
    return samples, summary
