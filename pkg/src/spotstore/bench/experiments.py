"""Scripted desk-scale experiments built on LocalCluster."""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from spotstore.bench.analysis import bandwidth_series, coefficient_of_variation, plateau
from spotstore.bench.workload import MetricsSample, WorkloadSpec, preload, run_workload
from spotstore.cluster import ClusterConfig, LocalCluster
from spotstore.injector import LocalFleet, PreemptionInjector, PreemptionModelParams

log = logging.getLogger(__name__)


def _background(spec: WorkloadSpec, cluster, dataset, stop: threading.Event) -> tuple[threading.Thread, dict]:
    out: dict = {}

    def body():
        try:
            out["samples"], out["summary"] = run_workload(spec, cluster, dataset, stop=stop)
        except Exception as e:  # surfaced by the caller
            out["error"] = e

    th = threading.Thread(target=body, name="bench-workload", daemon=True)
    th.start()
    return th, out


@dataclass
class BandwidthDip:
    samples: list[MetricsSample]
    notice_at: float
    terminate_at: float
    before: float  # MB/s plateau before the notice
    during: float  # MB/s median inside the drain window
    after: float  # MB/s plateau after termination
    report: dict = field(default_factory=dict)

    @property
    def ratio(self) -> float:
        return self.after / self.before if self.before else 0.0

    def to_dict(self) -> dict:
        return {"notice_at": self.notice_at, "terminate_at": self.terminate_at, "before_mb_s": self.before,
                "during_mb_s": self.during, "after_mb_s": self.after, "ratio": self.ratio, "report": self.report}


def bandwidth_dip(egress: float = 20e6, blocks_per_node: int = 48, notice_at: float = 8.0,
                  notice_period: float = 10.0, tail: float = 10.0, threads: int = 8, seed: int = 0) -> BandwidthDip:
    """Two equal datanodes under a read-only load; one is preempted mid-run."""
    cfg = ClusterConfig(datanodes=2, capacity_blocks=4 * blocks_per_node, egress_bytes_per_sec=egress)
    with LocalCluster(cfg) as cluster:
        loader = cluster.client()
        dataset = preload(loader, 2 * blocks_per_node, cfg.block_size, seed)
        victim = cluster.live_ids()[0]
        spec = WorkloadSpec("ReadOnly", threads=threads, duration=notice_at + notice_period + tail,
                            object_size=cfg.block_size, seed=seed)
        stop = threading.Event()
        t0 = time.monotonic()
        th, out = _background(spec, cluster, dataset, stop)
        time.sleep(max(0.0, t0 + notice_at - time.monotonic()))
        drain = cluster.notice(victim, notice_period)
        time.sleep(max(0.0, t0 + notice_at + notice_period - time.monotonic()))
        cluster.terminate(victim)
        th.join()
        if "error" in out:
            raise out["error"]
        report = drain.result(timeout=30).to_dict()
    samples = out["samples"]
    totals = [row[3] for row in bandwidth_series(samples)]
    end = len(totals) - 1  # last bucket is partial
    t_term = notice_at + notice_period
    before = plateau(totals, 2, int(notice_at))
    during = plateau(totals, int(notice_at) + 1, int(t_term))
    after = plateau(totals, int(t_term) + 2, end)
    return BandwidthDip(samples, notice_at, t_term, before, during, after, report)


@dataclass
class CycleResult:
    kind: str
    counts: list[dict[int, int]]  # per-node block counts at the end of each cycle (index 0 = before any)
    cvs: list[float]
    victims: list[int]
    lost: int = 0
    summary: dict = field(default_factory=dict)

    def non_decreasing(self, tol: float = 1e-9) -> bool:
        return all(b >= a - tol for a, b in zip(self.cvs, self.cvs[1:]))

    def to_dict(self) -> dict:
        return {"kind": self.kind, "cvs": self.cvs, "victims": self.victims, "lost": self.lost,
                "counts": [{str(k): v for k, v in c.items()} for c in self.counts], "summary": self.summary}


def imbalance_cycles(kind: str = "ReadOnly", cycles: int = 5, nodes: int = 4, blocks_per_node: int = 48,
                     notice_period: float = 6.0, settle: float = 3.0, threads: int = 2,
                     egress: float = 50e6, seed: int = 42) -> CycleResult:
    """Preempt a random node per cycle, respawn an empty one, record skew.

    ReadOnly uses a long-lived preloaded dataset; WriteOnly writes short-lived
    objects that each worker deletes a few operations later.
    """
    rng = np.random.default_rng(seed)
    cfg = ClusterConfig(datanodes=nodes, capacity_blocks=8 * blocks_per_node, egress_bytes_per_sec=egress)
    with LocalCluster(cfg) as cluster:
        if kind == "ReadOnly":
            dataset = preload(cluster.client(), nodes * blocks_per_node, cfg.block_size, seed)
            spec = WorkloadSpec("ReadOnly", threads=threads, duration=1e9, object_size=cfg.block_size, seed=seed)
        else:
            dataset = {}
            spec = WorkloadSpec("WriteOnly", threads=threads, duration=1e9, object_size=cfg.block_size,
                                data_lifetime="ShortLived", delete_after=blocks_per_node // threads, seed=seed)
        stop = threading.Event()
        th, out = _background(spec, cluster, dataset, stop)
        time.sleep(settle)
        counts = [cluster.block_counts()]
        victims = []
        lost = 0
        for _ in range(cycles):
            victim = int(rng.choice(cluster.active_ids()))
            victims.append(victim)
            report = cluster.notice(victim, notice_period).result()
            lost += report.blocks_lost
            cluster.terminate(victim)
            cluster.spawn_datanode()
            time.sleep(settle)
            counts.append(cluster.block_counts())
        stop.set()
        th.join()
        if "error" in out:
            raise out["error"]
    cvs = [coefficient_of_variation(c.values()) for c in counts]
    return CycleResult(kind, counts, cvs, victims, lost, out.get("summary", {}))


@dataclass
class Slowdown:
    baseline: list[dict]
    preempted: list[dict]
    events: list = field(default_factory=list)  # injector events of every preempted run

    @staticmethod
    def _median(runs: list[dict]) -> float:
        return float(np.median([r["runtime_s"] for r in runs]))

    @property
    def baseline_runtime(self) -> float:
        return self._median(self.baseline)

    @property
    def preempted_runtime(self) -> float:
        return self._median(self.preempted)

    @property
    def inflation(self) -> float:
        """Relative runtime increase of the median preempted run over the median baseline."""
        return self.preempted_runtime / self.baseline_runtime - 1.0

    def to_dict(self) -> dict:
        return {"baseline": self.baseline, "preempted": self.preempted, "inflation": self.inflation,
                "events": [asdict(e) for e in self.events]}


def _timed_run(spec: WorkloadSpec, cfg: ClusterConfig, params: PreemptionModelParams | None,
               max_preemptions: int | None):
    with LocalCluster(ClusterConfig(**cfg.to_dict())) as cluster:
        injector = None
        inj_thread = None
        if params is not None:
            injector = PreemptionInjector(params, LocalFleet(cluster))
            inj_thread = threading.Thread(target=injector.run_schedule, args=(1e9, max_preemptions),
                                          name="injector", daemon=True)
            inj_thread.start()
        _, summary = run_workload(spec, cluster)
        if injector is not None:
            injector.stop()
            inj_thread.join()
        return summary, (injector.events if injector else [])


def slowdown(spec: WorkloadSpec, params: PreemptionModelParams, cfg: ClusterConfig | None = None,
             max_preemptions: int | None = None, repeats: int = 1) -> Slowdown:
    """Run ``spec`` on fresh clusters without and with injected preemptions.

    Runs alternate (baseline, preempted) ``repeats`` times with the same seeds so
    that slow drift of the host affects both sides alike.
    """
    cfg = cfg or ClusterConfig()
    result = Slowdown([], [])
    for _ in range(repeats):
        base, _ = _timed_run(spec, cfg, None, None)
        pre, events = _timed_run(spec, cfg, params, max_preemptions)
        result.baseline.append(base)
        result.preempted.append(pre)
        result.events.extend(events)
    return result
