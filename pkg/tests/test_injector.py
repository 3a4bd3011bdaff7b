import json
import math
import time

import numpy as np
import pytest
from scipy import stats

from spotstore.clock import VirtualClock
from spotstore.core import DatanodeState
from spotstore.injector import (
    PRESETS,
    LocalFleet,
    PreemptionInjector,
    PreemptionModelParams,
    SimFleet,
    empirical_cdf,
    ks_test,
    load_trace,
    sample_lifetimes,
    trace_lifetimes,
)


def ks_critical(n, alpha=0.01):
    # asymptotic one-sample Kolmogorov critical value
    return math.sqrt(-math.log(alpha / 2) / 2) / math.sqrt(n)


def test_exponential_mean():
    xs = sample_lifetimes(PreemptionModelParams("exponential", mean_ttf=3600, seed=3), 100_000)
    assert abs(xs.mean() - 3600) / 3600 < 0.02


def test_fixed_seed_is_deterministic():
    p = PreemptionModelParams("weibull", shape=0.8, scale=1000, seed=11)
    assert np.array_equal(sample_lifetimes(p, 500), sample_lifetimes(p, 500))
    q = PreemptionModelParams("weibull", shape=0.8, scale=1000, seed=12)
    assert not np.array_equal(sample_lifetimes(p, 500), sample_lifetimes(q, 500))


def test_weibull_shape_one_is_exponential():
    n = 10_000
    xs = sample_lifetimes(PreemptionModelParams("weibull", shape=1.0, scale=500.0, seed=5), n)
    d = np.max(np.abs(np.arange(1, n + 1) / n - (1 - np.exp(-np.sort(xs) / 500.0))))
    assert d < ks_critical(n)
    assert stats.kstest(xs, "expon", args=(0, 500.0)).pvalue > 0.01


def test_analytic_cdf_matches_scipy():
    t = np.linspace(0, 20000, 50)
    for p in (PreemptionModelParams("exponential", mean_ttf=1234.0),
              PreemptionModelParams("weibull", shape=0.7, scale=2000.0)):
        assert np.allclose(p.cdf(t), p.frozen().cdf(t))


def test_empirical_cdf_small():
    assert empirical_cdf([3, 1, 2]) == [(1.0, pytest.approx(1 / 3)), (2.0, pytest.approx(2 / 3)), (3.0, 1.0)]
    assert empirical_cdf([42.0]) == [(42.0, 1.0)]
    assert empirical_cdf([1, 1, 2]) == [(1.0, pytest.approx(2 / 3)), (2.0, 1.0)]
    with pytest.raises(ValueError):
        empirical_cdf([])


def test_empirical_cdf_dkw():
    p = PreemptionModelParams("exponential", mean_ttf=100.0, seed=9)
    pts = empirical_cdf(sample_lifetimes(p, 10_000))
    ts = np.array([t for t, _ in pts])
    fs = np.array([f for _, f in pts])
    # check both sides of every step
    lower = np.concatenate([[0.0], fs[:-1]])
    analytic = 1 - np.exp(-ts / 100.0)
    assert max(np.max(np.abs(fs - analytic)), np.max(np.abs(lower - analytic))) < 0.02


@pytest.mark.parametrize("name", sorted(PRESETS))
def test_presets_pass_ks(name):
    p = PreemptionModelParams.from_dict({"preset": name, "seed": 1})
    res = ks_test(sample_lifetimes(p, 10_000), p)
    assert res.pvalue > 0.01


def test_presets_order():
    small, large = PRESETS["16vcpu-like"], PRESETS["32vcpu-like"]
    t = np.array([600.0, 3600.0, 7200.0])
    assert np.all(large.cdf(t) > small.cdf(t))


def test_param_validation():
    with pytest.raises(ValueError):
        PreemptionModelParams("gamma")
    with pytest.raises(ValueError):
        PreemptionModelParams("weibull", shape=0)
    with pytest.raises(ValueError):
        PreemptionModelParams("trace")
    p = PreemptionModelParams.from_dict({"preset": "16vcpu-like", "notice_period": 10})
    assert p.notice_period == 10 and p.scale == 3600.0


def test_trace_replay(tmp_path):
    path = tmp_path / "trace.csv"
    path.write_text("slot,preemption_time_s\n0,100\n0,400\n1,50\n")
    assert trace_lifetimes(load_trace(str(path))) == {0: [100.0, 300.0], 1: [50.0]}
    p = PreemptionModelParams("trace", trace_path=str(path), notice_period=10, respawn_delay=0)
    inj = PreemptionInjector(p, SimFleet(2), VirtualClock())
    inj.run_schedule(10_000)
    notices = [(e.time, e.slot) for e in inj.events if e.kind == "notice"]
    # slot 0 respawns at 110 and is preempted again 300 s later
    assert notices == [(50.0, 1), (100.0, 0), (410.0, 0)]
    bad = tmp_path / "bad.csv"
    bad.write_text("slot,preemption_time_s\n0,5\n0,1\n")
    with pytest.raises(ValueError):
        load_trace(str(bad))


def run_log(seed, tmp_path, tag):
    p = PreemptionModelParams("exponential", mean_ttf=600, notice_period=30, respawn_delay=60, seed=seed)
    log = tmp_path / f"{tag}.jsonl"
    inj = PreemptionInjector(p, SimFleet(2), VirtualClock(), log_path=str(log))
    inj.run_schedule(7200)
    return log.read_text()


def test_identical_logs_for_fixed_seed(tmp_path):
    a, b = run_log(42, tmp_path, "a"), run_log(42, tmp_path, "b")
    assert a == b and a
    assert run_log(43, tmp_path, "c") != a
    rec = json.loads(a.splitlines()[0])
    assert set(rec) == {"time", "slot", "node_id", "kind"} and rec["kind"] == "notice"


def test_event_sequence_per_slot(tmp_path):
    log = run_log(7, tmp_path, "seq")
    per_slot = {}
    for line in log.splitlines():
        e = json.loads(line)
        per_slot.setdefault(e["slot"], []).append(e)
    for events in per_slot.values():
        kinds = [e["kind"] for e in events]
        for i, k in enumerate(kinds):
            assert k == ("notice", "terminate", "respawn")[i % 3]
        for a, b in zip(events, events[1:]):
            gap = b["time"] - a["time"]
            if a["kind"] == "notice":
                assert gap == pytest.approx(30)
            elif a["kind"] == "terminate":
                assert gap == pytest.approx(60)


def test_max_preemptions():
    p = PreemptionModelParams("exponential", mean_ttf=100, seed=1)
    inj = PreemptionInjector(p, SimFleet(3), VirtualClock())
    inj.run_schedule(1e9, max_preemptions=4)
    kinds = [e.kind for e in inj.events]
    assert kinds.count("terminate") == 4
    assert kinds.count("notice") == 4 and kinds.count("respawn") == 4


def test_drain_completes_before_terminate(make_cluster):
    cluster = make_cluster(datanodes=3, egress_bytes_per_sec=None)
    c = cluster.client()
    for i in range(6):
        c.put_object(f"o{i}", bytes([i]) * 100_000)
    victim = cluster.live_ids()[0]
    p = PreemptionModelParams("exponential", mean_ttf=1e-6, notice_period=1.0, respawn_delay=None)
    fleet = LocalFleet(cluster, [victim])
    inj = PreemptionInjector(p, fleet)
    inj.run_schedule(10.0)
    assert [e.kind for e in inj.events] == ["notice", "terminate"]
    (report,) = fleet.reports(timeout=10)
    assert report.deadline_met and report.blocks_lost == 0
    assert cluster.namenode.datanode(victim).state == DatanodeState.TERMINATED
    for i in range(6):
        assert c.get_object(f"o{i}") == bytes([i]) * 100_000


def test_zero_notice_loses_everything(make_cluster):
    cluster = make_cluster(datanodes=2, egress_bytes_per_sec=None)
    c = cluster.client()
    for i in range(4):
        c.put_object(f"o{i}", b"x" * 1000)
    victim = cluster.live_ids()[0]
    held = len(cluster.namenode.list_blocks_on_node(victim))
    p = PreemptionModelParams("exponential", mean_ttf=1e-6, notice_period=0.0, respawn_delay=None)
    fleet = LocalFleet(cluster, [victim])
    PreemptionInjector(p, fleet).run_schedule(5.0)
    assert fleet.drains == []  # no drain was started
    assert cluster.namenode.lost_count == held == 2


def test_respawn_adds_a_fresh_node(make_cluster):
    cluster = make_cluster(datanodes=2, egress_bytes_per_sec=None)
    first = cluster.live_ids()
    p = PreemptionModelParams("exponential", mean_ttf=1e-6, notice_period=0.2, respawn_delay=0.1)
    fleet = LocalFleet(cluster, first[:1])
    PreemptionInjector(p, fleet).run_schedule(1e9, max_preemptions=1)
    live = cluster.live_ids()
    assert first[0] not in live and len(live) == 2 and fleet.node_id(0) in live


def test_remote_fleet_over_the_wire(make_cluster, tmp_path):
    from spotstore.injector import RemoteFleet
    from spotstore.relocator import RelocatorServer

    cluster = make_cluster(datanodes=3, egress_bytes_per_sec=None)
    c = cluster.client()
    for i in range(6):
        c.put_object(f"o{i}", bytes([i]) * 50_000)
    report_file = tmp_path / "reports.jsonl"
    server = RelocatorServer(cluster.namenode_address, report_file=str(report_file), stdout=None).start()
    try:
        victim = cluster.live_ids()[0]
        fleet = RemoteFleet(cluster.namenode_address, server.address, [cluster.datanode(victim).address])
        p = PreemptionModelParams("exponential", mean_ttf=1e-6, notice_period=1.0, respawn_delay=None)
        PreemptionInjector(p, fleet).run_schedule(5.0)
        # the relocator emits its report at the deadline, racing the injector's terminate
        limit = time.monotonic() + 5.0
        while not report_file.exists() and time.monotonic() < limit:
            time.sleep(0.05)
        report = json.loads(report_file.read_text().splitlines()[0])
        assert report["node"] == victim and report["blocks_lost"] == 0
        assert cluster.datanode(victim).terminated
        for i in range(6):
            assert c.get_object(f"o{i}") == bytes([i]) * 50_000
        with pytest.raises(ValueError):
            RemoteFleet(cluster.namenode_address, server.address, ["127.0.0.1:1"])
    finally:
        server.close()
