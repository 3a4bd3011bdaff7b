import csv
import io
import json
from fractions import Fraction

import pytest

from spotstore.bench.analysis import (
    CostInputs,
    SizingInput,
    bandwidth_series,
    bandwidth_timeseries,
    coefficient_of_variation,
    cost_model,
    max_capacity,
    parse_bits_per_second,
    parse_bytes,
    parse_seconds,
    sizing_feasible,
    sizing_time,
)
from spotstore.bench.report import build_report, samples_csv, strip_host, write_report
from spotstore.bench.workload import MetricsSample, WorkloadSpec, object_content, preload, run_workload

OD, SPOT = 0.776944, 0.188320


def savings_oracle(n_od, n_spot, p_od, p_spot, h_base, h_spot):
    # exact rational arithmetic, independent of the float implementation
    p_od, p_spot = Fraction(str(p_od)), Fraction(str(p_spot))
    h_base, h_spot = Fraction(str(h_base)), Fraction(str(h_spot))
    base = (n_od + n_spot) * p_od * h_base
    spot = (n_od * p_od + n_spot * p_spot) * h_spot
    return float(1 - spot / base)


def test_cost_model_reference_prices():
    b, s, sav = cost_model(CostInputs(1, 4, OD, SPOT, 1.0, 1.0))
    assert b == pytest.approx(5 * OD)
    assert s == pytest.approx(OD + 4 * SPOT)
    assert sav == pytest.approx(savings_oracle(1, 4, OD, SPOT, 1, 1), abs=1e-12)
    assert abs(sav - 0.6061) <= 0.0005
    _, _, slow = cost_model(CostInputs(1, 4, OD, SPOT, 1.0, 1.021))
    assert slow == pytest.approx(savings_oracle(1, 4, OD, SPOT, 1, 1.021), abs=1e-12)
    assert abs(slow - 0.598) <= 0.001


def test_cost_model_degenerate_and_homogeneous():
    assert cost_model(CostInputs(1, 4, 1.0, 1.0))[2] == pytest.approx(0.0)
    base = cost_model(CostInputs(2, 7, OD, SPOT, 3.0, 3.3))[2]
    for k in (0.1, 2.0, 1000.0):
        assert cost_model(CostInputs(2, 7, OD * k, SPOT * k, 3.0, 3.3))[2] == pytest.approx(base)
    with pytest.raises(ValueError):
        CostInputs(1, 1, -1.0, 1.0)
    with pytest.raises(ValueError):
        CostInputs(1, 1, 1.0, 1.0, baseline_hours=0)


def test_sizing():
    s = SizingInput(64e9, 32e9, 30.0)
    assert abs(sizing_time(s) - 16.0) <= 0.01
    assert sizing_feasible(s)
    assert max_capacity(32e9, 30.0) == 120e9
    zero = SizingInput(0, 32e9, 30.0)
    assert sizing_time(zero) == 0 and sizing_feasible(zero)
    assert not sizing_feasible(SizingInput(64e9, 1e9, 30.0))
    # linear in capacity, inverse in bandwidth
    assert sizing_time(SizingInput(128e9, 32e9, 30)) == pytest.approx(2 * sizing_time(s))
    assert sizing_time(SizingInput(64e9, 64e9, 30)) == pytest.approx(sizing_time(s) / 2)


def test_unit_parsers():
    assert parse_bytes("64GB") == 64e9
    assert parse_bytes("1GiB") == 2**30
    assert parse_bytes("512") == 512
    assert parse_bits_per_second("32Gbit") == 32e9
    assert parse_bits_per_second("32Gbit/s") == 32e9
    assert parse_bits_per_second("10Mbps") == 10e6
    assert parse_seconds("30s") == 30 and parse_seconds("2min") == 120 and parse_seconds("7200s") == 7200
    with pytest.raises(ValueError):
        parse_bytes("12 parsecs")


def test_constant_bandwidth_series():
    samples = [MetricsSample(float(t), bytes_read=100_000_000) for t in range(10)]
    rows = bandwidth_series(samples)
    assert [r[3] for r in rows] == [100.0] * 10
    text = bandwidth_timeseries(samples)
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert len(parsed) == 10 and {float(r["total_mb_s"]) for r in parsed} == {100.0}


def test_empty_second_gets_zero_row():
    samples = [MetricsSample(0.0, bytes_written=5_000_000), MetricsSample(2.0, bytes_written=5_000_000)]
    rows = bandwidth_series(samples)
    assert [(r[0], r[3]) for r in rows] == [(0, 5.0), (1, 0.0), (2, 5.0)]
    with pytest.raises(ValueError):
        bandwidth_series([])


def test_cv():
    assert coefficient_of_variation([5, 5, 5]) == 0.0
    assert coefficient_of_variation([]) == 0.0
    assert coefficient_of_variation([0, 10]) == pytest.approx(1.0)


def test_workload_spec_validation():
    with pytest.raises(ValueError):
        WorkloadSpec(threads=0)
    with pytest.raises(ValueError):
        WorkloadSpec(kind="Mixed", write_fraction=1.5)
    with pytest.raises(ValueError):
        WorkloadSpec(kind="Scan")
    assert WorkloadSpec(kind="Mixed", write_fraction=0.25).p_write == 0.25
    assert WorkloadSpec.from_dict(WorkloadSpec(seed=4).to_dict()) == WorkloadSpec(seed=4)


def test_object_content_is_deterministic():
    assert object_content("a", 100, 1) == object_content("a", 100, 1)
    assert object_content("a", 100, 1) != object_content("b", 100, 1)


def test_read_only_on_empty_store(make_cluster):
    cluster = make_cluster(datanodes=1)
    with pytest.raises(ValueError):
        run_workload(WorkloadSpec("ReadOnly", ops=10), cluster)


def test_unreachable_namenode_aborts():
    with pytest.raises(ConnectionError):
        run_workload(WorkloadSpec("WriteOnly", ops=1), "127.0.0.1:1", client=None)


def test_mixed_zero_equals_read_only(make_cluster):
    cluster = make_cluster(datanodes=2, egress_bytes_per_sec=None)
    data = preload(cluster.client(), 8, 4096, seed=1)
    mixes = []
    for spec in (WorkloadSpec("ReadOnly", ops=40, threads=2, object_size=4096, seed=1),
                 WorkloadSpec("Mixed", write_fraction=0.0, ops=40, threads=2, object_size=4096, seed=1)):
        _, summary = run_workload(spec, cluster, data)
        assert summary["corrupt_reads"] == 0 and summary["errors"] == 0
        mixes.append(summary["op_mix"])
    assert mixes[0] == mixes[1] == {"read": 40, "write": 0}


def test_short_lived_deletes_and_long_lived_keeps(make_cluster):
    cluster = make_cluster(datanodes=2, egress_bytes_per_sec=None)
    spec = WorkloadSpec("WriteOnly", ops=30, threads=1, object_size=2048, data_lifetime="ShortLived",
                        delete_after=5)
    _, summary = run_workload(spec, cluster)
    assert summary["writes"] == 30 and summary["deletes"] == 25
    assert cluster.namenode.object_names() == []  # leftovers cleaned up at the end
    _, summary = run_workload(WorkloadSpec("WriteOnly", ops=12, threads=3, object_size=2048, seed=9), cluster)
    assert summary["deletes"] == 0 and len(cluster.namenode.object_names()) == 12


def test_report_round_trip_and_determinism(make_cluster, tmp_path):
    summaries = []
    for _ in range(2):
        cluster = make_cluster(datanodes=2, egress_bytes_per_sec=None)
        spec = WorkloadSpec("Mixed", write_fraction=0.5, ops=40, threads=1, object_size=1024, seed=3,
                            object_count=4)
        data = preload(cluster.client(), spec.object_count, spec.object_size, spec.seed)
        samples, summary = run_workload(spec, cluster, data)
        rep = build_report(summary, spec.to_dict(), {"datanodes": 2}, samples=samples)
        path = write_report(rep, tmp_path / "run.json")
        loaded = json.loads(path.read_text())
        for key in ("ops_ok", "bytes_read", "bytes_written", "ops_retried", "ops_data_unavailable",
                    "client_retries", "runtime_s"):
            assert key in loaded["totals"]
        csv_path = write_report(rep, tmp_path / "run.csv")
        assert len(csv_path.read_text().splitlines()) == len(samples) + 1
        assert samples_csv(samples).count("\n") == len(samples) + 1
        summaries.append(strip_host(loaded))
    for s in summaries:
        s.pop("samples")  # per-second bucketing depends on wall time
    assert summaries[0] == summaries[1]


def test_report_io_error_surfaces(tmp_path):
    with pytest.raises(OSError):
        write_report({"samples": []}, tmp_path / "missing-dir" / "r.json")
