"""Machine-readable run reports."""

from __future__ import annotations

import csv
import io
import json
import platform
import time
from dataclasses import asdict, fields
from pathlib import Path

from spotstore.bench.workload import MetricsSample

SAMPLE_FIELDS = [f.name for f in fields(MetricsSample)]
HOST_KEYS = ("host", "created_at", "runtime_s", "aggregate_mb_s")


def build_report(summary: dict, spec: dict, cluster: dict, seed: int | None = None,
                 injector_log: str | None = None, samples=()) -> dict:
    return {
        "spec": spec,
        "seed": seed if seed is not None else spec.get("seed"),
        "cluster": cluster,
        "totals": summary,
        "injector_log": injector_log,
        "samples": [asdict(s) for s in samples],
        "host": platform.node(),
        "created_at": time.time(),
    }


def strip_host(report: dict) -> dict:
    """Drop fields that legitimately differ between otherwise identical runs."""
    out = {k: v for k, v in report.items() if k not in HOST_KEYS}
    if "totals" in out:
        out["totals"] = {k: v for k, v in out["totals"].items() if k not in HOST_KEYS}
    return out


def samples_csv(samples) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SAMPLE_FIELDS)
    for s in samples:
        w.writerow([getattr(s, k) for k in SAMPLE_FIELDS])
    return buf.getvalue()


def write_report(report: dict, path: str | Path, fmt: str | None = None) -> Path:
    """Write ``report`` as JSON, or its samples as CSV. OSError propagates."""
    path = Path(path)
    fmt = fmt or ("csv" if path.suffix == ".csv" else "json")
    if fmt == "json":
        path.write_text(json.dumps(report, indent=2, sort_keys=True, default=str) + "\n")
    elif fmt == "csv":
        samples = [MetricsSample(**s) for s in report.get("samples", [])]
        path.write_text(samples_csv(samples))
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path
