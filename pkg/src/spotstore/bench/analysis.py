"""Closed-form analysis: cost model, capacity sizing, bandwidth series, skew."""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

MB = 1e6  # bandwidth series are reported in decimal megabytes


@dataclass(frozen=True)
class CostInputs:
    n_on_demand: int
    n_spot: int
    price_on_demand: float
    price_spot: float
    baseline_hours: float = 1.0
    spot_run_hours: float = 1.0

    def __post_init__(self):
        if self.n_on_demand < 0 or self.n_spot < 0:
            raise ValueError("instance counts must be >= 0")
        if self.n_on_demand + self.n_spot == 0:
            raise ValueError("need at least one instance")
        if self.price_on_demand < 0 or self.price_spot < 0:
            raise ValueError("prices must be >= 0")
        if self.baseline_hours <= 0 or self.spot_run_hours <= 0:
            raise ValueError("hours must be > 0")


def cost_model(inputs: CostInputs) -> tuple[float, float, float]:
    """Return (baseline_cost, spot_cost, savings_fraction).

    The baseline runs every instance on demand; the spot setup keeps
    ``n_on_demand`` on demand and rents the rest as spot capacity.
    """
    i = inputs
    baseline = (i.n_on_demand + i.n_spot) * i.price_on_demand * i.baseline_hours
    spot = (i.n_on_demand * i.price_on_demand + i.n_spot * i.price_spot) * i.spot_run_hours
    if baseline == 0:
        return 0.0, spot, 0.0
    return baseline, spot, 1.0 - spot / baseline


@dataclass(frozen=True)
class SizingInput:
    memory_capacity: float  # bytes
    egress_bandwidth: float  # bits per second
    notice_period: float  # seconds

    def __post_init__(self):
        if self.memory_capacity < 0:
            raise ValueError("memory_capacity must be >= 0")
        if self.egress_bandwidth <= 0 or self.notice_period <= 0:
            raise ValueError("egress_bandwidth and notice_period must be > 0")


def sizing_time(s: SizingInput) -> float:
    """Seconds needed to push the whole memory out over the egress link."""
    return s.memory_capacity * 8 / s.egress_bandwidth


def sizing_feasible(s: SizingInput) -> bool:
    return sizing_time(s) <= s.notice_period


def max_capacity(egress_bandwidth: float, notice_period: float) -> float:
    """Largest memory in bytes that can be drained within the notice period."""
    if egress_bandwidth <= 0 or notice_period <= 0:
        raise ValueError("egress_bandwidth and notice_period must be > 0")
    return egress_bandwidth * notice_period / 8


# -- unit parsing ------------------------------------------------------------

_PREFIX = {"": 1, "k": 1e3, "m": 1e6, "g": 1e9, "t": 1e12,
           "ki": 2**10, "mi": 2**20, "gi": 2**30, "ti": 2**40}
_QTY = re.compile(r"^\s*([0-9]*\.?[0-9]+(?:[eE][-+]?[0-9]+)?)\s*([a-zA-Z/]*)\s*$")


def _split(text: str) -> tuple[float, str]:
    m = _QTY.match(str(text))
    if not m:
        raise ValueError(f"cannot parse quantity {text!r}")
    return float(m.group(1)), m.group(2)


def parse_bytes(text) -> float:
    """'64GB' -> 64e9, '1GiB' -> 2**30, '512' -> 512. Decimal prefixes are powers of ten."""
    if isinstance(text, (int, float)):
        return float(text)
    value, unit = _split(text)
    u = unit.lower()
    if u.endswith("b"):
        u = u[:-1]
    if u not in _PREFIX:
        raise ValueError(f"unknown byte unit {unit!r}")
    return value * _PREFIX[u]


def parse_bits_per_second(text) -> float:
    """'32Gbit' or '32Gbit/s' or '32Gbps' -> 32e9 bits per second."""
    if isinstance(text, (int, float)):
        return float(text)
    value, unit = _split(text)
    u = unit.lower()
    for suffix in ("bit/s", "bits/s", "bps", "bit", "bits", "b/s"):
        if u.endswith(suffix):
            u = u[: -len(suffix)]
            break
    if u not in _PREFIX:
        raise ValueError(f"unknown bandwidth unit {unit!r}")
    return value * _PREFIX[u]


def parse_seconds(text) -> float:
    if isinstance(text, (int, float)):
        return float(text)
    value, unit = _split(text)
    scale = {"": 1, "s": 1, "sec": 1, "ms": 1e-3, "m": 60, "min": 60, "h": 3600}.get(unit.lower())
    if scale is None:
        raise ValueError(f"unknown time unit {unit!r}")
    return value * scale


# -- time series ---------------------------------------------------------------

def bandwidth_series(samples: Sequence, end: float | None = None) -> list[tuple[int, float, float, float]]:
    """Bucket samples into whole seconds: (second, read MB/s, write MB/s, total MB/s).

    Seconds with no samples appear as zero rows so gaps stay visible.
    """
    if not samples:
        raise ValueError("samples must be non-empty")
    last = max(s.t for s in samples) if end is None else end
    n = int(math.floor(last)) + 1
    rd = np.zeros(n)
    wr = np.zeros(n)
    for s in samples:
        sec = int(math.floor(s.t))
        if 0 <= sec < n:
            rd[sec] += s.bytes_read
            wr[sec] += s.bytes_written
    return [(k, rd[k] / MB, wr[k] / MB, (rd[k] + wr[k]) / MB) for k in range(n)]


def bandwidth_timeseries(samples: Sequence, end: float | None = None) -> str:
    """CSV with one row per second of aggregate datastore bandwidth in MB/s."""
    rows = ["t,read_mb_s,write_mb_s,total_mb_s"]
    rows += [f"{t},{r:.6f},{w:.6f},{tot:.6f}" for t, r, w, tot in bandwidth_series(samples, end)]
    return "\n".join(rows) + "\n"


def coefficient_of_variation(counts: Iterable[float]) -> float:
    """Population standard deviation over mean; 0 for an empty or all-zero set."""
    xs = np.asarray(list(counts), dtype=float)
    if xs.size == 0 or xs.mean() == 0:
        return 0.0
    return float(xs.std() / xs.mean())


def plateau(values: Sequence[float], start: int, stop: int) -> float:
    """Median of ``values[start:stop]``, robust to a stray slow second."""
    window = np.asarray(values[start:stop], dtype=float)
    if window.size == 0:
        raise ValueError("empty plateau window")
    return float(np.median(window))
