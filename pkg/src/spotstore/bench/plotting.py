"""Figures rendered next to the CSV/JSON outputs (Agg backend, files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from spotstore.bench.analysis import bandwidth_series  # noqa: E402

plt.rcParams.update({
    "figure.figsize": (6.0, 3.6),
    "figure.dpi": 120,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "font.size": 9,
})


def _save(fig, path):
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def plot_bandwidth(samples, path, notice_at=None, terminate_at=None):
    rows = bandwidth_series(samples)
    t = [r[0] for r in rows]
    fig, ax = plt.subplots()
    ax.step(t, [r[1] for r in rows], where="post", label="read")
    ax.step(t, [r[2] for r in rows], where="post", label="write")
    ax.step(t, [r[3] for r in rows], where="post", color="k", lw=1.5, label="total")
    if notice_at is not None and terminate_at is not None:
        ax.axvspan(notice_at, terminate_at, color="tab:red", alpha=0.15, label="drain window")
    ax.set_xlabel("time [s]")
    ax.set_ylabel("bandwidth [MB/s]")
    ax.set_ylim(bottom=0)
    ax.legend(frameon=False, ncol=2)
    return _save(fig, path)


def plot_cdf(samples, path, params=None):
    xs = np.sort(np.asarray(samples, dtype=float))
    fig, ax = plt.subplots()
    ax.step(xs / 3600, np.arange(1, xs.size + 1) / xs.size, where="post", label="empirical")
    if params is not None:
        grid = np.linspace(0, xs.max(), 400)
        ax.plot(grid / 3600, params.cdf(grid), "--", label=f"{params.distribution} model")
    ax.set_xlabel("time to preemption [h]")
    ax.set_ylabel("CDF")
    ax.set_ylim(0, 1)
    ax.legend(frameon=False)
    return _save(fig, path)


def plot_cost(baseline, spot, savings, path):
    fig, ax = plt.subplots(figsize=(4.0, 3.6))
    ax.bar(["on-demand only", "with spot"], [baseline, spot], color=["tab:gray", "tab:green"])
    ax.set_ylabel("cost")
    ax.set_title(f"savings {savings:.1%}")
    return _save(fig, path)


def plot_cycles(results, path):
    fig, ax = plt.subplots()
    for r in results:
        ax.plot(range(len(r.cvs)), r.cvs, marker="o", label=r.kind)
    ax.set_xlabel("preemption/respawn cycle")
    ax.set_ylabel("CV of per-node block counts")
    ax.legend(frameon=False)
    return _save(fig, path)
