"""Figure rendering for the CLI report paths.

Every CLI command that writes delimited output also renders a PNG next to
it through one of these helpers.  All rendering uses the Agg backend so
headless runs work.
"""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

__all__ = [
    "render_step_timings",
    "render_force_errors",
    "render_transport_bench",
    "render_balance_history",
]

_PHASES = ("migrate_s", "sample_s", "let_s", "mesh_s")
_PHASE_LABELS = ("particle migration", "balance samples", "tree exchange (PP)",
                 "mesh cells (PM)")


def render_step_timings(rows, path, title="per-step wall time"):
    """Calculation vs the four communication phases, stacked per step."""
    steps = [r.step for r in rows]
    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    ax1.plot(steps, [r.calc_s for r in rows], "o-", color="tab:red",
             label="calculation")
    comm = [r.migrate_s + r.sample_s + r.let_s + r.mesh_s for r in rows]
    ax1.plot(steps, comm, "s-", color="tab:blue", label="communication")
    ax1.plot(steps, [r.total_s for r in rows], "-", color="0.6", label="total")
    ax1.set_ylabel("seconds")
    ax1.legend(loc="best", fontsize=8)
    ax1.set_title(title)
    bottom = np.zeros(len(rows))
    for key, label in zip(_PHASES, _PHASE_LABELS):
        vals = np.array([getattr(r, key) for r in rows])
        ax2.bar(steps, vals, bottom=bottom, label=label)
        bottom += vals
    ax2.set_xlabel("step")
    ax2.set_ylabel("comm seconds")
    ax2.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_force_errors(errors_by_theta, path):
    """Histogram of per-particle relative force errors for each theta."""
    fig, ax = plt.subplots(figsize=(6, 4))
    for theta, errors in sorted(errors_by_theta.items()):
        errors = np.asarray(errors)
        ax.hist(np.log10(np.maximum(errors, 1e-12)), bins=40, alpha=0.6,
                label=f"theta = {theta}  (rms {np.sqrt(np.mean(errors**2)):.3%})")
    ax.set_xlabel("log10 relative force error vs direct periodic sum")
    ax.set_ylabel("particles")
    ax.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_transport_bench(results, path):
    """Throughput and round-trip time across configurations.

    ``results``: list of dicts with keys label, rtt_s, throughput_bps.
    """
    labels = [r["label"] for r in results]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax1.bar(labels, [r["throughput_bps"] / 1e6 for r in results], color="tab:blue")
    ax1.set_ylabel("throughput [MB/s]")
    ax2.bar(labels, [r["rtt_s"] * 1e3 for r in results], color="tab:orange")
    ax2.set_ylabel("round trip [ms]")
    for ax in (ax1, ax2):
        ax.tick_params(axis="x", rotation=30, labelsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def render_balance_history(spreads, bounds_history, path):
    """Cost spread decay and boundary trajectories of a balancing run."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(9, 3.6))
    ax1.plot(spreads, "o-")
    ax1.set_xlabel("step")
    ax1.set_ylabel("cost spread (max-min)/mean")
    ax1.axhline(0.05, color="0.5", ls="--", lw=0.8)
    hist = np.asarray(bounds_history)
    for b in range(1, hist.shape[1] - 1):
        ax2.plot(hist[:, b], label=f"boundary {b}")
    ax2.set_xlabel("step")
    ax2.set_ylabel("boundary position [box]")
    ax2.legend(loc="best", fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path
