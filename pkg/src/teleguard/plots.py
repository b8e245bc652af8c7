"""Static plot rendering for experiment reports.

Byte-determinism matters (reports are compared across reruns), so figures
are rendered on the Agg backend with fixed metadata.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

_SAVE_KW = dict(dpi=110, metadata={"Software": None})


def render_all(reports: dict, separation: dict | None, out_dir) -> list:
    out = Path(out_dir)
    written = []
    if reports:
        written.append(_success_bars(reports, out / "success_rates.png"))
        written.append(_g_traces(reports, out / "guidance_intensity.png"))
    if separation is not None and "latch_aligned_q_tilde" in separation:
        written.append(
            _latch_trace(separation["latch_aligned_q_tilde"], out / "score_before_latch.png")
        )
    return written


def _success_bars(reports: dict, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    modes = sorted(reports.keys())
    rates = [reports[m].aggregates["success_rate"] for m in modes]
    errs = []
    for m in modes:
        lo, hi = reports[m].aggregates["success_rate_ci95"]
        r = reports[m].aggregates["success_rate"]
        errs.append([r - lo, hi - r])
    ax.bar(modes, rates, color="#4878cf", width=0.6)
    ax.errorbar(
        modes, rates, yerr=list(zip(*errs)), fmt="none", ecolor="black", capsize=4
    )
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("success rate")
    ax.set_title("Success rate by assistance mode (95% bootstrap CI)")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def _g_traces(reports: dict, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    modes = sorted(reports.keys())
    means = [reports[m].aggregates["mean_g"] for m in modes]
    ax.bar(modes, means, color="#d65f5f", width=0.6)
    ax.set_ylabel("mean guidance intensity g")
    ax.set_ylim(0, 1.0)
    ax.set_title("Guidance intensity by mode")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def _latch_trace(aligned: dict, path: Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.2))
    steps = aligned["steps_before_latch"]
    ax.plot(steps, aligned["mean_q_tilde"], marker="o", ms=3, color="#4878cf")
    ax.invert_xaxis()
    ax.set_xlabel("steps before failure latch")
    ax.set_ylabel("mean normalized score")
    ax.set_ylim(0, 1)
    ax.set_title("Score collapse approaching failure")
    fig.tight_layout()
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path
