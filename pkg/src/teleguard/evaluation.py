"""Closed-loop experiments and score-separation statistics.

An experiment runs N seeded episodes of one operator kind under one
assistance mode and reports success rate, completion time (successes only),
guidance intensity, and the deviation between executed and operator-intended
commands, with bootstrap confidence intervals.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict

import numpy as np

from .assist import AssistConfig
from .data import TransitionDataset
from .env import World, WorldConfig
from .loop import ASSIST_MODES, TeleopLoop, intended_follower_command
from .operators import OperatorConfig, make_operator

from . import plots


@dataclass(frozen=True)
class ExperimentSpec:
    operator: OperatorConfig
    mode: str = "off"
    episodes: int = 50
    base_seed: int = 0
    world: WorldConfig = field(default_factory=WorldConfig)
    assist: AssistConfig = field(default_factory=AssistConfig)
    invasiveness_epsilon: float | None = None  # default: 0.1 * command_max

    def validate(self) -> None:
        if self.mode not in ASSIST_MODES:
            raise ValueError(f"mode must be one of {ASSIST_MODES}")
        if self.episodes < 1:
            raise ValueError("episodes must be >= 1")
        self.world.validate()
        self.assist.validate()
        self.operator.validate()

    @property
    def epsilon(self) -> float:
        if self.invasiveness_epsilon is not None:
            return self.invasiveness_epsilon
        return 0.1 * self.world.command_max

    def episode_seeds(self) -> list[int]:
        return [self.base_seed + i for i in range(self.episodes)]


@dataclass(frozen=True)
class EpisodeRow:
    seed: int
    outcome: str
    completion_time: float
    steps: int
    mean_deviation: float
    max_deviation: float
    mean_g: float
    frac_transparent: float  # fraction of ticks with filtered g <= 0.05

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ExperimentReport:
    spec_summary: dict
    rows: list
    aggregates: dict

    def recompute_aggregates(self, n_boot: int = 1000, seed: int = 0) -> dict:
        return aggregate_rows(self.rows, n_boot=n_boot, seed=seed)


def bootstrap_interval(
    values: np.ndarray, n_boot: int, rng: np.random.Generator, level: float = 0.95
) -> tuple[float, float]:
    """Seeded percentile bootstrap for the mean."""
    values = np.asarray(values, dtype=float)
    if values.size == 0:
        return (float("nan"), float("nan"))
    idx = rng.integers(0, values.size, size=(n_boot, values.size))
    means = values[idx].mean(axis=1)
    lo = float(np.percentile(means, 100 * (1 - level) / 2))
    hi = float(np.percentile(means, 100 * (1 + level) / 2))
    return lo, hi


def aggregate_rows(rows, n_boot: int = 1000, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    succ = np.array([r.outcome == "success" for r in rows], dtype=float)
    times = np.array([r.completion_time for r in rows if r.outcome == "success"])
    mean_dev = np.array([r.mean_deviation for r in rows])
    mean_g = np.array([r.mean_g for r in rows])
    frac_tr = np.array([r.frac_transparent for r in rows])
    sr_lo, sr_hi = bootstrap_interval(succ, n_boot, rng)
    return {
        "episodes": len(rows),
        "success_count": int(succ.sum()),
        "failure_count": int(len(rows) - succ.sum()),
        "success_rate": float(succ.mean()) if len(rows) else float("nan"),
        "success_rate_ci95": [sr_lo, sr_hi],
        # completion time excludes failures
        "completion_time_mean": float(times.mean()) if times.size else float("nan"),
        "completion_time_std": float(times.std()) if times.size else float("nan"),
        "mean_deviation": float(mean_dev.mean()) if len(rows) else float("nan"),
        "max_deviation": float(max((r.max_deviation for r in rows), default=float("nan"))),
        "mean_g": float(mean_g.mean()) if len(rows) else float("nan"),
        "frac_transparent": float(frac_tr.mean()) if len(rows) else float("nan"),
    }


def run_episode(
    spec: ExperimentSpec,
    episode_seed: int,
    critic=None,
    actor=None,
    collect_frames: bool = False,
):
    """One closed-loop episode; returns (EpisodeRow, frames or None)."""
    world = World(spec.world)
    loop = TeleopLoop(
        world,
        spec.assist,
        mode=spec.mode,
        critic=critic,
        actor=actor,
        episode_seed=episode_seed,
    )
    operator = make_operator(spec.operator, spec.world, episode_seed)
    deviations = []
    gs = []
    frames = [] if collect_frames else None
    while True:
        intent = operator.intent(loop.obs)
        result = loop.tick_once(intent)
        frame = result.frame
        intended = intended_follower_command(loop, intent)
        deviations.append(float(np.linalg.norm(frame.executed - intended)))
        gs.append(frame.g)
        if collect_frames:
            frames.append(frame)
        if result.terminal:
            break
    outcome = "success" if result.success else "failure"
    gs = np.asarray(gs)
    deviations = np.asarray(deviations)
    row = EpisodeRow(
        seed=episode_seed,
        outcome=outcome,
        completion_time=loop.state.t if outcome == "success" else float("nan"),
        steps=loop.tick,
        mean_deviation=float(deviations.mean()),
        max_deviation=float(deviations.max()),
        mean_g=float(gs.mean()),
        frac_transparent=float(np.mean(gs <= 0.05)),
    )
    return row, frames


def run_experiment(spec: ExperimentSpec, critic=None, actor=None) -> ExperimentReport:
    spec.validate()
    if spec.mode == "value" and (critic is None or actor is None):
        raise ValueError("value-guided mode needs critic and actor checkpoints")
    if spec.mode == "static" and actor is None:
        raise ValueError("static-gain mode needs an actor checkpoint")
    if critic is not None:
        _check_dims(spec, critic, "critic")
    if actor is not None and spec.mode != "off":
        _check_dims(spec, actor, "actor")
    rows = []
    for seed in spec.episode_seeds():
        row, _ = run_episode(spec, seed, critic=critic, actor=actor)
        rows.append(row)
    report = ExperimentReport(
        spec_summary={
            "operator_kind": spec.operator.kind,
            "mode": spec.mode,
            "episodes": spec.episodes,
            "base_seed": spec.base_seed,
            "epsilon": spec.epsilon,
        },
        rows=rows,
        aggregates={},
    )
    report.aggregates = report.recompute_aggregates()
    return report


def _check_dims(spec: ExperimentSpec, model, name: str) -> None:
    from .env import action_dim, observation_dim

    obs_dim = observation_dim(spec.world)
    act_dim = action_dim(spec.world)
    if model.obs_dim != obs_dim or getattr(model, "act_dim", act_dim) != act_dim:
        raise ValueError(
            f"{name} checkpoint dims ({model.obs_dim}, {getattr(model, 'act_dim', '?')})"
            f" do not match world ({obs_dim}, {act_dim})"
        )
    if abs(model.command_max - spec.world.command_max) > 1e-9:
        raise ValueError(
            f"{name} command_max {model.command_max} != world {spec.world.command_max}"
        )


def score_separation(dataset: TransitionDataset, critic, horizon: int | None = None):
    """Class-conditional normalized scores, failure-head AUC, and the mean
    normalized-score trace aligned to the failure latch."""
    if not critic.calibrated:
        raise ValueError("critic must be calibrated")
    h = horizon if horizon is not None else critic.horizon
    q_tilde = critic.normalize(_chunked(critic.q_value, dataset.s, dataset.a))
    p_hat = _chunked(critic.fail_prob, dataset.s, dataset.a)
    succ_rows = ~dataset.from_failure
    tail_rows = dataset.y_fail > 0.5
    auc = _rank_auc(dataset.y_fail > 0.5, p_hat)
    aligned = _latch_aligned_traces(dataset, q_tilde, window=4 * h)
    return {
        "mean_q_tilde_success": float(q_tilde[succ_rows].mean()),
        "mean_q_tilde_failure_tail": float(q_tilde[tail_rows].mean())
        if tail_rows.any()
        else float("nan"),
        "auc_failure_head": auc,
        "n_success_rows": int(succ_rows.sum()),
        "n_failure_tail_rows": int(tail_rows.sum()),
        "latch_aligned_q_tilde": aligned,
    }


def _chunked(fn, s, a, chunk: int = 8192):
    return np.concatenate(
        [fn(s[i : i + chunk], a[i : i + chunk]) for i in range(0, s.shape[0], chunk)]
    )


def _rank_auc(labels: np.ndarray, scores: np.ndarray) -> float:
    labels = np.asarray(labels, dtype=bool)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size)
    ranks[order] = np.arange(1, scores.size + 1)
    # midranks for ties
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        if j > i:
            ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def _latch_aligned_traces(dataset, q_tilde, window: int):
    """Mean normalized score over the last ``window`` steps before failure,
    indexed by steps-to-latch (1 = final step)."""
    sums = np.zeros(window)
    counts = np.zeros(window)
    for k, traj in enumerate(dataset.trajectories):
        if traj.outcome != "failure":
            continue
        rows = np.flatnonzero(dataset.traj_id == k)
        T = rows.size
        for back in range(1, min(window, T) + 1):
            sums[back - 1] += q_tilde[rows[T - back]]
            counts[back - 1] += 1
    with np.errstate(invalid="ignore"):
        mean = np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)
    return {"steps_before_latch": list(range(1, window + 1)), "mean_q_tilde": mean.tolist()}


def render_report(reports: dict, out_dir, separation: dict | None = None) -> list:
    """Write machine-readable rows, a text table, and plots; returns paths.

    Deterministic: identical reports produce byte-identical files.
    """
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []

    rows_path = out / "episodes.jsonl"
    with open(rows_path, "w", encoding="ascii") as f:
        for mode, report in sorted(reports.items()):
            for row in report.rows:
                rec = {"mode": mode, **row.to_dict()}
                f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")
    written.append(rows_path)

    summary_path = out / "summary.json"
    summary = {
        mode: {"spec": r.spec_summary, "aggregates": r.aggregates}
        for mode, r in sorted(reports.items())
    }
    if separation is not None:
        summary["score_separation"] = {
            k: v for k, v in separation.items() if k != "latch_aligned_q_tilde"
        }
    summary_path.write_text(
        json.dumps(summary, sort_keys=True, indent=2) + "\n", encoding="ascii"
    )
    written.append(summary_path)

    table_path = out / "summary.txt"
    table_path.write_text(_format_table(reports), encoding="ascii")
    written.append(table_path)

    written.extend(plots.render_all(reports, separation, out))
    return written


def _format_table(reports: dict) -> str:
    header = (
        f"{'mode':<10} {'episodes':>8} {'success':>8} {'rate':>7} "
        f"{'ci95':>17} {'time[s]':>8} {'mean_dev':>9} {'mean_g':>7}\n"
    )
    lines = [header, "-" * len(header) + "\n"]
    for mode, report in sorted(reports.items()):
        agg = report.aggregates
        lo, hi = agg["success_rate_ci95"]
        lines.append(
            f"{mode:<10} {agg['episodes']:>8} {agg['success_count']:>8} "
            f"{agg['success_rate']:>7.3f} {f'[{lo:.3f},{hi:.3f}]':>17} "
            f"{agg['completion_time_mean']:>8.2f} {agg['mean_deviation']:>9.4f} "
            f"{agg['mean_g']:>7.3f}\n"
        )
    return "".join(lines)
