"""Trajectory recording, outcome labeling, serialization and batching.

The offline dataset is a union of successful and failed episodes.  The
outcome label is broadcast to every step as a +1/-1 reward, and each step
additionally carries a short-horizon failure flag: 1 exactly when the
failure latch occurs within the next ``horizon`` steps of that trajectory.

File format (stream-appendable, bit-exact): one JSON header line with a
schema version, then one JSON line per trajectory whose step arrays are
base64-encoded little-endian fixed-width blocks (float64 for observations,
actions and rewards; uint8 for failure flags).
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field

import numpy as np

from .env import World, WorldConfig, observation_stream
from .operators import Operator

FORMAT_NAME = "teleguard-dataset"
FORMAT_VERSION = 1
DEFAULT_FAILURE_HORIZON = 10


class DatasetFormatError(ValueError):
    """Corrupt, truncated or wrong-version dataset file."""


def broadcast_rewards(outcome: str, length: int) -> np.ndarray:
    if outcome == "success":
        return np.ones(length)
    if outcome == "failure":
        return -np.ones(length)
    raise ValueError(f"unterminated episode: outcome {outcome!r}")


def failure_labels(outcome: str, length: int, horizon: int) -> np.ndarray:
    """1 on step t iff the failure latch occurs within the next horizon steps."""
    y = np.zeros(length, dtype=np.uint8)
    if outcome == "failure" and horizon > 0:
        y[max(0, length - horizon):] = 1
    return y


@dataclass(frozen=True)
class Trajectory:
    """One terminated episode.

    ``observations`` has ``T + 1`` rows (includes the state after the final
    transition); ``actions``, ``rewards`` and ``fail_labels`` have ``T``.
    """

    observations: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    fail_labels: np.ndarray
    outcome: str
    horizon: int
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        T = self.actions.shape[0]
        if self.observations.shape[0] != T + 1:
            raise ValueError("observations must have one more row than actions")
        if self.rewards.shape[0] != T or self.fail_labels.shape[0] != T:
            raise ValueError("rewards/fail_labels length mismatch")
        if self.outcome not in ("success", "failure"):
            raise ValueError(f"unterminated episode: outcome {self.outcome!r}")
        expected = broadcast_rewards(self.outcome, T)
        if not np.array_equal(self.rewards, expected):
            raise ValueError("rewards violate the outcome-broadcast rule")

    @property
    def length(self) -> int:
        return self.actions.shape[0]


def record_episode(
    world: World,
    operator: Operator,
    episode_seed: int,
    horizon: int = DEFAULT_FAILURE_HORIZON,
) -> Trajectory:
    """Run one unassisted episode to a latch and label it.

    Data collection applies no guidance: the executed command is the
    operator's raw intent.
    """
    cfg = world.config
    state = world.reset(episode_seed)
    obs_rng = observation_stream(cfg, episode_seed)
    obs_rows = []
    act_rows = []
    obs = world.observe(state, obs_rng)
    while not state.terminal:
        cmd = operator.command(obs)
        state, _ = world.step(state, cmd)
        obs_rows.append(obs.vector())
        act_rows.append(cmd.ravel().copy())
        obs = world.observe(state, obs_rng)
    obs_rows.append(obs.vector())
    outcome = "success" if state.latched_success else "failure"
    T = len(act_rows)
    return Trajectory(
        observations=np.asarray(obs_rows),
        actions=np.asarray(act_rows),
        rewards=broadcast_rewards(outcome, T),
        fail_labels=failure_labels(outcome, T, horizon),
        outcome=outcome,
        horizon=horizon,
        meta={
            "episode_seed": episode_seed,
            "operator_kind": operator.config.kind,
            "operator_seed": operator.config.seed,
            "world_seed": cfg.seed,
            "dt": cfg.dt,
            "command_max": cfg.command_max,
            "length": T,
        },
    )


def _encode(a: np.ndarray, dtype: str) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype=dtype).tobytes()).decode()


def _decode(text: str, dtype: str, shape: tuple[int, ...]) -> np.ndarray:
    raw = base64.b64decode(text.encode(), validate=True)
    arr = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<"))
    expected = int(np.prod(shape)) if shape else arr.size
    if arr.size != expected:
        raise DatasetFormatError(f"array block has {arr.size} items, expected {expected}")
    return arr.reshape(shape).astype(arr.dtype.newbyteorder("="))


def save_trajectories(path, trajectories) -> None:
    with open(path, "w", encoding="ascii") as f:
        header = {"format": FORMAT_NAME, "version": FORMAT_VERSION}
        f.write(json.dumps(header, sort_keys=True, separators=(",", ":")) + "\n")
        for traj in trajectories:
            T = traj.length
            rec = {
                "outcome": traj.outcome,
                "horizon": traj.horizon,
                "T": T,
                "obs_dim": int(traj.observations.shape[1]),
                "act_dim": int(traj.actions.shape[1]),
                "meta": traj.meta,
                "observations": _encode(traj.observations, "<f8"),
                "actions": _encode(traj.actions, "<f8"),
                "rewards": _encode(traj.rewards, "<f8"),
                "fail_labels": _encode(traj.fail_labels, "u1"),
            }
            f.write(json.dumps(rec, sort_keys=True, separators=(",", ":")) + "\n")


def load_trajectories(path) -> list[Trajectory]:
    with open(path, "r", encoding="ascii") as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetFormatError("empty file, missing header")
    try:
        header = json.loads(lines[0])
    except json.JSONDecodeError as e:
        raise DatasetFormatError(f"unreadable header: {e}") from e
    if header.get("format") != FORMAT_NAME:
        raise DatasetFormatError(f"not a {FORMAT_NAME} file")
    if header.get("version") != FORMAT_VERSION:
        raise DatasetFormatError(
            f"unsupported version {header.get('version')!r}, expected {FORMAT_VERSION}"
        )
    out = []
    for i, line in enumerate(lines[1:], start=2):
        try:
            rec = json.loads(line)
            T = rec["T"]
            traj = Trajectory(
                observations=_decode(rec["observations"], "f8", (T + 1, rec["obs_dim"])),
                actions=_decode(rec["actions"], "f8", (T, rec["act_dim"])),
                rewards=_decode(rec["rewards"], "f8", (T,)),
                fail_labels=_decode(rec["fail_labels"], "u1", (T,)),
                outcome=rec["outcome"],
                horizon=rec["horizon"],
                meta=rec["meta"],
            )
        except DatasetFormatError:
            raise
        except (json.JSONDecodeError, KeyError, ValueError, TypeError) as e:
            raise DatasetFormatError(f"corrupt trajectory record at line {i}: {e}") from e
        out.append(traj)
    return out


@dataclass(frozen=True)
class TransitionBatch:
    s: np.ndarray
    a: np.ndarray
    r: np.ndarray
    s2: np.ndarray
    a2: np.ndarray
    y_fail: np.ndarray
    terminal: np.ndarray

    @property
    def size(self) -> int:
        return self.s.shape[0]


class TransitionDataset:
    """Flattened transition table over a list of trajectories.

    ``a2`` is the dataset's own next action (the action the data takes at
    ``s2``); zero and flagged terminal on each trajectory's last row.
    """

    def __init__(self, trajectories, horizon: int | None = None):
        trajectories = list(trajectories)
        if not trajectories:
            raise ValueError("dataset needs at least one trajectory")
        s, a, r, s2, a2, y, term, fail_row, traj_id = [], [], [], [], [], [], [], [], []
        for k, traj in enumerate(trajectories):
            T = traj.length
            labels = (
                traj.fail_labels
                if horizon is None or horizon == traj.horizon
                else failure_labels(traj.outcome, T, horizon)
            )
            s.append(traj.observations[:-1])
            s2.append(traj.observations[1:])
            a.append(traj.actions)
            nxt = np.zeros_like(traj.actions)
            nxt[:-1] = traj.actions[1:]
            a2.append(nxt)
            r.append(traj.rewards)
            y.append(labels.astype(float))
            t = np.zeros(T, dtype=bool)
            t[-1] = True
            term.append(t)
            fail_row.append(np.full(T, traj.outcome == "failure", dtype=bool))
            traj_id.append(np.full(T, k))
        self.trajectories = trajectories
        self.horizon = horizon if horizon is not None else trajectories[0].horizon
        self.s = np.concatenate(s)
        self.a = np.concatenate(a)
        self.r = np.concatenate(r)
        self.s2 = np.concatenate(s2)
        self.a2 = np.concatenate(a2)
        self.y_fail = np.concatenate(y)
        self.terminal = np.concatenate(term)
        self.from_failure = np.concatenate(fail_row)
        self.traj_id = np.concatenate(traj_id)

    def __len__(self) -> int:
        return self.s.shape[0]

    @property
    def obs_dim(self) -> int:
        return self.s.shape[1]

    @property
    def act_dim(self) -> int:
        return self.a.shape[1]

    def rows(self, idx) -> TransitionBatch:
        return TransitionBatch(
            s=self.s[idx],
            a=self.a[idx],
            r=self.r[idx],
            s2=self.s2[idx],
            a2=self.a2[idx],
            y_fail=self.y_fail[idx],
            terminal=self.terminal[idx],
        )

    def split(self, holdout_fraction: float, rng: np.random.Generator):
        """Trajectory-level split into (train, holdout)."""
        n = len(self.trajectories)
        n_hold = max(1, int(round(holdout_fraction * n)))
        if n_hold >= n:
            raise ValueError("holdout fraction leaves no training trajectories")
        perm = rng.permutation(n)
        hold = set(perm[:n_hold].tolist())
        train = [t for i, t in enumerate(self.trajectories) if i not in hold]
        held = [t for i, t in enumerate(self.trajectories) if i in hold]
        return (
            TransitionDataset(train, horizon=self.horizon),
            TransitionDataset(held, horizon=self.horizon),
        )


def sample_batch(
    dataset: TransitionDataset,
    batch_size: int,
    rng: np.random.Generator,
    balanced: bool = False,
    replace: bool = True,
) -> TransitionBatch:
    """Seeded-deterministic batch; uniform over transitions by default.

    Balanced mode draws ceil(B/2) rows from failure trajectories (with
    replacement within the class) to counter rare-failure datasets.
    """
    n = len(dataset)
    if not replace and batch_size > n:
        raise ValueError(f"cannot draw {batch_size} rows from {n} without replacement")
    if balanced:
        fail_idx = np.flatnonzero(dataset.from_failure)
        succ_idx = np.flatnonzero(~dataset.from_failure)
        if fail_idx.size == 0 or succ_idx.size == 0:
            raise ValueError("balanced sampling needs both outcome classes")
        n_fail = -(-batch_size // 2)  # ceil
        idx = np.concatenate(
            [
                rng.choice(fail_idx, size=n_fail, replace=True),
                rng.choice(succ_idx, size=batch_size - n_fail, replace=True),
            ]
        )
        return dataset.rows(idx)
    idx = rng.choice(n, size=batch_size, replace=replace)
    return dataset.rows(idx)


def class_counts(trajectories) -> dict:
    trajectories = list(trajectories)
    n_succ = sum(1 for t in trajectories if t.outcome == "success")
    return {"success": n_succ, "failure": len(trajectories) - n_succ}
