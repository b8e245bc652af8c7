"""Conservative success score: trunk + Q head + short-horizon failure head.

The critic regresses the outcome-broadcast discounted return with a SARSA
style backup (the dataset's own next action, never a max), penalizes high
values on out-of-distribution actions via a log-mean-exp term over uniform
action samples, and trains an auxiliary head to flag failure latches within
the next ``horizon`` steps.  After training the raw score is normalized to
[0, 1] against empirical percentiles and a feasibility threshold is set from
the success-trajectory score distribution.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .data import TransitionBatch, TransitionDataset, sample_batch
from .nn import (
    Mlp,
    adam_init,
    adam_step,
    backward,
    clone_mlp,
    forward,
    init_mlp,
    load_arrays,
    mlp_from_arrays,
    mlp_meta,
    mlp_to_arrays,
    save_arrays,
    zeros_like_params,
)

log = logging.getLogger("teleguard.critic")

# Normalization percentiles over the training scores and the feasibility
# threshold percentile over success-pair scores.
Q_RANGE_PERCENTILES = (1.0, 99.0)
TAU_PERCENTILE = 5.0


@dataclass(frozen=True)
class CriticConfig:
    gamma: float = 0.8
    alpha: float = 5.0
    lambda_fail: float = 1.0
    horizon: int = 10
    target_period: int = 200
    num_ood_samples: int = 10
    learning_rate: float = 3e-4
    batch_size: int = 256
    steps: int = 12000
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0

    def validate(self) -> None:
        if not 0.0 < self.gamma < 1.0:
            raise ValueError("gamma must be in (0, 1)")
        if self.alpha < 0.0 or self.lambda_fail < 0.0:
            raise ValueError("alpha and lambda_fail must be >= 0")
        if self.target_period < 1:
            raise ValueError("target_period must be >= 1")
        if self.num_ood_samples < 1:
            raise ValueError("num_ood_samples must be >= 1")
        if self.horizon < 0:
            raise ValueError("horizon must be >= 0")


@dataclass
class CriticModel:
    """Live networks, hard target copy, and calibration bounds."""

    trunk: Mlp
    q_head: Mlp
    fail_head: Mlp
    target_trunk: Mlp
    target_q_head: Mlp
    obs_dim: int
    act_dim: int
    command_max: float
    gamma: float
    horizon: int
    q_min: float | None = None
    q_max: float | None = None
    tau: float | None = None
    meta: dict = field(default_factory=dict)

    @property
    def calibrated(self) -> bool:
        return self.q_min is not None and self.q_max is not None and self.tau is not None

    def parameters(self) -> list:
        return self.trunk.parameters() + self.q_head.parameters() + self.fail_head.parameters()

    def _join(self, s, a) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=float))
        a = np.atleast_2d(np.asarray(a, dtype=float))
        return np.concatenate([s, a], axis=1)

    def q_value(self, s, a, target: bool = False) -> np.ndarray:
        trunk = self.target_trunk if target else self.trunk
        head = self.target_q_head if target else self.q_head
        feats, _ = forward(trunk, self._join(s, a))
        q, _ = forward(head, feats)
        return q[:, 0]

    def q_and_action_grad(self, s, a):
        """Q values plus the exact gradient of Q w.r.t. the action input."""
        x = self._join(s, a)
        feats, trunk_cache = forward(self.trunk, x)
        q, q_cache = forward(self.q_head, feats)
        _, d_feats = backward(self.q_head, q_cache, np.ones_like(q))
        _, dx = backward(self.trunk, trunk_cache, d_feats)
        return q[:, 0], dx[:, self.obs_dim:]

    def fail_logit(self, s, a) -> np.ndarray:
        feats, _ = forward(self.trunk, self._join(s, a))
        z, _ = forward(self.fail_head, feats)
        return z[:, 0]

    def fail_prob(self, s, a) -> np.ndarray:
        return _sigmoid(self.fail_logit(s, a))

    def normalize(self, q_raw: np.ndarray) -> np.ndarray:
        if not self.calibrated:
            raise RuntimeError("critic not calibrated; train or load a full checkpoint")
        span = self.q_max - self.q_min
        return np.clip((q_raw - self.q_min) / span, 0.0, 1.0)

    def score(self, s, a):
        """(raw Q, normalized Q in [0,1], failure probability)."""
        q_raw = self.q_value(s, a)
        return q_raw, self.normalize(q_raw), self.fail_prob(s, a)

    def feasible(self, s, a) -> np.ndarray:
        if not self.calibrated:
            raise RuntimeError("critic not calibrated; train or load a full checkpoint")
        return self.q_value(s, a) >= self.tau

    def sync_target(self) -> None:
        self.target_trunk = clone_mlp(self.trunk)
        self.target_q_head = clone_mlp(self.q_head)

    def save(self, path) -> None:
        arrays = {}
        arrays.update(mlp_to_arrays("trunk", self.trunk))
        arrays.update(mlp_to_arrays("q_head", self.q_head))
        arrays.update(mlp_to_arrays("fail_head", self.fail_head))
        arrays.update(mlp_to_arrays("target_trunk", self.target_trunk))
        arrays.update(mlp_to_arrays("target_q_head", self.target_q_head))
        meta = {
            "kind": "critic",
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "command_max": self.command_max,
            "nets": {
                "trunk": mlp_meta(self.trunk),
                "q_head": mlp_meta(self.q_head),
                "fail_head": mlp_meta(self.fail_head),
            },
            "calibration": {
                "q_min": self.q_min,
                "q_max": self.q_max,
                "tau": self.tau,
                "horizon": self.horizon,
                "gamma": self.gamma,
            },
            "extra": self.meta,
        }
        save_arrays(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "CriticModel":
        meta, arrays = load_arrays(path)
        if meta.get("kind") != "critic":
            raise ValueError(f"checkpoint at {path} is not a critic")
        nets = meta["nets"]
        calib = meta["calibration"]
        return cls(
            trunk=mlp_from_arrays("trunk", nets["trunk"], arrays),
            q_head=mlp_from_arrays("q_head", nets["q_head"], arrays),
            fail_head=mlp_from_arrays("fail_head", nets["fail_head"], arrays),
            target_trunk=mlp_from_arrays("target_trunk", nets["trunk"], arrays),
            target_q_head=mlp_from_arrays("target_q_head", nets["q_head"], arrays),
            obs_dim=meta["obs_dim"],
            act_dim=meta["act_dim"],
            command_max=meta["command_max"],
            gamma=calib["gamma"],
            horizon=calib["horizon"],
            q_min=calib["q_min"],
            q_max=calib["q_max"],
            tau=calib["tau"],
            meta=meta.get("extra", {}),
        )


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z, dtype=float)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def init_critic(
    obs_dim: int,
    act_dim: int,
    command_max: float,
    config: CriticConfig,
    rng: np.random.Generator,
) -> CriticModel:
    sizes = (obs_dim + act_dim, *config.hidden)
    trunk = init_mlp(sizes, ("tanh",) * len(config.hidden), rng)
    q_head = init_mlp((config.hidden[-1], 1), ("identity",), rng)
    fail_head = init_mlp((config.hidden[-1], 1), ("identity",), rng)
    return CriticModel(
        trunk=trunk,
        q_head=q_head,
        fail_head=fail_head,
        target_trunk=clone_mlp(trunk),
        target_q_head=clone_mlp(q_head),
        obs_dim=obs_dim,
        act_dim=act_dim,
        command_max=command_max,
        gamma=config.gamma,
        horizon=config.horizon,
    )


def td_target(model: CriticModel, batch: TransitionBatch) -> np.ndarray:
    """y = r + gamma * Q_target(s', a'_data) for non-terminal rows, else r.

    The backup uses the dataset's own next action: no max over actions, so
    nothing out-of-distribution ever enters the target.
    """
    y = batch.r.copy()
    live = ~batch.terminal
    if np.any(live):
        q_next = model.q_value(batch.s2[live], batch.a2[live], target=True)
        y[live] += model.gamma * q_next
    return y


def _q_forward_caches(model: CriticModel, x: np.ndarray):
    feats, trunk_cache = forward(model.trunk, x)
    q, q_cache = forward(model.q_head, feats)
    return q, feats, trunk_cache, q_cache


def bellman_loss_and_grads(model: CriticModel, batch: TransitionBatch):
    """0.5-weighted mean squared Bellman residual against the target net."""
    y = td_target(model, batch)
    x = model._join(batch.s, batch.a)
    q, feats, trunk_cache, q_cache = _q_forward_caches(model, x)
    resid = q[:, 0] - y
    loss = 0.5 * float(np.mean(resid**2))
    dq = (resid / resid.size)[:, None]
    gq, d_feats = backward(model.q_head, q_cache, dq)
    gt, _ = backward(model.trunk, trunk_cache, d_feats)
    grads = gt.as_list() + gq.as_list() + zeros_like_params(model.fail_head.parameters())
    return loss, grads


def cql_penalty(
    model: CriticModel,
    batch: TransitionBatch,
    num_ood: int,
    rng: np.random.Generator | None = None,
    ood_actions: np.ndarray | None = None,
):
    """Conservative regularizer and its gradients.

    The continuous-action log-sum-exp is estimated by log-mean-exp over
    ``num_ood`` uniform samples from the command box together with the batch
    action itself; subtracting Q on the batch action gives a penalty that is
    exactly zero for an action-constant critic.  ``ood_actions`` may be
    passed explicitly (shape (B, num_ood, act_dim)) for reproducible checks.
    """
    B = batch.size
    A = model.act_dim
    if ood_actions is None:
        if rng is None:
            raise ValueError("need rng or explicit ood_actions")
        ood_actions = rng.uniform(
            -model.command_max, model.command_max, size=(B, num_ood, A)
        )
    M = ood_actions.shape[1]
    actions = np.concatenate([batch.a[:, None, :], ood_actions], axis=1)  # (B, M+1, A)
    s_rep = np.repeat(batch.s, M + 1, axis=0)
    x = np.concatenate([s_rep, actions.reshape(B * (M + 1), A)], axis=1)
    q, feats, trunk_cache, q_cache = _q_forward_caches(model, x)
    q_all = q[:, 0].reshape(B, M + 1)
    q_max = q_all.max(axis=1, keepdims=True)
    w = np.exp(q_all - q_max)
    w_sum = w.sum(axis=1, keepdims=True)
    logmeanexp = q_max[:, 0] + np.log(w_sum[:, 0] / (M + 1))
    penalty = float(np.mean(logmeanexp - q_all[:, 0]))
    dq_all = w / w_sum / B
    dq_all[:, 0] -= 1.0 / B
    gq, d_feats = backward(model.q_head, q_cache, dq_all.reshape(B * (M + 1), 1))
    gt, _ = backward(model.trunk, trunk_cache, d_feats)
    grads = gt.as_list() + gq.as_list() + zeros_like_params(model.fail_head.parameters())
    return penalty, grads


def failure_head_loss(model: CriticModel, batch: TransitionBatch):
    """Mean binary cross-entropy of the short-horizon failure head."""
    x = model._join(batch.s, batch.a)
    feats, trunk_cache = forward(model.trunk, x)
    z, f_cache = forward(model.fail_head, feats)
    z1 = z[:, 0]
    y = batch.y_fail
    # stable BCE from logits: softplus(z) - y*z
    loss = float(np.mean(np.logaddexp(0.0, z1) - y * z1))
    dz = ((_sigmoid(z1) - y) / z1.size)[:, None]
    gf, d_feats = backward(model.fail_head, f_cache, dz)
    gt, _ = backward(model.trunk, trunk_cache, d_feats)
    grads = (
        gt.as_list()
        + zeros_like_params(model.q_head.parameters())
        + gf.as_list()
    )
    return loss, grads


def critic_loss_and_grads(
    model: CriticModel,
    batch: TransitionBatch,
    config: CriticConfig,
    ood_actions: np.ndarray,
):
    """Combined loss with fixed OOD samples: the fused training step.

    Computes the same quantities as the three standalone losses (checked
    against them in tests) with a single trunk forward/backward over the
    concatenated data and OOD rows.
    """
    B = batch.size
    M = ood_actions.shape[1]
    y_td = td_target(model, batch)

    x_data = model._join(batch.s, batch.a)
    s_rep = np.repeat(batch.s, M, axis=0)
    x_ood = np.concatenate(
        [s_rep, ood_actions.reshape(B * M, model.act_dim)], axis=1
    )
    x = np.concatenate([x_data, x_ood], axis=0)
    feats, trunk_cache = forward(model.trunk, x)
    q, q_cache = forward(model.q_head, feats)
    z, f_cache = forward(model.fail_head, feats[:B])

    q_data = q[:B, 0]
    q_all = np.concatenate([q_data[:, None], q[B:, 0].reshape(B, M)], axis=1)
    resid = q_data - y_td
    bell = 0.5 * float(np.mean(resid**2))

    q_peak = q_all.max(axis=1, keepdims=True)
    w = np.exp(q_all - q_peak)
    w_sum = w.sum(axis=1, keepdims=True)
    logmeanexp = q_peak[:, 0] + np.log(w_sum[:, 0] / (M + 1))
    pen = float(np.mean(logmeanexp - q_data))

    z1 = z[:, 0]
    fail = float(np.mean(np.logaddexp(0.0, z1) - batch.y_fail * z1))

    dq_all = config.alpha * (w / w_sum) / B
    dq_all[:, 0] += (resid - config.alpha) / B
    dq = np.concatenate([dq_all[:, :1], dq_all[:, 1:].reshape(B * M, 1)], axis=0)
    gq, d_feats = backward(model.q_head, q_cache, dq)
    dz = (config.lambda_fail * (_sigmoid(z1) - batch.y_fail) / B)[:, None]
    gf, d_feats_fail = backward(model.fail_head, f_cache, dz)
    d_feats[:B] += d_feats_fail
    gt, _ = backward(model.trunk, trunk_cache, d_feats)

    total = bell + config.alpha * pen + config.lambda_fail * fail
    grads = gt.as_list() + gq.as_list() + gf.as_list()
    parts = {"bellman": bell, "cql_penalty": pen, "fail_bce": fail, "total": total}
    return total, grads, parts


def calibrate(model: CriticModel, dataset: TransitionDataset) -> None:
    """Set normalization bounds and the feasibility threshold from data."""
    q_all = _chunked_q(model, dataset.s, dataset.a)
    lo, hi = Q_RANGE_PERCENTILES
    q_min = float(np.percentile(q_all, lo))
    q_max = float(np.percentile(q_all, hi))
    if q_max - q_min < 1e-9:
        q_max = q_min + 1e-9
    succ = ~dataset.from_failure
    if np.any(succ):
        tau = float(np.percentile(q_all[succ], TAU_PERCENTILE))
    else:
        tau = q_max
    model.q_min, model.q_max, model.tau = q_min, q_max, float(np.clip(tau, q_min, q_max))


def _chunked_q(model: CriticModel, s: np.ndarray, a: np.ndarray, chunk: int = 8192):
    parts = [
        model.q_value(s[i : i + chunk], a[i : i + chunk])
        for i in range(0, s.shape[0], chunk)
    ]
    return np.concatenate(parts)


def train_critic(dataset: TransitionDataset, config: CriticConfig, history: list | None = None) -> CriticModel:
    """Algorithm: sample batch, TD + conservatism + failure-BCE step, hard
    target copy every ``target_period`` steps, then percentile calibration."""
    config.validate()
    if not np.any(dataset.from_failure) or not np.any(~dataset.from_failure):
        warnings.warn(
            "dataset contains a single outcome class; calibration will be degenerate",
            stacklevel=2,
        )
    meta = dataset.trajectories[0].meta if dataset.trajectories else {}
    if "command_max" in meta:
        command_max = float(meta["command_max"])
    else:
        command_max = float(max(np.abs(dataset.a).max(), 1e-6))
        warnings.warn(
            f"trajectories carry no command_max; using max |action| = {command_max:.4g}",
            stacklevel=2,
        )
    rng = np.random.default_rng(config.seed)
    model = init_critic(dataset.obs_dim, dataset.act_dim, command_max, config, rng)
    params = model.parameters()
    opt = adam_init(params, config.learning_rate)
    for it in range(1, config.steps + 1):
        batch = sample_batch(dataset, config.batch_size, rng)
        ood = rng.uniform(
            -command_max, command_max,
            size=(batch.size, config.num_ood_samples, model.act_dim),
        )
        total, grads, parts = critic_loss_and_grads(model, batch, config, ood)
        if not np.isfinite(total):
            raise RuntimeError(f"non-finite critic loss at step {it}: {parts}")
        adam_step(params, grads, opt)
        if it % config.target_period == 0:
            model.sync_target()
        if history is not None and (it % 200 == 0 or it == 1):
            history.append({"step": it, **parts})
        if it % 2000 == 0:
            log.info("critic step %d: %s", it, {k: round(v, 4) for k, v in parts.items()})
    calibrate(model, dataset)
    return model
