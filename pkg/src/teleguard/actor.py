"""Guidance actor: proposes corrective commands that ascend the frozen
success score while staying anchored to the operator data.

Loss per batch: mean(-Q(s, pi(s)) + lambda_anchor * ||pi(s) - a_data||^2).
The critic is never updated; its action-input gradient is what steers the
policy.  Outputs are tanh-squashed into the command box.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .data import TransitionDataset, sample_batch
from .nn import (
    Mlp,
    adam_init,
    adam_step,
    backward,
    forward,
    init_mlp,
    load_arrays,
    mlp_from_arrays,
    mlp_meta,
    mlp_to_arrays,
    save_arrays,
)

log = logging.getLogger("teleguard.actor")


@dataclass(frozen=True)
class ActorConfig:
    lambda_anchor: float = 0.1
    learning_rate: float = 3e-4
    batch_size: int = 256
    steps: int = 6000
    hidden: tuple[int, ...] = (64, 64)
    seed: int = 0

    def validate(self) -> None:
        if self.lambda_anchor < 0.0:
            raise ValueError("lambda_anchor must be >= 0")


@dataclass
class ActorModel:
    net: Mlp
    obs_dim: int
    act_dim: int
    command_max: float
    meta: dict = field(default_factory=dict)

    def assist_action(self, s) -> np.ndarray:
        """Bounded suggestion: command_max * tanh(net(s))."""
        s = np.atleast_2d(np.asarray(s, dtype=float))
        raw, _ = forward(self.net, s)
        return self.command_max * np.tanh(raw)

    def _forward_with_cache(self, s):
        raw, cache = forward(self.net, s)
        squashed = np.tanh(raw)
        return self.command_max * squashed, squashed, cache

    def parameters(self) -> list:
        return self.net.parameters()

    def save(self, path) -> None:
        meta = {
            "kind": "actor",
            "obs_dim": self.obs_dim,
            "act_dim": self.act_dim,
            "command_max": self.command_max,
            "nets": {"net": mlp_meta(self.net)},
            "extra": self.meta,
        }
        save_arrays(path, meta, mlp_to_arrays("net", self.net))

    @classmethod
    def load(cls, path) -> "ActorModel":
        meta, arrays = load_arrays(path)
        if meta.get("kind") != "actor":
            raise ValueError(f"checkpoint at {path} is not an actor")
        return cls(
            net=mlp_from_arrays("net", meta["nets"]["net"], arrays),
            obs_dim=meta["obs_dim"],
            act_dim=meta["act_dim"],
            command_max=meta["command_max"],
            meta=meta.get("extra", {}),
        )


def init_actor(
    obs_dim: int,
    act_dim: int,
    command_max: float,
    config: ActorConfig,
    rng: np.random.Generator,
) -> ActorModel:
    sizes = (obs_dim, *config.hidden, act_dim)
    acts = ("tanh",) * len(config.hidden) + ("identity",)
    return ActorModel(
        net=init_mlp(sizes, acts, rng),
        obs_dim=obs_dim,
        act_dim=act_dim,
        command_max=command_max,
    )


def actor_loss_and_grads(model: ActorModel, critic, s: np.ndarray, a_tele: np.ndarray,
                         lambda_anchor: float):
    """Loss, parameter gradients, and parts for one batch.

    ``critic`` only needs ``q_and_action_grad(s, a)``; the analytic critic
    input-gradient is chained through the tanh squashing into the policy.
    """
    B = s.shape[0]
    a_pi, squashed, cache = model._forward_with_cache(s)
    q, dq_da = critic.q_and_action_grad(s, a_pi)
    anchor = np.sum((a_pi - a_tele) ** 2, axis=1)
    loss = float(np.mean(-q + lambda_anchor * anchor))
    d_a = (-dq_da + 2.0 * lambda_anchor * (a_pi - a_tele)) / B
    d_raw = d_a * model.command_max * (1.0 - squashed**2)
    grads, _ = backward(model.net, cache, d_raw)
    parts = {
        "q_term": float(np.mean(-q)),
        "anchor": float(np.mean(anchor)),
        "total": loss,
    }
    return loss, grads.as_list(), parts


def train_actor(
    dataset: TransitionDataset,
    critic,
    config: ActorConfig,
    history: list | None = None,
) -> ActorModel:
    """Ascend the frozen critic from behavior-anchored initialization."""
    config.validate()
    if hasattr(critic, "calibrated") and not critic.calibrated:
        raise ValueError("critic must be calibrated (trained) before actor training")
    rng = np.random.default_rng(config.seed)
    command_max = getattr(critic, "command_max", None)
    if command_max is None:
        command_max = float(max(np.abs(dataset.a).max(), 1e-6))
    model = init_actor(dataset.obs_dim, dataset.act_dim, float(command_max), config, rng)
    params = model.parameters()
    opt = adam_init(params, config.learning_rate)
    for it in range(1, config.steps + 1):
        batch = sample_batch(dataset, config.batch_size, rng)
        loss, grads, parts = actor_loss_and_grads(
            model, critic, batch.s, batch.a, config.lambda_anchor
        )
        if not np.isfinite(loss):
            raise RuntimeError(f"non-finite actor loss at step {it}: {parts}")
        adam_step(params, grads, opt)
        if history is not None and (it % 200 == 0 or it == 1):
            history.append({"step": it, **parts})
        if it % 2000 == 0:
            log.info("actor step %d: %s", it, {k: round(v, 4) for k, v in parts.items()})
    return model
