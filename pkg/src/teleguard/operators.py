"""Synthetic operators that close the teleoperation loop.

Three kinds share one PD core that centers laterally and descends toward the
goal: ``expert`` is the bare core, ``noisy`` adds seeded velocity noise, and
``biased`` additionally drags the command toward one wall (the stand-in for
a novice who consistently misjudges the channel).  Guidance reaches the
operator as an additive velocity offset computed by the leader-side
admittance; the operator yields to it simply by summing it in before the
command box clamp.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .env import ConfigError, Observation, WorldConfig, clamp_command

# Fraction of command_max kept as minimum descent speed so the PD approach
# crosses the goal plane in finite time instead of asymptoting onto it.
DESCENT_FLOOR = 0.2

# Command noise is an Ornstein-Uhlenbeck process with this correlation time:
# human velocity error persists across servo ticks instead of flipping sign
# at 50 Hz, which is also what makes it observable to the assistance loop.
NOISE_CORRELATION_TIME = 0.15

# Default bias strength frozen from the closed-loop calibration sweep
# (scripts/calibrate_bias.py): unassisted failure rate on 200 seeded
# episodes lands in [30%, 70%].
DEFAULT_BIAS_GAIN = 0.60
DEFAULT_BIAS_NOISE_STD = 0.04

OPERATOR_KINDS = ("expert", "noisy", "biased")


@dataclass(frozen=True)
class OperatorConfig:
    kind: str = "expert"
    noise_std: float = 0.0
    bias_direction: tuple[float, float] = (1.0, 0.0)
    bias_gain: float = 0.0
    pd_gain: float = 2.0
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in OPERATOR_KINDS:
            raise ConfigError(f"unknown operator kind {self.kind!r}")
        if self.noise_std < 0.0:
            raise ConfigError("noise_std must be >= 0")
        if self.pd_gain <= 0.0:
            raise ConfigError("pd_gain must be > 0")
        if self.kind == "biased":
            norm = float(np.hypot(*self.bias_direction))
            if abs(norm - 1.0) > 1e-9:
                raise ConfigError("bias_direction must be unit-norm for biased kind")


def standard_operator_config(kind: str, seed: int = 0) -> OperatorConfig:
    """The dataset-recipe configuration for each operator kind."""
    if kind == "expert":
        return OperatorConfig(kind="expert", seed=seed)
    if kind == "noisy":
        return OperatorConfig(kind="noisy", noise_std=DEFAULT_BIAS_NOISE_STD, seed=seed)
    if kind == "biased":
        return OperatorConfig(
            kind="biased",
            noise_std=DEFAULT_BIAS_NOISE_STD,
            bias_gain=DEFAULT_BIAS_GAIN,
            seed=seed,
        )
    raise ConfigError(f"unknown operator kind {kind!r}")


@dataclass
class Operator:
    """Stateful wrapper: config plus the episode's seeded noise stream."""

    config: OperatorConfig
    world: WorldConfig
    rng: np.random.Generator = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        self.config.validate()
        if self.rng is None:
            self.rng = np.random.default_rng(self.config.seed)
        self._noise = np.zeros((self.world.num_arms, 2))
        self._rho = float(np.exp(-self.world.dt / NOISE_CORRELATION_TIME))

    def _next_noise(self) -> np.ndarray:
        """Stationary OU update; marginal std stays at noise_std."""
        std = self.config.noise_std
        innovation = self.rng.normal(0.0, std, size=self._noise.shape)
        self._noise = self._rho * self._noise + np.sqrt(1.0 - self._rho**2) * innovation
        return self._noise

    def intent(self, obs: Observation) -> np.ndarray:
        """Raw PD intent (plus kind-specific noise/bias), before guidance."""
        cfg = self.config
        w = self.world
        cmd = np.zeros((w.num_arms, 2))
        floor = DESCENT_FLOOR * w.command_max
        for i in range(w.num_arms):
            px, py = obs.position[i]
            cmd[i, 0] = cfg.pd_gain * (0.0 - px)
            cmd[i, 1] = max(cfg.pd_gain * (w.goal_depth - py), floor)
        if cfg.noise_std > 0.0:
            cmd += self._next_noise()
        if cfg.kind == "biased":
            bias = cfg.bias_gain * w.command_max * np.asarray(cfg.bias_direction)
            cmd += bias[None, :]
        return clamp_command(cmd, w.command_max)

    def command(
        self, obs: Observation, guidance_velocity_offset: np.ndarray | None = None
    ) -> np.ndarray:
        """Issued leader command: intent plus the yielded guidance offset."""
        cmd = self.intent(obs)
        if guidance_velocity_offset is not None:
            cmd = cmd + np.asarray(guidance_velocity_offset, dtype=float).reshape(
                cmd.shape
            )
        return clamp_command(cmd, self.world.command_max)


def make_operator(
    config: OperatorConfig, world: WorldConfig, episode_seed: int
) -> Operator:
    """Operator with a stream derived from (operator seed, episode seed)."""
    rng = np.random.default_rng(np.random.SeedSequence((config.seed, episode_seed)))
    return Operator(config=config, world=world, rng=rng)
