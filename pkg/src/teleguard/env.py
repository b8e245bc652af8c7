"""Planar peg-in-channel teleoperation environment.

One effector per arm moves in a 2-D workspace shaped like a funnel feeding a
straight vertical channel.  ``x`` is lateral, ``y`` is insertion depth
(``y = 0`` at the channel entrance, positive downward).  The walls are
unilateral constraints resolved by lateral clamping.  Inside the funnel a
speed-proportional drift pushes the effector toward the nearest wall, which
is what makes careless commands dangerous.

Failure is irreversible: hitting a jam zone with too much lateral approach
speed, or running out of time, latches the episode as failed.  Reaching
``goal_depth`` inside the channel with every arm latches success.  The two
latches are mutually exclusive and final; callers must reset.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

# Minimum descent authority kept by the workspace ceiling above the mouth,
# so noisy commands cannot escape upward out of the funnel.
_CEILING_MARGIN = 0.02


class ConfigError(ValueError):
    """Invalid configuration rejected before any stepping."""


class TerminalStateError(RuntimeError):
    """Raised when a latched (terminal) state is stepped again."""


@dataclass(frozen=True)
class WorldConfig:
    """Geometry, hazard layout and timing of the environment.

    ``jam_zones`` is a tuple of ``(y_lo, y_hi, speed_threshold)`` triples:
    wall segments (in depth coordinates) that latch failure when an effector
    is pressed into the wall there with lateral approach speed above the
    threshold.  All lengths in meters, times in seconds, speeds in m/s.
    """

    num_arms: int = 1
    channel_half_width: float = 0.05
    funnel_half_width: float = 0.15
    goal_depth: float = 0.15
    jam_zones: tuple[tuple[float, float, float], ...] = ((0.0, 0.05, 0.08),)
    lateral_drift_gain: float = 0.3
    sensor_noise_std: float = 0.002
    dt: float = 0.02
    episode_limit: float = 30.0
    command_max: float = 0.25
    seed: int = 0

    def validate(self) -> None:
        if self.num_arms not in (1, 2):
            raise ConfigError(f"num_arms must be 1 or 2, got {self.num_arms}")
        if not (0.0 < self.channel_half_width < self.funnel_half_width):
            raise ConfigError(
                "need 0 < channel_half_width < funnel_half_width, got "
                f"{self.channel_half_width} vs {self.funnel_half_width}"
            )
        if self.goal_depth <= 0.0:
            raise ConfigError("goal_depth must be positive")
        if self.dt <= 0.0:
            raise ConfigError("dt must be positive")
        if self.episode_limit <= 0.0:
            raise ConfigError("episode_limit must be positive")
        if self.command_max <= 0.0:
            raise ConfigError("command_max must be positive")
        if self.sensor_noise_std < 0.0:
            raise ConfigError("sensor_noise_std must be >= 0")
        if self.lateral_drift_gain < 0.0:
            raise ConfigError("lateral_drift_gain must be >= 0")
        for zone in self.jam_zones:
            y_lo, y_hi, thresh = zone
            if y_hi < y_lo:
                raise ConfigError(f"jam zone {zone} has y_hi < y_lo")
            if thresh <= 0.0:
                raise ConfigError(f"jam zone {zone} needs threshold > 0")

    @property
    def mouth_depth(self) -> float:
        """Depth of the funnel mouth (where the funnel reaches full width)."""
        return -(self.funnel_half_width - self.channel_half_width)

    def half_width(self, y: float) -> float:
        """Free-space half width at depth ``y`` (45-degree funnel flare)."""
        if y >= 0.0:
            return self.channel_half_width
        return min(self.funnel_half_width, self.channel_half_width - y)


@dataclass(frozen=True)
class SimState:
    """Immutable environment snapshot.

    Arrays are shaped ``(num_arms, 2)`` and marked read-only; ``step``
    returns a fresh state rather than mutating.
    """

    p: np.ndarray
    v: np.ndarray
    contact: np.ndarray
    latched_failure: bool
    latched_success: bool
    t: float

    @property
    def terminal(self) -> bool:
        return self.latched_failure or self.latched_success


@dataclass(frozen=True)
class StepRecord:
    """Reward-free transition record emitted by ``step``."""

    command: np.ndarray
    pre_projection_velocity: np.ndarray
    contact: np.ndarray
    jam_triggered: bool
    timeout_triggered: bool


@dataclass(frozen=True)
class Observation:
    """What the operator (and the learned models) perceive.

    Positions are noisy; wall distances come from true geometry; velocities
    are the realized effector velocities of the previous step.
    """

    position: np.ndarray
    velocity: np.ndarray
    goal_offset: np.ndarray
    wall_distance: np.ndarray
    time_remaining: float

    def vector(self) -> np.ndarray:
        """Flat layout: per arm [px py vx vy gx gy dl dr], then time left."""
        per_arm = np.concatenate(
            [self.position, self.velocity, self.goal_offset, self.wall_distance],
            axis=1,
        )
        return np.concatenate([per_arm.ravel(), [self.time_remaining]])


def observation_dim(config: WorldConfig) -> int:
    return 8 * config.num_arms + 1


def action_dim(config: WorldConfig) -> int:
    return 2 * config.num_arms


def _frozen(a: np.ndarray) -> np.ndarray:
    out = np.array(a, dtype=float)
    out.setflags(write=False)
    return out


class World:
    """Deterministic stepper for a fixed :class:`WorldConfig`."""

    def __init__(self, config: WorldConfig):
        config.validate()
        self.config = config

    def reset(self, seed: int) -> SimState:
        """Start at the funnel mouth with a seeded lateral offset, at rest."""
        cfg = self.config
        rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, seed)))
        x0 = rng.uniform(-0.5, 0.5, size=cfg.num_arms) * cfg.funnel_half_width
        p = np.stack([x0, np.full(cfg.num_arms, cfg.mouth_depth)], axis=1)
        zeros = np.zeros((cfg.num_arms, 2))
        return SimState(
            p=_frozen(p),
            v=_frozen(zeros),
            contact=np.zeros(cfg.num_arms, dtype=bool),
            latched_failure=False,
            latched_success=False,
            t=0.0,
        )

    def _drift(self, p: np.ndarray, commands: np.ndarray) -> np.ndarray:
        """Speed-proportional lateral push toward the nearest wall, funnel only."""
        cfg = self.config
        drift = np.zeros_like(p)
        speed = np.linalg.norm(commands, axis=1)
        in_funnel = p[:, 1] < 0.0
        drift[:, 0] = np.where(
            in_funnel, cfg.lateral_drift_gain * speed * np.sign(p[:, 0]), 0.0
        )
        return drift

    def step(self, state: SimState, commands: np.ndarray) -> tuple[SimState, StepRecord]:
        cfg = self.config
        if state.latched_failure:
            raise TerminalStateError("episode already failed; reset before stepping")
        if state.latched_success:
            raise TerminalStateError("episode already succeeded; reset before stepping")
        commands = np.asarray(commands, dtype=float).reshape(cfg.num_arms, 2)
        if not np.all(np.isfinite(commands)):
            raise ValueError("non-finite command")
        if np.any(np.abs(commands) > cfg.command_max + 1e-12):
            raise ValueError(
                f"command exceeds command_max={cfg.command_max}: {commands!r}"
            )

        v_total = commands + self._drift(state.p, commands)
        p_cand = state.p + cfg.dt * v_total

        p_new = p_cand.copy()
        contact = np.zeros(cfg.num_arms, dtype=bool)
        jam = False
        ceiling = cfg.mouth_depth - _CEILING_MARGIN
        for i in range(cfg.num_arms):
            y = float(np.clip(p_cand[i, 1], ceiling, cfg.goal_depth))
            hw = cfg.half_width(y)
            x = p_cand[i, 0]
            if abs(x) > hw:
                contact[i] = True
                inward_speed = v_total[i, 0] * np.sign(x)
                for y_lo, y_hi, thresh in cfg.jam_zones:
                    if y_lo <= y <= y_hi and inward_speed > thresh:
                        jam = True
                x = np.sign(x) * hw
            p_new[i] = (x, y)

        t_new = state.t + cfg.dt
        v_realized = (p_new - state.p) / cfg.dt

        failure = jam
        success = False
        if not failure:
            at_goal = (p_new[:, 1] >= cfg.goal_depth - 1e-12) & (
                np.abs(p_new[:, 0]) <= cfg.channel_half_width + 1e-12
            )
            success = bool(np.all(at_goal))
        timeout = False
        if not failure and not success and t_new >= cfg.episode_limit - 1e-12:
            failure = True
            timeout = True

        new_state = SimState(
            p=_frozen(p_new),
            v=_frozen(v_realized),
            contact=contact,
            latched_failure=failure,
            latched_success=success,
            t=t_new,
        )
        record = StepRecord(
            command=_frozen(commands),
            pre_projection_velocity=_frozen(v_total),
            contact=contact.copy(),
            jam_triggered=jam,
            timeout_triggered=timeout,
        )
        return new_state, record

    def observe(self, state: SimState, rng: np.random.Generator) -> Observation:
        """Sensor model: noisy positions, true wall distances, shared clock."""
        cfg = self.config
        noise = rng.normal(0.0, cfg.sensor_noise_std, size=state.p.shape)
        noisy_p = state.p + noise
        goal = np.array([0.0, cfg.goal_depth])
        goal_offset = goal[None, :] - noisy_p
        wall = np.zeros_like(state.p)
        for i in range(cfg.num_arms):
            hw = cfg.half_width(float(state.p[i, 1]))
            wall[i, 0] = state.p[i, 0] + hw  # distance to left wall
            wall[i, 1] = hw - state.p[i, 0]  # distance to right wall
        time_remaining = float(np.clip(1.0 - state.t / cfg.episode_limit, 0.0, 1.0))
        return Observation(
            position=_frozen(noisy_p),
            velocity=_frozen(state.v.copy()),
            goal_offset=_frozen(goal_offset),
            wall_distance=_frozen(wall),
            time_remaining=time_remaining,
        )


def clamp_command(command: np.ndarray, command_max: float) -> np.ndarray:
    """Componentwise box clamp shared by operators and learned policies."""
    return np.clip(command, -command_max, command_max)


# Stream tag keeping sensor noise independent of the reset/operator draws.
_OBS_STREAM_TAG = 7919


def observation_stream(config: WorldConfig, episode_seed: int) -> np.random.Generator:
    """The canonical sensor-noise stream for one episode.

    Every loop that replays an episode (recorder, evaluator, service) must
    draw observation noise from this stream for trajectories to be
    bit-identical across paths.
    """
    return np.random.default_rng(
        np.random.SeedSequence((config.seed, episode_seed, _OBS_STREAM_TAG))
    )


def make_state(
    config: WorldConfig,
    p,
    v=None,
    t: float = 0.0,
    latched_failure: bool = False,
    latched_success: bool = False,
) -> SimState:
    """Build a state by hand (fixtures, hand-stepped oracles)."""
    p = np.asarray(p, dtype=float).reshape(config.num_arms, 2)
    v = np.zeros_like(p) if v is None else np.asarray(v, dtype=float).reshape(p.shape)
    return SimState(
        p=_frozen(p),
        v=_frozen(v),
        contact=np.zeros(config.num_arms, dtype=bool),
        latched_failure=latched_failure,
        latched_success=latched_success,
        t=t,
    )


def copy_with(state: SimState, **kwargs) -> SimState:
    return replace(state, **kwargs)
