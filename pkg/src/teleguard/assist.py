"""Value-gated impedance assistance rendered on the leader side.

Per servo tick: map the normalized success score of the operator's current
command to a guidance intensity through a falling sigmoid, low-pass filter
it, modulate a diagonal velocity-attractor stiffness between K_min and
K_max, and emit a saturated guidance torque pulling the leader toward the
actor's velocity reference.  The torque is converted into a velocity offset
through a quasi-static leader admittance so a synthetic (or remote human)
operator can yield to it.

Policy-side quantities (actor suggestion, score) refresh only on policy
ticks and are zero-order-held in between; if the policy stream stalls past
``stale_policy_factor`` policy periods the raw intensity drops to zero and
the filter bleeds the guidance away (fail-transparent).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .env import ConfigError


@dataclass(frozen=True)
class AssistConfig:
    """Gate, impedance and admittance parameters.

    ``tau_g`` may be None, meaning "anchor the gate at the critic's
    calibrated feasibility threshold in normalized units" (transparency is
    then gated exactly where feasibility flips); a float pins it explicitly.
    Loop stability of the yield path requires
    ``yield_ratio * max(k_max) * dt_servo / admittance_damping < 1``.
    """

    kappa: float = 20.0
    tau_g: float | None = None
    k_min: tuple[float, float] = (0.0, 0.0)
    k_max: tuple[float, float] = (6.0, 6.0)
    d0: tuple[float, float] = (0.02, 0.02)
    dq_max: float = 0.05
    tau_max: float = 3.0
    coupling: tuple[float, float] = (1.0, 1.0)
    dt_policy: float = 0.1
    dt_servo: float = 0.02
    cutoff_hz: float = 2.0
    yield_ratio: float = 0.8
    admittance_damping: float = 0.125
    stale_policy_factor: float = 3.0

    def validate(self) -> None:
        if not 0.0 < self.dt_servo <= self.dt_policy:
            raise ConfigError("need 0 < dt_servo <= dt_policy")
        k_min = np.asarray(self.k_min)
        k_max = np.asarray(self.k_max)
        if np.any(k_min < 0.0) or np.any(k_max < k_min):
            raise ConfigError("need 0 <= k_min <= k_max elementwise")
        if np.any(np.asarray(self.d0) < 0.0):
            raise ConfigError("damping d0 must be >= 0")
        if self.dq_max <= 0.0 or self.tau_max <= 0.0:
            raise ConfigError("dq_max and tau_max must be > 0")
        if np.any(np.asarray(self.coupling) == 0.0):
            raise ConfigError("coupling must be invertible (no zero entries)")
        if self.tau_g is not None and not 0.0 < self.tau_g < 1.0:
            raise ConfigError("tau_g must be in (0, 1) or None for auto-anchoring")
        if self.cutoff_hz <= 0.0:
            raise ConfigError("cutoff_hz must be > 0")
        if not 0.0 <= self.yield_ratio <= 1.0:
            raise ConfigError("yield_ratio must be in [0, 1]")
        if self.admittance_damping <= 0.0:
            raise ConfigError("admittance_damping must be > 0")
        margin = (
            self.yield_ratio
            * float(np.max(np.asarray(self.k_max)))
            * self.dt_servo
            / self.admittance_damping
        )
        if margin >= 1.0:
            raise ConfigError(
                f"unstable yield loop: yield*k_max*dt_servo/damping = {margin:.2f} >= 1"
            )

    @property
    def policy_every(self) -> int:
        """Servo ticks per policy tick (policy period must be a multiple)."""
        ratio = self.dt_policy / self.dt_servo
        n = round(ratio)
        if abs(ratio - n) > 1e-9:
            raise ConfigError("dt_policy must be an integer multiple of dt_servo")
        return max(1, n)

    @property
    def filter_coeff(self) -> float:
        return float(np.exp(-2.0 * np.pi * self.cutoff_hz * self.dt_servo))


def intensity(q_tilde: float, config: AssistConfig, tau_g: float | None = None) -> float:
    """Falling sigmoid of the normalized score: clip(sigma(kappa*(tau_g - q)), 0, 1)."""
    center = tau_g if tau_g is not None else config.tau_g
    if center is None:
        raise ValueError("tau_g unset: pass a gate center or configure one")
    z = config.kappa * (center - q_tilde)
    if z >= 0:
        g = 1.0 / (1.0 + np.exp(-z))
    else:
        ez = np.exp(z)
        g = ez / (1.0 + ez)
    return float(np.clip(g, 0.0, 1.0))


def lowpass(g_raw: float, g_prev: float, config: AssistConfig) -> float:
    """First-order exponential filter at the servo rate."""
    beta = config.filter_coeff
    return float(beta * g_prev + (1.0 - beta) * g_raw)


def reference_update(a_assist: np.ndarray, config: AssistConfig) -> np.ndarray:
    """Map the actor suggestion to a bounded leader velocity reference.

    Follower increment over one policy period, through the inverse coupling,
    saturated at dq_max, back to a velocity.
    """
    a = np.atleast_2d(np.asarray(a_assist, dtype=float))
    coupling = np.asarray(config.coupling)
    delta_f = a * config.dt_policy
    delta_ref = np.clip(delta_f / coupling[None, :], -config.dq_max, config.dq_max)
    return delta_ref / config.dt_policy


def stiffness(g: float, config: AssistConfig) -> np.ndarray:
    k_min = np.asarray(config.k_min)
    k_max = np.asarray(config.k_max)
    return k_min + g * (k_max - k_min)


def impedance_torque(
    qdot_des: np.ndarray,
    qdot_leader: np.ndarray,
    g: float,
    config: AssistConfig,
) -> np.ndarray:
    """Velocity-attractor law K_v(g)(qdot_des - qdot) - D0*qdot, saturated."""
    qdot_des = np.atleast_2d(np.asarray(qdot_des, dtype=float))
    qdot_leader = np.atleast_2d(np.asarray(qdot_leader, dtype=float))
    k_v = stiffness(g, config)
    d0 = np.asarray(config.d0)
    tau = k_v[None, :] * (qdot_des - qdot_leader) - d0[None, :] * qdot_leader
    return np.clip(tau, -config.tau_max, config.tau_max)


@dataclass(frozen=True)
class GuidanceFrame:
    """Immutable per-tick snapshot published to observers and logs."""

    tick: int
    t: float
    q_raw: float | None
    q_tilde: float | None
    g_raw: float
    g: float
    feasible: bool | None
    stale: bool
    k_v: np.ndarray
    qdot_des: np.ndarray
    tau_guide: np.ndarray
    offset: np.ndarray
    intent: np.ndarray
    leader_velocity: np.ndarray
    executed: np.ndarray

    def to_dict(self) -> dict:
        def arr(a):
            return np.asarray(a).tolist()

        return {
            "tick": self.tick,
            "t": round(self.t, 9),
            "q_raw": self.q_raw,
            "q_tilde": self.q_tilde,
            "g_raw": self.g_raw,
            "g": self.g,
            "feasible": self.feasible,
            "stale": self.stale,
            "k_v": arr(self.k_v),
            "qdot_des": arr(self.qdot_des),
            "tau_guide": arr(self.tau_guide),
            "offset": arr(self.offset),
            "intent": arr(self.intent),
            "leader_velocity": arr(self.leader_velocity),
            "executed": arr(self.executed),
        }

    def to_json_line(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


class AssistController:
    """Owns the servo-side state of the guidance loop for one episode.

    ``static_gain`` pins the intensity to a constant (the gating ablation);
    the value-guided path needs policy updates via :meth:`on_policy_update`.
    """

    def __init__(self, config: AssistConfig, num_arms: int,
                 static_gain: float | None = None,
                 gate_center: float | None = None):
        config.validate()
        self.config = config
        self.num_arms = num_arms
        self.static_gain = static_gain
        self.gate_center = config.tau_g if config.tau_g is not None else gate_center
        if self.static_gain is None and self.gate_center is None:
            raise ConfigError(
                "value-gated control needs tau_g or a calibrated gate center"
            )
        self.tick = 0
        self.g_filt = 0.0 if static_gain is None else float(static_gain)
        self.qdot_des = np.zeros((num_arms, 2))
        self.q_raw: float | None = None
        self.q_tilde: float | None = None
        self.feasible: bool | None = None
        self.last_update_tick: int | None = None

    def on_policy_update(self, a_assist: np.ndarray, q_raw: float | None,
                         q_tilde: float | None, feasible: bool | None) -> None:
        """Absorb fresh policy outputs; the reference holds until the next one."""
        self.qdot_des = reference_update(
            np.asarray(a_assist, dtype=float).reshape(self.num_arms, 2), self.config
        )
        self.q_raw = q_raw
        self.q_tilde = q_tilde
        self.feasible = feasible
        self.last_update_tick = self.tick

    def _stale(self) -> bool:
        if self.last_update_tick is None:
            return True
        age = (self.tick - self.last_update_tick) * self.config.dt_servo
        return age > self.config.stale_policy_factor * self.config.dt_policy

    def servo_tick(self, leader_velocity: np.ndarray,
                   intent: np.ndarray | None = None) -> GuidanceFrame:
        cfg = self.config
        leader_velocity = np.asarray(leader_velocity, dtype=float).reshape(
            self.num_arms, 2
        )
        if intent is None:
            intent = leader_velocity
        intent = np.asarray(intent, dtype=float).reshape(self.num_arms, 2)
        stale = self._stale() if self.static_gain is None else False
        if self.static_gain is not None:
            g_raw = g = float(self.static_gain)
        else:
            q_for_gate = self.q_tilde if self.q_tilde is not None else 1.0
            g_raw = 0.0 if stale else intensity(q_for_gate, cfg, self.gate_center)
            g = lowpass(g_raw, self.g_filt, cfg)
        self.g_filt = g
        k_v = stiffness(g, cfg)
        tau = impedance_torque(self.qdot_des, leader_velocity, g, cfg)
        offset = cfg.yield_ratio * tau * cfg.dt_servo / cfg.admittance_damping
        coupling = np.asarray(cfg.coupling)
        executed = coupling[None, :] * leader_velocity
        frame = GuidanceFrame(
            tick=self.tick,
            t=self.tick * cfg.dt_servo,
            q_raw=self.q_raw,
            q_tilde=self.q_tilde,
            g_raw=g_raw,
            g=g,
            feasible=self.feasible,
            stale=stale,
            k_v=k_v,
            qdot_des=self.qdot_des.copy(),
            tau_guide=tau,
            offset=offset,
            intent=intent,
            leader_velocity=leader_velocity,
            executed=executed,
        )
        self.tick += 1
        return frame
