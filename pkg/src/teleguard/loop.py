"""Single closed-loop tick pipeline shared by the evaluator and the service.

Both paths must produce bit-identical episodes from the same seeds and
intent stream, so the composition order lives here and nowhere else:

1. leader velocity = clamp(intent + previous guidance offset)
2. executed follower command = clamp(S * leader velocity)
3. on policy ticks: refresh actor suggestion and the score of the current
   executed command
4. servo tick: intensity, filter, impedance torque, next offset
5. step the world with the executed command, observe
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from .assist import AssistConfig, AssistController, GuidanceFrame
from .env import World, clamp_command, observation_stream

ASSIST_MODES = ("off", "static", "value")
STATIC_MODE_GAIN = 0.5


@dataclass
class TickResult:
    frame: GuidanceFrame
    terminal: bool
    success: bool
    failure: bool


class TeleopLoop:
    """Runs one episode at servo rate; caller supplies raw intents."""

    def __init__(
        self,
        world: World,
        assist_config: AssistConfig,
        mode: str = "off",
        critic=None,
        actor=None,
        episode_seed: int = 0,
    ):
        if mode not in ASSIST_MODES:
            raise ValueError(f"mode must be one of {ASSIST_MODES}, got {mode!r}")
        if mode == "value" and (critic is None or actor is None):
            raise ValueError("value-guided mode needs both critic and actor")
        if mode == "static" and actor is None:
            raise ValueError("static-gain mode needs an actor")
        assist_config.validate()
        if abs(world.config.dt - assist_config.dt_servo) > 1e-12:
            raise ValueError(
                f"world dt {world.config.dt} != servo period {assist_config.dt_servo}"
            )
        self.world = world
        self.mode = mode
        self.critic = critic
        self.actor = actor
        self.assist_config = assist_config
        self.episode_seed = episode_seed
        self.controller = None
        if mode != "off":
            gate_center = None
            if mode == "value" and assist_config.tau_g is None:
                # anchor the gate at the calibrated feasibility threshold
                gate_center = float(
                    (critic.tau - critic.q_min) / (critic.q_max - critic.q_min)
                )
            self.controller = AssistController(
                assist_config,
                world.config.num_arms,
                static_gain=STATIC_MODE_GAIN if mode == "static" else None,
                gate_center=gate_center,
            )
        self.state = world.reset(episode_seed)
        self.obs_rng = observation_stream(world.config, episode_seed)
        self.obs = world.observe(self.state, self.obs_rng)
        self.offset = np.zeros((world.config.num_arms, 2))
        self.tick = 0

    @property
    def policy_every(self) -> int:
        return self.assist_config.policy_every

    def _coupled(self, leader_velocity: np.ndarray) -> np.ndarray:
        coupling = np.asarray(self.assist_config.coupling)
        cmax = self.world.config.command_max
        return clamp_command(coupling[None, :] * leader_velocity, cmax)

    def tick_once(self, intent: np.ndarray) -> TickResult:
        """Advance one servo tick with the given raw operator intent."""
        cfg = self.world.config
        intent = np.asarray(intent, dtype=float).reshape(cfg.num_arms, 2)
        leader_velocity = clamp_command(intent + self.offset, cfg.command_max)
        executed = self._coupled(leader_velocity)

        if self.controller is not None and self.tick % self.policy_every == 0:
            obs_vec = self.obs.vector()
            a_assist = self.actor.assist_action(obs_vec).reshape(cfg.num_arms, 2)
            if self.mode == "value":
                q_raw, q_tilde, _ = self.critic.score(obs_vec, executed.ravel())
                feasible = bool(self.critic.feasible(obs_vec, executed.ravel())[0])
                self.controller.on_policy_update(
                    a_assist, float(q_raw[0]), float(q_tilde[0]), feasible
                )
            else:
                self.controller.on_policy_update(a_assist, None, None, None)

        if self.controller is not None:
            frame = self.controller.servo_tick(leader_velocity, intent=intent)
            self.offset = frame.offset
        else:
            frame = _passthrough_frame(
                self.tick, cfg.dt, intent, leader_velocity, executed, cfg.num_arms
            )
            self.offset = np.zeros_like(self.offset)
        # frame.executed is the uncapped coupling product; the follower box
        # clamp is what actually reaches the plant
        frame = _with_executed(frame, executed)

        self.state, _ = self.world.step(self.state, executed)
        self.obs = self.world.observe(self.state, self.obs_rng)
        self.tick += 1
        return TickResult(
            frame=frame,
            terminal=self.state.terminal,
            success=self.state.latched_success,
            failure=self.state.latched_failure,
        )


def _passthrough_frame(tick, dt, intent, leader_velocity, executed, num_arms):
    zero = np.zeros((num_arms, 2))
    return GuidanceFrame(
        tick=tick,
        t=tick * dt,
        q_raw=None,
        q_tilde=None,
        g_raw=0.0,
        g=0.0,
        feasible=None,
        stale=True,
        k_v=np.zeros(2),
        qdot_des=zero,
        tau_guide=zero.copy(),
        offset=zero.copy(),
        intent=intent,
        leader_velocity=leader_velocity,
        executed=executed,
    )


def _with_executed(frame: GuidanceFrame, executed: np.ndarray) -> GuidanceFrame:
    return replace(frame, executed=executed)


def intended_follower_command(loop: TeleopLoop, intent: np.ndarray) -> np.ndarray:
    """What the follower would do with no assistance at all (for deviation
    metrics): the raw intent clamped and coupled."""
    cfg = loop.world.config
    intent = clamp_command(
        np.asarray(intent, dtype=float).reshape(cfg.num_arms, 2), cfg.command_max
    )
    return loop._coupled(intent)
