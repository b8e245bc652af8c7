"""Real-time human-in-the-loop teleoperation server.

One servo loop owns the simulation and the assistance controller; network
I/O lives in per-client reader/writer threads that exchange messages with
the loop through queues.  The first client to say hello drives; later
clients spectate.  Commands use latest-wins semantics by sequence number,
with a deadman that bleeds the held intent to zero when the driver goes
quiet.  In lockstep mode the loop advances exactly one servo tick per
received command, which makes a replayed command log reproduce an offline
episode frame for frame.
"""

from __future__ import annotations

import logging
import queue
import socket
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from .assist import AssistConfig
from .env import World, WorldConfig
from .loop import ASSIST_MODES, TeleopLoop
from .wire import (
    PROTOCOL_VERSION,
    ConnectionClosed,
    ProtocolError,
    make_message,
    open_transport,
)

log = logging.getLogger("teleguard.service")

DEADMAN_SECONDS = 0.5
DEADMAN_DECAY_TICKS = 5
CLIENT_QUEUE_FRAMES = 64


@dataclass
class _Client:
    transport: object
    address: tuple
    role: str = "pending"
    outbox: queue.Queue = field(default_factory=lambda: queue.Queue(CLIENT_QUEUE_FRAMES))
    alive: bool = True
    seq_out: int = 0
    last_command_seq: int = -1
    errors: int = 0

    def send(self, msg_type: str, **fields) -> None:
        msg = make_message(msg_type, self.seq_out, **fields)
        self.seq_out += 1
        try:
            self.outbox.put_nowait(msg)
        except queue.Full:
            # drop the oldest frame, never block the loop
            try:
                self.outbox.get_nowait()
            except queue.Empty:
                pass
            try:
                self.outbox.put_nowait(msg)
            except queue.Full:
                pass


class TeleopService:
    def __init__(
        self,
        world_config: WorldConfig,
        assist_config: AssistConfig,
        critic=None,
        actor=None,
        mode: str = "off",
        host: str = "127.0.0.1",
        port: int = 0,
        lockstep: bool = False,
        episode_seed: int = 0,
    ):
        if mode not in ASSIST_MODES:
            raise ValueError(f"mode must be one of {ASSIST_MODES}")
        world_config.validate()
        assist_config.validate()
        self.world = World(world_config)
        self.assist_config = assist_config
        self.critic = critic
        self.actor = actor
        self.mode = mode
        self.lockstep = lockstep
        self.assist_level = 1.0
        self.episode_seed = episode_seed
        self.episode_id = 0
        self._loop: TeleopLoop | None = None
        self._episode_started = False
        self._held_intent = np.zeros((world_config.num_arms, 2))
        self._last_cmd_walltime: float | None = None
        self._deadman_ticks = 0
        self._last_frame_msg: dict | None = None

        self._inbox: queue.Queue = queue.Queue()
        self._clients: list[_Client] = []
        self._clients_lock = threading.Lock()
        self._stop = threading.Event()
        self._tick_errors = 0
        self._jitter_ms: list[float] = []

        self._listener = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listener.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listener.bind((host, port))
        self._listener.listen(8)
        self.host, self.port = self._listener.getsockname()[:2]
        self._threads: list[threading.Thread] = []
        self._reset_episode(self.episode_seed)

    # episode management -------------------------------------------------

    def _reset_episode(self, seed: int) -> None:
        self.episode_seed = seed
        self.episode_id += 1
        self._loop = TeleopLoop(
            self.world,
            self.assist_config,
            mode=self.mode,
            critic=self.critic,
            actor=self.actor,
            episode_seed=seed,
        )
        self._episode_started = False
        self._held_intent = np.zeros((self.world.config.num_arms, 2))
        self._last_cmd_walltime = None
        self._deadman_ticks = 0

    @property
    def episode_status(self) -> str:
        if self._loop.state.latched_success:
            return "success"
        if self._loop.state.latched_failure:
            return "failure"
        return "running" if self._episode_started else "idle"

    # threading ----------------------------------------------------------

    def start(self) -> None:
        self._spawn(self._accept_loop, name="accept")
        self._spawn(self._servo_loop, name="servo")

    def serve_forever(self) -> None:
        self.start()
        try:
            while not self._stop.is_set():
                time.sleep(0.2)
        finally:
            self.stop()

    def stop(self) -> None:
        self._stop.set()
        try:
            self._listener.close()
        except OSError:
            pass
        with self._clients_lock:
            clients = list(self._clients)
        for c in clients:
            self._drop_client(c)
        for t in self._threads:
            t.join(timeout=2.0)

    def _spawn(self, fn, name: str, *args) -> None:
        t = threading.Thread(target=fn, args=args, name=f"teleguard-{name}", daemon=True)
        t.start()
        self._threads.append(t)

    # network ------------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._stop.is_set():
            try:
                sock, addr = self._listener.accept()
            except OSError:
                return
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._spawn(self._client_session, "client", sock, addr)

    def _client_session(self, sock: socket.socket, addr) -> None:
        try:
            transport = open_transport(sock)
        except (ProtocolError, ConnectionClosed, OSError) as e:
            log.info("handshake failed from %s: %s", addr, e)
            sock.close()
            return
        client = _Client(transport=transport, address=addr)
        try:
            hello = transport.recv_message()
        except (ProtocolError, ConnectionClosed, OSError):
            transport.close()
            return
        if hello.get("type") != "hello" or hello.get("v") != PROTOCOL_VERSION:
            reason = (
                f"protocol version mismatch: got {hello.get('v')!r}, "
                f"need {PROTOCOL_VERSION}"
                if hello.get("type") == "hello"
                else "first message must be 'hello'"
            )
            try:
                transport.send_message(make_message("refused", 0, reason=reason))
            except OSError:
                pass
            transport.close()
            return
        with self._clients_lock:
            has_driver = any(c.role == "driver" for c in self._clients)
            client.role = "spectator" if has_driver else "driver"
            self._clients.append(client)
        self._spawn(self._writer_loop, "writer", client)
        client.send("server_info", **self._server_info(client))
        if self._last_frame_msg is not None:
            client.send("state", **self._last_frame_msg)
        log.info("client %s connected as %s", addr, client.role)
        try:
            while not self._stop.is_set():
                try:
                    msg = transport.recv_message()
                except ProtocolError as e:
                    client.errors += 1
                    client.send("error", reason=str(e))
                    continue
                self._handle_message(client, msg)
        except (ConnectionClosed, OSError):
            pass
        finally:
            self._drop_client(client)

    def _writer_loop(self, client: _Client) -> None:
        while client.alive and not self._stop.is_set():
            try:
                msg = client.outbox.get(timeout=0.25)
            except queue.Empty:
                continue
            try:
                client.transport.send_message(msg)
            except OSError:
                break
        client.alive = False

    def _drop_client(self, client: _Client) -> None:
        was_driver = client.role == "driver"
        client.alive = False
        with self._clients_lock:
            if client in self._clients:
                self._clients.remove(client)
        try:
            client.transport.close()
        except OSError:
            pass
        if was_driver:
            log.info("driver disconnected")
            self._inbox.put(("driver_gone", None, None))

    def _handle_message(self, client: _Client, msg: dict) -> None:
        mtype = msg.get("type")
        if msg.get("v") != PROTOCOL_VERSION:
            client.errors += 1
            client.send("error", reason="protocol version mismatch")
            return
        if mtype == "ping":
            client.send("pong", t_client=msg.get("t_client"), t_server=time.time())
        elif mtype == "info":
            client.send("server_info", **self._server_info(client))
        elif mtype in ("command", "episode"):
            self._inbox.put((mtype, client, msg))
        else:
            client.errors += 1
            client.send("error", reason=f"unknown message type {mtype!r}")

    def _server_info(self, client: _Client) -> dict:
        cfg = self.world.config
        a = self.assist_config
        jitter = sorted(self._jitter_ms)
        p99 = jitter[int(0.99 * (len(jitter) - 1))] if jitter else None
        return {
            "protocol_version": PROTOCOL_VERSION,
            "role": client.role,
            "mode": self.mode,
            "lockstep": self.lockstep,
            "assist_level": self.assist_level,
            "tick_rates": {
                "servo_hz": 1.0 / a.dt_servo,
                "policy_hz": 1.0 / a.dt_policy,
            },
            "world": {
                "num_arms": cfg.num_arms,
                "channel_half_width": cfg.channel_half_width,
                "funnel_half_width": cfg.funnel_half_width,
                "goal_depth": cfg.goal_depth,
                "mouth_depth": cfg.mouth_depth,
                "jam_zones": [list(z) for z in cfg.jam_zones],
                "command_max": cfg.command_max,
                "dt": cfg.dt,
                "episode_limit": cfg.episode_limit,
            },
            "assist": {
                "kappa": a.kappa,
                "tau_g": a.tau_g,
                "k_min": list(a.k_min),
                "k_max": list(a.k_max),
                "tau_max": a.tau_max,
                "dt_policy": a.dt_policy,
                "dt_servo": a.dt_servo,
            },
            "episode": {"id": self.episode_id, "seed": self.episode_seed,
                        "status": self.episode_status},
            "loop_stats": {"jitter_p99_ms": p99, "tick_errors": self._tick_errors},
        }

    # servo loop ---------------------------------------------------------

    def _servo_loop(self) -> None:
        if self.lockstep:
            self._servo_loop_lockstep()
        else:
            self._servo_loop_realtime()

    def _servo_loop_lockstep(self) -> None:
        while not self._stop.is_set():
            try:
                kind, client, msg = self._inbox.get(timeout=0.25)
            except queue.Empty:
                continue
            if kind == "episode":
                self._handle_episode_control(client, msg)
            elif kind == "command":
                if client.role != "driver":
                    client.errors += 1
                    client.send("error", reason="only the driver may send commands")
                    continue
                intent = self._parse_command(client, msg)
                if intent is None:
                    continue
                if not self._loop.state.terminal:
                    self._episode_started = True
                    self._tick(intent)
                else:
                    self._broadcast_state()

    def _servo_loop_realtime(self) -> None:
        dt = self.assist_config.dt_servo
        next_deadline = time.monotonic() + dt
        while not self._stop.is_set():
            now = time.monotonic()
            delay = next_deadline - now
            if delay > 0:
                time.sleep(delay)
            actual = time.monotonic()
            self._jitter_ms.append(abs(actual - next_deadline) * 1e3)
            if len(self._jitter_ms) > 5000:
                del self._jitter_ms[:2500]
            next_deadline += dt
            if next_deadline < actual - 1.0:  # fell far behind; resynchronize
                next_deadline = actual + dt
            self._drain_inbox()
            if self._loop.state.terminal or not self._episode_started:
                self._broadcast_state()
                continue
            intent = self._effective_intent()
            self._tick(intent)

    def _drain_inbox(self) -> None:
        while True:
            try:
                kind, client, msg = self._inbox.get_nowait()
            except queue.Empty:
                return
            if kind == "episode":
                self._handle_episode_control(client, msg)
            elif kind == "driver_gone":
                self._last_cmd_walltime = self._last_cmd_walltime or 0.0
            elif kind == "command":
                if client.role != "driver":
                    client.errors += 1
                    client.send("error", reason="only the driver may send commands")
                    continue
                seq = msg.get("seq", -1)
                if not isinstance(seq, int) or seq <= client.last_command_seq:
                    continue  # stale or reordered input
                intent = self._parse_command(client, msg)
                if intent is None:
                    continue
                client.last_command_seq = seq
                self._held_intent = intent
                self._last_cmd_walltime = time.monotonic()
                self._deadman_ticks = 0
                self._episode_started = True

    def _parse_command(self, client: _Client, msg: dict):
        arms = msg.get("arms")
        cfg = self.world.config
        try:
            intent = np.asarray(arms, dtype=float).reshape(cfg.num_arms, 2)
        except (TypeError, ValueError):
            client.errors += 1
            client.send("error", reason=f"command 'arms' must be {cfg.num_arms}x2")
            return None
        if not np.all(np.isfinite(intent)):
            client.errors += 1
            client.send("error", reason="command contains non-finite values")
            return None
        return np.clip(intent, -cfg.command_max, cfg.command_max)

    def _effective_intent(self) -> np.ndarray:
        if self._last_cmd_walltime is None:
            return np.zeros_like(self._held_intent)
        if time.monotonic() - self._last_cmd_walltime > DEADMAN_SECONDS:
            self._deadman_ticks += 1
            scale = max(0.0, 1.0 - self._deadman_ticks / DEADMAN_DECAY_TICKS)
            return self._held_intent * scale
        return self._held_intent

    def _handle_episode_control(self, client: _Client, msg: dict) -> None:
        action = msg.get("action")
        if action == "reset":
            seed = msg.get("seed")
            self._reset_episode(int(seed) if seed is not None else self.episode_seed + 1)
            self._broadcast_state()
        elif action == "set_mode":
            mode = msg.get("mode")
            if mode not in ASSIST_MODES:
                client.send("error", reason=f"unknown mode {mode!r}")
                return
            if mode == "value" and (self.critic is None or self.actor is None):
                client.send("error", reason="server lacks critic/actor checkpoints for value mode")
                return
            if mode == "static" and self.actor is None:
                client.send("error", reason="server lacks an actor checkpoint for static mode")
                return
            self.mode = mode
            self._reset_episode(self.episode_seed + 1)
            self._broadcast_info()
        elif action == "set_assist_level":
            try:
                level = float(msg.get("level"))
            except (TypeError, ValueError):
                client.send("error", reason="level must be a number in [0, 1]")
                return
            self.assist_level = float(np.clip(level, 0.0, 1.0))
            self._broadcast_info()
        elif action == "set_lockstep":
            client.send("error", reason="lockstep is fixed at server start")
        else:
            client.errors += 1
            client.send("error", reason=f"unknown episode action {action!r}")

    def _tick(self, intent: np.ndarray) -> None:
        try:
            result = self._loop.tick_once(intent)
        except Exception:
            self._tick_errors += 1
            log.exception("servo tick failed")
            return
        # operator assist level scales how much of the guidance offset the
        # next command absorbs (the torque display is unaffected)
        self._loop.offset = result.frame.offset * self.assist_level
        self._broadcast_state(result.frame)

    def _frame_message(self, frame=None) -> dict:
        state = self._loop.state
        obs = self._loop.obs
        msg = {
            "episode": {
                "id": self.episode_id,
                "seed": self.episode_seed,
                "status": self.episode_status,
                "t": state.t,
                "tick": self._loop.tick,
            },
            "mode": self.mode,
            "assist_level": self.assist_level,
            "sim": {
                "p": state.p.tolist(),
                "v": state.v.tolist(),
                "contact": state.contact.tolist(),
                "success": state.latched_success,
                "failure": state.latched_failure,
            },
            "obs": {
                "position": obs.position.tolist(),
                "velocity": obs.velocity.tolist(),
                "goal_offset": obs.goal_offset.tolist(),
                "wall_distance": obs.wall_distance.tolist(),
                "time_remaining": obs.time_remaining,
            },
            "guidance": frame.to_dict() if frame is not None else None,
        }
        return msg

    def _broadcast_state(self, frame=None) -> None:
        msg = self._frame_message(frame)
        self._last_frame_msg = msg
        with self._clients_lock:
            clients = list(self._clients)
        for c in clients:
            if c.role in ("driver", "spectator"):
                c.send("state", **msg)

    def _broadcast_info(self) -> None:
        with self._clients_lock:
            clients = list(self._clients)
        for c in clients:
            c.send("server_info", **self._server_info(c))
