/**
 * Protocol version 1 of the teleguard teleoperation service.
 *
 * Every message is a JSON object with `v` (version), `type` and `seq`.
 * The cockpit talks over the service's WebSocket framing; payloads are
 * identical to the raw-socket framing the Python clients use.
 */

export const PROTOCOL_VERSION = 1;

export type Vec2 = [number, number];

export interface Hello {
  v: number;
  type: "hello";
  seq: number;
}

export interface CommandInput {
  v: number;
  type: "command";
  seq: number;
  arms: Vec2[];
  t_client: number;
}

export interface EpisodeControl {
  v: number;
  type: "episode";
  seq: number;
  action: "reset" | "set_mode" | "set_assist_level";
  seed?: number;
  mode?: string;
  level?: number;
}

export interface GuidancePayload {
  tick: number;
  t: number;
  q_raw: number | null;
  q_tilde: number | null;
  g_raw: number;
  g: number;
  feasible: boolean | null;
  stale: boolean;
  k_v: number[];
  qdot_des: number[][];
  tau_guide: number[][];
  offset: number[][];
  intent: number[][];
  leader_velocity: number[][];
  executed: number[][];
}

export interface StateFrame {
  v: number;
  type: "state";
  seq: number;
  episode: { id: number; seed: number; status: string; t: number; tick: number };
  mode: string;
  assist_level: number;
  sim: {
    p: number[][];
    v: number[][];
    contact: boolean[];
    success: boolean;
    failure: boolean;
  };
  obs: {
    position: number[][];
    velocity: number[][];
    goal_offset: number[][];
    wall_distance: number[][];
    time_remaining: number;
  };
  guidance: GuidancePayload | null;
}

export interface WorldInfo {
  num_arms: number;
  channel_half_width: number;
  funnel_half_width: number;
  goal_depth: number;
  mouth_depth: number;
  jam_zones: number[][];
  command_max: number;
  dt: number;
  episode_limit: number;
}

export interface ServerInfo {
  v: number;
  type: "server_info";
  seq: number;
  protocol_version: number;
  role: "driver" | "spectator";
  mode: string;
  lockstep: boolean;
  assist_level: number;
  tick_rates: { servo_hz: number; policy_hz: number };
  world: WorldInfo;
  assist: Record<string, unknown>;
  episode: { id: number; seed: number; status: string };
  loop_stats: { jitter_p99_ms: number | null; tick_errors: number };
}

export interface Refused {
  v: number;
  type: "refused";
  seq: number;
  reason: string;
}

export interface ErrorMessage {
  v: number;
  type: "error";
  seq: number;
  reason: string;
}

export interface Pong {
  v: number;
  type: "pong";
  seq: number;
  t_client: number | null;
  t_server: number;
}

export type ServerMessage = ServerInfo | StateFrame | Refused | ErrorMessage | Pong;

export function makeHello(seq: number): Hello {
  return { v: PROTOCOL_VERSION, type: "hello", seq };
}

export function makeCommand(seq: number, arms: Vec2[], tClient: number): CommandInput {
  return { v: PROTOCOL_VERSION, type: "command", seq, arms, t_client: tClient };
}

export function makeReset(seq: number, seed?: number): EpisodeControl {
  const msg: EpisodeControl = { v: PROTOCOL_VERSION, type: "episode", seq, action: "reset" };
  if (seed !== undefined) msg.seed = seed;
  return msg;
}

export function makeAssistLevel(seq: number, level: number): EpisodeControl {
  return { v: PROTOCOL_VERSION, type: "episode", seq, action: "set_assist_level", level };
}

export function encodeMessage(msg: object): string {
  return JSON.stringify(msg);
}

/** Parse and structurally validate one server message. */
export function decodeServerMessage(text: string): ServerMessage {
  let raw: unknown;
  try {
    raw = JSON.parse(text);
  } catch (e) {
    throw new Error(`unparseable server message: ${e}`);
  }
  if (typeof raw !== "object" || raw === null) {
    throw new Error("server message is not an object");
  }
  const msg = raw as { v?: unknown; type?: unknown };
  if (typeof msg.type !== "string") {
    throw new Error("server message lacks a type");
  }
  if (msg.type !== "refused" && msg.v !== PROTOCOL_VERSION) {
    throw new Error(`protocol version mismatch: got ${String(msg.v)}, need ${PROTOCOL_VERSION}`);
  }
  switch (msg.type) {
    case "server_info":
    case "state":
    case "refused":
    case "error":
    case "pong":
      return raw as ServerMessage;
    default:
      throw new Error(`unknown server message type ${msg.type}`);
  }
}
