/**
 * Device input to per-arm velocity commands.
 *
 * Pure mapping functions (tested headlessly) plus a browser loop that polls
 * devices at a fixed rate and hands command vectors to a sink.  No input
 * means an explicit zero command, which keeps the server's deadman happy.
 */

import { Vec2, WorldInfo } from "./protocol.js";

export const GAMEPAD_DEADZONE = 0.1;

export interface KeyState {
  left: boolean;
  right: boolean;
  up: boolean;
  down: boolean;
}

export const EMPTY_KEYS: KeyState = { left: false, right: false, up: false, down: false };

/** Arrow/WASD state to a full-magnitude command (screen up = toward goal). */
export function keysToCommand(keys: KeyState, commandMax: number): Vec2 {
  let x = 0;
  let y = 0;
  if (keys.left) x -= 1;
  if (keys.right) x += 1;
  if (keys.up) y += 1; // depth increases toward the goal
  if (keys.down) y -= 1;
  return [x * commandMax, y * commandMax];
}

/** Stick deflection in [-1, 1]^2 to a command; linear past the deadzone. */
export function stickToCommand(ax: number, ay: number, commandMax: number): Vec2 {
  const shape = (a: number): number => {
    const mag = Math.abs(a);
    if (mag < GAMEPAD_DEADZONE) return 0;
    const scaled = (mag - GAMEPAD_DEADZONE) / (1 - GAMEPAD_DEADZONE);
    return Math.sign(a) * Math.min(1, scaled);
  };
  // screen-space stick: up (negative ay) descends toward the goal
  return [shape(ax) * commandMax, -shape(ay) * commandMax];
}

/** Pointer drag from a virtual-joystick origin, saturating at `radius` px. */
export function dragToCommand(
  dxPx: number,
  dyPx: number,
  radius: number,
  commandMax: number,
): Vec2 {
  const clamp = (v: number) => Math.max(-1, Math.min(1, v));
  return [
    clamp(dxPx / radius) * commandMax,
    clamp(-dyPx / radius) * commandMax,
  ];
}

export function clampCommand(cmd: Vec2, commandMax: number): Vec2 {
  const c = (v: number) => Math.max(-commandMax, Math.min(commandMax, v));
  return [c(cmd[0]), c(cmd[1])];
}

/**
 * Combine keyboard/gamepad/pointer into per-arm commands.  Arm 0 follows
 * keyboard+left stick+pointer; arm 1 (bimanual worlds) follows the right
 * stick.  Command frame: x lateral, y toward the goal.
 */
export function combineInputs(
  keys: KeyState,
  sticks: Array<[number, number]> | null,
  drag: Vec2 | null,
  world: WorldInfo,
): Vec2[] {
  const cmax = world.command_max;
  const arms: Vec2[] = [];
  for (let i = 0; i < world.num_arms; i++) {
    let cmd: Vec2 = [0, 0];
    if (i === 0) {
      const k = keysToCommand(keys, cmax);
      cmd = [cmd[0] + k[0], cmd[1] + k[1]];
      if (drag) cmd = [cmd[0] + drag[0], cmd[1] + drag[1]];
      if (sticks && sticks[0]) {
        const s = stickToCommand(sticks[0][0], sticks[0][1], cmax);
        cmd = [cmd[0] + s[0], cmd[1] + s[1]];
      }
    } else if (sticks && sticks[i]) {
      cmd = stickToCommand(sticks[i][0], sticks[i][1], cmax);
    }
    arms.push(clampCommand(cmd, cmax));
  }
  return arms;
}

export interface InputSink {
  (arms: Vec2[]): void;
}

/** Browser-side device poller; all DOM use stays inside this class. */
export class InputLoop {
  keys: KeyState = { ...EMPTY_KEYS };
  drag: Vec2 | null = null;
  enabled = true;
  sendLatencies: number[] = [];

  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(
    private readonly world: WorldInfo,
    private readonly sink: InputSink,
    private readonly hz: number = 50,
  ) {}

  attach(target: Window): void {
    target.addEventListener("keydown", (e) => this.onKey(e as KeyboardEvent, true));
    target.addEventListener("keyup", (e) => this.onKey(e as KeyboardEvent, false));
    this.timer = setInterval(() => this.tick(), 1000 / this.hz);
  }

  detach(): void {
    if (this.timer !== null) clearInterval(this.timer);
    this.timer = null;
  }

  private onKey(e: KeyboardEvent, pressed: boolean): void {
    const map: Record<string, keyof KeyState> = {
      ArrowLeft: "left",
      ArrowRight: "right",
      ArrowUp: "up",
      ArrowDown: "down",
      a: "left",
      d: "right",
      w: "up",
      s: "down",
    };
    const name = map[e.key];
    if (name) {
      this.keys[name] = pressed;
      e.preventDefault();
    }
  }

  private readSticks(): Array<[number, number]> | null {
    const pads = typeof navigator !== "undefined" && navigator.getGamepads
      ? navigator.getGamepads()
      : null;
    if (!pads) return null;
    const sticks: Array<[number, number]> = [];
    for (const pad of pads) {
      if (pad && pad.axes.length >= 2) {
        sticks.push([pad.axes[0], pad.axes[1]]);
        if (pad.axes.length >= 4) sticks.push([pad.axes[2], pad.axes[3]]);
      }
    }
    return sticks.length ? sticks : null;
  }

  private tick(): void {
    const t0 = performance.now();
    const arms = this.enabled
      ? combineInputs(this.keys, this.readSticks(), this.drag, this.world)
      : Array.from({ length: this.world.num_arms }, () => [0, 0] as Vec2);
    this.sink(arms);
    this.sendLatencies.push(performance.now() - t0);
    if (this.sendLatencies.length > 1000) this.sendLatencies.splice(0, 500);
  }
}
