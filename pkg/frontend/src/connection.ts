/**
 * WebSocket session with the teleguard service.
 *
 * The socket implementation is injectable so the same class runs in the
 * browser (native WebSocket) and under node tests (a minimal shim).
 */

import {
  ServerInfo,
  ServerMessage,
  StateFrame,
  Vec2,
  decodeServerMessage,
  encodeMessage,
  makeCommand,
  makeHello,
  makeReset,
  makeAssistLevel,
} from "./protocol.js";

export interface SocketLike {
  send(data: string): void;
  close(): void;
  onopen: (() => void) | null;
  onmessage: ((event: { data: unknown }) => void) | null;
  onclose: ((event: { reason?: string }) => void) | null;
  onerror: (() => void) | null;
}

export type SocketFactory = (url: string) => SocketLike;

export type ConnectionStatus =
  | "connecting"
  | "connected"
  | "refused"
  | "closed"
  | "failed";

export interface ConnectionEvents {
  onStatus?: (status: ConnectionStatus, detail: string) => void;
  onServerInfo?: (info: ServerInfo) => void;
  onState?: (frame: StateFrame) => void;
  onServerError?: (reason: string) => void;
}

export class Connection {
  status: ConnectionStatus = "connecting";
  info: ServerInfo | null = null;
  lastFrame: StateFrame | null = null;
  decodeErrors = 0;

  private socket: SocketLike | null = null;
  private seq = 0;

  constructor(
    private readonly url: string,
    private readonly events: ConnectionEvents,
    private readonly factory: SocketFactory,
  ) {}

  connect(): void {
    this.setStatus("connecting", this.url);
    const socket = this.factory(this.url);
    this.socket = socket;
    socket.onopen = () => {
      socket.send(encodeMessage(makeHello(this.nextSeq())));
    };
    socket.onmessage = (event) => this.handleMessage(String(event.data));
    socket.onclose = (event) => {
      if (this.status === "connected" || this.status === "connecting") {
        this.setStatus("closed", event.reason ?? "connection closed");
      }
    };
    socket.onerror = () => {
      if (this.status === "connecting") {
        this.setStatus("failed", "service unreachable");
      }
    };
  }

  private handleMessage(data: string): void {
    let msg: ServerMessage;
    try {
      msg = decodeServerMessage(data);
    } catch (e) {
      this.decodeErrors += 1;
      this.events.onServerError?.(String(e));
      return;
    }
    switch (msg.type) {
      case "refused":
        this.setStatus("refused", msg.reason);
        this.socket?.close();
        break;
      case "server_info":
        this.info = msg;
        if (this.status !== "connected") {
          this.setStatus("connected", `role: ${msg.role}`);
        }
        this.events.onServerInfo?.(msg);
        break;
      case "state":
        this.lastFrame = msg;
        this.events.onState?.(msg);
        break;
      case "error":
        this.events.onServerError?.(msg.reason);
        break;
      case "pong":
        break;
    }
  }

  private setStatus(status: ConnectionStatus, detail: string): void {
    this.status = status;
    this.events.onStatus?.(status, detail);
  }

  private nextSeq(): number {
    return this.seq++;
  }

  get role(): "driver" | "spectator" | null {
    return this.info?.role ?? null;
  }

  sendCommand(arms: Vec2[], tClient: number): void {
    if (this.status !== "connected") return;
    this.socket?.send(encodeMessage(makeCommand(this.nextSeq(), arms, tClient)));
  }

  sendReset(seed?: number): void {
    this.socket?.send(encodeMessage(makeReset(this.nextSeq(), seed)));
  }

  sendAssistLevel(level: number): void {
    this.socket?.send(encodeMessage(makeAssistLevel(this.nextSeq(), level)));
  }

  close(): void {
    this.socket?.close();
    if (this.status !== "refused" && this.status !== "failed") {
      this.setStatus("closed", "closed by client");
    }
  }
}
