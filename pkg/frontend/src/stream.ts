// WebSocket event stream with resume: reconnects ask the server for
// frames after the last seq already folded into the state, so replays
// never duplicate overlays.

import type { Frame } from "./types.js";

export interface SocketLike {
  onmessage: ((ev: { data: string }) => void) | null;
  onclose: (() => void) | null;
  onerror: (() => void) | null;
  close(): void;
}

export type SocketFactory = (url: string) => SocketLike;

const defaultFactory: SocketFactory = (url) =>
  new WebSocket(url) as unknown as SocketLike;

export class EventStream {
  private lastSeq = -1;
  private socket: SocketLike | null = null;
  private stopped = false;
  private retryMs = 250;

  constructor(
    private urlBase: string, // ws://host/sessions/<id>/events
    private onFrame: (frame: Frame) => void,
    private onEnd: () => void = () => {},
    private factory: SocketFactory = defaultFactory,
    private scheduler: (fn: () => void, ms: number) => void =
        (fn, ms) => { setTimeout(fn, ms); },
  ) {}

  connect(): void {
    if (this.stopped) return;
    const sock = this.factory(`${this.urlBase}?after=${this.lastSeq}`);
    this.socket = sock;
    sock.onmessage = (ev) => {
      const frame = JSON.parse(ev.data) as Frame;
      if (typeof frame.seq === "number") {
        if (frame.seq <= this.lastSeq) return; // replayed duplicate
        this.lastSeq = frame.seq;
      }
      this.onFrame(frame);
      if (frame.type === "done") {
        this.stop();
        this.onEnd();
      }
    };
    sock.onclose = () => this.resume();
    sock.onerror = () => this.resume();
  }

  private resume(): void {
    if (this.stopped) return;
    this.scheduler(() => this.connect(), this.retryMs);
    this.retryMs = Math.min(this.retryMs * 2, 4000);
  }

  stop(): void {
    this.stopped = true;
    if (this.socket) {
      this.socket.onclose = null;
      this.socket.onerror = null;
      this.socket.close();
    }
  }

  get cursor(): number {
    return this.lastSeq;
  }
}
