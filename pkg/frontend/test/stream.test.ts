import { describe, expect, it } from "vitest";

import { EventStream, type SocketLike } from "../src/stream.js";
import type { Frame } from "../src/types.js";

class FakeSocket implements SocketLike {
  onmessage: ((ev: { data: string }) => void) | null = null;
  onclose: (() => void) | null = null;
  onerror: (() => void) | null = null;
  closed = false;
  constructor(public url: string) {}
  close() { this.closed = true; }
  emit(frame: object) { this.onmessage?.({ data: JSON.stringify(frame) }); }
  drop() { this.onclose?.(); }
}

function harness() {
  const sockets: FakeSocket[] = [];
  const frames: Frame[] = [];
  const pending: Array<() => void> = [];
  const stream = new EventStream(
    "ws://x/sessions/s/events",
    (f) => frames.push(f),
    () => {},
    (url) => {
      const s = new FakeSocket(url);
      sockets.push(s);
      return s;
    },
    (fn) => pending.push(fn),
  );
  const tick = () => pending.splice(0).forEach((fn) => fn());
  return { stream, sockets, frames, tick };
}

describe("event stream resume", () => {
  it("asks for frames after the last seen seq on reconnect", () => {
    const { stream, sockets, frames, tick } = harness();
    stream.connect();
    expect(sockets[0].url).toContain("after=-1");
    sockets[0].emit({ type: "token_emitted", seq: 0, step: 0, token: 1,
                      token_text: "a", box: [0, 0, 0.1, 0.1],
                      token_conf: 1, pos_conf: 1 });
    sockets[0].emit({ type: "token_emitted", seq: 1, step: 1, token: 2,
                      token_text: "b", box: [0.1, 0, 0.2, 0.1],
                      token_conf: 1, pos_conf: 1 });
    sockets[0].drop();
    tick();
    expect(sockets).toHaveLength(2);
    expect(sockets[1].url).toContain("after=1");
    // server replays a duplicate; the stream must swallow it
    sockets[1].emit({ type: "token_emitted", seq: 1, step: 1, token: 2,
                      token_text: "b", box: [0.1, 0, 0.2, 0.1],
                      token_conf: 1, pos_conf: 1 });
    sockets[1].emit({ type: "done", seq: 2 });
    expect(frames.map((f) => f.seq)).toEqual([0, 1, 2]);
  });

  it("stops reconnecting after done", () => {
    const { stream, sockets, tick } = harness();
    stream.connect();
    sockets[0].emit({ type: "done", seq: 0 });
    sockets[0].drop();
    tick();
    expect(sockets).toHaveLength(1);
    expect(sockets[0].closed).toBe(true);
  });
});
