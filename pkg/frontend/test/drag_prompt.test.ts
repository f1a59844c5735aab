// Acceptance: a drag on a paused session POSTs a prompt whose normalized
// box matches the drawn rectangle within half a pixel, and the decode
// resumes with new tokens rendering as overlays.

import { describe, expect, it, vi } from "vitest";

import { ApiClient } from "../src/api.js";
import { boxToRect } from "../src/coords.js";
import { dragBegin, dragEnd, dragMove, newDrag } from "../src/drag.js";
import { applyFrame, initialState } from "../src/state.js";
import type { Box, Frame } from "../src/types.js";

const view = { width: 320, height: 448 };

describe("drag prompt on a paused session", () => {
  it("posts the drawn rectangle within 0.5 px and resumes rendering", async () => {
    // session pauses with a low-confidence candidate
    let state = applyFrame(initialState(), {
      type: "prompt_requested", seq: 5, step: 3,
      candidate_box: [0.6, 0.6, 0.7, 0.7], pos_conf: 0.12,
    });
    expect(state.status).toBe("awaiting_prompt");

    // the user drags over a known word region
    let drag = newDrag();
    drag = dragBegin(drag, 41.0, 30.5);
    drag = dragMove(drag, 77.5, 93.0);
    const box = dragEnd(drag, view);
    expect(box).not.toBeNull();

    const posted: Array<{ url: string; body: string }> = [];
    const fetchFn = vi.fn(async (url: any, init?: any) => {
      posted.push({ url: String(url), body: String(init?.body ?? "") });
      return new Response("{}", { status: 200 });
    });
    const api = new ApiClient("http://backend", fetchFn as any);
    await api.submitPrompt("sess1", box as Box);

    expect(posted).toHaveLength(1);
    expect(posted[0].url).toBe("http://backend/sessions/sess1/prompt");
    const sent = JSON.parse(posted[0].body).box as Box;
    const rect = boxToRect(sent, view);
    expect(Math.abs(rect.x - 41.0)).toBeLessThan(0.5);
    expect(Math.abs(rect.y - 30.5)).toBeLessThan(0.5);
    expect(Math.abs(rect.x + rect.w - 77.5)).toBeLessThan(0.5);
    expect(Math.abs(rect.y + rect.h - 93.0)).toBeLessThan(0.5);

    // blue box stays until the backend acknowledges it
    state = { ...state, dragBox: sent };
    state = applyFrame(state, {
      type: "prompt_applied", seq: 6, step: 3, box: sent,
    });
    expect(state.dragBox).toBeNull();
    expect(state.status).toBe("running");

    // decoding resumes visibly: new orange overlays append
    const before = state.overlays.length;
    const resumed: Frame[] = [
      { type: "token_emitted", seq: 7, step: 4, token: 9, token_text: "word",
        box: [0.12, 0.07, 0.24, 0.2], token_conf: 0.95, pos_conf: 0.9 },
      { type: "token_emitted", seq: 8, step: 5, token: 4, token_text: "more",
        box: [0.26, 0.07, 0.38, 0.2], token_conf: 0.93, pos_conf: 0.88 },
    ];
    for (const frame of resumed) state = applyFrame(state, frame);
    expect(state.overlays.length).toBe(before + 2);
  });

  it("rejects a zero-area click client-side", () => {
    let drag = newDrag();
    drag = dragBegin(drag, 50, 60);
    drag = dragMove(drag, 50, 60);
    expect(dragEnd(drag, view)).toBeNull();
  });

  it("clips drags that leave the page", () => {
    let drag = newDrag();
    drag = dragBegin(drag, 300, 440);
    drag = dragMove(drag, 500, 600);
    const box = dragEnd(drag, view);
    expect(box).not.toBeNull();
    expect(box![2]).toBe(1);
    expect(box![3]).toBe(1);
  });
});
