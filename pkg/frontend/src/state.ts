// The view is a pure function of the received frame sequence plus local
// drag state; this module holds the fold.

import type { Box, Frame, SessionStatus } from "./types.js";

export interface ViewState {
  status: SessionStatus;
  overlays: Box[]; // orange: one per emitted token, in decode order
  texts: string[];
  pending: { step: number; box: Box } | null; // red candidate while paused
  dragBox: Box | null; // blue: submitted prompt awaiting acknowledgement
  repetitionAt: number | null;
  lastSeq: number;
  error: string | null;
}

export function initialState(): ViewState {
  return {
    status: "running",
    overlays: [],
    texts: [],
    pending: null,
    dragBox: null,
    repetitionAt: null,
    lastSeq: -1,
    error: null,
  };
}

/** Fold one frame into the state; frames at or below lastSeq are replays
 * and must not duplicate overlays. */
export function applyFrame(state: ViewState, frame: Frame): ViewState {
  if (frame.seq <= state.lastSeq) {
    return state;
  }
  const next: ViewState = { ...state, lastSeq: frame.seq };
  switch (frame.type) {
    case "token_emitted":
      next.overlays = [...state.overlays, frame.box];
      next.texts = [...state.texts, frame.token_text];
      next.status = "running";
      break;
    case "prompt_requested":
      next.pending = { step: frame.step, box: frame.candidate_box };
      next.status = "awaiting_prompt";
      break;
    case "prompt_applied":
      next.pending = null;
      next.dragBox = null; // blue box stays only until acknowledged
      next.status = "running";
      break;
    case "repetition_detected":
      next.repetitionAt = frame.step;
      break;
    case "done":
      next.status = frame.error ? "failed" : "done";
      next.error = frame.error ?? null;
      next.pending = null;
      break;
  }
  return next;
}

export function applyFrames(state: ViewState, frames: Frame[]): ViewState {
  return frames.reduce(applyFrame, state);
}

/** Markdown text assembled from the emitted token stream. */
export function renderText(state: ViewState): string {
  let out = "";
  let atLineStart = true;
  for (const t of state.texts) {
    if (t === "\n") {
      out += "\n";
      atLineStart = true;
      continue;
    }
    if (!atLineStart) out += " ";
    out += t;
    atLineStart = false;
  }
  return out;
}
