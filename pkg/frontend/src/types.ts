// Wire types shared with the session backend. Boxes travel as
// [x1, y1, x2, y2] page fractions.

export type Box = [number, number, number, number];

export interface TokenEmittedFrame {
  type: "token_emitted";
  seq: number;
  step: number;
  token: number;
  token_text: string;
  box: Box;
  token_conf: number;
  pos_conf: number;
}

export interface PromptRequestedFrame {
  type: "prompt_requested";
  seq: number;
  step: number;
  candidate_box: Box;
  pos_conf: number;
}

export interface PromptAppliedFrame {
  type: "prompt_applied";
  seq: number;
  step: number;
  box: Box;
}

export interface RepetitionFrame {
  type: "repetition_detected";
  seq: number;
  step: number;
  variance?: number;
}

export interface DoneFrame {
  type: "done";
  seq: number;
  step?: number;
  error?: string;
}

export type Frame =
  | TokenEmittedFrame
  | PromptRequestedFrame
  | PromptAppliedFrame
  | RepetitionFrame
  | DoneFrame;

export type SessionStatus = "running" | "awaiting_prompt" | "done" | "failed";

export interface SessionSnapshot {
  id: string;
  status: SessionStatus;
  tokens: number[];
  text: string;
  visited_boxes: Box[];
  pending_prompt: { step: number; candidate_box: Box; pos_conf: number } | null;
  events_seen: number;
  error: string | null;
}
