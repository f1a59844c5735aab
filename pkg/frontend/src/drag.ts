// Drag-to-prompt state machine: pointer events in, a normalized box out.
// Zero-area drags (clicks) are rejected client-side.

import { rectToBox, type ViewSize } from "./coords.js";
import type { Box } from "./types.js";

export interface DragTracker {
  start: { x: number; y: number } | null;
  current: { x: number; y: number } | null;
}

export function newDrag(): DragTracker {
  return { start: null, current: null };
}

export function dragBegin(d: DragTracker, x: number, y: number): DragTracker {
  return { start: { x, y }, current: { x, y } };
}

export function dragMove(d: DragTracker, x: number, y: number): DragTracker {
  if (!d.start) return d;
  return { start: d.start, current: { x, y } };
}

/** Finish the drag; null when degenerate (no start or zero area). */
export function dragEnd(d: DragTracker, view: ViewSize): Box | null {
  if (!d.start || !d.current) return null;
  const box = rectToBox(d.start.x, d.start.y, d.current.x, d.current.y, view);
  if (box[2] - box[0] <= 0 || box[3] - box[1] <= 0) {
    return null;
  }
  return box;
}

/** Live rectangle for rendering while the pointer is down. */
export function dragPreview(d: DragTracker, view: ViewSize): Box | null {
  if (!d.start || !d.current) return null;
  return rectToBox(d.start.x, d.start.y, d.current.x, d.current.y, view);
}
