// Canvas drawing: page bitmap underneath, overlays on top.
// Orange: scanned token boxes; red: low-confidence candidate;
// blue: the user's prompt box.

import { boxToRect, type ViewSize } from "./coords.js";
import type { ViewState } from "./state.js";
import type { Box } from "./types.js";

export const COLORS = {
  visited: "rgba(255, 165, 0, 0.8)",
  pending: "rgba(220, 40, 40, 0.9)",
  drag: "rgba(50, 90, 230, 0.9)",
};

function strokeBox(ctx: CanvasRenderingContext2D, box: Box, view: ViewSize,
                   color: string, width = 1.5): void {
  const r = boxToRect(box, view);
  ctx.strokeStyle = color;
  ctx.lineWidth = width;
  ctx.strokeRect(r.x, r.y, r.w, r.h);
}

export function drawOverlays(
  ctx: CanvasRenderingContext2D,
  state: ViewState,
  view: ViewSize,
  page: CanvasImageSource | null,
  preview: Box | null,
): void {
  ctx.clearRect(0, 0, view.width, view.height);
  if (page) {
    ctx.drawImage(page, 0, 0, view.width, view.height);
  }
  for (const box of state.overlays) {
    strokeBox(ctx, box, view, COLORS.visited, 1.0);
  }
  if (state.pending) {
    strokeBox(ctx, state.pending.box, view, COLORS.pending, 2.0);
  }
  const blue = preview ?? state.dragBox;
  if (blue) {
    strokeBox(ctx, blue, view, COLORS.drag, 2.0);
  }
}
