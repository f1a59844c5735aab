// Pixel <-> normalized page-fraction conversion for the page canvas.

import type { Box } from "./types.js";

export interface ViewSize {
  width: number; // canvas pixels
  height: number;
}

export interface PixelRect {
  x: number;
  y: number;
  w: number;
  h: number;
}

const clamp01 = (v: number) => Math.min(1, Math.max(0, v));

/** Drag rectangle (any corner order) to a normalized, page-clipped box. */
export function rectToBox(ax: number, ay: number, bx: number, by: number,
                          view: ViewSize): Box {
  const x1 = clamp01(Math.min(ax, bx) / view.width);
  const x2 = clamp01(Math.max(ax, bx) / view.width);
  const y1 = clamp01(Math.min(ay, by) / view.height);
  const y2 = clamp01(Math.max(ay, by) / view.height);
  return [x1, y1, x2, y2];
}

export function boxToRect(box: Box, view: ViewSize): PixelRect {
  const [x1, y1, x2, y2] = box;
  return {
    x: x1 * view.width,
    y: y1 * view.height,
    w: (x2 - x1) * view.width,
    h: (y2 - y1) * view.height,
  };
}

/** Max pixel discrepancy after a there-and-back conversion. */
export function roundTripError(ax: number, ay: number, bx: number, by: number,
                               view: ViewSize): number {
  const rect = boxToRect(rectToBox(ax, ay, bx, by, view), view);
  const ex = Math.min(Math.max(ax, bx), view.width);
  const sx = Math.max(Math.min(ax, bx), 0);
  const ey = Math.min(Math.max(ay, by), view.height);
  const sy = Math.max(Math.min(ay, by), 0);
  return Math.max(
    Math.abs(rect.x - sx),
    Math.abs(rect.y - sy),
    Math.abs(rect.x + rect.w - ex),
    Math.abs(rect.y + rect.h - ey),
  );
}
