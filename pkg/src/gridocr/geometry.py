"""Normalized rectangle arithmetic and grid mapping.

All boxes live in unitless page-fraction coordinates: (x1, y1, x2, y2)
with 0 <= x1 <= x2 <= 1 and 0 <= y1 <= y2 <= 1. Grid operations work on
the upsampled (2H, 2W) cell lattice; internal grid math is (row, col) =
(y, x) ordered, while boxes stay (x, y) ordered on the wire.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "BBox",
    "FULL_PAGE",
    "GridSpec",
    "iou",
    "center_dist_sq",
    "box_to_cell",
    "assemble_box",
    "box_cell_params",
    "noisify_box",
    "blank_std_map",
]


@dataclass(frozen=True)
class BBox:
    """Axis-aligned rectangle, corner-ordered, in [0,1]² page fractions."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        object.__setattr__(self, "x1", float(self.x1))
        object.__setattr__(self, "y1", float(self.y1))
        object.__setattr__(self, "x2", float(self.x2))
        object.__setattr__(self, "y2", float(self.y2))
        if not (0.0 <= self.x1 <= self.x2 <= 1.0):
            raise ValueError(f"bad x extent: ({self.x1}, {self.x2})")
        if not (0.0 <= self.y1 <= self.y2 <= 1.0):
            raise ValueError(f"bad y extent: ({self.y1}, {self.y2})")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        """(cx, cy)."""
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_list(self) -> list[float]:
        """Wire order [x1, y1, x2, y2]."""
        return [self.x1, self.y1, self.x2, self.y2]

    @classmethod
    def from_list(cls, coords) -> "BBox":
        x1, y1, x2, y2 = coords
        return cls(x1, y1, x2, y2)


FULL_PAGE = BBox(0.0, 0.0, 1.0, 1.0)


@dataclass(frozen=True)
class GridSpec:
    """Base grid (H, W) with a fixed x2 upsampled lattice of (2H, 2W) cells."""

    H: int
    W: int
    up: int = 2

    def __post_init__(self):
        if self.H < 1 or self.W < 1:
            raise ValueError("grid needs H >= 1 and W >= 1")
        if self.up != 2:
            raise ValueError("upsample factor is fixed at 2")

    @property
    def rows(self) -> int:
        """Row count of the upsampled lattice."""
        return self.up * self.H

    @property
    def cols(self) -> int:
        """Column count of the upsampled lattice."""
        return self.up * self.W

    def cell_bounds(self, row: int, col: int, upsampled: bool = True) -> BBox:
        """Bounds of one cell, on the upsampled lattice by default."""
        nr = self.rows if upsampled else self.H
        nc = self.cols if upsampled else self.W
        if not (0 <= row < nr and 0 <= col < nc):
            raise ValueError(f"cell ({row}, {col}) outside {nr}x{nc} grid")
        return BBox(col / nc, row / nr, (col + 1) / nc, (row + 1) / nr)


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0.0 when the union has zero area."""
    ix = min(a.x2, b.x2) - max(a.x1, b.x1)
    iy = min(a.y2, b.y2) - max(a.y1, b.y1)
    inter = max(ix, 0.0) * max(iy, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def center_dist_sq(a: BBox, b: BBox) -> float:
    """Squared center distance, normalized by the squared diagonal of the
    smallest box enclosing both.

    Returns 0 for coincident centers, and 0 in the degenerate case where
    both boxes collapse to the same point (zero enclosing diagonal).
    """
    (acx, acy), (bcx, bcy) = a.center, b.center
    d2 = (acx - bcx) ** 2 + (acy - bcy) ** 2
    ex = max(a.x2, b.x2) - min(a.x1, b.x1)
    ey = max(a.y2, b.y2) - min(a.y1, b.y1)
    diag2 = ex * ex + ey * ey
    if diag2 <= 0.0:
        return 0.0
    return d2 / diag2


def box_to_cell(b: BBox, g: GridSpec) -> tuple[int, int]:
    """(row, col) of the upsampled cell containing the box center.

    Centers exactly on the top page edge (coordinate 1.0) clamp into the
    last cell; other boundary centers fall to the cell that starts there.
    """
    cx, cy = b.center
    row = min(math.floor(cy * g.rows), g.rows - 1)
    col = min(math.floor(cx * g.cols), g.cols - 1)
    return row, col


def assemble_box(
    cell: tuple[int, int],
    offset: tuple[float, float],
    size: tuple[float, float],
    g: GridSpec,
) -> BBox:
    """Build a box from an upsampled cell, an intra-cell center offset
    (dy, dx) in [0,1)², and a size (h, w) in page fractions.

    The center is the cell origin plus offset scaled by the cell extent;
    corners are clamped into [0,1], so oversize boxes never escape the page.
    """
    row, col = cell
    dy, dx = offset
    h, w = size
    cy = (row + dy) / g.rows
    cx = (col + dx) / g.cols
    y1 = min(max(cy - 0.5 * h, 0.0), 1.0)
    y2 = min(max(cy + 0.5 * h, 0.0), 1.0)
    x1 = min(max(cx - 0.5 * w, 0.0), 1.0)
    x2 = min(max(cx + 0.5 * w, 0.0), 1.0)
    return BBox(x1, y1, x2, y2)


def box_cell_params(
    b: BBox, g: GridSpec
) -> tuple[tuple[int, int], tuple[float, float], tuple[float, float]]:
    """Inverse of assemble_box: (cell, (dy, dx), (h, w)) measured from a box."""
    row, col = box_to_cell(b, g)
    cx, cy = b.center
    dy = cy * g.rows - row
    dx = cx * g.cols - col
    return (row, col), (dy, dx), (b.height, b.width)


def noisify_box(b: BBox, rng: np.random.Generator, kappa: float = 0.5) -> BBox:
    """Perturb each corner coordinate with zero-mean Gaussian noise whose
    std is kappa times the matching side length; clamp and reorder corners.
    """
    if kappa < 0:
        raise ValueError("kappa must be >= 0")
    if kappa == 0:
        return b
    sx = kappa * b.width
    sy = kappa * b.height
    x1 = b.x1 + rng.normal(0.0, sx) if sx > 0 else b.x1
    x2 = b.x2 + rng.normal(0.0, sx) if sx > 0 else b.x2
    y1 = b.y1 + rng.normal(0.0, sy) if sy > 0 else b.y1
    y2 = b.y2 + rng.normal(0.0, sy) if sy > 0 else b.y2
    x1, x2 = sorted((min(max(x1, 0.0), 1.0), min(max(x2, 0.0), 1.0)))
    y1, y2 = sorted((min(max(y1, 0.0), 1.0), min(max(y2, 0.0), 1.0)))
    return BBox(x1, y1, x2, y2)


def blank_std_map(image: np.ndarray, g: GridSpec, background: float = 1.0) -> np.ndarray:
    """Per-cell std of grayscale intensities on the upsampled (2H, 2W) grid.

    Accepts float images in [0,1] or uint8 in [0,255]. Images whose
    dimensions do not divide into the lattice are padded bottom/right with
    the background intensity before slicing.
    """
    img = np.asarray(image)
    if img.ndim != 2:
        raise ValueError("expected a single-channel (H0, W0) image")
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    else:
        img = img.astype(np.float64)
    rows, cols = g.rows, g.cols
    ch = -(-img.shape[0] // rows)  # ceil div
    cw = -(-img.shape[1] // cols)
    pad_h = ch * rows - img.shape[0]
    pad_w = cw * cols - img.shape[1]
    if pad_h or pad_w:
        img = np.pad(img, ((0, pad_h), (0, pad_w)), constant_values=background)
    blocks = img.reshape(rows, ch, cols, cw)
    return blocks.std(axis=(1, 3))
