"""Fourier-feature positional encodings for boxes and grid cells.

A box is mapped to sin/cos features of its four corner coordinates over a
geometric frequency ladder, then linearly projected to the model width by
a frozen seeded Gaussian matrix. The basis is deterministic given
(dim, num_bands, seed) and is persisted with model checkpoints.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import BBox, GridSpec

__all__ = ["EncoderBasis", "make_basis", "encode_bbox", "encode_boxes", "encode_grid"]

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True, eq=False)
class EncoderBasis:
    """Frozen sin/cos feature basis: ladder frequencies plus a fixed
    random projection from raw features (4 coords x 2 funcs x bands) to dim."""

    dim: int
    num_bands: int
    seed: int
    frequencies: np.ndarray = field(repr=False)
    projection: np.ndarray = field(repr=False)

    @property
    def raw_dim(self) -> int:
        return 8 * self.num_bands


def make_basis(dim: int, num_bands: int = 16, seed: int = 0) -> EncoderBasis:
    """Build the deterministic basis: f_k = 2^k for k = 0..num_bands-1,
    projection ~ N(0, 1/raw_dim) drawn once from the given seed."""
    if dim < 1 or num_bands < 1:
        raise ValueError("dim and num_bands must be >= 1")
    freqs = np.power(2.0, np.arange(num_bands, dtype=np.float64))
    raw = 8 * num_bands
    rng = np.random.default_rng(seed)
    proj = rng.standard_normal((raw, dim)) / np.sqrt(raw)
    return EncoderBasis(dim=dim, num_bands=num_bands, seed=seed,
                        frequencies=freqs, projection=proj)


def _raw_features(coords: np.ndarray, basis: EncoderBasis) -> np.ndarray:
    """(N, 4) corner coordinates -> (N, 8*num_bands) sin/cos features."""
    phases = TWO_PI * coords[:, :, None] * basis.frequencies[None, None, :]
    feats = np.concatenate([np.sin(phases), np.cos(phases)], axis=2)
    return feats.reshape(coords.shape[0], -1)


def encode_boxes(coords: np.ndarray, basis: EncoderBasis) -> np.ndarray:
    """Vectorized encoding: (N, 4) [x1,y1,x2,y2] rows -> (N, dim)."""
    coords = np.asarray(coords, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 4:
        raise ValueError("expected (N, 4) box coordinates")
    return _raw_features(coords, basis) @ basis.projection


def encode_bbox(b: BBox, basis: EncoderBasis) -> np.ndarray:
    """Encode one box to a (dim,) vector."""
    return encode_boxes(np.array([b.as_list()]), basis)[0]


def encode_grid(g: GridSpec, basis: EncoderBasis) -> np.ndarray:
    """(H, W, dim) tensor of cell encodings on the base (H, W) grid.

    Entry (i, j) equals encode_bbox of cell (i, j)'s bounds, row-major.
    """
    rows = np.arange(g.H, dtype=np.float64)
    cols = np.arange(g.W, dtype=np.float64)
    jj, ii = np.meshgrid(cols, rows)
    x1 = (jj / g.W).ravel()
    y1 = (ii / g.H).ravel()
    x2 = ((jj + 1) / g.W).ravel()
    y2 = ((ii + 1) / g.H).ravel()
    coords = np.stack([x1, y1, x2, y2], axis=1)
    return encode_boxes(coords, basis).reshape(g.H, g.W, basis.dim)
