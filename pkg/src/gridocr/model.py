"""Grid-fused encoder-decoder with box-prediction heads.

The image encoder is a plain patch-embedding transformer (no internal
positional terms: spatial information enters only when the frozen grid
encoding is summed onto the encoder output). The decoder fuses token
embeddings with box encodings, and three convolutional heads turn the
head-averaged last-layer cross-attention map into an upsampled heatmap
plus size and center-offset regressions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .encoding import EncoderBasis, make_basis, encode_boxes, encode_grid
from .geometry import BBox, GridSpec, assemble_box

__all__ = [
    "ModelConfig",
    "StepOutput",
    "DecodeState",
    "GridOCRModel",
    "predict_position",
    "save_checkpoint",
    "load_checkpoint",
]


@dataclass
class ModelConfig:
    d: int = 64
    enc_layers: int = 4
    dec_layers: int = 4
    heads: int = 4
    H: int = 14
    W: int = 10
    v: int = 256
    max_len: int = 1024
    patch: int = 16
    pos_bands: int = 7
    pos_seed: int = 7
    pos_bias_sigma: float = 0.6
    pos_bias_gain: float = 2.0
    head_channels: int = 12
    mlp_ratio: int = 2

    def __post_init__(self):
        if self.d % self.heads != 0:
            raise ValueError("d must be divisible by heads")
        if self.max_len < 1:
            raise ValueError("max_len must be >= 1")
        if self.H < 1 or self.W < 1 or self.patch < 1:
            raise ValueError("H, W, patch must be >= 1")

    @property
    def img_h(self) -> int:
        return self.H * self.patch

    @property
    def img_w(self) -> int:
        return self.W * self.patch

    @property
    def grid(self) -> GridSpec:
        return GridSpec(self.H, self.W)


@dataclass
class StepOutput:
    """Single-step decoder outputs.

    heatmap_logits is (2H, 2W); size_map and offset_map are (2H, 2W, 2)
    with channels (h, w) and (dy, dx) in [0,1]; attn is the head-averaged
    (H, W) cross-attention map that fed the position heads.
    """

    token_logits: torch.Tensor
    heatmap_logits: torch.Tensor
    size_map: torch.Tensor
    offset_map: torch.Tensor
    attn: torch.Tensor


class _Attention(nn.Module):
    def __init__(self, d: int, heads: int, bias_gain: float | None = None):
        super().__init__()
        self.heads = heads
        self.hd = d // heads
        self.q = nn.Linear(d, d)
        self.k = nn.Linear(d, d)
        self.v = nn.Linear(d, d)
        self.out = nn.Linear(d, d)
        if bias_gain is not None:
            self.bias_gain = nn.Parameter(torch.full((heads,), float(bias_gain)))

    def _split(self, x: torch.Tensor) -> torch.Tensor:
        b, t, _ = x.shape
        return x.view(b, t, self.heads, self.hd).transpose(1, 2)

    def _merge(self, x: torch.Tensor) -> torch.Tensor:
        b, h, t, hd = x.shape
        return x.transpose(1, 2).reshape(b, t, h * hd)

    def project_kv(self, mem: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self._split(self.k(mem)), self._split(self.v(mem))

    def forward(
        self,
        x: torch.Tensor,
        kv: tuple[torch.Tensor, torch.Tensor] | None = None,
        causal: bool = False,
        need_weights: bool = False,
        score_bias: torch.Tensor | None = None,
    ):
        """x: (B, T, d). kv: precomputed key/value heads for cross
        attention; self-attention when omitted. score_bias (B, T, S) is
        added to the logits of every head, scaled by its learned gain."""
        q = self._split(self.q(x))
        if kv is None:
            k, v = self.project_kv(x)
        else:
            k, v = kv
        scores = q @ k.transpose(-2, -1) / math.sqrt(self.hd)
        if score_bias is not None:
            scores = scores + self.bias_gain[None, :, None, None] * score_bias[:, None]
        if causal:
            t, s = scores.shape[-2:]
            mask = torch.triu(torch.ones(t, s, dtype=torch.bool, device=x.device), 1)
            scores = scores.masked_fill(mask, float("-inf"))
        weights = scores.softmax(dim=-1)
        y = self.out(self._merge(weights @ v))
        return (y, weights) if need_weights else (y, None)


class _MLP(nn.Module):
    def __init__(self, d: int, ratio: int):
        super().__init__()
        self.fc1 = nn.Linear(d, ratio * d)
        self.fc2 = nn.Linear(ratio * d, d)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class _EncoderBlock(nn.Module):
    def __init__(self, d: int, heads: int, ratio: int):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.attn = _Attention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.mlp = _MLP(d, ratio)

    def forward(self, x):
        x = x + self.attn(self.ln1(x))[0]
        return x + self.mlp(self.ln2(x))


class _DecoderBlock(nn.Module):
    def __init__(self, d: int, heads: int, ratio: int, bias_gain: float):
        super().__init__()
        self.ln1 = nn.LayerNorm(d)
        self.self_attn = _Attention(d, heads)
        self.ln2 = nn.LayerNorm(d)
        self.cross_attn = _Attention(d, heads, bias_gain=bias_gain)
        self.ln3 = nn.LayerNorm(d)
        self.mlp = _MLP(d, ratio)

    def forward(self, x, mem_kv, score_bias=None):
        x = x + self.self_attn(self.ln1(x), causal=True)[0]
        y, w = self.cross_attn(
            self.ln2(x), kv=mem_kv, need_weights=True, score_bias=score_bias
        )
        x = x + y
        x = x + self.mlp(self.ln3(x))
        return x, w


class _PositionHeads(nn.Module):
    """Three similar convolutional branches over a shared trunk.

    Input is the (H, W) attention map stacked with fixed row/column
    coordinate channels; the transposed convolution doubles resolution to
    (2H, 2W). Branch activations: raw logits for the heatmap, sigmoid for
    size and offset.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        c = cfg.head_channels
        self.trunk = nn.Sequential(
            nn.Conv2d(3, c, 7, padding=3),
            nn.ReLU(),
            nn.Conv2d(c, c, 5, padding=2),
            nn.ReLU(),
            nn.ConvTranspose2d(c, c, 2, stride=2),
            nn.ReLU(),
        )
        self.heat = nn.Conv2d(c, 1, 3, padding=1)
        self.size = nn.Conv2d(c, 2, 3, padding=1)
        self.offset = nn.Conv2d(c, 2, 3, padding=1)
        yy, xx = torch.meshgrid(
            torch.linspace(0.0, 1.0, cfg.H), torch.linspace(0.0, 1.0, cfg.W),
            indexing="ij",
        )
        self.register_buffer("coords", torch.stack([yy, xx])[None], persistent=False)

    def forward(self, attn_maps: torch.Tensor):
        """attn_maps: (N, H, W) -> heatmap (N, 2H, 2W), size/offset (N, 2, 2H, 2W)."""
        n = attn_maps.shape[0]
        coords = self.coords.expand(n, -1, -1, -1).to(attn_maps.dtype)
        x = torch.cat([attn_maps[:, None], coords], dim=1)
        feats = self.trunk(x)
        return (
            self.heat(feats).squeeze(1),
            torch.sigmoid(self.size(feats)),
            torch.sigmoid(self.offset(feats)),
        )


@dataclass
class DecodeState:
    """Single-owner incremental decode state (not thread safe)."""

    memory: torch.Tensor
    mem_kv: list[tuple[torch.Tensor, torch.Tensor]]
    sa_cache: list[tuple[torch.Tensor, torch.Tensor] | None]
    steps: int = 0


class GridOCRModel(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.basis: EncoderBasis = make_basis(cfg.d, cfg.pos_bands, cfg.pos_seed)
        self.patch_embed = nn.Conv2d(1, cfg.d, cfg.patch, stride=cfg.patch)
        self.enc_blocks = nn.ModuleList(
            _EncoderBlock(cfg.d, cfg.heads, cfg.mlp_ratio) for _ in range(cfg.enc_layers)
        )
        self.enc_norm = nn.LayerNorm(cfg.d)
        self.tok_embed = nn.Embedding(cfg.v, cfg.d)
        self.dec_blocks = nn.ModuleList(
            _DecoderBlock(cfg.d, cfg.heads, cfg.mlp_ratio, cfg.pos_bias_gain)
            for _ in range(cfg.dec_layers)
        )
        self.dec_norm = nn.LayerNorm(cfg.d)
        self.lm_head = nn.Linear(cfg.d, cfg.v)
        self.pos_heads = _PositionHeads(cfg)
        grid_enc = encode_grid(cfg.grid, self.basis)  # (H, W, d)
        self.register_buffer("grid_enc", torch.from_numpy(grid_enc).float())
        # base-grid cell centers for the guide-box locality bias added to
        # cross-attention scores
        jj, ii = np.meshgrid(np.arange(cfg.W), np.arange(cfg.H))
        cell_centers = np.stack(
            [(jj.ravel() + 0.5) / cfg.W, (ii.ravel() + 0.5) / cfg.H], axis=1
        )
        self.register_buffer(
            "bias_cell_centers", torch.from_numpy(cell_centers).float()
        )

    # ---- building blocks -------------------------------------------------

    def encode_image(self, images: torch.Tensor) -> torch.Tensor:
        """(B, 1, img_h, img_w) -> (B, H, W, d) content embedding."""
        cfg = self.cfg
        if images.shape[-2:] != (cfg.img_h, cfg.img_w):
            raise ValueError(
                f"expected {(cfg.img_h, cfg.img_w)} image, got {tuple(images.shape[-2:])}"
            )
        x = self.patch_embed(images)  # (B, d, H, W)
        x = x.flatten(2).transpose(1, 2)  # (B, HW, d)
        for block in self.enc_blocks:
            x = block(x)
        x = self.enc_norm(x)
        return x.view(-1, cfg.H, cfg.W, cfg.d)

    def fuse_encoder_states(
        self, h_img: torch.Tensor, h_grid: torch.Tensor
    ) -> torch.Tensor:
        """Sum content and grid-position embeddings, flattened row-major."""
        if h_img.shape[-3:] != h_grid.shape[-3:]:
            raise ValueError("image/grid embedding shapes differ")
        fused = h_img + h_grid
        return fused.reshape(fused.shape[0], -1, fused.shape[-1])

    def encode_box_coords(self, coords: np.ndarray) -> torch.Tensor:
        """(..., 4) numpy box coordinates -> (..., d) tensor via the basis."""
        flat = coords.reshape(-1, 4)
        enc = encode_boxes(flat, self.basis)
        t = torch.from_numpy(enc.reshape(*coords.shape[:-1], self.cfg.d))
        return t.to(self.grid_enc.dtype)

    def _memory(self, images: torch.Tensor) -> torch.Tensor:
        return self.fuse_encoder_states(self.encode_image(images), self.grid_enc)

    def _pos_bias(self, coords: np.ndarray) -> torch.Tensor:
        """Locality prior (..., S): negative squared distance between the
        guide box's top-left corner and each cell center, in cell units.
        Anchoring at the corner (not the center) makes the full-page guide
        used at the start of a decode point at the reading origin instead
        of the page middle. Learned per-head gains rescale the prior."""
        cfg = self.cfg
        flat = coords.reshape(-1, 4)
        anchors = np.stack([flat[:, 0], flat[:, 1]], axis=1)
        t = torch.from_numpy(anchors).to(self.bias_cell_centers.dtype)
        dx = (t[:, None, 0] - self.bias_cell_centers[None, :, 0]) * cfg.W
        dy = (t[:, None, 1] - self.bias_cell_centers[None, :, 1]) * cfg.H
        bias = -(dx * dx + dy * dy) / (2.0 * cfg.pos_bias_sigma**2)
        return bias.view(*coords.shape[:-1], -1)

    # ---- teacher-forced full-sequence path --------------------------------

    def forward_teacher(
        self,
        images: torch.Tensor,
        tokens: torch.Tensor,
        guide_boxes: np.ndarray,
        head_positions: torch.Tensor | None = None,
        collect_layer_attn: bool = False,
    ) -> dict:
        """Causal forward over a whole teacher-forced sequence.

        tokens: (B, T) decoder input ids; guide_boxes: (B, T, 4). The
        position heads run on every step's attention map, or only on
        head_positions (B, K) step indices when given.
        """
        cfg = self.cfg
        b, t = tokens.shape
        if t > cfg.max_len:
            raise ValueError(f"sequence length {t} exceeds max_len {cfg.max_len}")
        memory = self._memory(images)
        guide_boxes = np.asarray(guide_boxes, dtype=np.float64)
        x = self.tok_embed(tokens) + self.encode_box_coords(guide_boxes).to(tokens.device)
        score_bias = self._pos_bias(guide_boxes)
        layer_attn = []
        attn = None
        for block in self.dec_blocks:
            mem_kv = block.cross_attn.project_kv(memory)
            x, w = block(x, mem_kv, score_bias=score_bias)
            attn = w
            if collect_layer_attn:
                layer_attn.append(w.mean(dim=1))
        h = self.dec_norm(x)
        token_logits = self.lm_head(h)
        attn_mean = attn.mean(dim=1)  # (B, T, S)
        maps = attn_mean.view(b, t, cfg.H, cfg.W)
        if head_positions is not None:
            k = head_positions.shape[1]
            idx = head_positions[:, :, None, None].expand(-1, -1, cfg.H, cfg.W)
            sel = maps.gather(1, idx)  # (B, K, H, W)
        else:
            k = t
            sel = maps
        heat, size, offset = self.pos_heads(sel.reshape(b * k, cfg.H, cfg.W))
        out = {
            "token_logits": token_logits,
            "attn_maps": maps,
            "heatmap_logits": heat.view(b, k, 2 * cfg.H, 2 * cfg.W),
            "size_map": size.view(b, k, 2, 2 * cfg.H, 2 * cfg.W),
            "offset_map": offset.view(b, k, 2, 2 * cfg.H, 2 * cfg.W),
        }
        if collect_layer_attn:
            out["layer_attn"] = torch.stack(layer_attn, dim=0)  # (L, B, T, S)
        return out

    # ---- incremental decode path ------------------------------------------

    @torch.no_grad()
    def start_decode(self, image: torch.Tensor) -> DecodeState:
        """Prepare per-decode caches for one (1, 1, img_h, img_w) image."""
        memory = self._memory(image)
        mem_kv = [blk.cross_attn.project_kv(memory) for blk in self.dec_blocks]
        return DecodeState(
            memory=memory,
            mem_kv=mem_kv,
            sa_cache=[None] * len(self.dec_blocks),
            steps=0,
        )

    @torch.no_grad()
    def decoder_step(
        self,
        state: DecodeState,
        token_id: int,
        guide_box: BBox,
        collect_layer_attn: bool = False,
    ) -> StepOutput | tuple[StepOutput, torch.Tensor]:
        """Advance one step: consume (token, next-position box), emit the
        next-token logits plus position maps for the step after."""
        cfg = self.cfg
        if state.steps >= cfg.max_len:
            raise RuntimeError(f"decode exceeded max_len={cfg.max_len}")
        tok = torch.tensor([[token_id]], dtype=torch.long)
        coords = np.asarray(guide_box.as_list(), dtype=np.float64).reshape(1, 1, 4)
        x = self.tok_embed(tok) + self.encode_box_coords(coords)
        score_bias = self._pos_bias(coords)
        layer_attn = []
        attn = None
        for i, block in enumerate(self.dec_blocks):
            h = block.ln1(x)
            q = block.self_attn
            k_new, v_new = q.project_kv(h)
            if state.sa_cache[i] is not None:
                k_all = torch.cat([state.sa_cache[i][0], k_new], dim=2)
                v_all = torch.cat([state.sa_cache[i][1], v_new], dim=2)
            else:
                k_all, v_all = k_new, v_new
            state.sa_cache[i] = (k_all, v_all)
            y, _ = q(h, kv=(k_all, v_all))
            x = x + y
            y, w = block.cross_attn(
                block.ln2(x), kv=state.mem_kv[i], need_weights=True,
                score_bias=score_bias,
            )
            x = x + y
            x = x + block.mlp(block.ln3(x))
            attn = w
            if collect_layer_attn:
                layer_attn.append(w.mean(dim=1))
        state.steps += 1
        h = self.dec_norm(x)
        token_logits = self.lm_head(h)[0, 0]
        attn_map = attn.mean(dim=1).view(1, cfg.H, cfg.W)
        heat, size, offset = self.pos_heads(attn_map)
        step = StepOutput(
            token_logits=token_logits.detach(),
            heatmap_logits=heat[0].detach(),
            size_map=size[0].permute(1, 2, 0).detach(),
            offset_map=offset[0].permute(1, 2, 0).detach(),
            attn=attn_map[0].detach(),
        )
        if collect_layer_attn:
            layers = torch.cat(layer_attn, dim=0).view(-1, cfg.H, cfg.W)
            return step, layers.detach()
        return step


def predict_position(step: StepOutput, g: GridSpec) -> tuple[BBox, float]:
    """Argmax cell of the softmaxed heatmap, assembled with that cell's
    size/offset regressions. Ties break to the smallest row-major index."""
    hm = np.asarray(step.heatmap_logits, dtype=np.float64)
    flat = hm.reshape(-1)
    flat = flat - flat.max()
    p = np.exp(flat)
    p /= p.sum()
    idx = int(np.argmax(p))
    row, col = divmod(idx, g.cols)
    size = np.asarray(step.size_map, dtype=np.float64)
    offset = np.asarray(step.offset_map, dtype=np.float64)
    dy, dx = offset[row, col]
    h, w = size[row, col]
    box = assemble_box((row, col), (dy, dx), (h, w), g)
    return box, float(p[idx])


# ---- checkpoints -----------------------------------------------------------


def save_checkpoint(model: GridOCRModel, path: str | Path, meta: dict | None = None):
    """Bundle config, weights, and arbitrary JSON-able metadata."""
    payload = {
        "config": asdict(model.cfg),
        "state_dict": model.state_dict(),
        "meta": meta or {},
    }
    torch.save(payload, str(path))


def load_checkpoint(path: str | Path) -> tuple[GridOCRModel, dict]:
    payload = torch.load(str(path), map_location="cpu", weights_only=False)
    cfg = ModelConfig(**payload["config"])
    model = GridOCRModel(cfg)
    model.load_state_dict(payload["state_dict"])
    model.eval()
    return model, payload.get("meta", {})
