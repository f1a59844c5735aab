"""Losses, the teacher-forced training loop, and numeric gradient checks.

The position loss supervises the grid-classification head with cross
entropy and the size/offset heads through IoU and a normalized center
distance, both evaluated at the teacher-forced target cell so gradients
flow even when the argmax cell is wrong. Page losses weight the first
init_span steps by theta.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .corpus import BOS_ID, EOS_ID, PAD_ID, PageSample, text_skip_augment, image_augment
from .geometry import BBox, GridSpec, FULL_PAGE, noisify_box
from .model import GridOCRModel

__all__ = [
    "LossConfig",
    "TrainConfig",
    "token_loss",
    "position_loss",
    "total_loss",
    "fit",
    "grad_check",
    "build_batch",
    "teacher_forced_accuracy",
    "lr_at_step",
]

log = logging.getLogger(__name__)


@dataclass
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    gamma: float = 1.0
    theta: float = 2.0
    init_span: int = 32

    def __post_init__(self):
        if min(self.alpha, self.beta, self.gamma, self.theta) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.init_span < 0:
            raise ValueError("init_span must be >= 0")


@dataclass
class TrainConfig:
    epochs: int = 10
    batch_size: int = 8
    lr_max: float = 5e-4
    lr_min: float = 1e-5
    seed: int = 0
    kappa: float = 0.5
    skip_augment: bool = True
    augment_probs: dict[str, float] | None = None
    pos_samples: int = 24
    lr_total_steps: int | None = None  # schedule horizon; None = run length
    stop_acc: float | None = None
    loss: LossConfig = field(default_factory=LossConfig)


# ---------------------------------------------------------------------------
# loss terms
# ---------------------------------------------------------------------------


def token_loss(
    logits_seq: torch.Tensor, target_tokens: torch.Tensor, pad_id: int = PAD_ID
) -> torch.Tensor:
    """Mean cross entropy over non-padding positions of one sequence."""
    if logits_seq.ndim != 2 or logits_seq.shape[0] != target_tokens.shape[0]:
        raise ValueError("logits_seq must be (T, v) aligned with target_tokens")
    mask = target_tokens != pad_id
    if not bool(mask.any()):
        raise ValueError("empty sequence: no non-padding targets")
    return F.cross_entropy(logits_seq[mask], target_tokens[mask])


def _cells_for_boxes(boxes: torch.Tensor, g: GridSpec) -> tuple[torch.Tensor, torch.Tensor]:
    """(N, 4) -> (row, col) center cells on the upsampled lattice."""
    cx = 0.5 * (boxes[:, 0] + boxes[:, 2])
    cy = 0.5 * (boxes[:, 1] + boxes[:, 3])
    row = torch.clamp(torch.floor(cy * g.rows), max=g.rows - 1).long()
    col = torch.clamp(torch.floor(cx * g.cols), max=g.cols - 1).long()
    return row, col


def _iou_terms(pred: torch.Tensor, target: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable IoU and normalized squared center distance, (N,)."""
    ix = torch.minimum(pred[:, 2], target[:, 2]) - torch.maximum(pred[:, 0], target[:, 0])
    iy = torch.minimum(pred[:, 3], target[:, 3]) - torch.maximum(pred[:, 1], target[:, 1])
    inter = ix.clamp(min=0) * iy.clamp(min=0)
    area_p = (pred[:, 2] - pred[:, 0]) * (pred[:, 3] - pred[:, 1])
    area_t = (target[:, 2] - target[:, 0]) * (target[:, 3] - target[:, 1])
    union = area_p + area_t - inter
    iou = inter / union.clamp(min=1e-12)
    pcx = 0.5 * (pred[:, 0] + pred[:, 2])
    pcy = 0.5 * (pred[:, 1] + pred[:, 3])
    tcx = 0.5 * (target[:, 0] + target[:, 2])
    tcy = 0.5 * (target[:, 1] + target[:, 3])
    d2 = (pcx - tcx) ** 2 + (pcy - tcy) ** 2
    ex = torch.maximum(pred[:, 2], target[:, 2]) - torch.minimum(pred[:, 0], target[:, 0])
    ey = torch.maximum(pred[:, 3], target[:, 3]) - torch.minimum(pred[:, 1], target[:, 1])
    diag2 = ex * ex + ey * ey
    return iou, d2 / diag2.clamp(min=1e-12)


def _position_terms(
    heatmap_logits: torch.Tensor,
    size_map: torch.Tensor,
    offset_map: torch.Tensor,
    target_boxes: torch.Tensor,
    g: GridSpec,
    cfg: LossConfig,
) -> torch.Tensor:
    """Per-position loss vector (N,). Maps are (N, 2H, 2W) and (N, 2, 2H, 2W);
    size/offset channels are (h, w) and (dy, dx). The predicted box is
    assembled (unclamped) from the target cell's regressions."""
    n = heatmap_logits.shape[0]
    row, col = _cells_for_boxes(target_boxes, g)
    cell_idx = row * g.cols + col
    ce = F.cross_entropy(heatmap_logits.reshape(n, -1), cell_idx, reduction="none")
    ar = torch.arange(n)
    h = size_map[ar, 0, row, col]
    w = size_map[ar, 1, row, col]
    dy = offset_map[ar, 0, row, col]
    dx = offset_map[ar, 1, row, col]
    cy = (row.to(h.dtype) + dy) / g.rows
    cx = (col.to(h.dtype) + dx) / g.cols
    pred = torch.stack(
        [cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], dim=1
    )
    iou, d2 = _iou_terms(pred, target_boxes.to(pred.dtype))
    return cfg.alpha * ce + cfg.beta * (1.0 - iou + cfg.gamma * d2)


def position_loss(step, target_box: BBox, g: GridSpec, cfg: LossConfig) -> torch.Tensor:
    """Position loss of one step output against one target box."""
    heat = step.heatmap_logits[None]
    size = step.size_map.permute(2, 0, 1)[None]
    offset = step.offset_map.permute(2, 0, 1)[None]
    target = torch.tensor([target_box.as_list()], dtype=heat.dtype)
    return _position_terms(heat, size, offset, target, g, cfg)[0]


def _span_mean(values: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    if not bool(mask.any()):
        return values.sum() * 0.0
    return values[mask].mean()


def total_loss(
    token_logits: torch.Tensor,
    target_tokens: torch.Tensor,
    heatmap_logits: torch.Tensor,
    size_map: torch.Tensor,
    offset_map: torch.Tensor,
    target_boxes: torch.Tensor,
    pos_mask: torch.Tensor,
    g: GridSpec,
    cfg: LossConfig,
) -> torch.Tensor:
    """Whole-page objective: spans split at init_span, each span
    mean-reduced, the initial span weighted by theta.

    pos_mask marks steps that carry a next-position target (the final
    step does not).
    """
    t = token_logits.shape[0]
    steps = torch.arange(t)
    init = steps < cfg.init_span
    tok_mask = target_tokens != PAD_ID
    ce = F.cross_entropy(token_logits, target_tokens.clamp(min=0), reduction="none")
    lt_init = _span_mean(ce, tok_mask & init)
    lt_sub = _span_mean(ce, tok_mask & ~init)
    pos = _position_terms(heatmap_logits, size_map, offset_map, target_boxes, g, cfg)
    lp_init = _span_mean(pos, pos_mask & init)
    lp_sub = _span_mean(pos, pos_mask & ~init)
    return cfg.theta * (lp_init + lt_init) + lp_sub + lt_sub


# ---------------------------------------------------------------------------
# batching and the fit loop
# ---------------------------------------------------------------------------


def build_batch(
    pages: list[PageSample],
    rng: np.random.Generator | None = None,
    kappa: float = 0.0,
    skip_augment: bool = False,
    augment_probs: dict[str, float] | None = None,
    img_size: tuple[int, int] | None = None,
) -> dict:
    """Teacher-forced tensors for a batch of pages.

    Inputs are [BOS, t_0..t_{n-1}] with guide boxes [full page, box_1..,
    box_EOS]; targets are [t_0.., EOS] with next-position boxes where they
    exist. Sequences are right-padded with PAD; augmentation (guide-box
    noise, token skips, image noise) applies only when configured.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    prepped: list[PageSample] = []
    for page in pages:
        if skip_augment:
            page = text_skip_augment(page, rng)
        prepped.append(page)
    t_max = max(len(p) + 1 for p in prepped)
    b = len(prepped)
    tokens_in = np.full((b, t_max), PAD_ID, dtype=np.int64)
    targets = np.full((b, t_max), PAD_ID, dtype=np.int64)
    guides = np.zeros((b, t_max, 4), dtype=np.float64)
    guides[:, :, 2:] = 1.0  # padded steps keep a valid (full page) box
    target_boxes = np.zeros((b, t_max, 4), dtype=np.float64)
    pos_mask = np.zeros((b, t_max), dtype=bool)
    images = np.zeros((b, 1) + (img_size or prepped[0].image.shape), dtype=np.float32)
    for i, page in enumerate(prepped):
        n = len(page)
        img = page.image
        if augment_probs is not None:
            img = image_augment(img, rng, augment_probs)
        if img_size is not None and img.shape != img_size:
            pil = Image.fromarray((np.asarray(img, dtype=np.float64) * 255).astype(np.uint8))
            pil = pil.resize((img_size[1], img_size[0]), Image.BILINEAR)
            img = np.asarray(pil, dtype=np.float32) / np.float32(255.0)
        images[i, 0] = img
        tokens_in[i, 0] = BOS_ID
        tokens_in[i, 1 : n + 1] = page.tokens
        targets[i, :n] = page.tokens
        targets[i, n] = EOS_ID
        # the end of the sequence is marked by the full-page sentinel box,
        # mirroring the decode-time start; a small mid-page box can then
        # never read as a stop signal
        boxes = page.boxes + [FULL_PAGE]
        guides[i, 0] = FULL_PAGE.as_list()
        for j in range(1, n + 1):
            gb = boxes[j]
            if kappa > 0:
                gb = noisify_box(gb, rng, kappa)
            guides[i, j] = gb.as_list()
        for j in range(n):  # step j predicts the box consumed at step j+1
            target_boxes[i, j] = boxes[j + 1].as_list()
            pos_mask[i, j] = True
    return {
        "images": torch.from_numpy(images),
        "tokens_in": torch.from_numpy(tokens_in),
        "targets": torch.from_numpy(targets),
        "guides": guides,
        "target_boxes": torch.from_numpy(target_boxes),
        "pos_mask": torch.from_numpy(pos_mask),
    }


def lr_at_step(step: int, total_steps: int, lr_max: float, lr_min: float) -> float:
    """Per-step geometric interpolation from lr_max (step 0) to lr_min
    (final step)."""
    if total_steps <= 1:
        return lr_max
    frac = step / (total_steps - 1)
    return lr_max * (lr_min / lr_max) ** frac


def _batch_objective(
    model: GridOCRModel,
    batch: dict,
    cfg: LossConfig,
    pos_samples: int,
    rng: np.random.Generator,
) -> tuple[torch.Tensor, dict]:
    """Span-weighted objective pooled across one batch; position terms are
    evaluated on a per-page sample of valid steps to bound head cost."""
    g = model.cfg.grid
    b, t = batch["targets"].shape
    pos_mask = batch["pos_mask"]
    k = min(pos_samples, t)
    head_pos = np.zeros((b, k), dtype=np.int64)
    for i in range(b):
        valid = np.flatnonzero(pos_mask[i].numpy())
        head_pos[i] = rng.choice(valid, size=k, replace=len(valid) < k)
    head_positions = torch.from_numpy(head_pos)
    out = model.forward_teacher(
        batch["images"], batch["tokens_in"], batch["guides"], head_positions=head_positions
    )
    targets = batch["targets"]
    tok_mask = targets != PAD_ID
    ce = F.cross_entropy(
        out["token_logits"].reshape(b * t, -1), targets.reshape(-1), reduction="none"
    ).view(b, t)
    steps = torch.arange(t)[None, :].expand(b, t)
    init = steps < cfg.init_span
    lt_init = _span_mean(ce, tok_mask & init)
    lt_sub = _span_mean(ce, tok_mask & ~init)
    tgt_boxes = batch["target_boxes"].gather(
        1, head_positions[:, :, None].expand(-1, -1, 4)
    )
    pos = _position_terms(
        out["heatmap_logits"].reshape(b * k, *out["heatmap_logits"].shape[2:]),
        out["size_map"].reshape(b * k, *out["size_map"].shape[2:]),
        out["offset_map"].reshape(b * k, *out["offset_map"].shape[2:]),
        tgt_boxes.reshape(b * k, 4).to(out["heatmap_logits"].dtype),
        g,
        cfg,
    ).view(b, k)
    pos_init = torch.from_numpy(head_pos < cfg.init_span)
    lp_init = _span_mean(pos, pos_init)
    lp_sub = _span_mean(pos, ~pos_init)
    loss = cfg.theta * (lp_init + lt_init) + lp_sub + lt_sub
    parts = {
        "token_loss": float((lt_init + lt_sub).detach() / 2),
        "pos_loss": float((lp_init + lp_sub).detach() / 2),
    }
    return loss, parts


def teacher_forced_accuracy(
    model: GridOCRModel, pages: list[PageSample], batch_size: int = 16
) -> float:
    """Next-token accuracy under teacher forcing with exact guide boxes."""
    size = (model.cfg.img_h, model.cfg.img_w)
    hits = total = 0
    model.eval()
    with torch.no_grad():
        for i in range(0, len(pages), batch_size):
            batch = build_batch(pages[i : i + batch_size], img_size=size)
            out = model.forward_teacher(
                batch["images"], batch["tokens_in"], batch["guides"],
                head_positions=torch.zeros(
                    (batch["targets"].shape[0], 1), dtype=torch.long
                ),
            )
            pred = out["token_logits"].argmax(dim=-1)
            mask = batch["targets"] != PAD_ID
            hits += int((pred[mask] == batch["targets"][mask]).sum())
            total += int(mask.sum())
    return hits / max(total, 1)


def fit(
    corpus: list[PageSample],
    model: GridOCRModel,
    cfg: TrainConfig,
    heldout: list[PageSample] | None = None,
) -> list[dict]:
    """Train with teacher forcing; returns per-epoch history rows.

    The guide box fed with token i is the ground-truth box of token i+1,
    noisified; the first step always sees the full-page box, matching the
    decode-time start. Learning rate decays geometrically per step from
    lr_max to lr_min. Aborts on non-finite loss.
    """
    if not corpus:
        raise ValueError("empty corpus")
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr_max)
    n_batches = math.ceil(len(corpus) / cfg.batch_size)
    total_steps = cfg.lr_total_steps or (cfg.epochs * n_batches)
    img_size = (model.cfg.img_h, model.cfg.img_w)
    history: list[dict] = []
    step = 0
    for epoch in range(cfg.epochs):
        model.train()
        order = rng.permutation(len(corpus))
        t0 = time.time()
        sums = {"loss": 0.0, "token_loss": 0.0, "pos_loss": 0.0}
        for bi in range(n_batches):
            idx = order[bi * cfg.batch_size : (bi + 1) * cfg.batch_size]
            pages = [corpus[j] for j in idx]
            batch = build_batch(
                pages,
                rng=rng,
                kappa=cfg.kappa,
                skip_augment=cfg.skip_augment,
                augment_probs=cfg.augment_probs,
                img_size=img_size,
            )
            lr = lr_at_step(step, total_steps, cfg.lr_max, cfg.lr_min)
            for group in opt.param_groups:
                group["lr"] = lr
            loss, parts = _batch_objective(model, batch, cfg.loss, cfg.pos_samples, rng)
            if not torch.isfinite(loss):
                raise RuntimeError(
                    f"non-finite loss at epoch {epoch} batch {bi}: {float(loss)!r}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            step += 1
            sums["loss"] += float(loss.detach())
            sums["token_loss"] += parts["token_loss"]
            sums["pos_loss"] += parts["pos_loss"]
        row = {
            "epoch": epoch,
            "loss": sums["loss"] / n_batches,
            "token_loss": sums["token_loss"] / n_batches,
            "pos_loss": sums["pos_loss"] / n_batches,
            "lr": lr_at_step(step - 1, total_steps, cfg.lr_max, cfg.lr_min),
            "seconds": time.time() - t0,
        }
        if heldout:
            row["heldout_acc"] = teacher_forced_accuracy(model, heldout)
        history.append(row)
        log.info("epoch %s: %s", epoch, row)
        if (
            cfg.stop_acc is not None
            and heldout
            and row.get("heldout_acc", 0.0) >= cfg.stop_acc
        ):
            break
    model.eval()
    return history


# ---------------------------------------------------------------------------
# gradient verification
# ---------------------------------------------------------------------------


def grad_check(
    loss_fn,
    params: list[torch.Tensor],
    eps: float = 1e-5,
    n_samples: int = 200,
    rng: np.random.Generator | None = None,
    min_grad: float = 0.0,
) -> float:
    """Max relative error between analytic gradients and central finite
    differences over sampled parameter coordinates. Parameters must be
    double precision.

    min_grad restricts sampling to coordinates whose analytic gradient
    magnitude is at least that large; near-zero gradients measure only
    finite-difference roundoff and carry no signal about correctness.
    """
    if rng is None:
        rng = np.random.default_rng(0)
    for p in params:
        if p.dtype != torch.float64:
            raise ValueError("grad_check requires float64 parameters")
    loss = loss_fn()
    grads = list(torch.autograd.grad(loss, params, allow_unused=True))
    for i, grad in enumerate(grads):
        if grad is None:  # parameter unused by this loss; gradient is zero
            grads[i] = torch.zeros_like(params[i])
        elif not torch.isfinite(grad).all():
            raise FloatingPointError("non-finite analytic gradient")
    eligible = []
    for pi, grad in enumerate(grads):
        idx = torch.nonzero(grad.reshape(-1).abs() >= min_grad).flatten()
        eligible.extend((pi, int(ci)) for ci in idx.tolist())
    if not eligible:
        raise ValueError(f"no coordinates have |grad| >= {min_grad}")
    chosen = rng.choice(len(eligible), size=n_samples,
                        replace=len(eligible) < n_samples)
    worst = 0.0
    with torch.no_grad():
        for k in chosen:
            pi, ci = eligible[int(k)]
            flat = params[pi].view(-1)
            orig = float(flat[ci])
            flat[ci] = orig + eps
            up = float(loss_fn())
            flat[ci] = orig - eps
            down = float(loss_fn())
            flat[ci] = orig
            numeric = (up - down) / (2.0 * eps)
            analytic = float(grads[pi].reshape(-1)[ci])
            rel = abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)
            worst = max(worst, rel)
    return worst
