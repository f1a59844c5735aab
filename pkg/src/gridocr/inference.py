"""Location-guided greedy decoding with anti-repetition decay.

Each step consumes the previously emitted token and its guide box, emits
the next token, and predicts the following position. Before the position
argmax, the heatmap logits are adjusted: visited cells are penalized by
ln(sigma) per recorded visit, and (optionally) visually blank cells by
ln(eta * std). Token logits are never touched; decay feeds back into the
text stream only through the next step's guide box.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Callable

import numpy as np
import torch
from PIL import Image

from .corpus import BOS_ID, EOS_ID
from .geometry import BBox, GridSpec, FULL_PAGE, blank_std_map, box_to_cell
from .model import GridOCRModel, StepOutput, predict_position

__all__ = [
    "DecayConfig",
    "VisitCount",
    "DecodeTrace",
    "apply_accumulation_decay",
    "apply_blank_decay",
    "update_visits",
    "detect_repetition",
    "calibrate_repetition_threshold",
    "greedy_decode",
    "dump_attention",
    "prepare_image",
]

STD_FLOOR = 1e-4


@dataclass
class DecayConfig:
    sigma: float = 0.85
    eta: float = 10.0
    blank_enabled: bool = False

    def __post_init__(self):
        if not (0.0 < self.sigma <= 1.0):
            raise ValueError("sigma must be in (0, 1]")
        if self.eta <= 0.0:
            raise ValueError("eta must be > 0")


@dataclass
class VisitCount:
    """Accumulative token counts per upsampled cell; entries only grow."""

    cnt: np.ndarray

    @classmethod
    def zeros(cls, g: GridSpec) -> "VisitCount":
        return cls(cnt=np.zeros((g.rows, g.cols), dtype=np.int64))


@dataclass
class DecodeEvent:
    step: int
    kind: str  # repetition_detected | prompt_requested | prompt_applied
    payload: dict = field(default_factory=dict)


@dataclass
class DecodeTrace:
    tokens: list[int] = field(default_factory=list)
    boxes: list[BBox] = field(default_factory=list)
    token_confidences: list[float] = field(default_factory=list)
    pos_confidences: list[float] = field(default_factory=list)
    events: list[DecodeEvent] = field(default_factory=list)
    max_logits: list[float] = field(default_factory=list)
    finished: bool = False
    hit_max_len: bool = False

    def has_event(self, kind: str) -> bool:
        return any(e.kind == kind for e in self.events)

    def to_json(self) -> str:
        obj = {
            "tokens": self.tokens,
            "boxes": [b.as_list() for b in self.boxes],
            "token_confidences": self.token_confidences,
            "pos_confidences": self.pos_confidences,
            "events": [asdict(e) for e in self.events],
            "max_logits": self.max_logits,
            "finished": self.finished,
            "hit_max_len": self.hit_max_len,
        }
        return json.dumps(obj)

    @classmethod
    def from_json(cls, text: str) -> "DecodeTrace":
        obj = json.loads(text)
        return cls(
            tokens=list(obj["tokens"]),
            boxes=[BBox.from_list(b) for b in obj["boxes"]],
            token_confidences=list(obj["token_confidences"]),
            pos_confidences=list(obj["pos_confidences"]),
            events=[DecodeEvent(**e) for e in obj["events"]],
            max_logits=list(obj.get("max_logits", [])),
            finished=obj["finished"],
            hit_max_len=obj["hit_max_len"],
        )


# ---------------------------------------------------------------------------
# heatmap adjustments
# ---------------------------------------------------------------------------


def apply_accumulation_decay(hm: np.ndarray, cnt: np.ndarray, sigma: float) -> np.ndarray:
    """hm + ln(sigma) * cnt, elementwise. sigma = 1 returns hm unchanged
    (bit-exact identity: the decay is deactivated)."""
    if not (0.0 < sigma <= 1.0):
        raise ValueError("sigma must be in (0, 1]")
    if sigma == 1.0:
        return hm.copy()
    return hm + math.log(sigma) * cnt


def apply_blank_decay(
    hm: np.ndarray, std_map: np.ndarray, eta: float, std_floor: float = STD_FLOOR
) -> np.ndarray:
    """hm + ln(eta * max(std, std_floor)), elementwise; the floor keeps
    fully blank cells finite but strongly suppressed."""
    if eta <= 0.0:
        raise ValueError("eta must be > 0")
    return hm + np.log(eta * np.maximum(std_map, std_floor))


def _cells_inside(box: BBox, g: GridSpec) -> np.ndarray:
    """Boolean (2H, 2W) mask of cells whose center lies inside the box;
    at least the box-center cell for sub-cell boxes."""
    ys = (np.arange(g.rows) + 0.5) / g.rows
    xs = (np.arange(g.cols) + 0.5) / g.cols
    inside = (
        (ys[:, None] >= box.y1)
        & (ys[:, None] <= box.y2)
        & (xs[None, :] >= box.x1)
        & (xs[None, :] <= box.x2)
    )
    if not inside.any():
        inside[box_to_cell(box, g)] = True
    return inside


def update_visits(cnt: np.ndarray, box: BBox, g: GridSpec) -> np.ndarray:
    """Increment every upsampled cell whose center lies inside the box;
    sub-cell boxes still count their center cell. Mutates and returns cnt."""
    cnt += _cells_inside(box, g)
    return cnt


# ---------------------------------------------------------------------------
# repetition detection
# ---------------------------------------------------------------------------


def detect_repetition(
    max_logit_history: list[float] | np.ndarray, window: int, threshold: float
) -> int | None:
    """First step whose trailing window of per-step max logits has variance
    below the threshold; None when no window qualifies."""
    if window < 2:
        raise ValueError("window must be >= 2")
    hist = np.asarray(max_logit_history, dtype=np.float64)
    if hist.shape[0] < window:
        return None
    for end in range(window - 1, hist.shape[0]):
        if hist[end - window + 1 : end + 1].var() < threshold:
            return end
    return None


def _window_var_tail(hist: list[float], window: int) -> float | None:
    if len(hist) < window:
        return None
    return float(np.asarray(hist[-window:], dtype=np.float64).var())


def calibrate_repetition_threshold(
    histories: list[list[float]],
    window: int = 64,
    percentile: float = 1.0,
    safety: float = 0.9,
) -> float:
    """Detector threshold from clean decodes.

    Every clean decode is summarized by its minimum window variance (a
    decode is flagged iff any window falls below the threshold, so the
    minimum is the statistic that matters); the threshold is the given
    percentile of those minima, shrunk by the safety factor. Calibrating
    on raw window variances instead would flag a large fraction of clean
    pages, since each page contains many overlapping windows.
    """
    minima: list[float] = []
    for hist in histories:
        arr = np.asarray(hist, dtype=np.float64)
        vars_ = [
            float(arr[end - window + 1 : end + 1].var())
            for end in range(window - 1, arr.shape[0])
        ]
        if vars_:
            minima.append(min(vars_))
    if not minima:
        raise ValueError("no full windows in calibration histories")
    return safety * float(np.percentile(minima, percentile))


# ---------------------------------------------------------------------------
# greedy decode
# ---------------------------------------------------------------------------

PromptSource = Callable[[int, BBox, float], BBox | None]


def prepare_image(image: np.ndarray | Image.Image, model: GridOCRModel) -> np.ndarray:
    """Grayscale float32 page resized to the model raster."""
    if isinstance(image, Image.Image):
        arr = np.asarray(image.convert("L"), dtype=np.float32) / np.float32(255.0)
    else:
        arr = np.asarray(image, dtype=np.float32)
        if arr.ndim == 3:
            arr = arr.mean(axis=2)
        if arr.max() > 1.0:
            arr = arr / np.float32(255.0)
    size = (model.cfg.img_h, model.cfg.img_w)
    if arr.shape != size:
        pil = Image.fromarray(np.round(arr.astype(np.float64) * 255).astype(np.uint8))
        pil = pil.resize((size[1], size[0]), Image.BILINEAR)
        arr = np.asarray(pil, dtype=np.float32) / np.float32(255.0)
    return arr


def _softmax_max(logits: torch.Tensor) -> float:
    return float(torch.softmax(logits.to(torch.float64), dim=-1).max())


def greedy_decode(
    image: np.ndarray,
    model: GridOCRModel,
    decay: DecayConfig | None = None,
    conf_threshold: float = 0.0,
    prompt_source: PromptSource | None = None,
    max_len: int | None = None,
    rep_window: int = 64,
    rep_threshold: float | None = None,
    stop_on_repetition: bool = False,
    reset_visits_on_prompt: bool = False,
    observer: Callable[[str, dict], None] | None = None,
) -> DecodeTrace:
    """Greedy location-guided decode of one prepared page image.

    Per step: run the decoder on (last token, guide box); take the argmax
    token; record the emitted (token, guide box) pair in the visit counts;
    adjust the heatmap by the decay strategies; predict the next box. When
    min(token_conf, pos_conf) falls below conf_threshold, a prompt is
    requested: an interactive prompt_source may supply a replacement guide
    box, otherwise the model's own prediction stands. Stops at EOS, at
    max_len, or (when stop_on_repetition) at the first repetition flag.
    """
    decay = decay or DecayConfig()
    g = model.cfg.grid
    limit = model.cfg.max_len if max_len is None else min(max_len, model.cfg.max_len)
    arr = prepare_image(image, model)
    std_map = blank_std_map(arr, g) if decay.blank_enabled else None
    state = model.start_decode(torch.from_numpy(arr)[None, None])
    trace = DecodeTrace()
    cnt = VisitCount.zeros(g)
    token = BOS_ID
    guide = FULL_PAGE
    max_logits = trace.max_logits
    repetition_flagged = False
    for step_idx in range(limit):
        step = model.decoder_step(state, token, guide)
        next_token = int(np.argmax(np.asarray(step.token_logits)))
        token_conf = _softmax_max(step.token_logits)
        if next_token == EOS_ID:
            trace.finished = True
            if observer:
                observer("done", {"step": step_idx})
            break
        emitted_box = guide if step_idx > 0 else None
        # step 0 consumes the synthetic full-page box; only real guide
        # boxes count as visited token locations
        if emitted_box is not None:
            update_visits(cnt.cnt, emitted_box, g)
        hm = np.asarray(step.heatmap_logits, dtype=np.float64)
        hm = apply_accumulation_decay(hm, cnt.cnt, decay.sigma)
        if decay.blank_enabled:
            hm = apply_blank_decay(hm, std_map, decay.eta)
        adjusted = dataclasses.replace(step, heatmap_logits=hm)
        next_box, pos_conf = predict_position(adjusted, g)

        trace.tokens.append(next_token)
        trace.boxes.append(guide)
        trace.token_confidences.append(token_conf)
        trace.pos_confidences.append(pos_conf)
        if observer:
            observer(
                "token_emitted",
                {
                    "step": step_idx,
                    "token": next_token,
                    "box": guide.as_list(),
                    "token_conf": token_conf,
                    "pos_conf": pos_conf,
                },
            )

        max_logits.append(float(np.asarray(step.token_logits).max()))
        if rep_threshold is not None and not repetition_flagged:
            var = _window_var_tail(max_logits, rep_window)
            if var is not None and var < rep_threshold:
                repetition_flagged = True
                trace.events.append(
                    DecodeEvent(step=step_idx, kind="repetition_detected",
                                payload={"variance": var})
                )
                if observer:
                    observer("repetition_detected", {"step": step_idx, "variance": var})
                if stop_on_repetition:
                    break

        if min(token_conf, pos_conf) < conf_threshold:
            trace.events.append(
                DecodeEvent(
                    step=step_idx,
                    kind="prompt_requested",
                    payload={"candidate_box": next_box.as_list(), "pos_conf": pos_conf},
                )
            )
            if observer:
                observer(
                    "prompt_requested",
                    {"step": step_idx, "candidate_box": next_box.as_list(),
                     "pos_conf": pos_conf},
                )
            human_box = prompt_source(step_idx, next_box, pos_conf) if prompt_source else None
            if human_box is not None:
                next_box = human_box
                if reset_visits_on_prompt:
                    cnt.cnt[_cells_inside(human_box, g)] = 0
                trace.events.append(
                    DecodeEvent(step=step_idx, kind="prompt_applied",
                                payload={"box": human_box.as_list()})
                )
                if observer:
                    observer("prompt_applied",
                             {"step": step_idx, "box": human_box.as_list()})
        token = next_token
        guide = next_box
    else:
        trace.hit_max_len = True
        if observer:
            observer("done", {"step": len(trace.tokens), "hit_max_len": True})
    if stop_on_repetition and repetition_flagged and observer:
        observer("done", {"step": len(trace.tokens), "repetition": True})
    return trace


def dump_attention(
    trace: DecodeTrace,
    model: GridOCRModel,
    image: np.ndarray,
    step: int,
    out_dir: str | Path | None = None,
) -> np.ndarray:
    """Per-layer head-averaged cross-attention at one trace step,
    shape (dec_layers, H, W); optionally serialized as PGM plus CSV."""
    if not (0 <= step < len(trace.tokens)):
        raise IndexError(f"step {step} outside trace of {len(trace.tokens)} tokens")
    arr = prepare_image(image, model)
    state = model.start_decode(torch.from_numpy(arr)[None, None])
    # replay the prefix: step i consumed (previous token, recorded box i)
    layers = None
    for i in range(step + 1):
        tok_in = BOS_ID if i == 0 else trace.tokens[i - 1]
        _, layers = model.decoder_step(state, tok_in, trace.boxes[i],
                                       collect_layer_attn=True)
    maps = np.asarray(layers, dtype=np.float64)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        for li, m in enumerate(maps):
            scaled = np.round(255 * m / max(m.max(), 1e-12)).astype(np.uint8)
            Image.fromarray(scaled, mode="L").save(out_dir / f"layer_{li}.pgm")
            np.savetxt(out_dir / f"layer_{li}.csv", m, delimiter=",")
    return maps
