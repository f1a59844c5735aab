"""Output-quality and repetition metrics.

Text metrics tokenize on whitespace. METEOR is the exact-match variant
(no stemming or synonym resources) and is reported as meteor_lite.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass, field

from .geometry import BBox, iou

__all__ = [
    "EvalReport",
    "edit_distance",
    "levenshtein",
    "bleu",
    "meteor_lite",
    "prf",
    "align_tokens",
    "mean_box_iou",
    "decode_token_accuracy",
    "repetition_rates",
]


def levenshtein(a, b) -> int:
    """Unnormalized edit distance between two sequences."""
    if len(a) < len(b):
        a, b = b, a
    prev = list(range(len(b) + 1))
    for i, ca in enumerate(a, start=1):
        cur = [i]
        for j, cb in enumerate(b, start=1):
            cur.append(min(prev[j] + 1, cur[j - 1] + 1, prev[j - 1] + (ca != cb)))
        prev = cur
    return prev[-1]


def edit_distance(pred: str, ref: str) -> float:
    """Character-level Levenshtein normalized by the longer string;
    0 for two empty strings."""
    denom = max(len(pred), len(ref))
    if denom == 0:
        return 0.0
    return levenshtein(pred, ref) / denom


def _ngrams(tokens: list[str], n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu(pred: str, ref: str, max_n: int = 4) -> float:
    """Sentence BLEU with uniform weights up to max_n and brevity penalty.

    Orders longer than the prediction are skipped rather than zeroed, so
    short identical strings still score 1. Any represented order with zero
    matches sends the geometric mean to 0.
    """
    p_toks = pred.split()
    r_toks = ref.split()
    if not p_toks or not r_toks:
        return 1.0 if not p_toks and not r_toks else 0.0
    log_sum = 0.0
    orders = 0
    for n in range(1, max_n + 1):
        p_counts = _ngrams(p_toks, n)
        total = sum(p_counts.values())
        if total == 0:
            continue
        r_counts = _ngrams(r_toks, n)
        clipped = sum(min(c, r_counts[g]) for g, c in p_counts.items())
        if clipped == 0:
            return 0.0
        log_sum += math.log(clipped / total)
        orders += 1
    if orders == 0:
        return 0.0
    geo = math.exp(log_sum / orders)
    c, r = len(p_toks), len(r_toks)
    bp = 1.0 if c >= r else math.exp(1.0 - r / c)
    return bp * geo


def _greedy_alignment(p_toks: list[str], r_toks: list[str]) -> list[tuple[int, int]]:
    """Left-to-right exact unigram alignment: each prediction token maps to
    the earliest unused identical reference token."""
    used = [False] * len(r_toks)
    pairs: list[tuple[int, int]] = []
    for i, tok in enumerate(p_toks):
        for j, ref_tok in enumerate(r_toks):
            if not used[j] and ref_tok == tok:
                used[j] = True
                pairs.append((i, j))
                break
    return pairs


def meteor_lite(pred: str, ref: str) -> float:
    """Exact-match unigram METEOR: F-mean with recall weighted 9:1 and a
    fragmentation penalty of 0.5 * (chunks / matches)^3."""
    p_toks = pred.split()
    r_toks = ref.split()
    pairs = _greedy_alignment(p_toks, r_toks)
    m = len(pairs)
    if m == 0:
        return 0.0
    precision = m / len(p_toks)
    recall = m / len(r_toks)
    fmean = 10.0 * precision * recall / (recall + 9.0 * precision)
    chunks = 1
    for (pi, ri), (pj, rj) in zip(pairs, pairs[1:]):
        if pj != pi + 1 or rj != ri + 1:
            chunks += 1
    penalty = 0.5 * (chunks / m) ** 3
    return fmean * (1.0 - penalty)


def prf(pred: str, ref: str) -> tuple[float, float, float]:
    """Precision/recall/F1 over whitespace-token multisets.

    Both empty -> (1, 1, 1) by convention; exactly one empty -> zeros.
    """
    p_counts = Counter(pred.split())
    r_counts = Counter(ref.split())
    np_, nr = sum(p_counts.values()), sum(r_counts.values())
    if np_ == 0 and nr == 0:
        return (1.0, 1.0, 1.0)
    if np_ == 0 or nr == 0:
        return (0.0, 0.0, 0.0)
    overlap = sum((p_counts & r_counts).values())
    precision = overlap / np_
    recall = overlap / nr
    f1 = 0.0 if precision + recall == 0 else 2 * precision * recall / (precision + recall)
    return (precision, recall, f1)


def align_tokens(pred: list[str], ref: list[str]) -> list[tuple[int, int]]:
    """Levenshtein alignment between token sequences; returns the aligned
    (pred_index, ref_index) pairs for match and substitution operations."""
    np_, nr = len(pred), len(ref)
    dist = [[0] * (nr + 1) for _ in range(np_ + 1)]
    for i in range(np_ + 1):
        dist[i][0] = i
    for j in range(nr + 1):
        dist[0][j] = j
    for i in range(1, np_ + 1):
        for j in range(1, nr + 1):
            dist[i][j] = min(
                dist[i - 1][j] + 1,
                dist[i][j - 1] + 1,
                dist[i - 1][j - 1] + (pred[i - 1] != ref[j - 1]),
            )
    pairs: list[tuple[int, int]] = []
    i, j = np_, nr
    while i > 0 and j > 0:
        sub_cost = dist[i - 1][j - 1] + (pred[i - 1] != ref[j - 1])
        if dist[i][j] == sub_cost:
            pairs.append((i - 1, j - 1))
            i, j = i - 1, j - 1
        elif dist[i][j] == dist[i - 1][j] + 1:
            i -= 1
        else:
            j -= 1
    pairs.reverse()
    return pairs


def mean_box_iou(
    pred_tokens: list[str],
    pred_boxes: list[BBox],
    ref_tokens: list[str],
    ref_boxes: list[BBox],
    ref_visible: list[bool] | None = None,
) -> float:
    """Mean IoU over aligned token pairs.

    Token strings are aligned with Levenshtein alignment; only pairs whose
    tokens are equal (and whose reference token is visible, when a
    visibility mask is given) contribute. Returns 0 with no aligned pairs.
    """
    if ref_visible is None:
        ref_visible = [True] * len(ref_tokens)
    pairs = align_tokens(pred_tokens, ref_tokens)
    vals = [
        iou(pred_boxes[i], ref_boxes[j])
        for i, j in pairs
        if pred_tokens[i] == ref_tokens[j] and ref_visible[j]
    ]
    if not vals:
        return 0.0
    return sum(vals) / len(vals)


def decode_token_accuracy(pred_tokens: list, ref_tokens: list) -> float:
    """Fraction of reference tokens reproduced at an aligned position."""
    if not ref_tokens:
        return 1.0 if not pred_tokens else 0.0
    pairs = align_tokens(pred_tokens, ref_tokens)
    hits = sum(1 for i, j in pairs if pred_tokens[i] == ref_tokens[j])
    return hits / len(ref_tokens)


def repetition_rates(
    flags: list[tuple[str, int, bool]]
) -> dict[str, float]:
    """Failure ratios from (doc_id, page_index, failed) rows.

    page_rate = failed pages / total pages, doc_rate = docs with any failed
    page / total docs, cover_rate = docs whose page 0 failed / total docs.
    """
    if not flags:
        return {"page_rate": 0.0, "doc_rate": 0.0, "cover_rate": 0.0}
    docs: dict[str, dict[str, bool]] = {}
    failed_pages = 0
    for doc_id, page_index, failed in flags:
        d = docs.setdefault(doc_id, {"failed": False, "cover_failed": False})
        if failed:
            failed_pages += 1
            d["failed"] = True
            if page_index == 0:
                d["cover_failed"] = True
    n_docs = len(docs)
    return {
        "page_rate": failed_pages / len(flags),
        "doc_rate": sum(d["failed"] for d in docs.values()) / n_docs,
        "cover_rate": sum(d["cover_failed"] for d in docs.values()) / n_docs,
    }


@dataclass
class EvalReport:
    """One row of corpus-level text/box quality plus repetition ratios."""

    edit_dist: float
    bleu: float
    meteor: float
    precision: float
    recall: float
    f1: float
    mean_iou: float
    repetition: dict[str, float] = field(
        default_factory=lambda: {"page_rate": 0.0, "doc_rate": 0.0, "cover_rate": 0.0}
    )
    tokenizer: str = "whitespace"

    def to_json(self) -> str:
        return json.dumps(self.__dict__, indent=2)

    def table_row(self) -> str:
        cols = [
            ("edit_dist", self.edit_dist),
            ("bleu", self.bleu),
            ("meteor", self.meteor),
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1", self.f1),
            ("mean_iou", self.mean_iou),
        ]
        header = "  ".join(f"{name:>9s}" for name, _ in cols)
        values = "  ".join(f"{val:9.3f}" for _, val in cols)
        return header + "\n" + values


def evaluate_pages(
    pred_texts: list[str],
    ref_texts: list[str],
    pred_token_seqs: list[list[str]] | None = None,
    pred_boxes: list[list[BBox]] | None = None,
    ref_token_seqs: list[list[str]] | None = None,
    ref_boxes: list[list[BBox]] | None = None,
    ref_visible: list[list[bool]] | None = None,
    repetition: dict[str, float] | None = None,
) -> EvalReport:
    """Average the per-page metrics into one report row.

    Text metrics compare the markdown strings; the IoU column needs the
    per-token strings aligned index-for-index with the box lists.
    """
    if len(pred_texts) != len(ref_texts):
        raise ValueError("prediction/reference page counts differ")
    n = len(pred_texts)
    if n == 0:
        raise ValueError("nothing to evaluate")
    sums = {"edit": 0.0, "bleu": 0.0, "meteor": 0.0, "p": 0.0, "r": 0.0, "f": 0.0}
    ious: list[float] = []
    with_boxes = pred_boxes is not None and ref_boxes is not None
    for i in range(n):
        sums["edit"] += edit_distance(pred_texts[i], ref_texts[i])
        sums["bleu"] += bleu(pred_texts[i], ref_texts[i])
        sums["meteor"] += meteor_lite(pred_texts[i], ref_texts[i])
        p, r, f = prf(pred_texts[i], ref_texts[i])
        sums["p"] += p
        sums["r"] += r
        sums["f"] += f
        if with_boxes:
            ious.append(
                mean_box_iou(
                    pred_token_seqs[i],
                    pred_boxes[i],
                    ref_token_seqs[i],
                    ref_boxes[i],
                    None if ref_visible is None else ref_visible[i],
                )
            )
    return EvalReport(
        edit_dist=sums["edit"] / n,
        bleu=sums["bleu"] / n,
        meteor=sums["meteor"] / n,
        precision=sums["p"] / n,
        recall=sums["r"] / n,
        f1=sums["f"] / n,
        mean_iou=sum(ious) / len(ious) if ious else 0.0,
        repetition=repetition
        or {"page_rate": 0.0, "doc_rate": 0.0, "cover_rate": 0.0},
    )
