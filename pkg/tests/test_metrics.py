import itertools
import math
from functools import lru_cache

import pytest
from hypothesis import given, settings, strategies as st

from gridocr.geometry import BBox
from gridocr.metrics import (
    EvalReport,
    align_tokens,
    bleu,
    decode_token_accuracy,
    edit_distance,
    levenshtein,
    mean_box_iou,
    meteor_lite,
    prf,
    repetition_rates,
)


def levenshtein_oracle(a: str, b: str) -> int:
    """Independent recursive formulation with memoization."""

    @lru_cache(maxsize=None)
    def rec(i, j):
        if i == 0:
            return j
        if j == 0:
            return i
        return min(
            rec(i - 1, j) + 1,
            rec(i, j - 1) + 1,
            rec(i - 1, j - 1) + (a[i - 1] != b[j - 1]),
        )

    return rec(len(a), len(b))


def bleu_oracle(pred: str, ref: str) -> float:
    """Textbook modified n-gram precision with explicit loops."""
    p = pred.split()
    r = ref.split()
    if not p or not r:
        return 1.0 if not p and not r else 0.0
    logs = []
    for n in range(1, 5):
        p_grams = [tuple(p[i : i + n]) for i in range(len(p) - n + 1)]
        r_grams = [tuple(r[i : i + n]) for i in range(len(r) - n + 1)]
        if not p_grams:
            continue
        clipped = 0
        remaining = list(r_grams)
        for g in p_grams:
            if g in remaining:
                clipped += 1
                remaining.remove(g)
        if clipped == 0:
            return 0.0
        logs.append(math.log(clipped / len(p_grams)))
    if not logs:
        return 0.0
    geo = math.exp(sum(logs) / len(logs))
    bp = 1.0 if len(p) >= len(r) else math.exp(1 - len(r) / len(p))
    return bp * geo


class TestEditDistance:
    def test_identical(self):
        assert edit_distance("abc def", "abc def") == 0.0

    def test_against_empty(self):
        assert edit_distance("abc", "") == 1.0
        assert edit_distance("", "") == 0.0

    def test_kitten_sitting(self):
        assert edit_distance("kitten", "sitting") == pytest.approx(3 / 7)

    @given(st.text("ab", max_size=8), st.text("ab", max_size=8))
    @settings(max_examples=300, deadline=None)
    def test_matches_recursive_oracle(self, a, b):
        assert levenshtein(a, b) == levenshtein_oracle(a, b)

    @given(st.text("abc", max_size=6), st.text("abc", max_size=6), st.text("abc", max_size=6))
    @settings(max_examples=200, deadline=None)
    def test_metric_axioms(self, a, b, c):
        assert levenshtein(a, b) == levenshtein(b, a)
        assert (levenshtein(a, b) == 0) == (a == b)
        assert levenshtein(a, c) <= levenshtein(a, b) + levenshtein(b, c)


class TestBleu:
    def test_identical_long(self):
        s = "the quick brown fox jumps over the lazy dog"
        assert bleu(s, s) == pytest.approx(1.0)

    def test_no_overlap(self):
        assert bleu("aa bb cc dd", "ee ff gg hh") == 0.0

    def test_hand_case(self):
        # p1..p4 = 4/4, 3/3, 2/2, 1/1; BP = exp(1 - 5/4)
        assert bleu("a b c d", "a b c d e") == pytest.approx(math.exp(-0.25))

    def test_short_identical(self):
        assert bleu("a b", "a b") == pytest.approx(1.0)

    def test_empty_cases(self):
        assert bleu("", "") == 1.0
        assert bleu("", "a") == 0.0
        assert bleu("a", "") == 0.0

    @given(
        st.lists(st.sampled_from("xyz"), max_size=10).map(" ".join),
        st.lists(st.sampled_from("xyz"), max_size=10).map(" ".join),
    )
    @settings(max_examples=300, deadline=None)
    def test_matches_loop_oracle(self, pred, ref):
        assert bleu(pred, ref) == pytest.approx(bleu_oracle(pred, ref), abs=1e-12)


class TestMeteorLite:
    def test_identical_formula(self):
        s = "a b c d e f g h"
        m = 8
        assert meteor_lite(s, s) == pytest.approx(1 - 0.5 * (1 / m) ** 3)

    def test_zero_matches(self):
        assert meteor_lite("a b", "c d") == 0.0
        assert meteor_lite("", "a") == 0.0

    def test_hand_five_token_case(self):
        # alignment a->0 b->2 c->1 d->3 e->4: 4 chunks, m=5, P=R=1
        got = meteor_lite("a b c d e", "a c b d e")
        assert got == pytest.approx(1.0 * (1 - 0.5 * (4 / 5) ** 3))

    def test_precision_recall_weighting(self):
        # pred has an extra token: m=2, P=2/3, R=1; one chunk
        fmean = 10 * (2 / 3) * 1.0 / (1.0 + 9 * (2 / 3))
        expected = fmean * (1 - 0.5 * (1 / 2) ** 3)
        assert meteor_lite("a b x", "a b") == pytest.approx(expected)


class TestPrf:
    def test_identical(self):
        assert prf("a b c", "a b c") == (1.0, 1.0, 1.0)

    def test_strict_subset(self):
        p, r, f = prf("a b", "a b c d")
        assert p == 1.0 and r == 0.5
        assert f == pytest.approx(2 * 1.0 * 0.5 / 1.5)

    def test_multiset_hand_case(self):
        # pred {a:2, b:1}, ref {a:1, b:2}: overlap = 2, P = R = 2/3
        p, r, f = prf("a a b", "a b b")
        assert p == pytest.approx(2 / 3)
        assert r == pytest.approx(2 / 3)
        assert f == pytest.approx(2 / 3)

    def test_empty_conventions(self):
        assert prf("", "") == (1.0, 1.0, 1.0)
        assert prf("a", "") == (0.0, 0.0, 0.0)
        assert prf("", "a") == (0.0, 0.0, 0.0)

    @given(
        st.lists(st.sampled_from("pq"), max_size=8).map(" ".join),
        st.lists(st.sampled_from("pq"), max_size=8).map(" ".join),
    )
    @settings(max_examples=200, deadline=None)
    def test_f1_between_p_and_r(self, a, b):
        p, r, f = prf(a, b)
        assert min(p, r) - 1e-12 <= f <= max(p, r) + 1e-12


class TestMeanBoxIou:
    def test_perfect(self):
        boxes = [BBox(0, 0, 0.5, 0.5), BBox(0.5, 0.5, 1, 1)]
        assert mean_box_iou(["a", "b"], boxes, ["a", "b"], boxes) == 1.0

    def test_all_disjoint(self):
        pred = [BBox(0, 0, 0.1, 0.1)]
        ref = [BBox(0.5, 0.5, 0.9, 0.9)]
        assert mean_box_iou(["a"], pred, ["a"], ref) == 0.0

    def test_half_overlap_mean(self):
        perfect = BBox(0, 0, 0.5, 0.5)
        pred = [perfect, BBox(0, 0, 0.5, 0.5)]
        ref = [perfect, BBox(0.25, 0.25, 0.75, 0.75)]
        got = mean_box_iou(["a", "b"], pred, ["a", "b"], ref)
        assert got == pytest.approx((1.0 + 1 / 7) / 2)

    def test_alignment_skips_insertions(self):
        b = BBox(0, 0, 0.5, 0.5)
        got = mean_box_iou(["x", "a"], [BBox(0.5, 0.5, 1, 1), b], ["a"], [b])
        assert got == 1.0

    def test_visibility_mask(self):
        b = BBox(0, 0, 0.5, 0.5)
        wrong = BBox(0.5, 0.5, 1, 1)
        got = mean_box_iou(
            ["a", "b"], [b, wrong], ["a", "b"], [b, b], ref_visible=[True, False]
        )
        assert got == 1.0

    def test_no_aligned_pairs(self):
        assert mean_box_iou([], [], ["a"], [BBox(0, 0, 1, 1)]) == 0.0


class TestDecodeTokenAccuracy:
    def test_exact(self):
        assert decode_token_accuracy([1, 2, 3], [1, 2, 3]) == 1.0

    def test_with_insertion(self):
        assert decode_token_accuracy([1, 9, 2, 3], [1, 2, 3]) == 1.0

    def test_with_substitution(self):
        assert decode_token_accuracy([1, 9, 3], [1, 2, 3]) == pytest.approx(2 / 3)

    def test_empty_ref(self):
        assert decode_token_accuracy([], []) == 1.0
        assert decode_token_accuracy([1], []) == 0.0


class TestRepetitionRates:
    def test_no_failures(self):
        flags = [("d0", 0, False), ("d0", 1, False)]
        assert repetition_rates(flags) == {
            "page_rate": 0.0, "doc_rate": 0.0, "cover_rate": 0.0
        }

    def test_cover_failure(self):
        flags = [("d0", 0, True), ("d0", 1, False), ("d0", 2, False)]
        got = repetition_rates(flags)
        assert got["page_rate"] == pytest.approx(1 / 3)
        assert got["doc_rate"] == 1.0
        assert got["cover_rate"] == 1.0

    def test_two_docs_one_late_failure(self):
        flags = [
            ("a", 0, False), ("a", 1, False), ("a", 2, True),
            ("b", 0, False), ("b", 1, False),
        ]
        got = repetition_rates(flags)
        assert got["page_rate"] == pytest.approx(1 / 5)
        assert got["doc_rate"] == 0.5
        assert got["cover_rate"] == 0.0

    def test_empty(self):
        assert repetition_rates([]) == {
            "page_rate": 0.0, "doc_rate": 0.0, "cover_rate": 0.0
        }


class TestAlignTokens:
    def test_exhaustive_small(self):
        # alignment must cover every matching position for equal strings
        for n in range(4):
            toks = [f"t{i}" for i in range(n)]
            assert align_tokens(toks, toks) == [(i, i) for i in range(n)]

    @given(
        st.lists(st.sampled_from("ab"), max_size=6),
        st.lists(st.sampled_from("ab"), max_size=6),
    )
    @settings(max_examples=200, deadline=None)
    def test_pairs_are_monotonic(self, a, b):
        pairs = align_tokens(a, b)
        for (i1, j1), (i2, j2) in zip(pairs, pairs[1:]):
            assert i1 < i2 and j1 < j2


class TestEvalReport:
    def test_json_and_table(self):
        rep = EvalReport(
            edit_dist=0.1, bleu=0.9, meteor=0.8, precision=0.95,
            recall=0.9, f1=0.92, mean_iou=0.7,
        )
        assert "edit_dist" in rep.to_json()
        row = rep.table_row()
        assert "0.100" in row and "mean_iou" in row
