"""Tests for the evaluation metrics.

Levenshtein is checked against a full-table dynamic program, BLEU against a
product-form reimplementation, and Welch's t-test against scipy.stats.
"""

import json
import math
import random

import pytest
import scipy.stats

from tunesmith.abc_notation import build_abc_vocab, tokenize_abc
from tunesmith.errors import DataError
from tunesmith.metrics import (
    MetricReport,
    TTestResult,
    bleu_n,
    dist_n,
    eds,
    evaluate_pairs,
    levenshtein,
    report_from_json,
    welch_t_test,
)


def lev_oracle(a: str, b: str) -> int:
    # full (m+1) x (n+1) table, no vectorization
    m, n = len(a), len(b)
    table = [[0] * (n + 1) for _ in range(m + 1)]
    for i in range(m + 1):
        table[i][0] = i
    for j in range(n + 1):
        table[0][j] = j
    for i in range(1, m + 1):
        for j in range(1, n + 1):
            cost = 0 if a[i - 1] == b[j - 1] else 1
            table[i][j] = min(
                table[i - 1][j] + 1,
                table[i][j - 1] + 1,
                table[i - 1][j - 1] + cost,
            )
    return table[m][n]


def bleu_oracle(candidate, reference, n: int) -> float:
    # product of precisions and an n-th root instead of summed logs
    candidate = list(candidate)
    reference = list(reference)
    if not candidate:
        return 0.0
    product = 1.0
    for k in range(1, n + 1):
        cand_grams = [tuple(candidate[i : i + k]) for i in range(len(candidate) - k + 1)]
        if not cand_grams:
            return 0.0
        ref_grams = [tuple(reference[i : i + k]) for i in range(len(reference) - k + 1)]
        clipped = 0
        for gram in set(cand_grams):
            clipped += min(cand_grams.count(gram), ref_grams.count(gram))
        if clipped == 0:
            return 0.0
        product *= clipped / len(cand_grams)
    brevity = 1.0
    if len(candidate) < len(reference):
        brevity = math.exp(1.0 - len(reference) / len(candidate))
    return brevity * product ** (1.0 / n) * 100.0


class TestLevenshtein:
    def test_kitten_sitting(self):
        assert levenshtein("kitten", "sitting") == 3

    def test_trivial_cases(self):
        assert levenshtein("", "") == 0
        assert levenshtein("", "abc") == 3
        assert levenshtein("abc", "") == 3
        assert levenshtein("abc", "abc") == 0
        assert levenshtein("a", "b") == 1
        assert levenshtein("flaw", "lawn") == 2

    def test_unicode(self):
        assert levenshtein("café", "cafe") == 1
        assert levenshtein("\U0001d11e", "") == 1

    def test_against_oracle(self):
        alphabets = ["ab", "abcde", "abcdefghijklmnop"]
        for seed in range(300):
            rng = random.Random(seed)
            alphabet = alphabets[seed % len(alphabets)]
            a = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 64)))
            b = "".join(rng.choice(alphabet) for _ in range(rng.randint(0, 64)))
            assert levenshtein(a, b) == lev_oracle(a, b), (a, b)

    def test_shared_affixes_against_oracle(self):
        # long common prefixes and suffixes stress runs of deletions
        for seed in range(100):
            rng = random.Random(1000 + seed)
            core = "".join(rng.choice("ab") for _ in range(rng.randint(0, 20)))
            pre = "x" * rng.randint(0, 20)
            suf = "y" * rng.randint(0, 20)
            a = pre + core + suf
            b = core
            assert levenshtein(a, b) == lev_oracle(a, b) == len(pre) + len(suf)

    def test_symmetry_and_bounds(self):
        for seed in range(100):
            rng = random.Random(seed)
            a = "".join(rng.choice("abc") for _ in range(rng.randint(0, 30)))
            b = "".join(rng.choice("abc") for _ in range(rng.randint(0, 30)))
            d = levenshtein(a, b)
            assert d == levenshtein(b, a)
            assert abs(len(a) - len(b)) <= d <= max(len(a), len(b), 0)


class TestEds:
    def test_kitten_sitting(self):
        assert eds("kitten", "sitting") == pytest.approx(57.142857142857146, abs=1e-9)

    def test_extremes(self):
        assert eds("", "") == 100.0
        assert eds("same", "same") == 100.0
        assert eds("abc", "xyz") == 0.0
        assert eds("", "abc") == 0.0

    def test_range(self):
        for seed in range(100):
            rng = random.Random(seed)
            a = "".join(rng.choice("abcd") for _ in range(rng.randint(0, 20)))
            b = "".join(rng.choice("abcd") for _ in range(rng.randint(0, 20)))
            assert 0.0 <= eds(a, b) <= 100.0


class TestBleu:
    def test_hand_case(self):
        # one token short of the reference: both precisions are 1 and the
        # brevity penalty exp(1 - 5/4) is the whole score
        got = bleu_n(["a", "b", "c", "d"], ["a", "b", "c", "d", "e"], 2)
        assert got == pytest.approx(100.0 * math.exp(-0.25), abs=1e-6)

    def test_identical(self):
        assert bleu_n(list("abcdef"), list("abcdef"), 4) == pytest.approx(100.0)

    def test_empty_and_disjoint(self):
        assert bleu_n([], ["a"], 2) == 0.0
        assert bleu_n(["x", "y"], ["a", "b"], 1) == 0.0

    def test_short_candidate_missing_order(self):
        # a 2-token candidate has no 3-grams, so BLEU-3 must be 0
        assert bleu_n(["a", "b"], ["a", "b", "c"], 3) == 0.0

    def test_no_brevity_penalty_when_longer(self):
        got = bleu_n(["a", "b", "c"], ["a", "b"], 1)
        assert got == pytest.approx(2.0 / 3.0 * 100.0)

    def test_clipping(self):
        # candidate repeats "a" but the reference has only one
        got = bleu_n(["a", "a", "a"], ["a", "b", "c"], 1)
        assert got == pytest.approx(1.0 / 3.0 * 100.0)

    def test_against_oracle(self):
        for seed in range(300):
            rng = random.Random(seed)
            cand = [rng.choice("abcd") for _ in range(rng.randint(0, 12))]
            ref = [rng.choice("abcd") for _ in range(rng.randint(1, 12))]
            n = rng.randint(1, 4)
            assert bleu_n(cand, ref, n) == pytest.approx(
                bleu_oracle(cand, ref, n), abs=1e-9
            ), (cand, ref, n)

    def test_rejects_bad_order(self):
        with pytest.raises(ValueError):
            bleu_n(["a"], ["a"], 0)


class TestDist:
    def test_hand_cases(self):
        assert dist_n(["a", "b", "c", "d"], 1) == pytest.approx(100.0)
        assert dist_n(["a", "a", "a", "a"], 1) == pytest.approx(25.0)
        assert dist_n(["a", "b", "a", "b"], 2) == pytest.approx(200.0 / 3.0, abs=1e-6)

    def test_too_short(self):
        assert dist_n([], 1) == 0.0
        assert dist_n(["a", "b"], 3) == 0.0

    def test_range_and_single_gram(self):
        for seed in range(100):
            rng = random.Random(seed)
            sample = [rng.choice("ab") for _ in range(rng.randint(0, 15))]
            n = rng.randint(1, 3)
            score = dist_n(sample, n)
            assert 0.0 <= score <= 100.0
            if len(sample) == n:
                assert score == 100.0

    def test_rejects_bad_order(self):
        with pytest.raises(ValueError):
            dist_n(["a"], 0)


class TestWelch:
    def test_hand_case(self):
        result = welch_t_test([2.0, 4.0, 6.0, 8.0], [1.0, 3.0, 5.0, 7.0])
        assert result.t == pytest.approx(0.5477, abs=1e-3)
        assert result.df == pytest.approx(6.0, abs=1e-9)
        assert 0.0 <= result.p <= 1.0

    def test_zero_difference(self):
        result = welch_t_test([1.0, 2.0, 3.0], [1.0, 2.0, 3.0])
        assert result.t == 0.0
        assert result.p == 1.0

    def test_swap_antisymmetry(self):
        a = [3.1, 4.1, 5.9, 2.6]
        b = [5.3, 5.8, 9.7, 9.3]
        fwd = welch_t_test(a, b)
        rev = welch_t_test(b, a)
        assert fwd.t == pytest.approx(-rev.t, abs=1e-10)
        assert fwd.df == pytest.approx(rev.df, abs=1e-10)
        assert fwd.p == pytest.approx(rev.p, abs=1e-10)

    def test_shift_invariance(self):
        a = [3.1, 4.1, 5.9, 2.6]
        b = [5.3, 5.8, 9.7, 9.3]
        base = welch_t_test(a, b)
        shifted = welch_t_test([x + 5.0 for x in a], [x + 5.0 for x in b])
        assert shifted.t == pytest.approx(base.t, abs=1e-10)
        assert shifted.p == pytest.approx(base.p, abs=1e-10)

    def test_against_scipy(self):
        for seed in range(200):
            rng = random.Random(seed)
            a = [rng.gauss(0.0, 1.0) for _ in range(rng.randint(2, 30))]
            b = [rng.gauss(0.5, 2.0) for _ in range(rng.randint(2, 30))]
            result = welch_t_test(a, b)
            ref = scipy.stats.ttest_ind(a, b, equal_var=False)
            assert result.t == pytest.approx(ref.statistic, abs=1e-10)
            assert result.p == pytest.approx(ref.pvalue, abs=1e-10)

    def test_rejects_degenerate_input(self):
        with pytest.raises(DataError):
            welch_t_test([1.0], [2.0, 3.0])
        with pytest.raises(DataError):
            welch_t_test([2.0, 3.0], [4.0])
        with pytest.raises(DataError):
            welch_t_test([3.0, 3.0, 3.0], [5.0, 5.0, 5.0])


class TestMetricReport:
    def make_report(self):
        return MetricReport(
            n=2, values={"EDS": (100.0, 50.0), "BLEU-2": (80.0, 40.0)}
        )

    def test_mean_std(self):
        report = self.make_report()
        assert report.mean("EDS") == pytest.approx(75.0)
        assert report.std("EDS") == pytest.approx(25.0)
        assert report.summary("EDS") == "75.00±25.00"

    def test_table_lists_every_metric(self):
        table = self.make_report().format_table()
        for name in ("EDS", "BLEU-2", "mean±std"):
            assert name in table

    def test_json_round_trip(self):
        report = self.make_report()
        back = report_from_json(report.to_json())
        assert back == report

    def test_json_with_ttests(self):
        report = self.make_report()
        ttests = {"EDS": TTestResult(t=1.5, df=3.2, p=0.2)}
        payload = json.loads(report.to_json(ttests=ttests))
        assert payload["ttests"]["EDS"]["t"] == 1.5
        assert payload["metrics"]["BLEU-2"]["values"] == [80.0, 40.0]


class TestEvaluatePairs:
    @pytest.fixture()
    def vocab(self):
        return build_abc_vocab()

    def test_identical_pairs_score_perfect(self, vocab):
        tunes = ["X:1\nK:C\nCDEF GABc|cBAG FEDC|\n"]
        report = evaluate_pairs(tunes, list(tunes), vocab)
        assert report.n == 1
        assert report.mean("EDS") == pytest.approx(100.0)
        for n in (2, 3, 4):
            assert report.mean(f"BLEU-{n}") == pytest.approx(100.0)

    def test_metric_values_match_direct_calls(self, vocab):
        cands = ["X:1\nK:C\nCDE|", "X:2\nK:G\nGAB GAB|"]
        refs = ["X:1\nK:C\nCDF|", "X:2\nK:G\nGAB ceg|"]
        report = evaluate_pairs(cands, refs, vocab)
        for i, (cand, ref) in enumerate(zip(cands, refs)):
            cand_toks = tokenize_abc(cand, vocab)
            ref_toks = tokenize_abc(ref, vocab)
            assert report.values["EDS"][i] == pytest.approx(eds(cand, ref))
            assert report.values["BLEU-2"][i] == pytest.approx(
                bleu_n(cand_toks, ref_toks, 2)
            )
            assert report.values["DIST-1"][i] == pytest.approx(dist_n(cand_toks, 1))

    def test_report_shape(self, vocab):
        report = evaluate_pairs(["abc"], ["abd"], vocab)
        assert sorted(report.metric_names) == [
            "BLEU-2",
            "BLEU-3",
            "BLEU-4",
            "DIST-1",
            "DIST-2",
            "DIST-3",
            "EDS",
        ]

    def test_rejects_mismatched_or_empty(self, vocab):
        with pytest.raises(DataError):
            evaluate_pairs(["a"], ["a", "b"], vocab)
        with pytest.raises(DataError):
            evaluate_pairs([], [], vocab)
