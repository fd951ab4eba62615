"""Evaluation suite for generated tunes: BLEU-N, DIST-N, edit distance
similarity, and Welch's t-test, aggregated into a report with one mean/std
row per metric.

Scoring conventions (all scores live on a 0..100 scale):

* EDS(a, b) = (1 - lev(a, b) / max(|a|, |b|)) * 100 on raw strings; two
  empty strings score 100 by convention.
* BLEU-N is sentence-level with clipped k-gram precisions for k = 1..N, an
  unsmoothed geometric mean (any zero precision gives score 0), and brevity
  penalty exp(1 - |ref| / |cand|) applied when the candidate is shorter
  than the reference.
* DIST-N is the percentage of distinct n-grams among all n-grams in one
  sample; samples shorter than n score 0.
* The t-test is Welch's unequal-variance variant with the
  Welch-Satterthwaite degrees of freedom and a two-sided p-value from the
  regularized incomplete beta function.
"""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import dataclass

import numpy as np
from scipy.special import betainc

from .abc_notation import AbcVocab, tokenize_abc
from .errors import DataError

BLEU_ORDERS = (2, 3, 4)
DIST_ORDERS = (1, 2, 3)


def levenshtein(a: str, b: str) -> int:
    """Minimum number of single-character insertions, deletions, and
    substitutions turning ``a`` into ``b``. Two-row dynamic program with the
    inner loop vectorized over the shorter string."""
    if len(a) < len(b):
        a, b = b, a
    if not b:
        return len(a)
    target = np.frombuffer(b.encode("utf-32-le"), dtype=np.uint32)
    offsets = np.arange(len(b) + 1)
    prev = offsets.copy()
    for ch in a:
        cur = np.empty_like(prev)
        cur[0] = prev[0] + 1
        np.minimum(prev[:-1] + (target != ord(ch)), prev[1:] + 1, out=cur[1:])
        # close runs of deletions: cur[j] = min over k <= j of cur[k] + (j - k),
        # computed as a running minimum of cur[k] - k plus j
        cur -= offsets
        np.minimum.accumulate(cur, out=cur)
        cur += offsets
        prev = cur
    return int(prev[-1])


def eds(a: str, b: str) -> float:
    """Edit distance similarity: 100 for an exact match, 0 for no overlap."""
    longest = max(len(a), len(b))
    if longest == 0:
        return 100.0
    return (1.0 - levenshtein(a, b) / longest) * 100.0


def _ngram_counts(tokens, n: int) -> Counter:
    return Counter(tuple(tokens[i : i + n]) for i in range(len(tokens) - n + 1))


def bleu_n(candidate, reference, n: int) -> float:
    """Sentence-level BLEU over token sequences, scaled to 0..100."""
    if n < 1:
        raise ValueError("n must be >= 1")
    candidate = list(candidate)
    reference = list(reference)
    if not candidate:
        return 0.0
    log_prec_sum = 0.0
    for k in range(1, n + 1):
        cand_counts = _ngram_counts(candidate, k)
        total = sum(cand_counts.values())
        if total == 0:
            return 0.0
        ref_counts = _ngram_counts(reference, k)
        clipped = sum(min(c, ref_counts.get(g, 0)) for g, c in cand_counts.items())
        if clipped == 0:
            return 0.0
        log_prec_sum += math.log(clipped / total)
    brevity = 1.0
    if len(candidate) < len(reference):
        brevity = math.exp(1.0 - len(reference) / len(candidate))
    return brevity * math.exp(log_prec_sum / n) * 100.0


def dist_n(sample, n: int) -> float:
    """Percentage of distinct n-grams in one sample."""
    if n < 1:
        raise ValueError("n must be >= 1")
    sample = list(sample)
    total = len(sample) - n + 1
    if total <= 0:
        return 0.0
    distinct = len(_ngram_counts(sample, n))
    return distinct / total * 100.0


@dataclass(frozen=True)
class TTestResult:
    t: float
    df: float
    p: float


def welch_t_test(sample_a, sample_b) -> TTestResult:
    """Welch's unequal-variance t-test, two-sided."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size < 2 or b.size < 2:
        raise DataError("each sample needs at least 2 values")
    var_a = a.var(ddof=1)
    var_b = b.var(ddof=1)
    if var_a + var_b == 0.0:
        raise DataError("both samples have zero variance")
    se_a = var_a / a.size
    se_b = var_b / b.size
    t = (a.mean() - b.mean()) / math.sqrt(se_a + se_b)
    df = (se_a + se_b) ** 2 / (
        se_a**2 / (a.size - 1) + se_b**2 / (b.size - 1)
    )
    if t == 0.0:
        p = 1.0
    else:
        # two-sided p from the Student-t survival function via the
        # regularized incomplete beta: P(|T| >= |t|) = I_x(df/2, 1/2)
        x = df / (df + t * t)
        p = float(betainc(df / 2.0, 0.5, x))
    return TTestResult(t=float(t), df=float(df), p=min(max(p, 0.0), 1.0))


@dataclass(frozen=True)
class MetricReport:
    """Per-sample values plus mean/std for every metric, Table-style."""

    n: int
    values: dict[str, tuple[float, ...]]

    def mean(self, metric: str) -> float:
        return float(np.mean(self.values[metric]))

    def std(self, metric: str) -> float:
        return float(np.std(self.values[metric]))

    def summary(self, metric: str) -> str:
        return f"{self.mean(metric):.2f}±{self.std(metric):.2f}"

    @property
    def metric_names(self) -> list[str]:
        return list(self.values)

    def format_table(self) -> str:
        width = max(len(name) for name in self.values) + 2
        lines = [f"{'metric'.ljust(width)}mean±std (n={self.n})"]
        for name in self.values:
            lines.append(f"{name.ljust(width)}{self.summary(name)}")
        return "\n".join(lines)

    def to_json(self, ttests: dict[str, TTestResult] | None = None) -> str:
        payload: dict = {"n": self.n, "metrics": {}}
        for name, vals in self.values.items():
            payload["metrics"][name] = {
                "mean": self.mean(name),
                "std": self.std(name),
                "values": list(vals),
            }
        if ttests:
            payload["ttests"] = {
                name: {"t": r.t, "df": r.df, "p": r.p} for name, r in ttests.items()
            }
        return json.dumps(payload, indent=2)


def report_from_json(text: str) -> MetricReport:
    payload = json.loads(text)
    values = {name: tuple(entry["values"]) for name, entry in payload["metrics"].items()}
    return MetricReport(n=payload["n"], values=values)


def evaluate_pairs(candidates: list[str], references: list[str], abc_vocab: AbcVocab) -> MetricReport:
    """Score candidate tunes against references.

    EDS is computed on the raw strings; BLEU-2/3/4 and DIST-1/2/3 on the
    ABC-tokenized sequences.
    """
    if len(candidates) != len(references):
        raise DataError(
            f"candidate/reference count mismatch: {len(candidates)} vs {len(references)}"
        )
    if not candidates:
        raise DataError("nothing to evaluate")
    values: dict[str, list[float]] = {f"BLEU-{n}": [] for n in BLEU_ORDERS}
    values.update({f"DIST-{n}": [] for n in DIST_ORDERS})
    values["EDS"] = []
    for cand, ref in zip(candidates, references):
        cand_toks = tokenize_abc(cand, abc_vocab)
        ref_toks = tokenize_abc(ref, abc_vocab)
        for n in BLEU_ORDERS:
            values[f"BLEU-{n}"].append(bleu_n(cand_toks, ref_toks, n))
        for n in DIST_ORDERS:
            values[f"DIST-{n}"].append(dist_n(cand_toks, n))
        values["EDS"].append(eds(cand, ref))
    return MetricReport(n=len(candidates), values={k: tuple(v) for k, v in values.items()})
