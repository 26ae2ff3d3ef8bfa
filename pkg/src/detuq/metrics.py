"""Detection, calibration and uncertainty-ordering metrics.

Conventions:

* ``auroc``/``aupr`` treat the *positive* class as the one expected to score
  higher (incorrect or out-of-distribution samples scored by uncertainty).
* The lifted curve sorts by ascending uncertainty with ties kept in input
  order, and the prefix at quantile ``q`` holds the first ``ceil(q N)``
  records.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .errors import UndefinedMetricError

RECORD_FIELDS = ("uncertainty", "correct", "in_distribution", "severity", "confidence")


@dataclass(frozen=True)
class EvalRecord:
    uncertainty: float
    correct: bool
    in_distribution: bool = True
    severity: int | str = 0
    confidence: float | None = None

    def __post_init__(self):
        if not math.isfinite(self.uncertainty):
            raise ValueError(f"uncertainty must be finite, got {self.uncertainty}")


@dataclass(frozen=True)
class LiftedCurve:
    quantiles: np.ndarray
    step: float
    accuracy: np.ndarray  # F(q_i)
    baseline: float  # F_R, the overall accuracy
    oracle: np.ndarray  # F_opt(q_i)

    @property
    def degenerate(self) -> bool:
        return self.baseline == 0.0


def _scores(pos, neg) -> tuple[np.ndarray, np.ndarray]:
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise UndefinedMetricError("both positive and negative scores are required")
    return pos, neg


def auroc(scores_pos, scores_neg) -> float:
    """``P(s+ > s-) + P(s+ = s-) / 2`` via the rank-sum statistic."""
    pos, neg = _scores(scores_pos, scores_neg)
    ranks = rankdata(np.concatenate([pos, neg]))
    n_p, n_n = pos.size, neg.size
    u = ranks[:n_p].sum() - n_p * (n_p + 1) / 2.0
    return float(u / (n_p * n_n))


def aupr(scores_pos, scores_neg) -> float:
    """Area under precision-recall, one point per distinct score threshold.

    Each recall increment is weighted by the precision at its threshold, so a
    run of tied scores contributes a single step.
    """
    pos, neg = _scores(scores_pos, scores_neg)
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    order = np.argsort(-scores, kind="stable")
    scores, is_pos = scores[order], is_pos[order]
    tp = np.cumsum(is_pos)
    seen = np.arange(1, scores.size + 1)
    # last index of every run of equal scores
    ends = np.flatnonzero(np.append(scores[1:] != scores[:-1], True))
    recall = tp[ends] / pos.size
    precision = tp[ends] / seen[ends]
    return float(np.sum(np.diff(recall, prepend=0.0) * precision))


def ece(confidences, correct, bins: int = 15) -> float:
    """Expected calibration error over ``bins`` equal-width bins ``(lo, hi]`` (0 joins the first)."""
    if bins < 1:
        raise ValueError(f"bins must be >= 1, got {bins}")
    conf = np.asarray(confidences, dtype=np.float64).ravel()
    corr = np.asarray(correct, dtype=np.float64).ravel()
    if conf.shape != corr.shape:
        raise ValueError("confidences and correct differ in length")
    if conf.size == 0:
        raise UndefinedMetricError("no predictions")
    if np.any((conf < 0) | (conf > 1)):
        raise ValueError("confidences must lie in [0, 1]")
    idx = np.clip(np.ceil(conf * bins).astype(np.int64) - 1, 0, bins - 1)
    total = 0.0
    for b in range(bins):
        sel = idx == b
        n = int(sel.sum())
        if n:
            total += n / conf.size * abs(corr[sel].mean() - conf[sel].mean())
    return float(total)


def brier(probs, labels) -> float:
    p = np.atleast_2d(np.asarray(probs, dtype=np.float64))
    y = np.asarray(labels, dtype=np.int64).ravel()
    onehot = np.zeros_like(p)
    onehot[np.arange(y.size), y] = 1.0
    return float(np.mean(np.sum((p - onehot) ** 2, axis=1)))


def _prefix_accuracy(correct_sorted: np.ndarray, quantiles: np.ndarray) -> np.ndarray:
    n = correct_sorted.size
    sizes = np.ceil(quantiles * n - 1e-9).astype(np.int64)
    sizes = np.clip(sizes, 1, n)
    hits = np.cumsum(correct_sorted)
    return hits[sizes - 1] / sizes


def lifted_curve(records: Sequence[EvalRecord], step: float | None = None) -> LiftedCurve:
    """Prefix accuracies along ascending uncertainty; ``step`` defaults to ``1/N``."""
    return curve_from_scores(
        [r.uncertainty for r in records], [r.correct for r in records], step
    )


def curve_from_scores(uncertainty, correct, step: float | None = None) -> LiftedCurve:
    u = np.asarray(uncertainty, dtype=np.float64).ravel()
    c = np.asarray(correct, dtype=np.float64).ravel()
    if u.size == 0:
        raise ValueError("no records")
    if u.shape != c.shape:
        raise ValueError("uncertainty and correct differ in length")
    if not np.all(np.isfinite(u)):
        raise ValueError("uncertainties must be finite")
    n = u.size
    s = 1.0 / n if step is None else float(step)
    if not 0.0 < s <= 1.0:
        raise ValueError(f"step must be in (0, 1], got {s}")
    m = math.ceil(1.0 / s - 1e-9)
    q = np.minimum(np.arange(1, m + 1) * s, 1.0)
    ordered = c[np.argsort(u, kind="stable")]
    oracle = np.sort(c)[::-1]
    return LiftedCurve(q, s, _prefix_accuracy(ordered, q), float(c.mean()), _prefix_accuracy(oracle, q))


def _area(values: np.ndarray, curve: LiftedCurve) -> float:
    if curve.degenerate:
        raise UndefinedMetricError("overall accuracy is zero; the lifted curve is undefined")
    return float(-1.0 + np.sum(curve.step * values / curve.baseline))


def aulc(curve: LiftedCurve) -> float:
    return _area(curve.accuracy, curve)


def raulc(curve: LiftedCurve) -> float:
    """AULC relative to the oracle ordering; 1 is a perfect ranking of errors."""
    if curve.baseline in (0.0, 1.0):
        raise UndefinedMetricError("rAULC needs an accuracy strictly between 0 and 1")
    best = _area(curve.oracle, curve)
    if best <= 0:
        raise UndefinedMetricError("oracle AULC is not positive")
    if np.array_equal(curve.accuracy, curve.oracle):
        return 1.0
    return _area(curve.accuracy, curve) / best


def _pair(x, y) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.shape != y.shape:
        raise ValueError("x and y differ in length")
    if x.size < 2:
        raise UndefinedMetricError("correlation needs at least two points")
    return x, y


def pearson(x, y) -> float:
    x, y = _pair(x, y)
    dx, dy = x - x.mean(), y - y.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise UndefinedMetricError("correlation undefined for a constant series")
    r = float(dx @ dy) / math.sqrt(sxx * syy)
    return max(-1.0, min(1.0, r))


def spearman(x, y) -> float:
    """Pearson correlation of average-tied ranks."""
    x, y = _pair(x, y)
    return pearson(rankdata(x), rankdata(y))


def record_metrics(records: Sequence[EvalRecord], bins: int = 15) -> dict:
    """Accuracy, misclassification AUROC, ECE, AULC and rAULC; undefined entries are None."""
    u = np.array([r.uncertainty for r in records], dtype=np.float64)
    c = np.array([r.correct for r in records], dtype=bool)
    out: dict = {"accuracy": float(c.mean()) if c.size else None}
    try:
        out["auroc"] = auroc(u[~c], u[c])
    except UndefinedMetricError:
        out["auroc"] = None
    conf = [r.confidence for r in records]
    out["ece"] = None if any(v is None for v in conf) or not conf else ece(conf, c, bins)
    curve = curve_from_scores(u, c) if c.size else None
    for name, fn in (("aulc", aulc), ("raulc", raulc)):
        try:
            out[name] = fn(curve) if curve is not None else None
        except UndefinedMetricError:
            out[name] = None
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_records(path: str | Path, records: Iterable[EvalRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_FIELDS)
        for r in records:
            w.writerow([_fmt(getattr(r, f)) for f in RECORD_FIELDS])


def _severity(text: str) -> int | str:
    try:
        return int(text)
    except ValueError:
        return text


def read_records(path: str | Path) -> list[EvalRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RECORD_FIELDS:
            raise ValueError(f"{path}: unexpected header {reader.fieldnames}")
        return [
            EvalRecord(
                float(row["uncertainty"]),
                row["correct"] == "1",
                row["in_distribution"] == "1",
                _severity(row["severity"]),
                float(row["confidence"]) if row["confidence"] else None,
            )
            for row in reader
        ]
