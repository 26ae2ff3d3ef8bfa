"""Brute-force oracles and finite-difference helpers shared by the test modules."""

from __future__ import annotations

import math

import numpy as np


# --- finite differences ------------------------------------------------------


def numeric_grad(f, p: np.ndarray, eps: float = 1e-6) -> np.ndarray:
    """Central differences of the scalar ``f()`` with respect to ``p`` (perturbed in place)."""
    g = np.zeros_like(p)
    for i in np.ndindex(p.shape):
        orig = p[i]
        p[i] = orig + eps
        hi = f()
        p[i] = orig - eps
        lo = f()
        p[i] = orig
        g[i] = (hi - lo) / (2 * eps)
    return g


def grad_close(analytic, numeric, abs_tol: float = 1e-4, rel_tol: float = 1e-3) -> bool:
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    return bool(np.all(np.abs(analytic - numeric) <= np.maximum(abs_tol, rel_tol * np.abs(numeric))))


def randomize_biases(model, rng, scale: float = 0.3) -> None:
    """Nonzero biases keep pre-activations away from the ReLU kink at zero."""
    for layer in model.layers:
        layer.b[:] = rng.uniform(-scale, scale, size=layer.b.shape)


# --- metric oracles ----------------------------------------------------------


def auroc_pairs(pos, neg) -> float:
    total = 0.0
    for p in pos:
        for n in neg:
            total += 1.0 if p > n else 0.5 if p == n else 0.0
    return total / (len(pos) * len(neg))


def aupr_sweep(pos, neg) -> float:
    """Sum of recall increments times precision over every distinct threshold, highest first."""
    scores = list(pos) + list(neg)
    labels = [1] * len(pos) + [0] * len(neg)
    area, prev_recall = 0.0, 0.0
    for t in sorted(set(scores), reverse=True):
        tp = sum(1 for s, l in zip(scores, labels) if s >= t and l == 1)
        fp = sum(1 for s, l in zip(scores, labels) if s >= t and l == 0)
        recall = tp / len(pos)
        area += (recall - prev_recall) * tp / (tp + fp)
        prev_recall = recall
    return area


def prefix_curve(uncertainty, correct) -> list[float]:
    """Accuracy of the k most certain records, k = 1..N, ties in input order."""
    order = sorted(range(len(uncertainty)), key=lambda i: (uncertainty[i], i))
    out, hits = [], 0
    for k, i in enumerate(order, start=1):
        hits += int(correct[i])
        out.append(hits / k)
    return out


def aulc_enum(uncertainty, correct) -> float:
    n = len(correct)
    acc = sum(map(int, correct)) / n
    return -1.0 + sum(f / acc for f in prefix_curve(uncertainty, correct)) / n


def raulc_enum(uncertainty, correct) -> float:
    n = len(correct)
    # oracle ordering: correct records first
    oracle_u = [0.0 if c else 1.0 for c in correct]
    return aulc_enum(uncertainty, correct) / aulc_enum(oracle_u, correct)


def ece_loop(conf, correct, bins: int) -> float:
    n = len(conf)
    total = 0.0
    for b in range(bins):
        lo, hi = b / bins, (b + 1) / bins
        members = [i for i, c in enumerate(conf) if (lo < c <= hi) or (b == 0 and c == 0.0)]
        if members:
            acc = sum(correct[i] for i in members) / len(members)
            cf = sum(conf[i] for i in members) / len(members)
            total += len(members) / n * abs(acc - cf)
    return total


def brier_loop(probs, labels) -> float:
    total = 0.0
    for row, y in zip(probs, labels):
        total += sum((p - (1.0 if k == y else 0.0)) ** 2 for k, p in enumerate(row))
    return total / len(labels)


def pearson_textbook(x, y) -> float:
    n = len(x)
    mx, my = sum(x) / n, sum(y) / n
    sxy = sum((a - mx) * (b - my) for a, b in zip(x, y))
    sxx = sum((a - mx) ** 2 for a in x)
    syy = sum((b - my) ** 2 for b in y)
    return sxy / math.sqrt(sxx * syy)


def average_ranks(x) -> list[float]:
    """O(n^2): rank = 1 + #smaller + (#equal - 1) / 2."""
    return [1 + sum(b < a for b in x) + (sum(b == a for b in x) - 1) / 2 for a in x]


def spearman_ranks(x, y) -> float:
    return pearson_textbook(average_ranks(x), average_ranks(y))




# --- acceptance reporting ----------------------------------------------------

ACCEPTANCE_LINES: list[str] = []


def verdict(criterion: str, ok: bool, detail: str) -> None:
    """Record and print one pass/fail line, then fail the test if ``ok`` is false."""
    line = f"criterion {criterion}: {'PASS' if ok else 'FAIL'} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line
