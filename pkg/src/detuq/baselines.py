"""Sampling-based reference estimators and the mutual-information decomposition."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .heads.softmax import entropy
from .nn import MlpModel


@dataclass
class PredictiveSamples:
    """``T x N x K`` class probabilities, one slice per stochastic pass or member."""

    samples: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.ndim != 3:
            raise ShapeError(f"samples must be T x N x K, got shape {s.shape}")
        if s.shape[0] < 1:
            raise ValueError("need at least one sample")
        if np.any(s < 0) or np.any(np.abs(s.sum(axis=2) - 1.0) > 1e-9):
            raise ValueError("every sample row must lie on the probability simplex")
        self.samples = s

    @property
    def mean(self) -> np.ndarray:
        return self.samples.mean(axis=0)


def softmax_entropy(probs) -> float | np.ndarray:
    """Natural-log entropy with ``0 log 0 = 0``; the last axis indexes classes."""
    h = entropy(np.asarray(probs, dtype=np.float64))
    return float(h) if np.ndim(h) == 0 else h


def mutual_information(samples: PredictiveSamples) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split predictive entropy into ``(epistemic, aleatoric, total)`` per input.

    ``total = H(mean_t p_t)``, ``aleatoric = mean_t H(p_t)`` and the epistemic
    part is their difference, clamped at zero against rounding.
    """
    total = entropy(samples.mean)
    aleatoric = entropy(samples.samples).mean(axis=0)
    epistemic = np.maximum(total - aleatoric, 0.0)
    return epistemic, aleatoric, total


def mc_dropout_predict(model: MlpModel, head, x, T: int = 10, rng: np.random.Generator | None = None) -> PredictiveSamples:
    """``T`` forward passes with fresh dropout masks."""
    if T < 1:
        raise ValueError(f"T must be >= 1, got {T}")
    if rng is None:
        rng = np.random.default_rng(0)
    out = []
    for _ in range(T):
        z = model.forward(x, "mc_sample", rng).features
        out.append(head.predict_proba(z))
    return PredictiveSamples(np.stack(out))


def ensemble_predict(members: Sequence[tuple[MlpModel, object]], x) -> PredictiveSamples:
    """One eval-mode prediction per ``(model, head)`` member."""
    if len(members) == 0:
        raise ValueError("ensemble is empty")
    in_dim = members[0][0].in_dim
    n_classes = members[0][1].n_classes
    for model, head in members:
        if model.in_dim != in_dim or head.n_classes != n_classes:
            raise ShapeError("ensemble members disagree on input or output dimension")
    return PredictiveSamples(np.stack([head.predict_proba(model.forward(x, "eval").features) for model, head in members]))


def pixel_uncertainty_mean(values) -> float:
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        raise ValueError("no per-pixel uncertainties given")
    return float(v.mean())
