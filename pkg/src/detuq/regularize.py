"""Feature-collapse countermeasures: gradient penalty, reconstruction, Dirichlet entropy."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import digamma, gammaln, polygamma

from .errors import ShapeError
from .nn import ForwardTrace, GradientSet, MlpModel
from .tensor import Matrix, as_matrix

KINDS = ("none", "grad_penalty", "reconstruction", "entropy")


@dataclass
class RegularizerConfig:
    kind: str = "none"
    strength: float = 0.0
    decoder: MlpModel | None = None
    target_lipschitz: float = 1.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown regularizer kind {self.kind!r}")
        if not (math.isfinite(self.strength) and self.strength >= 0):
            raise ValueError(f"strength must be finite and >= 0, got {self.strength}")
        if (self.decoder is not None) != (self.kind == "reconstruction"):
            raise ValueError("a decoder is required for, and only for, reconstruction")


def gradient_penalty(
    model: MlpModel,
    x: Matrix,
    head=None,
    strength: float = 1.0,
    target: float = 1.0,
    trace: ForwardTrace | None = None,
) -> tuple[float, GradientSet, list[np.ndarray]]:
    """Two-sided penalty ``strength * mean_i (||d g(x_i) / d x_i|| - target)^2``.

    ``g`` is the head's scalarization of the features (``head.scalar_grad``),
    or the plain sum of feature coordinates when ``head`` is None. The
    parameter gradients come from reverse-mode differentiation of the input
    gradient computation itself. ReLU slopes and dropout masks are constant
    almost everywhere, so the only curvature enters through the head.

    Returns ``(penalty, model gradients, head parameter gradients)``.
    """
    x = as_matrix(x, "x")
    if trace is None:
        trace = model.forward(x, "eval")
    z = trace.features
    v = np.ones_like(z) if head is None else head.scalar_grad(z)
    derivs = model.local_derivatives(trace)
    n_layers = len(model.layers)

    gammas: list[Matrix] = [None] * n_layers  # type: ignore[list-item]
    delta = v
    for i in range(n_layers - 1, -1, -1):
        gammas[i] = delta * derivs[i]
        delta = gammas[i] @ trace.weights[i].T
    gx = delta

    batch = gx.shape[0]
    norms = np.sqrt(np.sum(gx * gx, axis=1))
    penalty = strength * float(np.mean((norms - target) ** 2))

    safe = np.where(norms > 0, norms, 1.0)
    coef = np.where(norms > 0, strength * 2.0 * (norms - target) / (batch * safe), 0.0)
    dbar = coef[:, None] * gx
    dW_eff = []
    for i in range(n_layers):
        dW_eff.append(dbar.T @ gammas[i])
        dbar = (dbar @ trace.weights[i]) * derivs[i]
    vbar = dbar

    if head is None:
        zbar = np.zeros_like(z)
        head_grads: list[np.ndarray] = []
    else:
        zbar, head_grads = head.scalar_grad_backward(z, vbar)
    grads = model.backward(trace, zbar, extra_dW_eff=dW_eff)
    return penalty, grads, head_grads


def reconstruction_loss(
    decoder: MlpModel, z: Matrix, x: Matrix, strength: float = 1.0
) -> tuple[float, Matrix, GradientSet]:
    """``strength * mean((decoder(z) - x)^2)`` with gradients for z and the decoder."""
    z = as_matrix(z, "z")
    x = as_matrix(x, "x")
    if decoder.in_dim != z.shape[1]:
        raise ShapeError(f"decoder expects {decoder.in_dim} inputs, z has {z.shape[1]}")
    if decoder.feature_dim != x.shape[1]:
        raise ShapeError(f"decoder outputs {decoder.feature_dim}, x has {x.shape[1]}")
    trace = decoder.forward(z, "eval")
    diff = trace.features - x
    mse = float(np.mean(diff * diff))
    grads = decoder.backward(trace, strength * 2.0 * diff / diff.size)
    return strength * mse, grads.dx, grads


def _check_alpha(alpha) -> np.ndarray:
    a = np.asarray(alpha, dtype=np.float64)
    if a.ndim == 0 or a.shape[-1] < 1:
        raise ValueError("alpha must have at least one component")
    if not np.all(a > 0):
        raise ValueError("Dirichlet parameters must be > 0")
    return a


def dirichlet_entropy(alpha) -> float | np.ndarray:
    """Differential entropy of Dir(alpha); the last axis indexes classes."""
    a = _check_alpha(alpha)
    k = a.shape[-1]
    a0 = a.sum(axis=-1)
    log_beta = gammaln(a).sum(axis=-1) - gammaln(a0)
    h = log_beta + (a0 - k) * digamma(a0) - ((a - 1.0) * digamma(a)).sum(axis=-1)
    return float(h) if np.ndim(h) == 0 else h


def dirichlet_entropy_grad(alpha) -> np.ndarray:
    """d H(Dir(alpha)) / d alpha_j = (alpha_0 - K) psi'(alpha_0) - (alpha_j - 1) psi'(alpha_j)."""
    a = _check_alpha(alpha)
    k = a.shape[-1]
    a0 = a.sum(axis=-1, keepdims=True)
    return (a0 - k) * polygamma(1, a0) - (a - 1.0) * polygamma(1, a)
