"""Linear classification layer with softmax output."""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError
from ..tensor import Matrix, as_matrix, pack_array, unpack_array


def softmax(logits: Matrix) -> Matrix:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(logits: Matrix) -> Matrix:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def entropy(probs: Matrix) -> np.ndarray:
    p = np.asarray(probs, dtype=np.float64)
    logp = np.log(np.where(p > 0, p, 1.0))
    return -(p * logp).sum(axis=-1)


class LinearSoftmaxHead:
    kind = "softmax"

    def __init__(self, W: Matrix, b: np.ndarray):
        self.W = np.asarray(W, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)

    @classmethod
    def init(cls, in_dim: int, n_classes: int, rng: np.random.Generator) -> "LinearSoftmaxHead":
        limit = math.sqrt(6.0 / (in_dim + n_classes))
        return cls(rng.uniform(-limit, limit, size=(in_dim, n_classes)), np.zeros(n_classes))

    @property
    def n_classes(self) -> int:
        return self.W.shape[1]

    def parameters(self) -> list[np.ndarray]:
        return [self.W, self.b]

    def logits(self, z: Matrix) -> Matrix:
        z = as_matrix(z, "z")
        if z.shape[1] != self.W.shape[0]:
            raise ShapeError(f"head expects {self.W.shape[0]} features, got {z.shape[1]}")
        return z @ self.W + self.b

    def loss_and_grad(self, z: Matrix, y) -> tuple[float, Matrix, list[np.ndarray]]:
        """Mean cross-entropy; returns ``(loss, dL/dz, [dW, db])``."""
        y = np.asarray(y, dtype=np.int64)
        logits = self.logits(z)
        logp = log_softmax(logits)
        rows = np.arange(len(y))
        loss = -float(np.mean(logp[rows, y]))
        g = np.exp(logp)
        g[rows, y] -= 1.0
        g /= len(y)
        return loss, g @ self.W.T, [z.T @ g, g.sum(axis=0)]

    def predict_proba(self, z: Matrix) -> Matrix:
        return softmax(self.logits(z))

    def predict(self, z: Matrix) -> tuple[Matrix, np.ndarray]:
        """Class probabilities and softmax entropy as the uncertainty."""
        p = self.predict_proba(z)
        return p, entropy(p)

    # gradient-penalty scalarization: g(z) = sum of logits
    def scalar_grad(self, z: Matrix) -> Matrix:
        return np.broadcast_to(self.W.sum(axis=1), z.shape).copy()

    def scalar_grad_backward(self, z: Matrix, vbar: Matrix) -> tuple[Matrix, list[np.ndarray]]:
        dW = np.outer(vbar.sum(axis=0), np.ones(self.n_classes))
        return np.zeros_like(z), [dW, np.zeros_like(self.b)]

    def to_dict(self) -> dict:
        return {"kind": self.kind, "W": pack_array(self.W), "b": pack_array(self.b)}

    @classmethod
    def from_dict(cls, d: dict) -> "LinearSoftmaxHead":
        return cls(unpack_array(d["W"]), unpack_array(d["b"]))
