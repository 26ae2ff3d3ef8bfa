"""Random-Fourier-feature Gaussian-process output layer with a Laplace posterior.

Features are ``phi(z) = sqrt(2/D) cos(Omega z / l + b)`` with ``Omega`` and
``b`` frozen at initialisation. Only the output weights are trained. After
training, a Laplace precision over the output weights is accumulated from the
training features; prediction shrinks the logits by the predictive variance
(mean-field approximation) and reports the Dempster-Shafer uncertainty.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.linalg import solve_triangular

from ..errors import ShapeError
from ..tensor import Matrix, as_matrix, pack_array, unpack_array
from .softmax import log_softmax, softmax

RIDGE_START = 1e-6
RIDGE_MAX = 1e-2


def laplace_precision(phi: Matrix, p_max: np.ndarray) -> Matrix:
    """``I + sum_i p_i (1 - p_i) phi_i phi_i^T``."""
    phi = as_matrix(phi, "phi")
    w = np.asarray(p_max, dtype=np.float64) * (1.0 - np.asarray(p_max, dtype=np.float64))
    return np.eye(phi.shape[1]) + (phi * w[:, None]).T @ phi


def cholesky_with_ridge(a: Matrix) -> tuple[Matrix, float]:
    """Lower Cholesky factor, adding ``ridge * I`` from 1e-6 up to 1e-2 on failure."""
    try:
        return np.linalg.cholesky(a), 0.0
    except np.linalg.LinAlgError:
        pass
    ridge = RIDGE_START
    eye = np.eye(a.shape[0])
    while ridge <= RIDGE_MAX * (1 + 1e-9):
        try:
            return np.linalg.cholesky(a + ridge * eye), ridge
        except np.linalg.LinAlgError:
            ridge *= 10.0
    raise np.linalg.LinAlgError("matrix is not positive definite even with ridge 1e-2")


def dempster_shafer(logits: Matrix) -> np.ndarray:
    """``K / (K + sum_k exp(logit_k))``, evaluated in log space."""
    logits = as_matrix(logits, "logits")
    k = logits.shape[1]
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True)))[:, 0]
    logk = math.log(k)
    return np.exp(logk - np.logaddexp(logk, lse))


class RffGpLaplaceHead:
    kind = "sngp"

    def __init__(
        self,
        omega: Matrix,
        phase: np.ndarray,
        beta: Matrix,
        lengthscale: float = 2.0,
        mean_field_factor: float = 30.0,
        precision: Matrix | None = None,
    ):
        self.omega = np.asarray(omega, dtype=np.float64)  # (D, d)
        self.phase = np.asarray(phase, dtype=np.float64)  # (D,)
        self.beta = np.asarray(beta, dtype=np.float64)  # (K, D)
        self.lengthscale = float(lengthscale)
        self.mean_field_factor = float(mean_field_factor)
        if self.beta.shape[1] != self.omega.shape[0] or self.phase.shape != (self.omega.shape[0],):
            raise ShapeError("omega, phase and beta disagree on the number of features")
        self.set_precision(np.eye(self.num_features) if precision is None else precision)

    @classmethod
    def init(
        cls,
        in_dim: int,
        n_classes: int,
        rng: np.random.Generator,
        num_features: int = 1024,
        lengthscale: float = 2.0,
        mean_field_factor: float = 30.0,
    ) -> "RffGpLaplaceHead":
        omega = rng.standard_normal((num_features, in_dim))
        phase = rng.uniform(0.0, 2.0 * math.pi, size=num_features)
        beta = rng.standard_normal((n_classes, num_features)) * 0.01
        return cls(omega, phase, beta, lengthscale, mean_field_factor)

    @property
    def num_features(self) -> int:
        return self.omega.shape[0]

    @property
    def n_classes(self) -> int:
        return self.beta.shape[0]

    def parameters(self) -> list[np.ndarray]:
        return [self.beta]

    def _arg(self, z: Matrix) -> Matrix:
        z = as_matrix(z, "z")
        if z.shape[1] != self.omega.shape[1]:
            raise ShapeError(f"head expects {self.omega.shape[1]} features, got {z.shape[1]}")
        return z @ self.omega.T / self.lengthscale + self.phase

    def features(self, z: Matrix) -> Matrix:
        return math.sqrt(2.0 / self.num_features) * np.cos(self._arg(z))

    def logits(self, z: Matrix) -> Matrix:
        return self.features(z) @ self.beta.T

    def loss_and_grad(self, z: Matrix, y) -> tuple[float, Matrix, list[np.ndarray]]:
        y = np.asarray(y, dtype=np.int64)
        arg = self._arg(z)
        scale = math.sqrt(2.0 / self.num_features)
        phi = scale * np.cos(arg)
        logp = log_softmax(phi @ self.beta.T)
        rows = np.arange(len(y))
        loss = -float(np.mean(logp[rows, y]))
        g = np.exp(logp)
        g[rows, y] -= 1.0
        g /= len(y)
        dbeta = g.T @ phi
        darg = -scale * np.sin(arg) * (g @ self.beta)
        dz = darg @ self.omega / self.lengthscale
        return loss, dz, [dbeta]

    def set_precision(self, precision: Matrix) -> None:
        self.precision = np.asarray(precision, dtype=np.float64)
        self.chol, self.ridge = cholesky_with_ridge(self.precision)

    def fit_laplace(self, z_batches) -> Matrix:
        """Accumulate the Laplace precision over an iterable of feature batches."""
        prec = np.eye(self.num_features)
        for z in z_batches:
            phi = self.features(z)
            p_max = softmax(phi @ self.beta.T).max(axis=1)
            prec += laplace_precision(phi, p_max) - np.eye(self.num_features)
        self.set_precision(prec)
        return self.precision

    def predictive_variance(self, phi: Matrix) -> np.ndarray:
        """``phi^T Lambda^{-1} phi`` per row via the cached Cholesky factor."""
        w = solve_triangular(self.chol, as_matrix(phi, "phi").T, lower=True)
        return np.sum(w * w, axis=0)

    def adjusted_logits(self, z: Matrix) -> tuple[Matrix, np.ndarray]:
        phi = self.features(z)
        m = phi @ self.beta.T
        v = self.predictive_variance(phi)
        return m / np.sqrt(1.0 + self.mean_field_factor * v)[:, None], v

    def predict(self, z: Matrix) -> tuple[Matrix, np.ndarray]:
        """Mean-field softmax probabilities and Dempster-Shafer uncertainty."""
        logits, _ = self.adjusted_logits(z)
        return softmax(logits), dempster_shafer(logits)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "omega": pack_array(self.omega),
            "phase": pack_array(self.phase),
            "beta": pack_array(self.beta),
            "lengthscale": self.lengthscale,
            "mean_field_factor": self.mean_field_factor,
            "precision": pack_array(self.precision),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RffGpLaplaceHead":
        return cls(
            unpack_array(d["omega"]),
            unpack_array(d["phase"]),
            unpack_array(d["beta"]),
            d["lengthscale"],
            d["mean_field_factor"],
            unpack_array(d["precision"]),
        )


def sngp_fit_laplace(head: RffGpLaplaceHead, z_batches) -> Matrix:
    return head.fit_laplace(z_batches)


def sngp_predict(head: RffGpLaplaceHead, z: Matrix) -> tuple[Matrix, np.ndarray]:
    return head.predict(z)
