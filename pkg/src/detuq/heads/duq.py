"""RBF-centroid head: one embedding map and one centroid per class.

The kernel score of class ``c`` is
``K_c = exp(-||W_c z - e_c||^2 / (2 n sigma^2))`` with ``n`` the centroid
dimension. The model is trained with a per-class binary cross-entropy on the
kernel scores; centroids are not trained by gradient but follow an
exponential moving average of the embedded class means.
"""

from __future__ import annotations

import math

import numpy as np

from ..errors import ShapeError
from ..tensor import Matrix, as_matrix, pack_array, unpack_array

_EPS = 1e-15


class RbfCentroidHead:
    kind = "duq"

    def __init__(self, W: np.ndarray, centroids: Matrix, lengthscale: float = 0.1, gamma: float = 0.999):
        if lengthscale <= 0:
            raise ValueError("lengthscale must be > 0")
        if not 0.0 <= gamma <= 1.0:
            raise ValueError("gamma must lie in [0, 1]")
        self.W = np.asarray(W, dtype=np.float64)  # (K, n, d)
        self.centroids = np.asarray(centroids, dtype=np.float64)  # (K, n)
        if self.W.ndim != 3 or self.centroids.shape != self.W.shape[:2]:
            raise ShapeError(f"W {self.W.shape} and centroids {self.centroids.shape} disagree")
        self.lengthscale = float(lengthscale)
        self.gamma = float(gamma)

    @classmethod
    def init(
        cls,
        in_dim: int,
        n_classes: int,
        rng: np.random.Generator,
        centroid_dim: int = 64,
        lengthscale: float = 0.1,
        gamma: float = 0.999,
    ) -> "RbfCentroidHead":
        W = rng.standard_normal((n_classes, centroid_dim, in_dim)) * math.sqrt(2.0 / in_dim)
        centroids = rng.standard_normal((n_classes, centroid_dim)) * 0.01
        return cls(W, centroids, lengthscale, gamma)

    @property
    def n_classes(self) -> int:
        return self.W.shape[0]

    @property
    def centroid_dim(self) -> int:
        return self.W.shape[1]

    @property
    def _s(self) -> float:
        return 1.0 / (self.centroid_dim * self.lengthscale**2)

    def parameters(self) -> list[np.ndarray]:
        return [self.W]

    def embed(self, z: Matrix) -> np.ndarray:
        z = as_matrix(z, "z")
        if z.shape[1] != self.W.shape[2]:
            raise ShapeError(f"head expects {self.W.shape[2]} features, got {z.shape[1]}")
        return np.einsum("knd,bd->bkn", self.W, z)

    def _diff_and_kernel(self, z: Matrix) -> tuple[np.ndarray, Matrix]:
        diff = self.embed(z) - self.centroids[None]
        sq = np.sum(diff * diff, axis=2)
        return diff, np.exp(-0.5 * self._s * sq)

    def kernel(self, z: Matrix) -> Matrix:
        return self._diff_and_kernel(z)[1]

    def predict(self, z: Matrix) -> tuple[Matrix, np.ndarray]:
        """Kernel scores (not normalised) and ``1 - max_c K_c``."""
        k = self.kernel(z)
        return k, 1.0 - k.max(axis=1)

    def loss_and_grad(self, z: Matrix, y) -> tuple[float, Matrix, list[np.ndarray]]:
        """Mean binary cross-entropy between kernel scores and one-hot labels."""
        y = np.asarray(y, dtype=np.int64)
        z = as_matrix(z, "z")
        diff, k = self._diff_and_kernel(z)
        onehot = np.zeros_like(k)
        onehot[np.arange(len(y)), y] = 1.0
        kc = np.clip(k, _EPS, 1.0 - _EPS)
        loss = -float(np.mean(onehot * np.log(kc) + (1 - onehot) * np.log1p(-kc)))
        # dL/dK * K, folded to avoid dividing by tiny K
        dk_k = (kc - onehot) / (1.0 - kc) / k.size
        dE = -self._s * dk_k[:, :, None] * diff
        dz = np.einsum("bkn,knd->bd", dE, self.W)
        dW = np.einsum("bkn,bd->knd", dE, z)
        return loss, dz, [dW]

    def update_centroids(self, z: Matrix, y, gamma: float | None = None) -> None:
        """``e_c <- gamma e_c + (1 - gamma) mean(W_c z)`` for every class present in ``y``."""
        gamma = self.gamma if gamma is None else gamma
        y = np.asarray(y, dtype=np.int64)
        emb = self.embed(z)
        for c in np.unique(y):
            sel = y == c
            self.centroids[c] = gamma * self.centroids[c] + (1.0 - gamma) * emb[sel, c].mean(axis=0)

    def after_step(self, z: Matrix, y) -> None:
        self.update_centroids(z, y)

    # gradient-penalty scalarization: g(z) = sum_c K_c
    def scalar_grad(self, z: Matrix) -> Matrix:
        diff, k = self._diff_and_kernel(z)
        return -self._s * np.einsum("bk,bkn,knd->bd", k, diff, self.W)

    def scalar_grad_backward(self, z: Matrix, vbar: Matrix) -> tuple[Matrix, list[np.ndarray]]:
        """Adjoint of ``scalar_grad``: Hessian-vector product for z and the W gradient."""
        z = as_matrix(z, "z")
        s = self._s
        diff, k = self._diff_and_kernel(z)
        q = np.einsum("knd,bd->bkn", self.W, vbar)
        qr = np.sum(q * diff, axis=2)
        a = s * s * k * qr
        sk = s * k
        zbar = np.einsum("bk,bkn,knd->bd", a, diff, self.W) - np.einsum("bk,bkn,knd->bd", sk, q, self.W)
        dW = (
            np.einsum("bk,bkn,bd->knd", a, diff, z)
            - np.einsum("bk,bkn,bd->knd", sk, diff, vbar)
            - np.einsum("bk,bkn,bd->knd", sk, q, z)
        )
        return zbar, [dW]

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "W": pack_array(self.W),
            "centroids": pack_array(self.centroids),
            "lengthscale": self.lengthscale,
            "gamma": self.gamma,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RbfCentroidHead":
        return cls(unpack_array(d["W"]), unpack_array(d["centroids"]), d["lengthscale"], d["gamma"])


def duq_forward(head: RbfCentroidHead, z: Matrix) -> tuple[Matrix, np.ndarray]:
    return head.predict(z)


def duq_update_centroids(head: RbfCentroidHead, z: Matrix, y, gamma: float) -> Matrix:
    head.update_centroids(z, y, gamma)
    return head.centroids
