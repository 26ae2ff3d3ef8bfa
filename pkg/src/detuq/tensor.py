"""Dense linear algebra, seeded randomness and PCA.

Matrices are plain ``float64`` numpy arrays in row-major layout. The helpers
here add the shape checks and conventions the rest of the package relies on.
"""

from __future__ import annotations

import base64
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

Matrix = np.ndarray
Vector = np.ndarray


def make_rng(seed: int) -> np.random.Generator:
    """Return a PCG64 generator; equal seeds give bit-identical streams."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def as_matrix(a, name: str = "array") -> Matrix:
    out = np.asarray(a, dtype=np.float64)
    if out.ndim == 1:
        out = out[None, :]
    if out.ndim != 2:
        raise ShapeError(f"{name} must be 2-D, got shape {out.shape}")
    return out


def matmul(a: Matrix, b: Matrix) -> Matrix:
    a = as_matrix(a, "a")
    b = as_matrix(b, "b")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    if a.shape[1] == 0:
        return np.zeros((a.shape[0], b.shape[1]))
    return a @ b


def _unit(x: Vector) -> tuple[Vector, float]:
    n = float(np.linalg.norm(x))
    if n == 0.0:
        return x, 0.0
    return x / n, n


def spectral_norm_power_iter(
    w: Matrix, u: Vector, iters: int = 1
) -> tuple[float, Vector, Vector]:
    """Estimate the largest singular value of ``w`` by power iteration.

    Args:
      w: matrix of shape (rows, cols).
      u: current left singular-vector estimate, length ``rows``. Passing the
        returned ``u`` back in on the next call gives the warm-started scheme
        used during training.
      iters: number of (v, u) update rounds, at least 1.

    Returns:
      ``(sigma, u_next, v_next)`` with ``sigma = u_next^T w v_next``. For a zero
      matrix ``sigma`` is 0, ``u`` is returned unchanged and ``v_next`` is zero.
    """
    w = as_matrix(w, "w")
    u = np.asarray(u, dtype=np.float64).ravel()
    if u.shape[0] != w.shape[0]:
        raise ShapeError(f"u has length {u.shape[0]}, expected {w.shape[0]}")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    u, un = _unit(u)
    if un == 0.0:
        raise ValueError("u must be nonzero")
    v = np.zeros(w.shape[1])
    for _ in range(iters):
        v, vn = _unit(w.T @ u)
        if vn == 0.0:
            return 0.0, u, np.zeros(w.shape[1])
        u_new, un = _unit(w @ v)
        if un == 0.0:
            return 0.0, u, np.zeros(w.shape[1])
        u = u_new
    sigma = float(u @ w @ v)
    return sigma, u, v


def symmetric_eig(
    a: Matrix, tol: float = 1e-14, max_sweeps: int = 100
) -> tuple[Vector, Matrix]:
    """Cyclic Jacobi eigendecomposition of a symmetric matrix.

    Returns eigenvalues in descending order and the matching orthonormal
    eigenvectors as columns.
    """
    a = as_matrix(a, "a").copy()
    n = a.shape[0]
    if a.shape[1] != n:
        raise ShapeError(f"matrix must be square, got {a.shape}")
    a = 0.5 * (a + a.T)
    v = np.eye(n)
    scale = float(np.linalg.norm(a))
    if n < 2 or scale == 0.0:
        order = np.argsort(-np.diag(a), kind="stable")
        return np.diag(a)[order].copy(), v[:, order]
    for _ in range(max_sweeps):
        off = float(np.linalg.norm(a - np.diag(np.diag(a))))
        if off <= tol * scale:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                apq = a[p, q]
                if abs(apq) <= 1e-300 or abs(apq) < 1e-3 * tol * scale:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * apq)
                t = np.sign(theta) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                if theta == 0.0:
                    t = 1.0
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c
                cp = a[:, p].copy()
                cq = a[:, q].copy()
                a[:, p] = c * cp - s * cq
                a[:, q] = s * cp + c * cq
                rp = a[p, :].copy()
                rq = a[q, :].copy()
                a[p, :] = c * rp - s * rq
                a[q, :] = s * rp + c * rq
                a[p, q] = a[q, p] = 0.0
                vp = v[:, p].copy()
                vq = v[:, q].copy()
                v[:, p] = c * vp - s * vq
                v[:, q] = s * vp + c * vq
    evals = np.diag(a).copy()
    order = np.argsort(-evals, kind="stable")
    return evals[order], v[:, order]


@dataclass
class PcaProjection:
    mean: Vector
    components: Matrix  # (out_dim, in_dim), orthonormal rows
    explained_variance: Vector
    rank_deficient: bool = False

    @property
    def out_dim(self) -> int:
        return self.components.shape[0]

    def transform(self, x: Matrix) -> Matrix:
        x = as_matrix(x, "x")
        if x.shape[1] != self.mean.shape[0]:
            raise ShapeError(f"expected {self.mean.shape[0]} columns, got {x.shape[1]}")
        return (x - self.mean) @ self.components.T

    def inverse_transform(self, y: Matrix) -> Matrix:
        return as_matrix(y, "y") @ self.components + self.mean

    def to_dict(self) -> dict:
        return {
            "mean": pack_array(self.mean),
            "components": pack_array(self.components),
            "explained_variance": pack_array(self.explained_variance),
            "rank_deficient": self.rank_deficient,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PcaProjection":
        return cls(
            unpack_array(d["mean"]),
            unpack_array(d["components"]),
            unpack_array(d["explained_variance"]),
            bool(d["rank_deficient"]),
        )


def pca_fit(data: Matrix, out_dim: int) -> PcaProjection:
    """Fit PCA by eigendecomposition of the (1/n) sample covariance.

    Directions belonging to numerically zero variance still come from the
    orthonormal eigenbasis; ``rank_deficient`` is set when any kept direction
    has no variance behind it.
    """
    data = as_matrix(data, "data")
    n, d = data.shape
    if n < 2:
        raise ValueError("pca_fit needs at least two rows")
    if not 1 <= out_dim <= d:
        raise ValueError(f"out_dim must be in [1, {d}], got {out_dim}")
    mean = data.mean(axis=0)
    centered = data - mean
    cov = centered.T @ centered / n
    evals, evecs = symmetric_eig(cov)
    kept = np.clip(evals[:out_dim], 0.0, None)
    top = max(float(evals[0]), 0.0)
    deficient = bool(top == 0.0 or kept[-1] <= 1e-12 * top)
    components = evecs[:, :out_dim].T.copy()
    # sign convention: largest-magnitude coordinate of each direction positive
    for i, row in enumerate(components):
        if row[np.argmax(np.abs(row))] < 0:
            components[i] = -row
    return PcaProjection(mean, components, kept, deficient)


def pack_array(a) -> dict:
    """Encode an array as base64 little-endian float64 for JSON checkpoints."""
    arr = np.ascontiguousarray(np.asarray(a, dtype="<f8"))
    return {"shape": list(arr.shape), "f8": base64.b64encode(arr.tobytes()).decode("ascii")}


def unpack_array(d: dict) -> np.ndarray:
    raw = base64.b64decode(d["f8"])
    return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(d["shape"])
