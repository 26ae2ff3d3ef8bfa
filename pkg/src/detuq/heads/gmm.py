"""Gaussian mixture densities over feature vectors.

Two fitting modes:

* ``per_class_gaussian``: one full-covariance Gaussian per label, population
  (1/n) covariance, mixture weight = class frequency.
* ``em_k_components``: an unsupervised mixture of ``k`` full-covariance
  components fitted by expectation-maximisation.

Covariances that fail Cholesky get ``ridge * I`` added, starting at 1e-6 and
growing tenfold until the factorisation succeeds.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.special import logsumexp

from ..errors import ShapeError
from ..tensor import Matrix, PcaProjection, as_matrix, pack_array, pca_fit, unpack_array

MODES = ("per_class_gaussian", "em_k_components")
_LOG_2PI = math.log(2.0 * math.pi)


def cholesky_escalating(cov: Matrix, start: float = 1e-6, max_ridge: float = 1e6) -> tuple[Matrix, Matrix]:
    """Return ``(cov_used, L)``; ridge is added only if the plain factorisation fails."""
    try:
        return cov, np.linalg.cholesky(cov)
    except np.linalg.LinAlgError:
        pass
    ridge = start
    eye = np.eye(cov.shape[0])
    while ridge <= max_ridge:
        try:
            c = cov + ridge * eye
            return c, np.linalg.cholesky(c)
        except np.linalg.LinAlgError:
            ridge *= 10.0
    raise np.linalg.LinAlgError("covariance could not be regularised")


@dataclass
class ClassGmm:
    weights: np.ndarray  # (C,)
    means: Matrix  # (C, d)
    covs: np.ndarray  # (C, d, d)
    mode: str = "per_class_gaussian"
    pca: PcaProjection | None = None
    chols: np.ndarray = field(init=False, repr=False)
    logdets: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.means = np.asarray(self.means, dtype=np.float64)
        self.covs = np.asarray(self.covs, dtype=np.float64)
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ValueError(f"mixture weights sum to {self.weights.sum()}, not 1")
        chols = []
        covs = []
        for cov in self.covs:
            cov = 0.5 * (cov + cov.T)
            cov, L = cholesky_escalating(cov)
            covs.append(cov)
            chols.append(L)
        self.covs = np.stack(covs)
        self.chols = np.stack(chols)
        self.logdets = 2.0 * np.log(np.diagonal(self.chols, axis1=1, axis2=2)).sum(axis=1)

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def project(self, z: Matrix) -> Matrix:
        z = as_matrix(z, "z")
        if self.pca is not None:
            z = self.pca.transform(z)
        if z.shape[1] != self.dim:
            raise ShapeError(f"GMM fitted on {self.dim} dims, got {z.shape[1]}")
        return z

    def component_log_densities(self, z: Matrix) -> Matrix:
        """``log pi_c + log N(z; mu_c, Sigma_c)`` for every row and component."""
        z = self.project(z)
        out = np.empty((z.shape[0], self.n_components))
        with np.errstate(divide="ignore"):
            logw = np.log(self.weights)
        for c in range(self.n_components):
            y = solve_triangular(self.chols[c], (z - self.means[c]).T, lower=True)
            maha = np.sum(y * y, axis=0)
            out[:, c] = logw[c] - 0.5 * (self.dim * _LOG_2PI + self.logdets[c] + maha)
        return out

    def log_likelihood(self, z: Matrix) -> np.ndarray:
        return logsumexp(self.component_log_densities(z), axis=1)

    def mir_uncertainty(self, z: Matrix) -> np.ndarray:
        """Negative marginal log-likelihood."""
        return -self.log_likelihood(z)

    def ddu_uncertainty(self, z: Matrix) -> np.ndarray:
        """Negative log-density of the most likely component."""
        return -self.component_log_densities(z).max(axis=1)

    def sample(self, n: int, rng: np.random.Generator) -> Matrix:
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        eps = rng.standard_normal((n, self.dim))
        return self.means[comp] + np.einsum("nij,nj->ni", self.chols[comp], eps)

    def to_dict(self) -> dict:
        return {
            "kind": "gmm",
            "mode": self.mode,
            "weights": pack_array(self.weights),
            "means": pack_array(self.means),
            "covs": pack_array(self.covs),
            "pca": None if self.pca is None else self.pca.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClassGmm":
        pca = None if d["pca"] is None else PcaProjection.from_dict(d["pca"])
        return cls(unpack_array(d["weights"]), unpack_array(d["means"]), unpack_array(d["covs"]), d["mode"], pca)


def _population_cov(x: Matrix, mean: np.ndarray) -> Matrix:
    c = x - mean
    return c.T @ c / x.shape[0]


def _fit_per_class(z: Matrix, labels: np.ndarray, n_classes: int | None) -> tuple:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.shape[0] != z.shape[0]:
        raise ShapeError("labels and features differ in length")
    k = int(labels.max()) + 1 if n_classes is None else n_classes
    d = z.shape[1]
    weights = np.zeros(k)
    means = np.zeros((k, d))
    covs = np.tile(np.eye(d), (k, 1, 1))
    for c in range(k):
        sel = z[labels == c]
        if len(sel) == 0:
            continue
        weights[c] = len(sel) / len(z)
        means[c] = sel.mean(axis=0)
        covs[c] = _population_cov(sel, means[c])
    return weights, means, covs


def _fit_em(z: Matrix, k: int, rng: np.random.Generator, tol: float, max_iter: int) -> tuple:
    n, d = z.shape
    if k < 1:
        raise ValueError("need at least one component")
    global_mean = z.mean(axis=0)
    global_cov = _population_cov(z, global_mean)
    means = z[rng.choice(n, size=k, replace=n < k)].copy()
    covs = np.tile(global_cov, (k, 1, 1))
    weights = np.full(k, 1.0 / k)
    prev = -np.inf
    for _ in range(max_iter):
        gmm = ClassGmm(weights, means, covs, "em_k_components")
        comp = gmm.component_log_densities(z)
        ll = logsumexp(comp, axis=1)
        mean_ll = float(ll.mean())
        resp = np.exp(comp - ll[:, None])
        nk = resp.sum(axis=0)
        weights = nk / n
        means = np.empty((k, d))
        covs = np.empty((k, d, d))
        for c in range(k):
            if nk[c] < 1e-8 * n or nk[c] < 1.0:
                # degenerate component: restart from a random datum
                means[c] = z[rng.integers(n)]
                covs[c] = global_cov
                weights[c] = 1.0 / n
                continue
            means[c] = resp[:, c] @ z / nk[c]
            diff = z - means[c]
            covs[c] = (diff * resp[:, c : c + 1]).T @ diff / nk[c]
        weights = weights / weights.sum()
        if abs(mean_ll - prev) < tol:
            break
        prev = mean_ll
    return weights, means, covs


def gmm_fit(
    features: Matrix,
    labels=None,
    n_components: int | None = None,
    mode: str = "per_class_gaussian",
    rng: np.random.Generator | None = None,
    pca_dim: int | None = None,
    tol: float = 1e-6,
    max_iter: int = 200,
) -> ClassGmm:
    """Fit a :class:`ClassGmm` to feature rows.

    ``per_class_gaussian`` requires ``labels``; ``n_components`` then fixes the
    number of classes (absent classes get zero weight). ``em_k_components``
    requires ``n_components`` and stops once the mean log-likelihood changes by
    less than ``tol`` or after ``max_iter`` iterations.
    """
    if mode not in MODES:
        raise ValueError(f"unknown GMM mode {mode!r}")
    z = as_matrix(features, "features")
    pca = None
    if pca_dim is not None and pca_dim < z.shape[1]:
        pca = pca_fit(z, pca_dim)
        z = pca.transform(z)
    if mode == "per_class_gaussian":
        if labels is None:
            raise ValueError("per_class_gaussian needs labels")
        weights, means, covs = _fit_per_class(z, labels, n_components)
    else:
        if n_components is None:
            raise ValueError("em_k_components needs n_components")
        rng = rng if rng is not None else np.random.default_rng(0)
        weights, means, covs = _fit_em(z, n_components, rng, tol, max_iter)
    return ClassGmm(weights, means, covs, mode, pca)


def gmm_log_likelihood(gmm: ClassGmm, z) -> float | np.ndarray:
    z_arr = np.asarray(z, dtype=np.float64)
    ll = gmm.log_likelihood(z_arr)
    return float(ll[0]) if z_arr.ndim == 1 else ll
