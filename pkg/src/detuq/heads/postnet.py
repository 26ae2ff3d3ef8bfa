"""Per-class radial-flow densities feeding Dirichlet evidence.

A radial layer maps ``x -> x + beta (x - z0) / (alpha + ||x - z0||)``. The
density of a latent ``z`` is evaluated by pushing it through the layers
towards the standard-normal base and adding each layer's log-determinant:

    log p(z) = log N(T(z); 0, I) + sum_k log|det dT_k/dx|

``alpha = softplus(a)`` and ``beta = -alpha + softplus(b)`` keep every layer
invertible. The Dirichlet parameters are
``alpha_c = beta_prior + N_c p(z | c)``.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import digamma, expit, polygamma

from ..errors import ShapeError
from ..regularize import dirichlet_entropy, dirichlet_entropy_grad
from ..tensor import Matrix, as_matrix, pack_array, unpack_array

_LOG_2PI = math.log(2.0 * math.pi)
LOG_CLAMP = 700.0


def softplus(x):
    return np.logaddexp(0.0, x)


def softplus_inv(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


class RadialFlow:
    """Stack of radial layers on a ``dim``-dimensional latent space."""

    def __init__(self, z0: Matrix, a_raw: np.ndarray, b_raw: np.ndarray):
        self.z0 = np.asarray(z0, dtype=np.float64)  # (L, d)
        self.a_raw = np.asarray(a_raw, dtype=np.float64)  # (L,)
        self.b_raw = np.asarray(b_raw, dtype=np.float64)  # (L,)
        if self.z0.ndim != 2 or self.a_raw.shape != (self.z0.shape[0],) or self.b_raw.shape != self.a_raw.shape:
            raise ShapeError("radial flow parameter shapes disagree")

    @classmethod
    def init(cls, dim: int, n_layers: int, rng: np.random.Generator) -> "RadialFlow":
        lim = 1.0 / dim
        return cls(
            rng.standard_normal((n_layers, dim)),
            rng.uniform(-lim, lim, size=n_layers),
            rng.uniform(-lim, lim, size=n_layers),
        )

    @classmethod
    def from_natural(cls, z0: Matrix, alpha, beta) -> "RadialFlow":
        """Build from ``(z0, alpha, beta)`` directly; requires ``alpha > 0`` and ``beta > -alpha``."""
        alpha = np.atleast_1d(np.asarray(alpha, dtype=np.float64))
        beta = np.atleast_1d(np.asarray(beta, dtype=np.float64))
        if np.any(alpha <= 0) or np.any(beta <= -alpha):
            raise ValueError("radial flow needs alpha > 0 and beta > -alpha")
        return cls(np.atleast_2d(z0), softplus_inv(alpha), softplus_inv(beta + alpha))

    @property
    def dim(self) -> int:
        return self.z0.shape[1]

    @property
    def n_layers(self) -> int:
        return self.z0.shape[0]

    @property
    def alpha(self) -> np.ndarray:
        return softplus(self.a_raw)

    @property
    def beta(self) -> np.ndarray:
        return -self.alpha + softplus(self.b_raw)

    def parameters(self) -> list[np.ndarray]:
        return [self.z0, self.a_raw, self.b_raw]

    def transform(self, z: Matrix) -> tuple[Matrix, np.ndarray, list]:
        """Push ``z`` to the base space; returns ``(x, sum log|det|, cache)``."""
        x = as_matrix(z, "z")
        if x.shape[1] != self.dim:
            raise ShapeError(f"flow expects {self.dim} dims, got {x.shape[1]}")
        alpha, beta = self.alpha, self.beta
        d = self.dim
        logdet = np.zeros(x.shape[0])
        cache = []
        for k in range(self.n_layers):
            delta = x - self.z0[k]
            r = np.sqrt(np.sum(delta * delta, axis=1))
            A = alpha[k] + r
            logdet += (d - 1) * np.log1p(beta[k] / A) + np.log1p(beta[k] * alpha[k] / (A * A))
            cache.append((delta, r, A))
            x = x + (beta[k] / A)[:, None] * delta
        return x, logdet, cache

    def log_prob(self, z: Matrix) -> np.ndarray:
        x, logdet, _ = self.transform(z)
        return -0.5 * (self.dim * _LOG_2PI + np.sum(x * x, axis=1)) + logdet

    def log_prob_and_backward(self, z: Matrix, upstream: np.ndarray) -> tuple[np.ndarray, Matrix, list[np.ndarray]]:
        """Log-density plus gradients of ``sum_i upstream_i log p(z_i)``.

        Returns ``(log_prob, d/dz, [d/dz0, d/da_raw, d/db_raw])``.
        """
        x, logdet, cache = self.transform(z)
        logp = -0.5 * (self.dim * _LOG_2PI + np.sum(x * x, axis=1)) + logdet
        w = np.asarray(upstream, dtype=np.float64)
        alpha, beta = self.alpha, self.beta
        d = self.dim
        dz0 = np.zeros_like(self.z0)
        dalpha = np.zeros(self.n_layers)
        dbeta = np.zeros(self.n_layers)
        ybar = -x * w[:, None]
        for k in range(self.n_layers - 1, -1, -1):
            delta, r, A = cache[k]
            a, b = alpha[k], beta[k]
            r_safe = np.where(r > 0, r, 1.0)
            yd = np.sum(ybar * delta, axis=1)
            # y = x + b * delta / A
            xbar = ybar * (1.0 + b / A)[:, None] - ((b / (A * A)) * yd / r_safe)[:, None] * delta
            gb = yd / A
            ga = -b * yd / (A * A)
            # logdet = (d-1) log(1 + b/A) + log(1 + b a / A^2)
            t1 = 1.0 + b / A
            t2 = 1.0 + b * a / (A * A)
            dl_dA = (d - 1) * (-b / (A * A)) / t1 + (-2.0 * b * a / A**3) / t2
            dl_db = (d - 1) / (A * t1) + (a / (A * A)) / t2
            dl_da = (b / (A * A)) / t2 + dl_dA
            xbar += ((w * dl_dA) / r_safe)[:, None] * delta
            dz0[k] = -np.sum(xbar - ybar, axis=0)
            dalpha[k] = np.sum(ga + w * dl_da)
            dbeta[k] = np.sum(gb + w * dl_db)
            ybar = xbar
        sa, sb = expit(self.a_raw), expit(self.b_raw)
        da_raw = (dalpha - dbeta) * sa
        db_raw = dbeta * sb
        return logp, ybar, [dz0, da_raw, db_raw]

    def to_dict(self) -> dict:
        return {"z0": pack_array(self.z0), "a_raw": pack_array(self.a_raw), "b_raw": pack_array(self.b_raw)}

    @classmethod
    def from_dict(cls, d: dict) -> "RadialFlow":
        return cls(unpack_array(d["z0"]), unpack_array(d["a_raw"]), unpack_array(d["b_raw"]))


def radial_flow_log_prob(flow: RadialFlow, z) -> float | np.ndarray:
    z_arr = np.asarray(z, dtype=np.float64)
    lp = flow.log_prob(z_arr)
    return float(lp[0]) if z_arr.ndim == 1 else lp


class RadialFlowDirichletHead:
    kind = "postnet"

    def __init__(self, flows: list[RadialFlow], class_counts, beta_prior: float = 1.0):
        self.flows = list(flows)
        self.class_counts = np.asarray(class_counts, dtype=np.float64)
        self.beta_prior = float(beta_prior)
        if len(self.flows) != self.class_counts.shape[0]:
            raise ShapeError("one flow per class is required")

    @classmethod
    def init(
        cls, latent_dim: int, class_counts, rng: np.random.Generator, n_layers: int = 8, beta_prior: float = 1.0
    ) -> "RadialFlowDirichletHead":
        flows = [RadialFlow.init(latent_dim, n_layers, rng) for _ in range(len(class_counts))]
        return cls(flows, class_counts, beta_prior)

    @property
    def n_classes(self) -> int:
        return len(self.flows)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for f in self.flows:
            out += f.parameters()
        return out

    def class_log_probs(self, z: Matrix) -> Matrix:
        return np.stack([f.log_prob(z) for f in self.flows], axis=1)

    def _log_evidence(self, logq: Matrix) -> tuple[Matrix, Matrix]:
        with np.errstate(divide="ignore"):
            log_n = np.log(self.class_counts)
        raw = logq + log_n[None, :]
        clamped = raw > LOG_CLAMP
        return np.minimum(raw, LOG_CLAMP), clamped

    def alpha(self, z: Matrix) -> Matrix:
        log_ev, _ = self._log_evidence(self.class_log_probs(z))
        return self.beta_prior + np.exp(log_ev)

    def predict(self, z: Matrix) -> tuple[Matrix, np.ndarray]:
        """Expected class probabilities ``alpha / alpha_0`` and ``-max_c (alpha_c - beta_prior)``."""
        a = self.alpha(z)
        return a / a.sum(axis=1, keepdims=True), -(a - self.beta_prior).max(axis=1)

    def loss_and_grad(self, z: Matrix, y, entropy_weight: float = 0.0) -> tuple[float, Matrix, list[np.ndarray]]:
        """Mean of ``E_Dir[-log p_y] - entropy_weight * H(Dir(alpha))``."""
        y = np.asarray(y, dtype=np.int64)
        z = as_matrix(z, "z")
        B, K = z.shape[0], self.n_classes
        logq = self.class_log_probs(z)
        log_ev, clamped = self._log_evidence(logq)
        evidence = np.exp(log_ev)
        a = self.beta_prior + evidence
        a0 = a.sum(axis=1)
        rows = np.arange(B)
        uce = digamma(a0) - digamma(a[rows, y])
        loss = float(np.mean(uce))
        da = np.repeat(polygamma(1, a0)[:, None], K, axis=1)
        da[rows, y] -= polygamma(1, a[rows, y])
        if entropy_weight:
            loss -= entropy_weight * float(np.mean(dirichlet_entropy(a)))
            da -= entropy_weight * dirichlet_entropy_grad(a)
        da /= B
        dlogq = np.where(clamped, 0.0, da * evidence)
        dz = np.zeros_like(z)
        grads = []
        for c, flow in enumerate(self.flows):
            _, dz_c, g = flow.log_prob_and_backward(z, dlogq[:, c])
            dz += dz_c
            grads += g
        return loss, dz, grads

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "flows": [f.to_dict() for f in self.flows],
            "class_counts": pack_array(self.class_counts),
            "beta_prior": self.beta_prior,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RadialFlowDirichletHead":
        return cls([RadialFlow.from_dict(f) for f in d["flows"]], unpack_array(d["class_counts"]), d["beta_prior"])


def postnet_alpha(head: RadialFlowDirichletHead, z: Matrix) -> Matrix:
    return head.alpha(z)
