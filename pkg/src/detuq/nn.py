"""Multilayer perceptron with hand-written backpropagation.

Weights are stored as ``(in, out)`` matrices so a layer computes
``x @ W + b``. Dropout is applied to a layer's output after its activation
and uses inverted scaling. Spectral normalization keeps the warm-started
power-iteration vectors ``(u, v)`` on the layer and defines
``sigma = u^T W v``; gradients flow through ``sigma`` with ``u, v`` held fixed.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DivergenceError, ShapeError
from .tensor import Matrix, Vector, as_matrix, make_rng, pack_array, spectral_norm_power_iter, unpack_array

MODES = ("train", "eval", "mc_sample")
ACTIVATIONS = ("relu", "linear")
CHECKPOINT_FORMAT = "detuq-checkpoint"
CHECKPOINT_VERSION = 1


@dataclass
class SpectralState:
    c: float
    u: Vector  # left singular vector estimate, length W.shape[0]
    v: Vector  # right singular vector estimate, length W.shape[1]

    def __post_init__(self):
        if not self.c > 0:
            raise ValueError(f"spectral-norm coefficient must be > 0, got {self.c}")


@dataclass
class DenseLayer:
    W: Matrix
    b: Vector
    activation: str = "relu"
    dropout_rate: float = 0.0
    sn: SpectralState | None = None

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {self.dropout_rate}")
        if self.b.shape != (self.W.shape[1],):
            raise ShapeError(f"bias shape {self.b.shape} does not match W {self.W.shape}")

    @property
    def in_dim(self) -> int:
        return self.W.shape[0]

    @property
    def out_dim(self) -> int:
        return self.W.shape[1]

    def sigma(self) -> float:
        if self.sn is None:
            return float("nan")
        return float(self.sn.u @ self.W @ self.sn.v)

    def power_iteration(self, iters: int = 1) -> float:
        if self.sn is None:
            raise ValueError("layer has no spectral-norm state")
        sigma, u, v = spectral_norm_power_iter(self.W, self.sn.u, iters)
        if sigma > 0:
            self.sn.u, self.sn.v = u, v
        return sigma

    def effective(self) -> tuple[Matrix, float, float]:
        """Return ``(W_eff, scale, sigma)`` with ``W_eff = scale * W``."""
        if self.sn is None:
            return self.W, 1.0, float("nan")
        sigma = self.sigma()
        if sigma <= 0:
            return self.W, 1.0, sigma
        scale = min(1.0, self.sn.c / sigma)
        return (self.W * scale if scale < 1.0 else self.W), scale, sigma


def apply_spectral_norm(layer: DenseLayer, sigma: float) -> Matrix:
    """Soft spectral normalization ``W * min(1, c / sigma)``.

    A non-positive ``sigma`` leaves the weight untouched and emits a warning.
    """
    if layer.sn is None:
        raise ValueError("layer has no spectral-norm state")
    if sigma <= 0:
        warnings.warn(f"non-positive spectral norm estimate {sigma}; weight left unnormalized")
        return layer.W
    scale = layer.sn.c / sigma
    return layer.W * scale if scale < 1.0 else layer.W


@dataclass
class ForwardTrace:
    x: Matrix
    pre: list[Matrix]
    post: list[Matrix]
    masks: list[Matrix | None]
    weights: list[Matrix]
    scales: list[float]
    sigmas: list[float]

    @property
    def features(self) -> Matrix:
        return self.post[-1]

    logits = features


@dataclass
class GradientSet:
    dW: list[Matrix]
    db: list[Vector]
    dx: Matrix | None = None

    def flat(self) -> list[np.ndarray]:
        out = []
        for dw, db in zip(self.dW, self.db):
            out += [dw, db]
        return out

    def __add__(self, other: "GradientSet") -> "GradientSet":
        dx = None
        if self.dx is not None and other.dx is not None:
            dx = self.dx + other.dx
        return GradientSet(
            [a + b for a, b in zip(self.dW, other.dW)],
            [a + b for a, b in zip(self.db, other.db)],
            dx,
        )


class MlpModel:
    """Stack of dense layers; the output of the last layer is the feature vector z."""

    def __init__(self, layers: Sequence[DenseLayer]):
        layers = list(layers)
        if not layers:
            raise ValueError("model needs at least one layer")
        for i in range(len(layers) - 1):
            if layers[i].out_dim != layers[i + 1].in_dim:
                raise ShapeError(
                    f"layer {i} outputs {layers[i].out_dim} but layer {i + 1} expects {layers[i + 1].in_dim}"
                )
        self.layers = layers

    @classmethod
    def build(
        cls,
        dims: Sequence[int],
        rng: np.random.Generator,
        activations: Sequence[str] | str = "relu",
        dropout_rate: float = 0.0,
        sn_coefficient: float | None = None,
    ) -> "MlpModel":
        """He-uniform initialised MLP with layer sizes ``dims``."""
        n = len(dims) - 1
        if isinstance(activations, str):
            activations = [activations] * n
        layers = []
        for i in range(n):
            fan_in, fan_out = dims[i], dims[i + 1]
            limit = math.sqrt(6.0 / fan_in)
            W = rng.uniform(-limit, limit, size=(fan_in, fan_out))
            sn = None
            if sn_coefficient is not None:
                u = rng.standard_normal(fan_in)
                sn = SpectralState(float(sn_coefficient), u / np.linalg.norm(u), np.zeros(fan_out))
            layer = DenseLayer(W, np.zeros(fan_out), activations[i], dropout_rate, sn)
            if sn is not None:
                layer.power_iteration(1)
            layers.append(layer)
        return cls(layers)

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def feature_dim(self) -> int:
        return self.layers[-1].out_dim

    @property
    def uses_spectral_norm(self) -> bool:
        return any(layer.sn is not None for layer in self.layers)

    @property
    def has_dropout(self) -> bool:
        return any(layer.dropout_rate > 0 for layer in self.layers)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out += [layer.W, layer.b]
        return out

    def power_iteration_step(self, iters: int = 1) -> None:
        for layer in self.layers:
            if layer.sn is not None:
                layer.power_iteration(iters)

    def refresh_spectral_norm(self, iters: int = 100, tol: float = 1e-13, max_iters: int = 20000) -> None:
        """Cold-evaluation refresh: at least ``iters`` rounds, continuing until sigma settles."""
        for layer in self.layers:
            if layer.sn is None:
                continue
            prev = layer.power_iteration(iters)
            done = iters
            while done < max_iters:
                cur = layer.power_iteration(10)
                done += 10
                if abs(cur - prev) <= tol * max(abs(cur), 1e-300):
                    break
                prev = cur

    def forward(self, x: Matrix, mode: str = "eval", rng: np.random.Generator | None = None) -> ForwardTrace:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}")
        x = as_matrix(x, "x")
        if x.shape[1] != self.in_dim:
            raise ShapeError(f"input has {x.shape[1]} columns, model expects {self.in_dim}")
        stochastic = mode != "eval"
        if stochastic and self.has_dropout and rng is None:
            raise ValueError(f"mode {mode!r} with dropout needs an rng")
        pre, post, masks, weights, scales, sigmas = [], [], [], [], [], []
        h = x
        for layer in self.layers:
            W, scale, sigma = layer.effective()
            a = h @ W + layer.b
            out = np.maximum(a, 0.0) if layer.activation == "relu" else a
            mask = None
            if stochastic and layer.dropout_rate > 0:
                keep = 1.0 - layer.dropout_rate
                mask = (rng.random(out.shape) < keep) / keep
                out = out * mask
            pre.append(a)
            post.append(out)
            masks.append(mask)
            weights.append(W)
            scales.append(scale)
            sigmas.append(sigma)
            h = out
        return ForwardTrace(x, pre, post, masks, weights, scales, sigmas)

    def local_derivatives(self, trace: ForwardTrace) -> list[Matrix]:
        """Per-layer elementwise d(out)/d(pre): activation slope times dropout mask."""
        out = []
        for layer, a, mask in zip(self.layers, trace.pre, trace.masks):
            d = (a > 0).astype(np.float64) if layer.activation == "relu" else np.ones_like(a)
            if mask is not None:
                d = d * mask
            out.append(d)
        return out

    def backward_effective(
        self, trace: ForwardTrace, grad: Matrix
    ) -> tuple[list[Matrix], list[Vector], Matrix]:
        """Backpropagate ``grad`` (dL/dz); weight gradients are w.r.t. the effective weights."""
        g = as_matrix(grad, "grad")
        if g.shape != trace.features.shape:
            raise ShapeError(f"gradient shape {g.shape} does not match features {trace.features.shape}")
        derivs = self.local_derivatives(trace)
        n = len(self.layers)
        dW: list[Matrix] = [None] * n  # type: ignore[list-item]
        db: list[Vector] = [None] * n  # type: ignore[list-item]
        for i in range(n - 1, -1, -1):
            g = g * derivs[i]
            h_prev = trace.x if i == 0 else trace.post[i - 1]
            dW[i] = h_prev.T @ g
            db[i] = g.sum(axis=0)
            g = g @ trace.weights[i].T
        return dW, db, g

    def weight_gradient(self, i: int, dW_eff: Matrix, trace: ForwardTrace) -> Matrix:
        """Map a gradient w.r.t. ``W_eff`` of layer ``i`` to the raw weight."""
        layer = self.layers[i]
        scale = trace.scales[i]
        if layer.sn is None or scale >= 1.0:
            return dW_eff
        sigma = trace.sigmas[i]
        inner = float(np.sum(dW_eff * layer.W))
        return scale * dW_eff - (scale / sigma) * inner * np.outer(layer.sn.u, layer.sn.v)

    def backward(
        self, trace: ForwardTrace, grad: Matrix, extra_dW_eff: list[Matrix] | None = None
    ) -> GradientSet:
        dW_eff, db, dx = self.backward_effective(trace, grad)
        if extra_dW_eff is not None:
            dW_eff = [a + b for a, b in zip(dW_eff, extra_dW_eff)]
        dW = [self.weight_gradient(i, g, trace) for i, g in enumerate(dW_eff)]
        return GradientSet(dW, db, dx)

    def lipschitz_upper_bound(self) -> float:
        """Product of per-layer spectral norms of the effective weights (exact SVD)."""
        total = 1.0
        for layer in self.layers:
            W, _, _ = layer.effective()
            total *= float(np.linalg.norm(W, 2))
        return total

    def to_dict(self) -> dict:
        layers = []
        for layer in self.layers:
            d = {
                "activation": layer.activation,
                "dropout_rate": layer.dropout_rate,
                "W": pack_array(layer.W),
                "b": pack_array(layer.b),
            }
            if layer.sn is not None:
                d["sn"] = {"c": layer.sn.c, "u": pack_array(layer.sn.u), "v": pack_array(layer.sn.v)}
            layers.append(d)
        return {"layers": layers}

    @classmethod
    def from_dict(cls, d: dict) -> "MlpModel":
        layers = []
        for ld in d["layers"]:
            sn = None
            if "sn" in ld:
                sn = SpectralState(float(ld["sn"]["c"]), unpack_array(ld["sn"]["u"]), unpack_array(ld["sn"]["v"]))
            W = unpack_array(ld["W"])
            layers.append(DenseLayer(W, unpack_array(ld["b"]), ld["activation"], float(ld["dropout_rate"]), sn))
        return cls(layers)

    def copy(self) -> "MlpModel":
        return MlpModel.from_dict(self.to_dict())


def forward(model: MlpModel, x: Matrix, mode: str = "eval", rng: np.random.Generator | None = None) -> ForwardTrace:
    return model.forward(x, mode, rng)


def backward(model: MlpModel, trace: ForwardTrace, loss_grad: Matrix) -> GradientSet:
    return model.backward(trace, loss_grad)


# --- optimizers --------------------------------------------------------------


@dataclass
class OptimizerConfig:
    """Optimizer preset. ``weight_decay`` adds ``wd * W`` to weight-matrix gradients."""

    name: str = "adam"
    lr: float = 0.003
    weight_decay: float = 1e-4
    momentum: float = 0.9
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    milestones: tuple[int, ...] = ()
    decay_rate: float = 1.0

    def build(self) -> "Optimizer":
        if self.name == "adam":
            return Adam(self)
        if self.name == "sgd":
            return SGD(self)
        raise ValueError(f"unknown optimizer {self.name!r}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "lr": self.lr,
            "weight_decay": self.weight_decay,
            "momentum": self.momentum,
            "betas": list(self.betas),
            "eps": self.eps,
            "milestones": list(self.milestones),
            "decay_rate": self.decay_rate,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "OptimizerConfig":
        d = dict(d)
        if "betas" in d:
            d["betas"] = tuple(d["betas"])
        if "milestones" in d:
            d["milestones"] = tuple(int(m) for m in d["milestones"])
        return cls(**d)


class Optimizer:
    def __init__(self, cfg: OptimizerConfig):
        self.cfg = cfg
        self.lr = cfg.lr
        self.state: dict[int, dict] = {}

    def set_epoch(self, epoch: int) -> None:
        passed = sum(1 for m in self.cfg.milestones if epoch >= m)
        self.lr = self.cfg.lr * self.cfg.decay_rate**passed

    def _decayed(self, p: np.ndarray, g: np.ndarray) -> np.ndarray:
        if self.cfg.weight_decay and p.ndim >= 2:
            return g + self.cfg.weight_decay * p
        return g

    def step(self, params: list[np.ndarray], grads: list[np.ndarray]) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def step(self, params, grads):
        if self.lr == 0:
            return
        mom = self.cfg.momentum
        for i, (p, g) in enumerate(zip(params, grads)):
            g = self._decayed(p, g)
            if mom:
                buf = self.state.setdefault(i, {"buf": np.zeros_like(p)})["buf"]
                buf *= mom
                buf += g
                g = buf
            p -= self.lr * g


class Adam(Optimizer):
    def step(self, params, grads):
        if self.lr == 0:
            return
        b1, b2 = self.cfg.betas
        for i, (p, g) in enumerate(zip(params, grads)):
            g = self._decayed(p, g)
            st = self.state.setdefault(i, {"m": np.zeros_like(p), "v": np.zeros_like(p), "t": 0})
            st["t"] += 1
            st["m"] = b1 * st["m"] + (1 - b1) * g
            st["v"] = b2 * st["v"] + (1 - b2) * g * g
            mhat = st["m"] / (1 - b1 ** st["t"])
            vhat = st["v"] / (1 - b2 ** st["t"])
            p -= self.lr * mhat / (np.sqrt(vhat) + self.cfg.eps)


# --- training ----------------------------------------------------------------


def iterate_minibatches(n: int, batch_size: int, rng: np.random.Generator) -> Iterable[np.ndarray]:
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start : start + batch_size]


def train_epoch(
    model: MlpModel,
    head,
    data,
    optimizer: Optimizer,
    regularizer=None,
    rng: np.random.Generator | None = None,
    batch_size: int = 128,
) -> dict:
    """One pass of minibatch training over ``data`` (anything with ``inputs``/``labels``).

    ``head`` must provide ``loss_and_grad(z, y)`` returning ``(loss, dz, grads)``
    and ``parameters()``; an ``after_step(z, y)`` hook is called when present.
    Returns mean total, task and regularization losses.
    """
    from .regularize import gradient_penalty, reconstruction_loss

    x_all = np.asarray(data.inputs, dtype=np.float64)
    y_all = np.asarray(data.labels)
    if x_all.shape[0] == 0:
        raise ValueError("training data is empty")
    rng = rng if rng is not None else make_rng(0)
    kind = getattr(regularizer, "kind", "none")
    strength = getattr(regularizer, "strength", 0.0)
    totals = {"loss": 0.0, "task_loss": 0.0, "reg_loss": 0.0}
    seen = 0
    for idx in iterate_minibatches(x_all.shape[0], batch_size, rng):
        xb, yb = x_all[idx], y_all[idx]
        if model.uses_spectral_norm:
            model.power_iteration_step(1)
        trace = model.forward(xb, "train", rng)
        z = trace.features
        if kind == "entropy":
            task, dz, head_grads = head.loss_and_grad(z, yb, entropy_weight=strength)
        else:
            task, dz, head_grads = head.loss_and_grad(z, yb)
        reg = 0.0
        extra_params: list[np.ndarray] = []
        extra_grads: list[np.ndarray] = []
        gp = None
        if kind == "grad_penalty" and strength > 0:
            reg, gp, head_gp = gradient_penalty(
                model, xb, head, strength, getattr(regularizer, "target_lipschitz", 1.0), trace=trace
            )
            head_grads = [a + b for a, b in zip(head_grads, head_gp)]
        elif kind == "reconstruction" and strength > 0:
            reg, dz_rec, dec_grads = reconstruction_loss(regularizer.decoder, z, xb, strength)
            dz = dz + dz_rec
            extra_params = regularizer.decoder.parameters()
            extra_grads = dec_grads.flat()
        loss = task + reg
        if not np.isfinite(loss):
            raise DivergenceError(f"non-finite loss {loss}")
        grads = model.backward(trace, dz)
        if gp is not None:
            grads = grads + gp
        optimizer.step(
            model.parameters() + head.parameters() + extra_params,
            grads.flat() + list(head_grads) + extra_grads,
        )
        if hasattr(head, "after_step"):
            head.after_step(z, yb)
        b = len(idx)
        totals["loss"] += loss * b
        totals["task_loss"] += task * b
        totals["reg_loss"] += reg * b
        seen += b
    return {k: v / seen for k, v in totals.items()}


# --- checkpoints -------------------------------------------------------------


def save_checkpoint(path: str | Path, payload: dict) -> None:
    """Write ``payload`` (model/head dicts) as a versioned JSON checkpoint."""
    doc = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION, **payload}
    Path(path).write_text(json.dumps(doc, sort_keys=True))


def load_checkpoint(path: str | Path) -> dict:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    return doc
