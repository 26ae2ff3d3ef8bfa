"""Training and prediction for every supported method."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..baselines import ensemble_predict, mc_dropout_predict, mutual_information
from ..data import Dataset, load_mnist, make_blobs, make_two_moons, prepare_mnist_subset
from ..errors import ConfigError, DivergenceError
from ..heads import (
    ClassGmm,
    LinearSoftmaxHead,
    RadialFlowDirichletHead,
    RbfCentroidHead,
    RffGpLaplaceHead,
    gmm_fit,
    head_from_dict,
)
from ..heads.softmax import entropy
from ..nn import MlpModel, iterate_minibatches, train_epoch
from ..regularize import RegularizerConfig
from .config import STRENGTH_KIND, ExperimentConfig

# independent random streams derived from the run seed
STREAM_DATA, STREAM_TRAIN, STREAM_SHIFT, STREAM_PREDICT = 0, 1, 2, 3


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *key])


# --- datasets ----------------------------------------------------------------


def load_dataset(spec: dict, split: str) -> Dataset:
    """Materialise a dataset spec such as ``{"name": "mnist"}`` for ``split``."""
    name = spec.get("name")
    if name == "mnist":
        data = load_mnist(prepare_mnist_subset(spec.get("root")), split)
    elif name == "idx":
        try:
            data = _load_idx_split(spec, split)
        except KeyError as exc:
            raise ConfigError(f"idx dataset needs {exc.args[0]!r}") from exc
    elif name == "blobs":
        centers = np.asarray(spec.get("centers", [[0.0, 0.0], [3.0, 3.0], [-3.0, 3.0]]), dtype=np.float64)
        n = int(spec.get("n_train" if split == "train" else "n_test", 600 if split == "train" else 300))
        rng = stream(int(spec.get("seed", 0)), STREAM_DATA, 0 if split == "train" else 1)
        data = make_blobs(n, centers, float(spec.get("sigma", 1.0)), rng, split)
    elif name == "two_moons":
        n = int(spec.get("n_train" if split == "train" else "n_test", 600 if split == "train" else 300))
        rng = stream(int(spec.get("seed", 0)), STREAM_DATA, 0 if split == "train" else 1)
        data = make_two_moons(n, float(spec.get("noise", 0.1)), rng, split)
    else:
        raise ConfigError(f"unknown dataset {name!r}")
    limit = spec.get(f"limit_{split}")
    if limit is None or int(limit) >= len(data):
        return data
    # evenly strided rows keep class balance in label-sorted files
    idx = np.arange(int(limit)) * len(data) // int(limit)
    return data.subset(idx)


def _load_idx_split(spec: dict, split: str) -> Dataset:
    from ..data import load_idx

    return load_idx(Path(spec[f"{split}_images"]), Path(spec[f"{split}_labels"]), split, int(spec.get("n_classes", 10)))


# --- fitted predictors -------------------------------------------------------


@dataclass
class Predictor:
    """A trained method: encoder/head pairs plus an optional feature density."""

    method: str
    members: list = field(default_factory=list)  # [(MlpModel, head)]
    density: ClassGmm | None = None
    mc_samples: int = 10

    def features(self, x: np.ndarray) -> np.ndarray:
        return self.members[0][0].forward(x, "eval").features

    def predict(self, x: np.ndarray, rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
        """Class probabilities and the method's epistemic uncertainty per row."""
        m = self.method
        if m == "mc_dropout":
            model, head = self.members[0]
            samples = mc_dropout_predict(model, head, x, self.mc_samples, rng or stream(0, STREAM_PREDICT))
            probs, unc = samples.mean, mutual_information(samples)[0]
        elif m == "ensemble":
            samples = ensemble_predict(self.members, x)
            probs, unc = samples.mean, mutual_information(samples)[0]
        else:
            model, head = self.members[0]
            z = model.forward(x, "eval").features
            if m == "softmax":
                probs, unc = head.predict(z)
            elif m in ("ddu", "mir"):
                probs = head.predict_proba(z)
                unc = self.density.ddu_uncertainty(z) if m == "ddu" else self.density.mir_uncertainty(z)
            elif m == "duq":
                scores, unc = head.predict(z)
                probs = _normalise(scores)
            else:  # sngp, postnet
                probs, unc = head.predict(z)
        if not (np.all(np.isfinite(probs)) and np.all(np.isfinite(unc))):
            raise DivergenceError(f"{m}: non-finite predictions")
        return probs, unc

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "mc_samples": self.mc_samples,
            "members": [{"model": mod.to_dict(), "head": head.to_dict()} for mod, head in self.members],
            "density": None if self.density is None else self.density.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Predictor":
        members = [(MlpModel.from_dict(m["model"]), head_from_dict(m["head"])) for m in d["members"]]
        density = None if d["density"] is None else ClassGmm.from_dict(d["density"])
        return cls(d["method"], members, density, int(d["mc_samples"]))


def _normalise(scores: np.ndarray) -> np.ndarray:
    total = scores.sum(axis=1, keepdims=True)
    k = scores.shape[1]
    return np.where(total > 0, scores / np.where(total > 0, total, 1.0), 1.0 / k)


# --- training ----------------------------------------------------------------


def _build_head(cfg: ExperimentConfig, feat_dim: int, data: Dataset, rng: np.random.Generator):
    h = cfg.head
    k = data.n_classes
    if cfg.method == "duq":
        return RbfCentroidHead.init(
            feat_dim, k, rng, int(h.get("centroid_dim", 64)), float(h.get("lengthscale", 0.1)), float(h.get("gamma", 0.999))
        )
    if cfg.method == "sngp":
        return RffGpLaplaceHead.init(
            feat_dim, k, rng, int(h.get("num_features", 1024)), float(h.get("lengthscale", 2.0)),
            float(h.get("mean_field_factor", 30.0)),
        )
    if cfg.method == "postnet":
        counts = np.bincount(data.labels, minlength=k)
        return RadialFlowDirichletHead.init(
            feat_dim, counts, rng, int(h.get("flow_layers", 8)), float(h.get("beta_prior", 1.0))
        )
    return LinearSoftmaxHead.init(feat_dim, k, rng)


def _build_encoder(cfg: ExperimentConfig, in_dim: int, rng: np.random.Generator) -> MlpModel:
    dims = [in_dim, *cfg.hidden]
    acts = ["relu"] * len(cfg.hidden)
    if cfg.method == "postnet":
        dims.append(int(cfg.head.get("latent_dim", 6)))
        acts.append("linear")
    return MlpModel.build(dims, rng, acts, cfg.dropout_rate, cfg.sn_coefficient)


def _regularizer(cfg: ExperimentConfig, strength: float, feat_dim: int, out_dim: int, rng) -> RegularizerConfig | None:
    kind = STRENGTH_KIND[cfg.method]
    if kind == "none" or strength == 0:
        return None
    if kind == "reconstruction":
        hidden = int(cfg.head.get("decoder_hidden", 200))
        decoder = MlpModel.build([feat_dim, hidden, out_dim], rng, ["relu", "linear"])
        return RegularizerConfig(kind, strength, decoder)
    return RegularizerConfig(kind, strength, target_lipschitz=float(cfg.head.get("target_lipschitz", 1.0)))


def train_member(cfg: ExperimentConfig, strength: float, data: Dataset, rng: np.random.Generator, log=None):
    model = _build_encoder(cfg, data.dim, rng)
    head = _build_head(cfg, model.feature_dim, data, rng)
    reg = _regularizer(cfg, strength, model.feature_dim, data.dim, rng)
    opt = cfg.optimizer_config().build()
    for epoch in range(cfg.epochs):
        opt.set_epoch(epoch)
        stats = train_epoch(model, head, data, opt, reg, rng, cfg.batch_size)
        if log is not None:
            log(epoch, stats)
    if model.uses_spectral_norm:
        model.refresh_spectral_norm()
    return model, head


def _eval_batches(model: MlpModel, x: np.ndarray, batch: int = 512):
    for start in range(0, x.shape[0], batch):
        yield model.forward(x[start : start + batch], "eval").features


def train_predictor(cfg: ExperimentConfig, strength: float, seed: int, data: Dataset, log=None) -> Predictor:
    """Train ``cfg.method`` at regularization ``strength``; raises DivergenceError on blow-up."""
    n_members = cfg.ensemble_size if cfg.method == "ensemble" else 1
    members = [train_member(cfg, strength, data, stream(seed, STREAM_TRAIN, i), log) for i in range(n_members)]
    pred = Predictor(cfg.method, members, mc_samples=cfg.mc_samples)
    model, head = members[0]
    if cfg.method == "sngp":
        head.fit_laplace(_eval_batches(model, data.inputs))
    elif cfg.method in ("ddu", "mir"):
        z = np.vstack(list(_eval_batches(model, data.inputs)))
        pca_dim = cfg.head.get("pca_dim")
        if cfg.method == "ddu":
            pred.density = gmm_fit(z, data.labels, data.n_classes, "per_class_gaussian", pca_dim=pca_dim)
        else:
            pred.density = gmm_fit(
                z, None, int(cfg.head.get("n_components", 10)), "em_k_components",
                stream(seed, STREAM_TRAIN, 10_000), pca_dim,
            )
    return pred


def confidence(probs: np.ndarray) -> np.ndarray:
    return probs.max(axis=1)


__all__ = [
    "Predictor",
    "confidence",
    "entropy",
    "iterate_minibatches",
    "load_dataset",
    "stream",
    "train_predictor",
]
