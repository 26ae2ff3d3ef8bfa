"""Experiment configuration stored as JSON."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

from ..data import DEFAULT_SEVERITIES, SHIFT_KINDS
from ..errors import ConfigError
from ..nn import OptimizerConfig

METHODS = ("softmax", "mc_dropout", "ensemble", "duq", "sngp", "ddu", "mir", "postnet")
DATASETS = ("mnist", "idx", "blobs", "two_moons")

# regularizer each method's strength axis controls
STRENGTH_KIND = {
    "softmax": "none",
    "mc_dropout": "none",
    "ensemble": "none",
    "ddu": "none",
    "sngp": "none",
    "duq": "grad_penalty",
    "mir": "reconstruction",
    "postnet": "entropy",
}


@dataclass
class ExperimentConfig:
    method: str
    dataset: dict
    name: str = "experiment"
    hidden: list[int] = field(default_factory=lambda: [100, 100, 100])
    dropout_rate: float = 0.0
    sn_coefficient: float | None = None
    optimizer: dict = field(default_factory=dict)
    epochs: int = 20
    batch_size: int = 128
    strengths: list[float] = field(default_factory=lambda: [0.0])
    head: dict = field(default_factory=dict)
    shift: dict = field(default_factory=lambda: {"kind": "rotation"})
    ood: dict | None = None
    seeds: list[int] = field(default_factory=lambda: [0])
    mc_samples: int = 10
    ensemble_size: int = 10
    ece_bins: int = 15
    record_runtime: bool = False
    out_dir: str = "runs"

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown method {self.method!r}; choose from {', '.join(METHODS)}")
        for ds in (self.dataset, self.ood):
            if ds is not None and ds.get("name") not in DATASETS:
                raise ConfigError(f"unknown dataset {ds.get('name')!r}")
        if not self.seeds:
            raise ConfigError("seed list is empty")
        if not self.strengths:
            raise ConfigError("strength list is empty")
        if any(s < 0 for s in self.strengths):
            raise ConfigError("strengths must be >= 0")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("epochs must be >= 0 and batch_size >= 1")
        if self.mc_samples < 1 or self.ensemble_size < 1:
            raise ConfigError("mc_samples and ensemble_size must be >= 1")
        if self.method == "mc_dropout" and not self.dropout_rate > 0:
            raise ConfigError("mc_dropout needs dropout_rate > 0")
        kind = self.shift.get("kind")
        if kind not in SHIFT_KINDS:
            raise ConfigError(f"unknown shift kind {kind!r}")
        try:
            self.optimizer_config()
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad optimizer settings: {exc}") from exc

    @property
    def severities(self) -> list[float]:
        return list(self.shift.get("severities", DEFAULT_SEVERITIES[self.shift["kind"]]))

    def optimizer_config(self) -> OptimizerConfig:
        cfg = OptimizerConfig.from_dict(self.optimizer)
        cfg.build()
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown config keys: {', '.join(sorted(extra))}")
        if "method" not in d or "dataset" not in d:
            raise ConfigError("config needs 'method' and 'dataset'")
        return cls(**d)

    def replace(self, **changes) -> "ExperimentConfig":
        d = self.to_dict()
        d.update(changes)
        return ExperimentConfig.from_dict(d)


def load_config(path: str | Path) -> ExperimentConfig:
    """Read a config file, or a bundled preset when ``path`` names one (e.g. ``mnist-softmax``)."""
    p = Path(path)
    if p.exists():
        text = p.read_text()
    else:
        name = p.name if p.suffix == ".json" else p.name + ".json"
        preset = resources.files("detuq.presets").joinpath(name)
        if not preset.is_file():
            raise ConfigError(f"no config file or preset named {path!r}")
        text = preset.read_text()
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be an object")
    try:
        return ExperimentConfig.from_dict(doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def list_presets() -> list[str]:
    return sorted(p.name[:-5] for p in resources.files("detuq.presets").iterdir() if p.name.endswith(".json"))
