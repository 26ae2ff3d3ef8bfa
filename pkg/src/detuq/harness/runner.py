"""Experiment orchestration: train, evaluate shifts and OOD pairs, sweep strengths."""

from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..data import ShiftSchedule
from ..errors import ConfigError, DivergenceError
from ..metrics import EvalRecord, aupr, auroc, brier, ece, pearson, record_metrics, spearman, write_records
from ..nn import load_checkpoint, save_checkpoint
from .config import ExperimentConfig
from .methods import STREAM_PREDICT, STREAM_SHIFT, Predictor, load_dataset, stream, train_predictor
from .report import ReportRow, emit_report, mean_rows

log = logging.getLogger(__name__)

TRAINING_KEYS = (
    "method", "dataset", "hidden", "dropout_rate", "sn_coefficient", "optimizer",
    "epochs", "batch_size", "head", "ensemble_size", "mc_samples",
)


class RunLockedError(RuntimeError):
    """Another process holds the run directory."""


@contextmanager
def run_lock(out_dir: str | Path):
    """Exclusive ``.lock`` file in ``out_dir`` for the duration of a run."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / ".lock"
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RunLockedError(f"{out_dir} is locked by another run (remove {path} if stale)") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        path.unlink(missing_ok=True)


def training_key(cfg: ExperimentConfig, strength: float, seed: int) -> str:
    d = cfg.to_dict()
    doc = {k: d[k] for k in TRAINING_KEYS}
    doc["strength"] = float(strength)
    doc["seed"] = int(seed)
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()


def job_tag(cfg: ExperimentConfig, strength: float, seed: int) -> str:
    return f"{cfg.method}/strength_{strength:g}/seed_{seed}"


def checkpoint_path(out_dir: Path, cfg: ExperimentConfig, strength: float, seed: int) -> Path:
    return out_dir / "checkpoints" / f"{cfg.method}_strength_{strength:g}_seed_{seed}.json"


def obtain_predictor(cfg: ExperimentConfig, strength: float, seed: int, out_dir: Path | None) -> Predictor:
    """Load a matching checkpoint from ``out_dir`` or train and save one."""
    key = training_key(cfg, strength, seed)
    path = checkpoint_path(out_dir, cfg, strength, seed) if out_dir is not None else None
    if path is not None and path.exists():
        doc = load_checkpoint(path)
        if doc.get("training_key") == key:
            return Predictor.from_dict(doc["predictor"])
    train = load_dataset(cfg.dataset, "train")
    t0 = time.perf_counter()
    pred = train_predictor(cfg, strength, seed, train)
    log.info("trained %s in %.1fs", job_tag(cfg, strength, seed), time.perf_counter() - t0)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_checkpoint(path, {"training_key": key, "predictor": pred.to_dict()})
    return pred


# --- shift evaluation --------------------------------------------------------


def evaluate_shift(
    cfg: ExperimentConfig, pred: Predictor, seed: int, strength: float, out_dir: Path | None
) -> tuple[list[ReportRow], list[EvalRecord], float]:
    """Per-severity and pooled rows; records are written under ``out_dir/records``."""
    test = load_dataset(cfg.dataset, "test")
    schedule = ShiftSchedule(cfg.shift["kind"], tuple(cfg.severities))
    rows, pooled, pooled_probs, pooled_labels = [], [], [], []
    runtime_ms = float("nan")
    rec_dir = out_dir / "records" / job_tag(cfg, strength, seed) if out_dir is not None else None
    if rec_dir is not None:
        rec_dir.mkdir(parents=True, exist_ok=True)
    for level in range(len(schedule)):
        data = schedule.apply(test, level, stream(seed, STREAM_SHIFT, level))
        t0 = time.perf_counter()
        probs, unc = pred.predict(data.inputs, stream(seed, STREAM_PREDICT, level))
        if level == 0:
            runtime_ms = (time.perf_counter() - t0) * 1e3
        correct = probs.argmax(axis=1) == data.labels
        conf = probs.max(axis=1)
        records = [
            EvalRecord(float(u), bool(c), True, level, float(p)) for u, c, p in zip(unc, correct, conf)
        ]
        if rec_dir is not None:
            write_records(rec_dir / f"severity_{level}.csv", records)
        rows.append(_shift_row(cfg, strength, seed, level, records, probs, data.labels))
        pooled += records
        pooled_probs.append(probs)
        pooled_labels.append(data.labels)
    rows.append(
        _shift_row(cfg, strength, seed, "all", pooled, np.vstack(pooled_probs), np.concatenate(pooled_labels))
    )
    if cfg.record_runtime:
        for r in rows:
            r.runtime_ms = runtime_ms
    return rows, pooled, runtime_ms


def _shift_row(cfg, strength, seed, severity, records, probs, labels) -> ReportRow:
    m = record_metrics(records, cfg.ece_bins)
    return ReportRow(
        cfg.method, float(strength), seed, severity, "ok",
        accuracy=m["accuracy"],
        mean_uncertainty=float(np.mean([r.uncertainty for r in records])),
        auroc=m["auroc"], ece=m["ece"], brier=brier(probs, labels), aulc=m["aulc"], raulc=m["raulc"],
    )


def _failed_row(cfg, strength, seed, severity, exc) -> ReportRow:
    return ReportRow(cfg.method, float(strength), seed, severity, "diverged", note=str(exc).replace("\n", " "))


def _shift_job(args) -> tuple[list[ReportRow], float | None]:
    cfg_dict, strength, seed, out_dir = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    out = Path(out_dir) if out_dir is not None else None
    try:
        pred = obtain_predictor(cfg, strength, seed, out)
        rows, _, runtime = evaluate_shift(cfg, pred, seed, strength, out)
        return rows, runtime
    except DivergenceError as exc:
        log.warning("%s diverged: %s", job_tag(cfg, strength, seed), exc)
        return [_failed_row(cfg, strength, seed, "all", exc)], None


def _train_job(args) -> str | None:
    cfg_dict, strength, seed, out_dir = args
    cfg = ExperimentConfig.from_dict(cfg_dict)
    try:
        obtain_predictor(cfg, strength, seed, Path(out_dir))
        return None
    except DivergenceError as exc:
        return f"{job_tag(cfg, strength, seed)}: {exc}"


def _fan_out(fn, jobs: list, n_workers: int) -> list:
    if n_workers <= 1 or len(jobs) <= 1:
        return [fn(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(n_workers, len(jobs))) as pool:
        return list(pool.map(fn, jobs))


def _jobs(cfg: ExperimentConfig, out_dir) -> list:
    d = cfg.to_dict()
    out = str(out_dir) if out_dir is not None else None
    return [(d, float(s), int(seed), out) for s in cfg.strengths for seed in cfg.seeds]


@dataclass
class RunResult:
    rows: list[ReportRow]
    out_dir: Path | None

    @property
    def failed(self) -> list[ReportRow]:
        return [r for r in self.rows if r.status != "ok" and r.seed != "mean"]


def train_only(cfg: ExperimentConfig, out_dir: str | Path, jobs: int = 1) -> list[str]:
    """Train every (strength, seed) job and store checkpoints; returns divergence messages."""
    out = Path(out_dir)
    with run_lock(out):
        (out / "config.json").write_text(cfg.dumps())
        return [m for m in _fan_out(_train_job, _jobs(cfg, out), jobs) if m]


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None, jobs: int = 1) -> RunResult:
    """Train and evaluate every (strength, seed) over the shift schedule.

    With ``out_dir`` the run writes ``report.csv``, per-severity record logs,
    checkpoints, ``timings.csv`` and charts. Divergent jobs become failed rows.
    """
    out = Path(out_dir) if out_dir is not None else None

    def body() -> RunResult:
        results = _fan_out(_shift_job, _jobs(cfg, out), jobs)
        rows = [r for job_rows, _ in results for r in job_rows]
        rows += mean_rows(rows)
        if out is not None:
            (out / "config.json").write_text(cfg.dumps())
            emit_report(rows, out)
            with open(out / "timings.csv", "w") as fh:
                fh.write("method,strength,seed,predict_clean_ms\n")
                for (_, s, seed, _), (_, rt) in zip(_jobs(cfg, out), results):
                    fh.write(f"{cfg.method},{s:g},{seed},{'' if rt is None else f'{rt:.3f}'}\n")
        return RunResult(rows, out)

    if out is None:
        return body()
    with run_lock(out):
        return body()


# --- OOD ---------------------------------------------------------------------

OOD_FIELDS = ("method", "strength", "seed", "status", "auroc", "aupr", "note")


def run_ood(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> list[dict]:
    """AUROC/AUPR of uncertainty separating the OOD test set (positive) from the in-distribution one."""
    if cfg.ood is None:
        raise ConfigError("config has no 'ood' dataset")
    in_test = load_dataset(cfg.dataset, "test")
    ood_test = load_dataset(cfg.ood, "test")
    if in_test.dim != ood_test.dim:
        raise ConfigError(f"in-distribution inputs have {in_test.dim} dims, OOD inputs {ood_test.dim}")
    out = Path(out_dir) if out_dir is not None else None
    rows = []

    def body():
        for strength in cfg.strengths:
            for seed in cfg.seeds:
                row = {"method": cfg.method, "strength": float(strength), "seed": seed, "status": "ok", "note": ""}
                try:
                    pred = obtain_predictor(cfg, strength, seed, out)
                    _, u_in = pred.predict(in_test.inputs, stream(seed, STREAM_PREDICT, 0))
                    _, u_out = pred.predict(ood_test.inputs, stream(seed, STREAM_PREDICT, 1))
                    row["auroc"] = auroc(u_out, u_in)
                    row["aupr"] = aupr(u_out, u_in)
                except DivergenceError as exc:
                    row.update(status="diverged", auroc=None, aupr=None, note=str(exc))
                rows.append(row)
        if out is not None:
            with open(out / "ood.csv", "w") as fh:
                fh.write(",".join(OOD_FIELDS) + "\n")
                for r in rows:
                    fh.write(",".join("" if r[k] is None else repr(r[k]) if isinstance(r[k], float) else str(r[k])
                                      for k in OOD_FIELDS) + "\n")

    if out is None:
        body()
    else:
        with run_lock(out):
            body()
    return rows


# --- sensitivity -------------------------------------------------------------


@dataclass
class SweepResult:
    strengths: list[float]
    raulc: list[float | None]
    pearson: float | None
    spearman: float | None
    run: RunResult


def correlate(strengths, values) -> tuple[float | None, float | None]:
    """Pearson and Spearman correlation over the strengths with a defined value."""
    pairs = [(s, v) for s, v in zip(strengths, values) if v is not None]
    if len(pairs) < 2:
        return None, None
    xs, ys = zip(*pairs)
    out = []
    for fn in (pearson, spearman):
        try:
            out.append(fn(xs, ys))
        except ValueError:
            out.append(None)
    return out[0], out[1]


def sensitivity_sweep(cfg: ExperimentConfig, out_dir: str | Path | None = None, jobs: int = 1) -> SweepResult:
    """Pooled rAULC per strength (mean over seeds) and its correlation with the strength."""
    if len(cfg.strengths) < 3:
        raise ConfigError("a sensitivity sweep needs at least three strengths")
    run = run_experiment(cfg, out_dir, jobs)
    per = []
    for s in cfg.strengths:
        mean = [r for r in run.rows if r.seed == "mean" and r.severity == "all" and r.strength == float(s)]
        per.append(mean[0].raulc if mean else None)
    p, sp = correlate(cfg.strengths, per)
    if out_dir is not None:
        with open(Path(out_dir) / "sweep.csv", "w") as fh:
            fh.write("strength,raulc\n")
            for s, v in zip(cfg.strengths, per):
                fh.write(f"{float(s)!r},{'' if v is None else repr(v)}\n")
            fh.write(f"pearson,{'' if p is None else repr(p)}\n")
            fh.write(f"spearman,{'' if sp is None else repr(sp)}\n")
    return SweepResult([float(s) for s in cfg.strengths], per, p, sp, run)
