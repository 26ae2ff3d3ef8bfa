import json
import xml.etree.ElementTree as ET

import numpy as np
import pytest
from helpers import pearson_textbook

from detuq.errors import ConfigError
from detuq.harness import cli, runner
from detuq.harness.config import METHODS, ExperimentConfig, list_presets, load_config
from detuq.harness.report import REPORT_FIELDS, ReportRow, emit_report, mean_rows, read_report_csv, render_chart
from detuq.harness.runner import RunLockedError, correlate, run_experiment, run_lock, run_ood, sensitivity_sweep
from detuq.metrics import curve_from_scores, raulc, read_records

TINY_MNIST = {"name": "mnist", "limit_train": 400, "limit_test": 100}
TINY_HEAD = {
    "duq": {"centroid_dim": 8, "lengthscale": 0.5},
    "sngp": {"num_features": 32},
    "mir": {"n_components": 2, "decoder_hidden": 16},
    "postnet": {"latent_dim": 3, "flow_layers": 2},
}


def tiny(method="softmax", **kw) -> ExperimentConfig:
    base = dict(
        method=method,
        dataset=dict(TINY_MNIST),
        hidden=[16],
        epochs=1,
        batch_size=64,
        optimizer={"name": "adam", "lr": 0.003},
        shift={"kind": "rotation", "severities": [0, 90]},
        head=TINY_HEAD.get(method, {}),
        ensemble_size=2,
        mc_samples=3,
        dropout_rate=0.2 if method == "mc_dropout" else 0.0,
        sn_coefficient=3.0 if method in ("sngp", "ddu") else None,
        strengths=[0.1] if method in ("duq", "mir", "postnet") else [0.0],
    )
    base.update(kw)
    return ExperimentConfig(**base)


# --- config --------------------------------------------------------------------


def test_presets_round_trip():
    names = list_presets()
    assert {"mnist-softmax", "mnist-sngp", "mnist-mir-sweep", "blobs-ddu"} <= set(names)
    for name in names:
        cfg = load_config(name)
        assert ExperimentConfig.from_dict(json.loads(cfg.dumps())) == cfg
        assert cfg.seeds


def test_config_file_round_trip(tmp_path):
    cfg = tiny("duq", seeds=[3, 4])
    path = tmp_path / "c.json"
    path.write_text(cfg.dumps())
    assert load_config(path) == cfg


@pytest.mark.parametrize(
    "change",
    [
        {"method": "bayes"},
        {"seeds": []},
        {"strengths": [-1.0]},
        {"dataset": {"name": "cifar"}},
        {"shift": {"kind": "fog"}},
        {"optimizer": {"name": "rmsprop"}},
        {"method": "mc_dropout", "dropout_rate": 0.0},
    ],
)
def test_config_validation(change):
    with pytest.raises(ConfigError):
        tiny().replace(**change)


def test_config_rejects_unknown_keys(tmp_path):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict({"method": "softmax", "dataset": {"name": "mnist"}, "learning_rate": 1})
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(bad)
    with pytest.raises(ConfigError):
        load_config("no-such-preset")


# --- reports ---------------------------------------------------------------------


def _rows():
    return [
        ReportRow("softmax", 0.0, 0, 0, accuracy=0.9, auroc=0.8, raulc=0.5),
        ReportRow("softmax", 0.0, 1, 0, accuracy=0.7, auroc=None, raulc=0.3),
        ReportRow("softmax", 0.0, 2, "all", "diverged", note="nan loss"),
    ]


def test_report_csv_round_trip(tmp_path):
    rows = _rows() + mean_rows(_rows())
    emit_report(rows, tmp_path, formats=("csv",))
    text = (tmp_path / "report.csv").read_text()
    assert text.splitlines()[0] == ",".join(REPORT_FIELDS)
    assert read_report_csv(tmp_path / "report.csv") == rows


def test_mean_rows_exclude_failed_seeds():
    means = mean_rows(_rows())
    sev0 = next(r for r in means if r.severity == 0)
    assert sev0.seed == "mean" and sev0.accuracy == pytest.approx(0.8)
    assert sev0.auroc == 0.8
    assert sev0.note == "excluded failed seeds: 2"
    pooled = next(r for r in means if r.severity == "all")
    assert pooled.status == "failed" and pooled.accuracy is None


def test_charts_are_deterministic_valid_svg(tmp_path):
    one = [ReportRow("ddu", 0.0, "mean", 0, accuracy=0.5)]
    paths = emit_report(one, tmp_path / "a")
    svg = (tmp_path / "a" / "charts" / "accuracy.svg").read_text()
    ET.fromstring(svg)
    assert "<circle" in svg
    emit_report(one, tmp_path / "b")
    for p in paths:
        assert p.read_bytes() == (tmp_path / "b" / p.relative_to(tmp_path / "a")).read_bytes()
    with pytest.raises(ValueError):
        emit_report([], tmp_path)
    with pytest.raises(ValueError):
        render_chart({}, "x")


# --- runs ---------------------------------------------------------------------------


@pytest.mark.parametrize("method", METHODS)
def test_every_method_runs(method, tmp_path):
    res = run_experiment(tiny(method, epochs=5), tmp_path)
    assert not res.failed
    report = read_report_csv(tmp_path / "report.csv")
    assert [r.severity for r in report if r.seed == 0] == [0, 1, "all"]
    clean = report[0]
    assert clean.accuracy > 0.3
    assert (tmp_path / "charts" / "raulc.svg").exists()
    assert (tmp_path / "timings.csv").read_text().startswith("method,strength,seed,predict_clean_ms\n")
    assert all(r.runtime_ms is None for r in report)


def test_pooled_raulc_matches_record_logs(tmp_path):
    cfg = tiny("softmax", shift={"kind": "rotation", "severities": [0, 45, 90]})
    rows = run_experiment(cfg, tmp_path).rows
    rec_dir = tmp_path / "records" / "softmax" / "strength_0" / "seed_0"
    records = [r for k in range(3) for r in read_records(rec_dir / f"severity_{k}.csv")]
    u = [r.uncertainty for r in records]
    c = [r.correct for r in records]
    pooled = next(r for r in rows if r.seed == 0 and r.severity == "all")
    assert pooled.raulc == raulc(curve_from_scores(u, c))
    for k in range(3):
        sev = next(r for r in rows if r.seed == 0 and r.severity == k)
        recs = read_records(rec_dir / f"severity_{k}.csv")
        assert sev.raulc == raulc(curve_from_scores([r.uncertainty for r in recs], [r.correct for r in recs]))


def test_runs_are_byte_identical(tmp_path):
    cfg = tiny("mc_dropout", seeds=[0, 1])
    run_experiment(cfg, tmp_path / "a")
    run_experiment(cfg, tmp_path / "b")
    assert (tmp_path / "a" / "report.csv").read_bytes() == (tmp_path / "b" / "report.csv").read_bytes()
    rec = "records/mc_dropout/strength_0/seed_1/severity_1.csv"
    assert (tmp_path / "a" / rec).read_bytes() == (tmp_path / "b" / rec).read_bytes()


def test_parallel_jobs_match_serial(tmp_path):
    cfg = tiny("softmax", seeds=[0, 1])
    run_experiment(cfg, tmp_path / "serial")
    run_experiment(cfg, tmp_path / "parallel", jobs=2)
    assert (tmp_path / "serial" / "report.csv").read_bytes() == (tmp_path / "parallel" / "report.csv").read_bytes()


def test_checkpoints_are_reused(tmp_path):
    cfg = tiny("softmax")
    run_experiment(cfg, tmp_path)
    ckpt = tmp_path / "checkpoints" / "softmax_strength_0_seed_0.json"
    assert ckpt.exists()
    first = (tmp_path / "report.csv").read_bytes()
    stamp = ckpt.stat().st_mtime_ns
    run_experiment(cfg, tmp_path)
    assert ckpt.stat().st_mtime_ns == stamp
    assert (tmp_path / "report.csv").read_bytes() == first


def test_runtime_column_is_opt_in(tmp_path):
    rows = run_experiment(tiny("softmax", record_runtime=True), tmp_path).rows
    assert all(r.runtime_ms is not None and r.runtime_ms > 0 for r in rows)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_becomes_failed_row(tmp_path):
    cfg = tiny("softmax", seeds=[0, 1], optimizer={"name": "sgd", "lr": 1e30})
    res = run_experiment(cfg, tmp_path)
    assert {r.seed for r in res.failed} == {0, 1}
    assert all(r.status == "diverged" for r in res.failed)
    assert (tmp_path / "report.csv").exists()


def test_lock_prevents_concurrent_runs(tmp_path):
    with run_lock(tmp_path):
        with pytest.raises(RunLockedError):
            run_experiment(tiny(), tmp_path)
    assert not (tmp_path / ".lock").exists()


def test_ood_rows_and_errors(tmp_path):
    cfg = tiny("ddu", ood=dict(TINY_MNIST))
    rows = run_ood(cfg, tmp_path)
    assert abs(rows[0]["auroc"] - 0.5) < 1e-12
    assert (tmp_path / "ood.csv").read_text().startswith("method,strength,seed,status,auroc,aupr,note\n")
    with pytest.raises(ConfigError):
        run_ood(tiny("ddu"))
    with pytest.raises(ConfigError):
        run_ood(tiny("ddu", ood={"name": "blobs"}))


# --- sweeps ----------------------------------------------------------------------------


def test_correlate_monotone_series():
    p, sp = correlate([1, 2, 3, 4], [0.1, 0.2, 0.25, 0.9])
    assert p == pytest.approx(pearson_textbook([1, 2, 3, 4], [0.1, 0.2, 0.25, 0.9]), abs=1e-12)
    assert sp == 1.0
    assert correlate([1, 2, 3], [0.5, None, None]) == (None, None)
    assert correlate([1, 2, 3], [0.5, 0.5, 0.5]) == (None, None)


def test_sweep_reports_monotone_series(tmp_path, monkeypatch):
    strengths = [0.1, 1.0, 10.0]

    def fake_run(cfg, out_dir=None, jobs=1):
        rows = [ReportRow("mir", s, "mean", "all", raulc=0.1 * (i + 1)) for i, s in enumerate(strengths)]
        return runner.RunResult(rows, out_dir)

    monkeypatch.setattr(runner, "run_experiment", fake_run)
    res = sensitivity_sweep(tiny("mir", strengths=strengths), tmp_path)
    assert res.spearman == 1.0 and res.pearson > 0.9
    assert (tmp_path / "sweep.csv").read_text().splitlines()[-1] == "spearman,1.0"
    with pytest.raises(ConfigError):
        sensitivity_sweep(tiny("mir", strengths=[0.1, 1.0]))


# --- CLI -------------------------------------------------------------------------------


def _write_cfg(tmp_path, cfg):
    path = tmp_path / "cfg.json"
    path.write_text(cfg.dumps())
    return str(path)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_cli_exit_codes(tmp_path, capsys):
    good = _write_cfg(tmp_path, tiny())
    assert cli.main(["eval-shift", "--config", good, "--out", str(tmp_path / "run")]) == 0
    assert cli.main(["report", "--out", str(tmp_path / "run")]) == 0
    assert cli.main(["presets"]) == 0
    assert "mnist-softmax" in capsys.readouterr().out
    assert cli.main(["eval-shift", "--config", "missing-preset", "--out", str(tmp_path)]) == 2
    assert cli.main(["report", "--out", str(tmp_path / "nothing")]) == 2
    assert cli.main(["sweep", "--config", good, "--out", str(tmp_path / "s")]) == 2
    diverging = tiny(optimizer={"name": "sgd", "lr": 1e30})
    bad = tmp_path / "div"
    bad.mkdir()
    assert cli.main(["train", "--config", _write_cfg(bad, diverging), "--out", str(bad / "run")]) == 3
    assert cli.main(["eval-shift", "--config", _write_cfg(bad, diverging), "--out", str(bad / "run2")]) == 3


def test_cli_seed_override_and_train(tmp_path):
    cfg = _write_cfg(tmp_path, tiny())
    out = tmp_path / "run"
    assert cli.main(["train", "--config", cfg, "--seed", "5", "--seed", "6", "--out", str(out)]) == 0
    assert sorted(p.name for p in (out / "checkpoints").iterdir()) == [
        "softmax_strength_0_seed_5.json",
        "softmax_strength_0_seed_6.json",
    ]
    assert json.loads((out / "config.json").read_text())["seeds"] == [5, 6]


def test_cli_ood(tmp_path, capsys):
    cfg = _write_cfg(tmp_path, tiny("ddu", ood=dict(TINY_MNIST)))
    assert cli.main(["eval-ood", "--config", cfg, "--out", str(tmp_path / "o")]) == 0
    row = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert row["status"] == "ok" and abs(row["auroc"] - 0.5) < 0.02
    assert cli.main(["eval-ood", "--config", _write_cfg(tmp_path, tiny()), "--out", str(tmp_path / "p")]) == 2


def test_cli_lock_is_config_error(tmp_path):
    cfg = _write_cfg(tmp_path, tiny())
    out = tmp_path / "run"
    with run_lock(out):
        assert cli.main(["eval-shift", "--config", cfg, "--out", str(out)]) == 2


def test_predictions_are_finite_for_all_methods(tmp_path):
    from detuq.harness.methods import load_dataset, train_predictor

    data = load_dataset(TINY_MNIST, "train")
    x = load_dataset(TINY_MNIST, "test").inputs[:10]
    for method in METHODS:
        cfg = tiny(method)
        pred = train_predictor(cfg, cfg.strengths[0], 0, data)
        probs, unc = pred.predict(x, np.random.default_rng(0))
        np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-9)
        assert np.all(np.isfinite(unc))
        again = type(pred).from_dict(json.loads(json.dumps(pred.to_dict())))
        p2, u2 = again.predict(x, np.random.default_rng(0))
        np.testing.assert_array_equal(u2, unc)
