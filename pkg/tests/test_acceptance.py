"""Acceptance criteria 1-10; each test prints one PASS/FAIL line.

The MNIST criteria train every bundled MNIST preset, so this module takes
several minutes on a single core.
"""

import itertools
import math
import time

import numpy as np
import pytest
from helpers import (
    aulc_enum,
    aupr_sweep,
    auroc_pairs,
    brier_loop,
    ece_loop,
    grad_close,
    numeric_grad,
    pearson_textbook,
    randomize_biases,
    raulc_enum,
    spearman_ranks,
    verdict,
)

from detuq.baselines import PredictiveSamples, mutual_information, softmax_entropy
from detuq.harness.config import load_config
from detuq.harness.methods import Predictor
from detuq.harness.runner import checkpoint_path, run_experiment, run_ood, sensitivity_sweep
from detuq.heads import ClassGmm, RadialFlow, RadialFlowDirichletHead, RbfCentroidHead, LinearSoftmaxHead
from detuq.metrics import aulc, aupr, auroc, brier, curve_from_scores, ece, pearson, raulc, spearman
from detuq.nn import MlpModel, load_checkpoint
from detuq.regularize import dirichlet_entropy, gradient_penalty, reconstruction_loss

MNIST_PRESETS = {
    "softmax": "mnist-softmax",
    "mc_dropout": "mnist-mc-dropout",
    "ensemble": "mnist-ensemble",
    "duq": "mnist-duq",
    "sngp": "mnist-sngp",
    "ddu": "mnist-ddu",
    "mir": "mnist-mir",
    "postnet": "mnist-postnet",
}
SEEDS = (0, 1, 2)


@pytest.fixture(scope="session")
def mnist_runs(tmp_path_factory):
    """Train and evaluate every MNIST preset over three seeds."""
    root = tmp_path_factory.mktemp("mnist-presets")
    runs, wall0, cpu0 = {}, time.perf_counter(), time.process_time()
    for method, preset in MNIST_PRESETS.items():
        cfg = load_config(preset).replace(seeds=list(SEEDS))
        out = root / method
        runs[method] = (cfg, out, run_experiment(cfg, out).rows)
    return runs, time.perf_counter() - wall0, time.process_time() - cpu0


def _row(rows, seed, severity):
    return next(r for r in rows if r.seed == seed and r.severity == severity)


# --- 1: metric oracles ---------------------------------------------------------------


def test_criterion_1_metric_oracles():
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(2, 65))
        u = rng.integers(0, 8, n) / 7.0  # coarse grid forces ties
        while np.ptp(u) == 0:  # correlations are undefined for constant scores
            u = rng.integers(0, 8, n) / 7.0
        c = rng.integers(0, 2, n).astype(bool)
        c[0], c[-1] = True, False
        pos, neg = u[~c], u[c]
        conf = rng.integers(0, 11, n) / 10.0
        k = int(rng.integers(2, 6))
        probs = rng.dirichlet(np.ones(k), n)
        labels = rng.integers(0, k, n)
        y = rng.standard_normal(n)
        curve = curve_from_scores(u, c)
        pairs = [
            (auroc(pos, neg), auroc_pairs(pos, neg)),
            (aupr(pos, neg), aupr_sweep(pos, neg)),
            (aulc(curve), aulc_enum(u, c)),
            (raulc(curve), raulc_enum(u, c)),
            (ece(conf, c, 10), ece_loop(conf, c, 10)),
            (brier(probs, labels), brier_loop(probs, labels)),
            (pearson(u, y), pearson_textbook(u, y)),
            (spearman(u, y), spearman_ranks(u, y)),
        ]
        worst = max(worst, max(abs(a - b) for a, b in pairs))
    elapsed = time.perf_counter() - t0
    verdict("1", worst <= 1e-10 and elapsed < 5.0, f"max deviation {worst:.2e}, {elapsed:.2f}s")


# --- 2: rAULC definition ------------------------------------------------------------


def test_criterion_2_raulc_definition():
    rng = np.random.default_rng(2)
    oracle_ok = True
    for _ in range(100):
        n = int(rng.integers(2, 50))
        c = rng.integers(0, 2, n).astype(bool)
        c[0], c[-1] = True, False
        u = np.where(c, rng.random(n), 1.0 + rng.random(n))
        oracle_ok &= raulc(curve_from_scores(u, c)) == 1.0
    perm_ok = True
    for n in range(2, 9):
        c = rng.integers(0, 2, n).astype(bool)
        c[0], c[1] = True, False
        best = aulc(curve_from_scores(np.where(c, 0.0, 1.0), c))
        for perm in itertools.permutations(range(n)):
            perm_ok &= aulc(curve_from_scores(np.array(perm, dtype=float), c)) <= best + 1e-12
    u = rng.standard_normal(80)
    c = rng.random(80) < 0.7
    base = raulc(curve_from_scores(u, c))
    inv_ok = True
    for _ in range(100):
        a, b, p = rng.uniform(0.1, 3), rng.uniform(-5, 5), int(rng.choice([1, 3, 5]))
        family = rng.integers(3)
        if family == 0:
            t = a * np.sign(u) * np.abs(u) ** p + b
        elif family == 1:
            t = np.exp(a * u) + b
        else:
            t = np.arctan(a * u) + b
        inv_ok &= raulc(curve_from_scores(t, c)) == base
    verdict(
        "2",
        bool(oracle_ok and perm_ok and inv_ok),
        f"oracle exactly 1: {oracle_ok}, permutations bounded: {perm_ok}, transform invariant: {inv_ok}",
    )


# --- 3: gradients -------------------------------------------------------------------


def _check_params(f, analytic, params) -> bool:
    return all(grad_close(a, numeric_grad(f, p)) for a, p in zip(analytic, params))


def test_criterion_3_gradients():
    rng = np.random.default_rng(3)
    t0 = time.perf_counter()
    results = {}

    ok = True
    for sn in (None, 0.9):
        m = MlpModel.build([4, 6, 5, 3], rng, ["relu", "relu", "linear"], sn_coefficient=sn)
        randomize_biases(m, rng)
        if sn:
            m.refresh_spectral_norm()
        x, target = rng.standard_normal((6, 4)), rng.standard_normal((6, 3))
        loss = lambda: 0.5 * float(np.sum((m.forward(x).features - target) ** 2))
        tr = m.forward(x)
        g = m.backward(tr, tr.features - target)
        ok &= _check_params(loss, g.flat(), m.parameters()) and grad_close(g.dx, numeric_grad(loss, x))
    results["mlp"] = ok

    ok = True
    for head in (LinearSoftmaxHead.init(4, 3, rng), RbfCentroidHead.init(4, 3, rng, centroid_dim=3, lengthscale=1.2)):
        m = MlpModel.build([3, 6, 4], rng)
        randomize_biases(m, rng)
        x = rng.standard_normal((5, 3))
        f = lambda: gradient_penalty(m, x, head, 0.6)[0]
        _, grads, head_grads = gradient_penalty(m, x, head, 0.6)
        ok &= _check_params(f, grads.flat(), m.parameters()) and _check_params(f, head_grads, head.parameters())
    results["gradient penalty"] = ok

    dec = MlpModel.build([4, 7, 3], rng, ["relu", "linear"])
    randomize_biases(dec, rng)
    z, x = rng.standard_normal((5, 4)), rng.standard_normal((5, 3))
    f = lambda: reconstruction_loss(dec, z, x, 1.5)[0]
    _, dz, grads = reconstruction_loss(dec, z, x, 1.5)
    results["reconstruction"] = grad_close(dz, numeric_grad(f, z)) and _check_params(f, grads.flat(), dec.parameters())

    flow = RadialFlow.init(3, 4, rng)
    flow.a_raw += 0.4
    z, w = rng.standard_normal((5, 3)), rng.standard_normal(5)
    f = lambda: float(flow.log_prob(z) @ w)
    _, dz, grads = flow.log_prob_and_backward(z, w)
    ok = grad_close(dz, numeric_grad(f, z)) and _check_params(f, grads, flow.parameters())
    head = RadialFlowDirichletHead.init(3, [20, 30, 40], rng, n_layers=2)
    y = rng.integers(0, 3, 5)
    f = lambda: head.loss_and_grad(z, y, 0.1)[0]
    _, dz, grads = head.loss_and_grad(z, y, 0.1)
    results["radial flow"] = ok and grad_close(dz, numeric_grad(f, z)) and _check_params(f, grads, head.parameters())

    duq = RbfCentroidHead.init(4, 3, rng, centroid_dim=5, lengthscale=0.7)
    z, y = rng.standard_normal((6, 4)), rng.integers(0, 3, 6)
    f = lambda: duq.loss_and_grad(z, y)[0]
    _, dz, grads = duq.loss_and_grad(z, y)
    results["duq kernel loss"] = grad_close(dz, numeric_grad(f, z)) and _check_params(f, grads, duq.parameters())

    elapsed = time.perf_counter() - t0
    detail = ", ".join(f"{k}: {'ok' if v else 'mismatch'}" for k, v in results.items())
    verdict("3", all(results.values()) and elapsed < 30, f"{detail}; {elapsed:.1f}s")


# --- 4: spectral normalisation --------------------------------------------------------


@pytest.fixture(scope="session")
def blobs_run(tmp_path_factory):
    cfg = load_config("blobs-ddu")
    out = tmp_path_factory.mktemp("blobs")
    return cfg, out, run_ood(cfg, out)


def _predictor(cfg, out, seed):
    strength = cfg.strengths[0]
    return Predictor.from_dict(load_checkpoint(checkpoint_path(out, cfg, strength, seed))["predictor"])


def test_criterion_4_spectral_norm(mnist_runs, blobs_run):
    runs, _, _ = mnist_runs
    worst_excess = -math.inf
    checked = []
    sn_jobs = [(cfg, out, seed) for cfg, out, _ in runs.values() if cfg.sn_coefficient for seed in cfg.seeds]
    bcfg, bout, _ = blobs_run
    sn_jobs += [(bcfg, bout, seed) for seed in bcfg.seeds]
    for cfg, out, seed in sn_jobs:
        model = _predictor(cfg, out, seed).members[0][0]
        for layer in model.layers:
            sigma = np.linalg.svd(layer.effective()[0], compute_uv=False)[0]
            worst_excess = max(worst_excess, sigma - cfg.sn_coefficient)
        checked.append(cfg.name)
    model = _predictor(bcfg, bout, bcfg.seeds[0]).members[0][0]
    rng = np.random.default_rng(4)
    x1 = rng.uniform(-40, 40, (10_000, 2))
    x2 = x1 + rng.standard_normal((10_000, 2)) * rng.uniform(0.01, 10, (10_000, 1))
    gap = np.linalg.norm(model.forward(x1).features - model.forward(x2).features, axis=1) - np.linalg.norm(
        x1 - x2, axis=1
    )
    ok = worst_excess <= 1e-4 and gap.max() <= 1e-6
    verdict(
        "4",
        bool(ok),
        f"max sn(W_eff) - c = {worst_excess:.2e} over {sorted(set(checked))}; "
        f"max Lipschitz excess (c=1) {gap.max():.2e}",
    )


# --- 5: density heads ----------------------------------------------------------------


def _naive_mixture_density(g: ClassGmm, z):
    total = 0.0
    d = g.dim
    for w, mu, cov in zip(g.weights, g.means, g.covs):
        diff = z - mu
        total += w * math.exp(-0.5 * diff @ np.linalg.inv(cov) @ diff) / math.sqrt((2 * math.pi) ** d * np.linalg.det(cov))
    return total


def test_criterion_5_density_heads():
    rng = np.random.default_rng(5)
    gmm_dev = 0.0
    for _ in range(20):
        k, d = int(rng.integers(1, 5)), int(rng.integers(1, 5))
        a = rng.standard_normal((k, d, d))
        w = rng.uniform(0.1, 1, k)
        g = ClassGmm(w / w.sum(), rng.standard_normal((k, d)) * 2, a @ a.transpose(0, 2, 1) + 0.3 * np.eye(d))
        for z in rng.standard_normal((5, d)) * 1.5:
            gmm_dev = max(gmm_dev, abs(g.log_likelihood(z[None])[0] - math.log(_naive_mixture_density(g, z))))
    flow_dev = 0.0
    eps = 1e-6
    for _ in range(20):
        d, layers = int(rng.integers(1, 4)), int(rng.integers(1, 4))
        flow = RadialFlow.init(d, layers, rng)
        flow.a_raw += rng.uniform(-1, 1, layers)
        flow.b_raw += rng.uniform(-2, 2, layers)
        fn = lambda v: flow.transform(v[None])[0][0]
        for z in rng.standard_normal((3, d)):
            J = np.column_stack([(fn(z + e) - fn(z - e)) / (2 * eps) for e in np.eye(d) * eps])
            x = fn(z)
            oracle = -0.5 * (d * math.log(2 * math.pi) + x @ x) + math.log(abs(np.linalg.det(J)))
            flow_dev = max(flow_dev, abs(flow.log_prob(z[None])[0] - oracle))
    h_ones = dirichlet_entropy(np.ones(3))
    alphas = 1.0 + rng.exponential(3.0, (1000, 3))
    is_max = bool(np.all(dirichlet_entropy(alphas) <= h_ones))
    ok = gmm_dev <= 1e-5 and flow_dev <= 1e-5 and abs(h_ones + math.log(2)) <= 1e-10 and is_max
    verdict(
        "5",
        ok,
        f"gmm deviation {gmm_dev:.1e}, flow deviation {flow_dev:.1e}, H(1,1,1)+log2 = {h_ones + math.log(2):.1e}, "
        f"maximum over 1000 draws: {is_max}",
    )


# --- 6: mutual information ---------------------------------------------------------------


def test_criterion_6_mutual_information():
    rng = np.random.default_rng(6)
    sum_dev, dup_dev = 0.0, 0.0
    for _ in range(200):
        t, n, k = int(rng.integers(1, 8)), int(rng.integers(1, 6)), int(rng.integers(2, 8))
        p = rng.dirichlet(np.full(k, 0.7), (t, n))
        ep, al, _ = mutual_information(PredictiveSamples(p))
        h_mean = np.array([softmax_entropy(row) for row in p.mean(axis=0)])
        sum_dev = max(sum_dev, np.abs(ep + al - h_mean).max())
        ep_dup, _, _ = mutual_information(PredictiveSamples(np.repeat(p[:1], t, axis=0)))
        dup_dev = max(dup_dev, np.abs(ep_dup).max())
    ep, al, _ = mutual_information(PredictiveSamples(np.array([[[1.0, 0.0]], [[0.0, 1.0]]])))
    two = abs(ep[0] - math.log(2))
    ok = sum_dev <= 1e-12 and dup_dev <= 1e-12 and two <= 1e-12 and al[0] == 0.0
    verdict("6", ok, f"sum deviation {sum_dev:.1e}, duplicate u_ep {dup_dev:.1e}, two-point error {two:.1e}")


# --- 7: desk-scale MNIST behaviour -----------------------------------------------------------


def test_criterion_7_runtime(mnist_runs):
    _, wall, cpu = mnist_runs
    verdict("7 (budget)", cpu <= 20 * 60, f"{cpu / 60:.1f} min CPU, {wall / 60:.1f} min wall for 8 presets x 3 seeds")


def test_criterion_7a_accuracy(mnist_runs):
    runs, _, _ = mnist_runs
    acc = {m: [_row(rows, s, 0).accuracy for s in SEEDS] for m, (_, _, rows) in runs.items()}
    low = {m: min(v) for m, v in acc.items() if min(v) < 0.95}
    detail = ", ".join(f"{m} {min(v):.3f}-{max(v):.3f}" for m, v in acc.items())
    verdict("7a", not low, f"clean test accuracy per method: {detail}")


def test_criterion_7b_uncertainty_grows_with_rotation(mnist_runs):
    runs, _, _ = mnist_runs
    rhos = {}
    for m, (cfg, _, rows) in runs.items():
        levels = list(range(len(cfg.severities)))
        means = [_row(rows, "mean", k).mean_uncertainty for k in levels]
        rhos[m] = spearman(cfg.severities, means)
    detail = ", ".join(f"{m} {r:.2f}" for m, r in rhos.items())
    verdict("7b", all(r >= 0.8 for r in rhos.values()), f"Spearman(severity, mean uncertainty): {detail}")


def test_criterion_7c_pooled_raulc_positive(mnist_runs):
    runs, _, _ = mnist_runs
    pooled = {m: _row(rows, "mean", "all").raulc for m, (_, _, rows) in runs.items()}
    detail = ", ".join(f"{m} {v:.3f}" for m, v in pooled.items())
    verdict("7c", all(v is not None and v > 0 for v in pooled.values()), f"pooled rAULC (seed mean): {detail}")


def test_criterion_7d_sampling_beats_gmm_heads(mnist_runs):
    runs, _, _ = mnist_runs
    pooled = {m: [_row(rows, s, "all").raulc for s in SEEDS] for m, (_, _, rows) in runs.items()}
    wins = {}
    for sampler in ("mc_dropout", "ensemble"):
        for gmm in ("ddu", "mir"):
            wins[f"{sampler}>={gmm}"] = sum(a >= b for a, b in zip(pooled[sampler], pooled[gmm]))
    detail = ", ".join(f"{k} in {v}/3 seeds" for k, v in wins.items())
    verdict("7d", all(v >= 2 for v in wins.values()), detail)


# --- 8: sensitivity sweep -----------------------------------------------------------------


def test_criterion_8_mir_sweep(tmp_path):
    cfg = load_config("mnist-mir-sweep")
    res = sensitivity_sweep(cfg, tmp_path)
    series = ", ".join(f"{s:g}:{'-' if v is None else f'{v:.3f}'}" for s, v in zip(res.strengths, res.raulc))
    ok = res.spearman is not None and res.spearman > 0
    verdict("8", ok, f"Spearman(strength, rAULC) = {res.spearman}, Pearson = {res.pearson}; rAULC {series}")


# --- 9: OOD sanity -------------------------------------------------------------------------


def test_criterion_9_ood(blobs_run, tmp_path):
    cfg, _, rows = blobs_run
    far = rows[0]["auroc"]
    self_pair = run_ood(cfg.replace(ood=dict(cfg.dataset)), tmp_path)[0]["auroc"]
    ok = far >= 0.95 and abs(self_pair - 0.5) <= 0.02
    verdict("9", ok, f"far-blob AUROC {far:.4f}, in-distribution self-pair AUROC {self_pair:.4f}")


# --- 10: determinism ----------------------------------------------------------------------------


def test_criterion_10_determinism(tmp_path):
    same = {}
    for preset in ("blobs-ddu", "mnist-softmax"):
        cfg = load_config(preset).replace(seeds=[0])
        a = run_experiment(cfg, tmp_path / preset / "a")
        b = run_experiment(cfg, tmp_path / preset / "b")
        assert a.out_dir and b.out_dir
        same[preset] = (a.out_dir / "report.csv").read_bytes() == (b.out_dir / "report.csv").read_bytes()
    verdict("10", all(same.values()), ", ".join(f"{k} byte-identical: {v}" for k, v in same.items()))
