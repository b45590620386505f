"""Acceptance criteria, one test each. Every test appends a PASS/FAIL line that
is printed in the terminal summary (and echoed with ``-s``)."""

import itertools
import time

import numpy as np
import pytest
from scipy.stats import chisquare

from conftest import ACCEPTANCE_LINES, smoke_dict, tiny_ensemble
from test_model import fd_check, random_model
from keyens.attacks import AttackConfig, square_attack, transfer_eval
from keyens.ensemble import RandomEnsemble, predict_random, predict_simple, probs_random, probs_simple
from keyens.harness.config import ExperimentConfig, from_dict
from keyens.harness.experiment import build_pipelines, evaluate_pipelines, load_datasets, run_experiment, train_models
from keyens.model import accuracy, init_model
from keyens.pipelines import ModelPipeline, QueryOracle
from keyens.rngcore import RngStream
from keyens.transform import decrypt, encrypt, gen_key


def record(number, title, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} {number:>2} {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    assert ok, line


@pytest.fixture(scope="module")
def default_run():
    """Default configuration: 2,000 train / 2,000 test images, N=4, S=3, eps=8/255."""
    cfg = ExperimentConfig()
    train, test = load_datasets(cfg)
    baseline, ensemble = train_models(cfg, train)
    report = evaluate_pipelines(cfg, build_pipelines(cfg, baseline, ensemble), test)
    return cfg, train, test, baseline, ensemble, {r.model: r for r in report.rows}


def test_01_transform_correctness():
    t0 = time.perf_counter()
    rng = RngStream(101)
    exact, worst_lin, worst_iso = True, 0.0, 0.0
    for i in range(100):
        m = (2, 4, 8)[i % 3]
        key = gen_key(rng.next_u64(), m, 3)
        x, y = (rng.uniforms(16 * 16 * 3).reshape(16, 16, 3) for _ in range(2))
        a, b = rng.normals(2)
        exact &= np.array_equal(decrypt(encrypt(x, key), key), x)
        worst_lin = max(worst_lin, np.max(np.abs(encrypt(a * x + b * y, key) - (a * encrypt(x, key) + b * encrypt(y, key)))))
        worst_iso = max(worst_iso, abs(np.max(np.abs(encrypt(x, key) - encrypt(y, key))) - np.max(np.abs(x - y))))
    elapsed = time.perf_counter() - t0
    ok = exact and worst_lin <= 1e-12 and worst_iso <= 1e-12 and elapsed < 5
    record(1, "transform correctness", ok,
           f"round trip exact={exact}, linearity err={worst_lin:.1e}, isometry err={worst_iso:.1e}, {elapsed:.2f}s")


def min_preactivation(m, x):
    """Smallest |pre-activation| over hidden units; central differences are only
    a valid oracle away from ReLU kinks."""
    a, worst = np.asarray(x, dtype=np.float64).reshape(-1), np.inf
    for w, b in zip(m.weights[:-1], m.biases[:-1]):
        z = a @ w + b
        worst = min(worst, np.min(np.abs(z)))
        a = np.maximum(z, 0.0)
    return worst


def kink_free_instances(count, h):
    rng, found = RngStream(400), []
    while len(found) < count:
        i = len(found)
        key = gen_key(rng.next_u64(), 2, 3)
        m = init_model((48, 7, 3), rng.next_u64(), key.key_id)
        for b in m.biases:
            b[...] = 0.3 * rng.normals(b.size)
        x = rng.uniforms(48).reshape(1, 4, 4, 3)
        plain, px = random_model(rng.next_u64() % 10_000), rng.uniforms(6)
        margin = 20 * h * max(1.0, *(np.abs(w).max() for w in m.weights))
        if min_preactivation(m, encrypt(x, key)) > margin and min_preactivation(plain, px) > margin:
            found.append((key, m, x, plain, px, i % 3))
    return found


def test_02_gradient_fidelity():
    t0 = time.perf_counter()
    h, worst = 1e-3, 0.0
    for key, m, x, plain, px, label in kink_free_instances(10, h):
        # parameters and encrypted-input gradients of a sub-model
        worst = max(worst, fd_check(m, encrypt(x, key).reshape(-1), label, h))
        # plaintext gradient pulled back through the encryption
        pipe = ModelPipeline(m, key, keys_known=True)
        _, g = pipe.loss_grad(x, np.array([label]))
        for idx in np.ndindex(x.shape):
            e = np.zeros_like(x)
            e[idx] = h
            fd = (-np.log(pipe.probs(x + e)[0, label]) + np.log(pipe.probs(x - e)[0, label])) / (2 * h)
            worst = max(worst, abs(g[idx] - fd) / max(abs(g[idx]), abs(fd), 1e-6))
        # the plain two-hidden-layer path used by the baseline
        worst = max(worst, fd_check(plain, px, label, h))
    elapsed = time.perf_counter() - t0
    record(2, "gradient fidelity", worst < 1e-4 and elapsed < 10,
           f"max relative error {worst:.2e} over 10 instances (h=1e-3), {elapsed:.2f}s")


def test_03_key_matched_inference(default_run):
    _, _, test, _, ensemble, _ = default_run
    (k1, m1), (k2, _) = ensemble.members[:2]
    assert len(test) == 2000
    right = 100 * accuracy(m1, test.images, test.labels, k1)
    wrong = 100 * accuracy(m1, test.images, test.labels, k2)
    chance = 100 / test.num_classes
    record(3, "key-matched inference", right >= 90 and wrong <= chance + 15,
           f"K1 {right:.2f}% (>= 90), K2 {wrong:.2f}% (<= {chance + 15:.0f}) on {len(test)} images")


def test_04_baseline_collapse(default_run):
    *_, rows = default_run
    b = rows["baseline"]
    record(4, "baseline collapse", b.clean >= 90 and b.attacks["pgd"] <= 5,
           f"clean {b.clean:.2f}% (>= 90), PGD {b.attacks['pgd']:.2f}% (<= 5)")


def test_05_random_beats_simple_under_square(default_run):
    cfg, *_, rows = default_run
    simple, rand = rows["simple_ensemble"].attacks["square"], rows["random_ensemble"].attacks["square"]
    assert cfg.attack.query_budget == 1000 and cfg.eval.num_eval == 500
    record(5, "random vs simple under Square", rand - simple >= 10,
           f"random {rand:.2f}% - simple {simple:.2f}% = {rand - simple:.2f} points (>= 10), 500 examples")


def test_06_combined_ordering(default_run):
    *_, rows = default_run
    r, s, b = (rows[k].combined for k in ("random_ensemble", "simple_ensemble", "baseline"))
    record(6, "combined-column ordering", r > s >= b, f"random {r:.2f}% > simple {s:.2f}% >= baseline {b:.2f}%")


def test_07_reduction_identity(default_run):
    *_, ensemble, _ = default_run
    full = RandomEnsemble(ensemble.members, ensemble.n, rng_seed=5)
    rng = RngStream(77)
    xs = rng.uniforms(1000 * 16 * 16 * 3).reshape(1000, 16, 16, 3)
    same = all(np.array_equal(predict_random(full, x, rng).probs, predict_simple(full, x).probs) for x in xs)
    same &= np.array_equal(probs_random(full, xs, rng), probs_simple(full, xs))
    record(7, "reduction identity S=N", same, f"bit-exact on 1000 inputs: {same}")


def test_08_subset_uniformity():
    e = tiny_ensemble(shape=(2, 2, 1), hidden=(2,))
    xs = np.full((40_000, 2, 2, 1), 0.5)
    _, mask = probs_random(e, xs, RngStream(2024), return_mask=True)
    subsets = list(itertools.combinations(range(4), 3))
    index = {s: i for i, s in enumerate(subsets)}
    counts = np.bincount([index[tuple(np.flatnonzero(row))] for row in mask], minlength=len(subsets))
    p = chisquare(counts).pvalue
    record(8, "subset uniformity", p > 0.01, f"chi-square p={p:.3f} (> 0.01), counts {counts.tolist()}")


def test_09_square_soundness(default_run):
    cfg, _, test, baseline, *_ = default_run
    x, labels = test.images[:100], test.labels[:100]
    oracle = QueryOracle(ModelPipeline(baseline))
    acfg = AttackConfig(epsilon=cfg.attack.epsilon, query_budget=1000, trace=True)
    out = square_attack(oracle, x, labels, acfg, RngStream(9))
    decreasing = True
    for ex in range(len(x)):
        accepted = [r["loss"] for r in out.trace if r["example"] == ex and r["accepted"]]
        decreasing &= all(b < a for a, b in zip(accepted, accepted[1:]))
    in_ball = np.max(np.abs(out.adversarial - x)) <= acfg.epsilon + 1e-12
    in_box = out.adversarial.min() >= 0 and out.adversarial.max() <= 1
    exact = oracle.queries == int(out.queries_used.sum()) == len(out.trace) and out.queries_used.max() <= 1000
    record(9, "Square soundness", decreasing and in_ball and in_box and exact,
           f"strictly decreasing={decreasing}, eps-ball={in_ball}, [0,1]={in_box}, "
           f"queries {oracle.queries} counted exactly={exact}")


def test_10_low_cross_key_transfer(default_run):
    cfg, _, test, _, ensemble, _ = default_run
    (k1, m1), (k2, m2) = ensemble.members[:2]
    x, labels = test.images[:500], test.labels[:500]
    source = ModelPipeline(m1, k1, keys_known=True)
    target = ModelPipeline(m2, k2)
    clean = 100 * float(np.mean(target.predict(x) == labels))
    robust = transfer_eval(source, target, x, labels, "pgd", cfg.attack_config(), RngStream(10))
    white = transfer_eval(source, source, x, labels, "pgd", cfg.attack_config(), RngStream(10))
    record(10, "low cross-key transfer", clean - robust <= 10,
           f"K2 clean {clean:.2f}% -> {robust:.2f}% under K1 PGD (drop {clean - robust:.2f} <= 10; "
           f"K1 white-box {white:.2f}%)")


def test_11_determinism(tmp_path):
    times, reports = [], []
    for run in ("a", "b"):
        t0 = time.perf_counter()
        run_experiment(from_dict(smoke_dict(tmp_path / run)), tmp_path / run)
        times.append(time.perf_counter() - t0)
        reports.append((tmp_path / run / "report.jsonl").read_bytes())
    same = reports[0] == reports[1]
    record(11, "determinism", same and max(times) < 60,
           f"smoke reports byte-identical={same}, runs {times[0]:.1f}s / {times[1]:.1f}s (< 60)")
