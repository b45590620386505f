import itertools

import numpy as np
import pytest

from conftest import constant_member, tiny_ensemble
from keyens.attacks import (AttackConfig, fgsm, margin_loss, p_selection, pgd, project, run_attack,
                            square_attack, transfer_eval, worst_case_eval)
from keyens.ensemble import probs_simple
from keyens.errors import GradientUnavailable, InvalidTarget
from keyens.model import SubModel, init_model, softmax
from keyens.pipelines import BlackBoxPipeline, EnsemblePipeline, ModelPipeline, QueryOracle
from keyens.rngcore import RngStream
from keyens.transform import encrypt, gen_key


def linear_model(weights, bias=None, key_id="plain"):
    w = np.asarray(weights, dtype=np.float64)
    b = np.zeros(w.shape[1]) if bias is None else np.asarray(bias, dtype=np.float64)
    return SubModel(key_id, w.shape, [w], [b])


def uniform_images(seed, shape, lo=0.0, hi=1.0):
    u = RngStream(seed).uniforms(int(np.prod(shape))).reshape(shape)
    return lo + (hi - lo) * u


def random_mlp(seed, dims=(16, 6, 3)):
    return init_model(dims, seed)


def ce(pipe, x, labels):
    p = pipe.probs(x)
    return -np.log(p[np.arange(len(labels)), labels])


def test_config_validation():
    with pytest.raises(ValueError):
        AttackConfig(epsilon=1.0)
    with pytest.raises(ValueError):
        AttackConfig(iterations=0)
    with pytest.raises(ValueError):
        AttackConfig(p_init=0.0)
    assert AttackConfig(epsilon=0.04).step == pytest.approx(0.01)


def test_margin_loss_hand_values():
    p = np.array([[0.6, 0.3, 0.1], [0.2, 0.5, 0.3]])
    assert np.allclose(margin_loss(p, np.array([0, 0])), [0.3, -0.3])


def test_fgsm_with_zero_epsilon_is_identity():
    pipe = ModelPipeline(random_mlp(1))
    x = uniform_images(2, (5, 4, 4, 1))
    labels = np.arange(5) % 3
    out = fgsm(pipe, x, labels, AttackConfig(epsilon=0.0))
    assert np.array_equal(out.adversarial, x)
    assert np.array_equal(out.success, pipe.predict(x) != labels)


def test_fgsm_on_linear_model_hits_the_best_box_vertex():
    rng = RngStream(3)
    eps = 0.1
    for trial in range(10):
        w = rng.derive(f"w{trial}").normals(8).reshape(4, 2)
        pipe = ModelPipeline(linear_model(w))
        x = uniform_images(trial, (1, 2, 2, 1), eps, 1 - eps)
        label = np.array([trial % 2])
        out = fgsm(pipe, x, label, AttackConfig(epsilon=eps))
        best = max(ce(pipe, x + eps * np.array(v).reshape(1, 2, 2, 1), label)[0]
                   for v in itertools.product([-1.0, 1.0], repeat=4))
        assert ce(pipe, out.adversarial, label)[0] == pytest.approx(best, rel=1e-12)


def test_fgsm_on_zero_gradient_model_does_not_move():
    k = gen_key(1, 2, 1)
    pipe = ModelPipeline(constant_member(k, 16, [0.0, 1.0, 0.0]), k)
    x = uniform_images(4, (3, 4, 4, 1))
    out = fgsm(pipe, x, np.zeros(3, dtype=int), AttackConfig(epsilon=0.1))
    assert np.array_equal(out.adversarial, x)


def test_pgd_single_step_without_random_start_is_fgsm():
    pipe = ModelPipeline(random_mlp(5))
    x = uniform_images(6, (8, 4, 4, 1))
    labels = np.arange(8) % 3
    eps = 0.05
    a = fgsm(pipe, x, labels, AttackConfig(epsilon=eps), RngStream(1))
    b = pgd(pipe, x, labels, AttackConfig(epsilon=eps, step_size=eps, iterations=1, random_start=False),
            rng=RngStream(1))
    assert np.array_equal(a.adversarial, b.adversarial)


def test_pgd_iterates_stay_in_the_ball():
    e = tiny_ensemble()
    pipe = EnsemblePipeline(e, randomized=True)
    x = uniform_images(7, (6, 4, 4, 1))
    labels = np.arange(6) % 3
    eps = 0.07
    out = pgd(pipe, x, labels, AttackConfig(epsilon=eps, iterations=10, restarts=2), rng=RngStream(2),
              keep_iterates=True)
    assert len(out.trace) == 20
    for it in out.trace + [out.adversarial]:
        assert np.max(np.abs(it - x)) <= eps + 1e-12
        assert it.min() >= 0.0 and it.max() <= 1.0


def test_pgd_increases_loss():
    pipe = ModelPipeline(random_mlp(8))
    x = uniform_images(9, (20, 4, 4, 1))
    labels = np.arange(20) % 3
    out = pgd(pipe, x, labels, AttackConfig(epsilon=0.1, random_start=False), rng=RngStream(3))
    gain = ce(pipe, out.adversarial, labels) - ce(pipe, x, labels)
    # where every hidden unit is dead the output is constant and nothing can move
    _, g = pipe.loss_grad(x, labels)
    alive = np.abs(g).reshape(20, -1).max(axis=1) > 0
    assert alive.sum() >= 15
    assert np.all(gain[alive] > 0)


def test_targeted_pgd_rejects_true_label_target():
    pipe = ModelPipeline(random_mlp(10))
    x = uniform_images(11, (2, 4, 4, 1))
    with pytest.raises(InvalidTarget):
        pgd(pipe, x, np.array([0, 1]), AttackConfig(), target=np.array([0, 2]))


def test_targeted_pgd_raises_target_probability():
    pipe = ModelPipeline(random_mlp(12))
    x = uniform_images(13, (10, 4, 4, 1))
    labels = np.zeros(10, dtype=int)
    target = np.full(10, 2)
    out = pgd(pipe, x, labels, AttackConfig(epsilon=0.1), target=target, rng=RngStream(4))
    assert np.all(pipe.probs(out.adversarial)[:, 2] >= pipe.probs(x)[:, 2] - 1e-12)


def test_p_selection_schedule():
    assert p_selection(0.8, 0, 10000) == 0.8
    assert p_selection(0.8, 11, 10000) == 0.4
    assert p_selection(0.8, 9000, 10000) == 0.8 / 2 ** 9
    # rescaled to a 1000-query budget: first halving after 1 query
    assert p_selection(0.8, 2, 1000) == 0.4


def test_square_accepted_losses_strictly_decrease():
    pipe = ModelPipeline(random_mlp(14))
    x = uniform_images(15, (5, 4, 4, 1))
    labels = pipe.predict(x)
    out = square_attack(QueryOracle(pipe), x, labels, AttackConfig(epsilon=0.05, query_budget=200, trace=True),
                        RngStream(5))
    for ex in range(5):
        accepted = [r["loss"] for r in out.trace if r["example"] == ex and r["accepted"]]
        assert all(b < a for a, b in zip(accepted, accepted[1:]))
        assert accepted[-1] == pytest.approx(out.margin[ex], abs=0)


def test_square_query_accounting_and_box():
    pipe = ModelPipeline(random_mlp(16))
    x = uniform_images(17, (12, 4, 4, 1))
    labels = pipe.predict(x)
    oracle = QueryOracle(pipe)
    cfg = AttackConfig(epsilon=0.05, query_budget=50)
    out = square_attack(oracle, x, labels, cfg, RngStream(6))
    assert oracle.queries == out.queries_used.sum()
    assert np.all(out.queries_used <= cfg.query_budget) and np.all(out.queries_used >= 1)
    assert np.max(np.abs(out.adversarial - x)) <= cfg.epsilon + 1e-12
    # examples that stop early were already successful
    stopped = out.queries_used < cfg.query_budget
    assert np.all(out.margin[stopped] <= 0)


def test_square_succeeds_on_reachable_linear_problem():
    d, eps = 8 * 8, 0.05
    w = np.where(np.arange(d) % 2 == 0, 1.0, -1.0)
    x = uniform_images(18, (100, 8, 8, 1), eps, 1 - eps)
    # class 0 wins by 30% of the largest achievable swing eps * ||w||_1
    bias = -(x.reshape(100, -1) @ w) - 0.3 * eps * d
    hits = 0
    for i in range(100):
        def oracle(imgs, i=i):
            z = imgs.reshape(len(imgs), -1) @ w + bias[i]
            return softmax(np.stack([np.zeros(len(imgs)), z], axis=1))
        out = square_attack(oracle, x[i:i + 1], np.array([0]), AttackConfig(epsilon=eps, query_budget=1000),
                            RngStream(100 + i))
        hits += int(out.success[0])
    assert hits >= 99


def test_gradient_free_contract():
    pipe = ModelPipeline(random_mlp(19))
    oracle = QueryOracle(pipe)
    assert not hasattr(oracle, "loss_grad") and not hasattr(oracle, "pipeline")
    bb = BlackBoxPipeline(lambda x, rng=None: pipe.probs(x))
    x = uniform_images(20, (2, 4, 4, 1))
    with pytest.raises(GradientUnavailable):
        bb.loss_grad(x, np.array([0, 1]))
    with pytest.raises(GradientUnavailable):
        fgsm(bb, x, np.array([0, 1]), AttackConfig())
    out = run_attack("square", bb, x, np.array([0, 1]), AttackConfig(query_budget=20), RngStream(7))
    assert out.adversarial.shape == x.shape


def test_unknown_attack_name():
    with pytest.raises(ValueError):
        run_attack("cw", ModelPipeline(random_mlp(1)), uniform_images(1, (1, 4, 4, 1)), [0], AttackConfig(),
                   RngStream(0))


def test_transfer_at_zero_epsilon_is_clean_accuracy():
    src = ModelPipeline(random_mlp(21))
    tgt = ModelPipeline(random_mlp(22))
    x = uniform_images(23, (30, 4, 4, 1))
    labels = np.arange(30) % 3
    got = transfer_eval(src, tgt, x, labels, "pgd", AttackConfig(epsilon=0.0, iterations=3))
    assert got == pytest.approx(100.0 * np.mean(tgt.predict(x) == labels))


def test_worst_case_combination():
    e = tiny_ensemble()
    pipe = EnsemblePipeline(e, randomized=True)
    x = uniform_images(24, (20, 4, 4, 1))
    labels = probs_simple(e, x).argmax(axis=1)
    cfg = AttackConfig(epsilon=0.1, iterations=5, query_budget=30)
    single = worst_case_eval(pipe, x, labels, ["pgd"], cfg, RngStream(8))
    assert single.combined == single.per_attack["pgd"]
    res = worst_case_eval(pipe, x, labels, ["fgsm", "pgd", "square"], cfg, RngStream(8))
    assert res.combined <= min(res.per_attack.values())
    expected = res.robust["fgsm"] & res.robust["pgd"] & res.robust["square"]
    assert np.array_equal(res.combined_robust, expected)
    with pytest.raises(ValueError):
        worst_case_eval(pipe, x, labels, [], cfg)


def test_budget_is_preserved_by_encryption():
    k = gen_key(9, 4, 3)
    x = uniform_images(25, (4, 8, 8, 3), 0.1, 0.9)
    delta = 0.05 * (2 * uniform_images(26, x.shape) - 1)
    adv = project(x + delta, x, 0.05)
    assert np.max(np.abs(encrypt(adv, k) - encrypt(x, k))) == pytest.approx(np.max(np.abs(adv - x)), abs=0)


def fd_grad(f, x, h=1e-6):
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        g[idx] = (f(xp) - f(xm)) / (2 * h)
    return g


@pytest.mark.parametrize("target", [None, 2])
def test_model_pipeline_gradient_through_key(target):
    k = gen_key(10, 2, 1)
    m = init_model((16, 6, 3), 27, key_id=k.key_id)
    pipe = ModelPipeline(m, k, keys_known=True)
    x = uniform_images(28, (1, 4, 4, 1), 0.2, 0.8)
    labels = np.array([0])
    t = None if target is None else np.array([target])
    _, g = pipe.loss_grad(x, labels, target=t)

    def f(z):
        p = pipe.probs(z)[0]
        return np.log(p[target]) if target is not None else -np.log(p[0])
    assert np.allclose(g, fd_grad(f, x), atol=1e-6)


def test_ensemble_pipeline_full_gradient_keys_known():
    e = tiny_ensemble()
    pipe = EnsemblePipeline(e, randomized=True, keys_known=True, gradient_mode="full")
    x = uniform_images(29, (1, 4, 4, 1), 0.2, 0.8)
    _, g = pipe.loss_grad(x, np.array([1]))
    assert np.allclose(g, fd_grad(lambda z: -np.log(probs_simple(e, z)[0, 1]), x), atol=1e-6)


def test_ensemble_pipeline_gradient_without_keys_ignores_encryption():
    e = tiny_ensemble()
    pipe = EnsemblePipeline(e, randomized=False, keys_known=False)
    x = uniform_images(30, (1, 4, 4, 1), 0.2, 0.8)

    def f(z):
        ps = [ModelPipeline(m).probs(z)[0] for _, m in e.members]
        return -np.log(np.mean(ps, axis=0)[2])
    _, g = pipe.loss_grad(x, np.array([2]))
    assert np.allclose(g, fd_grad(f, x), atol=1e-6)
