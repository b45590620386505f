"""l-infinity attacks: FGSM, PGD (untargeted and targeted) and the Square attack.

All attacks are batched: ``x`` is ``(B, H, W, C)`` in [0, 1] and ``labels`` has
length ``B``. Every emitted adversarial image lies in the epsilon ball around
its original and inside [0, 1].
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Optional

import numpy as np

from .errors import GradientUnavailable, InvalidTarget, ShapeMismatch
from .pipelines import Pipeline, QueryOracle
from .rngcore import RngStream

# Square attack: p is halved after each of these iterations, on a 10k-query scale.
SQUARE_SCHEDULE = (10, 50, 200, 500, 1000, 2000, 4000, 6000, 8000)

ATTACK_NAMES = ("fgsm", "pgd", "pgd-t", "square")


@dataclass
class AttackConfig:
    epsilon: float = 8 / 255
    step_size: Optional[float] = None
    iterations: int = 40
    restarts: int = 1
    random_start: bool = True
    query_budget: int = 1000
    p_init: float = 0.8
    rng_seed: int = 0
    trace: bool = False

    def __post_init__(self):
        if not 0 <= self.epsilon < 1:
            raise ValueError(f"epsilon must be in [0, 1), got {self.epsilon}")
        if self.step_size is not None and self.step_size <= 0:
            raise ValueError("step_size must be > 0")
        if self.iterations < 1 or self.restarts < 1 or self.query_budget < 1:
            raise ValueError("iterations, restarts and query_budget must be >= 1")
        if not 0 < self.p_init <= 1:
            raise ValueError(f"p_init must be in (0, 1], got {self.p_init}")

    @property
    def step(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return self.epsilon / 4 if self.epsilon > 0 else 1e-3

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AttackOutcome:
    adversarial: np.ndarray
    success: np.ndarray
    queries_used: np.ndarray
    margin: np.ndarray
    attack: str = ""
    trace: Optional[list] = field(default=None, repr=False)


def margin_loss(probs: np.ndarray, labels: np.ndarray) -> np.ndarray:
    """``p_y - max_{k != y} p_k``; negative means misclassified."""
    n = np.arange(len(labels))
    true = probs[n, labels]
    other = probs.copy()
    other[n, labels] = -np.inf
    return true - other.max(axis=1)


def project(adv: np.ndarray, x: np.ndarray, eps: float) -> np.ndarray:
    return np.clip(np.clip(adv, x - eps, x + eps), 0.0, 1.0)


def _prepare(x, labels):
    x = np.asarray(x, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if x.ndim != 4 or labels.shape != (x.shape[0],):
        raise ShapeMismatch(f"expected (B, H, W, C) images with B labels, got {x.shape} and {labels.shape}")
    return x, labels


def _require_gradients(pipeline: Pipeline) -> None:
    if not getattr(pipeline, "white_box", False) or not hasattr(pipeline, "loss_grad"):
        raise GradientUnavailable(f"{getattr(pipeline, 'name', pipeline)!r} is black-box only")


def judge(pipeline: Pipeline, adv: np.ndarray, labels: np.ndarray, rng: RngStream):
    """Evaluation rule: success iff one (seeded) prediction differs from the label."""
    probs = pipeline.probs(adv, rng)
    return probs.argmax(axis=1) != labels, margin_loss(probs, labels)


def fgsm(pipeline: Pipeline, x, labels, cfg: AttackConfig, rng: Optional[RngStream] = None) -> AttackOutcome:
    _require_gradients(pipeline)
    x, labels = _prepare(x, labels)
    rng = rng or RngStream(cfg.rng_seed)
    _, grad = pipeline.loss_grad(x, labels, rng.derive("grad"))
    adv = project(x + cfg.epsilon * np.sign(grad), x, cfg.epsilon)
    success, margin = judge(pipeline, adv, labels, rng.derive("judge"))
    return AttackOutcome(adv, success, np.ones(len(labels), dtype=np.int64), margin, "fgsm")


def pgd(pipeline: Pipeline, x, labels, cfg: AttackConfig, target=None,
        rng: Optional[RngStream] = None, keep_iterates: bool = False) -> AttackOutcome:
    """Sign-gradient PGD with restarts; the best iterate by attack loss is kept.

    Untargeted runs ascend the cross-entropy of the true label; with ``target``
    they ascend the log-probability of the target class. Only iterates reached
    after at least one step compete for "best", so one iteration without a
    random start is exactly FGSM with ``step_size = epsilon``.
    """
    _require_gradients(pipeline)
    x, labels = _prepare(x, labels)
    if target is not None:
        target = np.broadcast_to(np.asarray(target, dtype=np.int64), labels.shape).copy()
        if np.any(target == labels):
            raise InvalidTarget("target class must differ from the true label")
    rng = rng or RngStream(cfg.rng_seed)
    grad_rng = rng.derive("grad")
    eps, step = cfg.epsilon, cfg.step
    best_adv = x.copy()
    best_loss = np.full(len(labels), -np.inf)
    iterates = [] if keep_iterates else None
    for r in range(cfg.restarts):
        if cfg.random_start and eps > 0:
            noise = rng.derive(f"start{r}").uniforms(x.size).reshape(x.shape)
            adv = project(x + eps * (2.0 * noise - 1.0), x, eps)
        else:
            adv = x.copy()
        _, grad = pipeline.loss_grad(adv, labels, grad_rng, target)
        for t in range(cfg.iterations):
            adv = project(adv + step * np.sign(grad), x, eps)
            if iterates is not None:
                iterates.append(adv.copy())
            loss, grad = pipeline.loss_grad(adv, labels, grad_rng, target)
            better = loss > best_loss
            best_loss[better] = loss[better]
            best_adv[better] = adv[better]
    success, margin = judge(pipeline, best_adv, labels, rng.derive("judge"))
    n_grad = cfg.restarts * (cfg.iterations + 1)
    out = AttackOutcome(best_adv, success, np.full(len(labels), n_grad, dtype=np.int64), margin,
                        "pgd-t" if target is not None else "pgd")
    if iterates is not None:
        out.trace = iterates
    return out


def most_likely_wrong(pipeline: Pipeline, x, labels, rng: RngStream) -> np.ndarray:
    """Target for targeted PGD: the highest-probability class other than the label."""
    probs = pipeline.probs(x, rng).copy()
    probs[np.arange(len(labels)), labels] = -np.inf
    return probs.argmax(axis=1)


def p_selection(p_init: float, it: int, budget: int) -> float:
    """Fraction of the image area covered by the next square."""
    it = int(it / budget * 10000)
    halvings = sum(it > b for b in SQUARE_SCHEDULE)
    return p_init / 2 ** halvings


def square_attack(oracle: Callable[[np.ndarray], np.ndarray], x, labels, cfg: AttackConfig,
                  rng: Optional[RngStream] = None) -> AttackOutcome:
    """Random search over square-shaped +-epsilon patches, using probabilities only.

    Starts from vertical stripes of +-epsilon (one query), then proposes one
    random square per iteration; a proposal replaces the current image iff its
    margin loss is strictly lower. An example stops once its margin is <= 0
    or its query budget is spent.
    """
    x, labels = _prepare(x, labels)
    rng = rng or RngStream(cfg.rng_seed)
    b, h, w, c = x.shape
    eps, budget = cfg.epsilon, cfg.query_budget

    x_best = project(x + eps * rng.signs((b, 1, w, c)), x, eps)
    margin_best = margin_loss(oracle(x_best), labels)
    queries = np.ones(b, dtype=np.int64)
    trace = [] if cfg.trace else None
    if trace is not None:
        trace += [{"example": i, "iteration": 0, "loss": float(margin_best[i]), "accepted": True,
                   "queries": 1} for i in range(b)]

    rows, cols = np.arange(h), np.arange(w)
    for i_iter in range(budget - 1):
        active = np.flatnonzero(margin_best > 0)
        if active.size == 0:
            break
        na = active.size
        p = p_selection(cfg.p_init, i_iter, budget)
        s = min(max(int(round(math.sqrt(p * h * w))), 1), h, w)
        vh = rng.randbelow_array(np.full(na, h - s + 1))
        vw = rng.randbelow_array(np.full(na, w - s + 1))
        signs = rng.signs((na, 1, 1, c))
        in_rows = (rows >= vh[:, None]) & (rows < vh[:, None] + s)
        in_cols = (cols >= vw[:, None]) & (cols < vw[:, None] + s)
        window = in_rows[:, :, None, None] & in_cols[:, None, :, None]
        xa = x[active]
        x_new = np.where(window, np.clip(xa + eps * signs, 0.0, 1.0), x_best[active])
        margin_new = margin_loss(oracle(x_new), labels[active])
        queries[active] += 1
        accepted = margin_new < margin_best[active]
        upd = active[accepted]
        x_best[upd] = x_new[accepted]
        margin_best[upd] = margin_new[accepted]
        if trace is not None:
            trace += [{"example": int(e), "iteration": i_iter + 1, "loss": float(m),
                       "accepted": bool(a), "queries": int(queries[e])}
                      for e, m, a in zip(active, margin_new, accepted)]
    return AttackOutcome(x_best, margin_best <= 0, queries, margin_best, "square", trace)


def run_attack(name: str, pipeline: Pipeline, x, labels, cfg: AttackConfig, rng: RngStream) -> AttackOutcome:
    """Run a named attack and judge success with a fresh prediction on ``pipeline``."""
    x, labels = _prepare(x, labels)
    if name == "fgsm":
        return fgsm(pipeline, x, labels, cfg, rng)
    if name == "pgd":
        return pgd(pipeline, x, labels, cfg, rng=rng)
    if name == "pgd-t":
        target = most_likely_wrong(pipeline, x, labels, rng.derive("target"))
        return pgd(pipeline, x, labels, cfg, target=target, rng=rng)
    if name == "square":
        oracle = QueryOracle(pipeline, rng.derive("oracle"))
        out = square_attack(oracle, x, labels, cfg, rng.derive("search"))
        out.success, out.margin = judge(pipeline, out.adversarial, labels, rng.derive("judge"))
        return out
    raise ValueError(f"unknown attack {name!r}; choose from {', '.join(ATTACK_NAMES)}")


@dataclass
class WorstCaseResult:
    per_attack: dict[str, float]
    combined: float
    robust: dict[str, np.ndarray]
    combined_robust: np.ndarray
    outcomes: dict[str, AttackOutcome] = field(repr=False, default_factory=dict)


def worst_case_eval(pipeline: Pipeline, x, labels, attacks, cfg: AttackConfig,
                    rng: Optional[RngStream] = None) -> WorstCaseResult:
    """Per-attack robust accuracy (%) and the per-example worst case over all attacks."""
    attacks = list(attacks)
    if not attacks:
        raise ValueError("at least one attack is required")
    x, labels = _prepare(x, labels)
    rng = rng or RngStream(cfg.rng_seed)
    robust, outcomes = {}, {}
    for name in attacks:
        out = run_attack(name, pipeline, x, labels, cfg, rng.derive(name))
        outcomes[name] = out
        robust[name] = ~out.success
    combined = np.logical_and.reduce([robust[n] for n in attacks])
    return WorstCaseResult({n: _percent(robust[n]) for n in attacks}, _percent(combined),
                           robust, combined, outcomes)


def transfer_eval(source: Pipeline, target: Pipeline, x, labels, attack: str, cfg: AttackConfig,
                  rng: Optional[RngStream] = None) -> float:
    """Robust accuracy (%) of ``target`` on adversarial examples crafted against ``source``."""
    x, labels = _prepare(x, labels)
    rng = rng or RngStream(cfg.rng_seed)
    adv = run_attack(attack, source, x, labels, cfg, rng.derive("source")).adversarial
    success, _ = judge(target, adv, labels, rng.derive("target-judge"))
    return _percent(~success)


def _percent(mask: np.ndarray) -> float:
    return 100.0 * float(np.mean(mask)) if mask.size else 0.0
