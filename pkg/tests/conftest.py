import time

import numpy as np
import pytest

from keyens.ensemble import RandomEnsemble
from keyens.harness.data import gen_synthetic
from keyens.model import SubModel, init_model
from keyens.transform import gen_key

ACCEPTANCE_LINES: list[str] = []
SUITE_LIMIT_S = 600.0
_started = time.perf_counter()


def pytest_sessionfinish(session, exitstatus):
    if not ACCEPTANCE_LINES:
        return
    elapsed = time.perf_counter() - _started
    ok = elapsed < SUITE_LIMIT_S
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'} 11b suite runtime: {elapsed:.1f}s (limit {SUITE_LIMIT_S:.0f}s)")
    if not ok:
        session.exitstatus = pytest.ExitCode.TESTS_FAILED


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


def smoke_dict(tmp_path=None, **attack):
    """Tiny 16x16 experiment with two attacks on 50 test images."""
    return {
        "version": 1,
        "seed": 7,
        "dataset": {"kind": "synthetic", "num_classes": 10, "height": 16, "width": 16, "channels": 3,
                    "train_per_class": 100, "test_per_class": 5},
        "model": {"hidden": [64], "epochs": 30},
        "attack": {"names": ["pgd", "square"], "iterations": 10, "query_budget": 40, **attack},
        "eval": {"num_eval": 50},
        "output": {"dir": str(tmp_path / "out") if tmp_path else "runs/smoke"},
    }


def tiny_ensemble(n=4, s=3, shape=(4, 4, 1), num_classes=3, hidden=(5,), seed=0, block=2):
    """Randomly initialised (untrained) members; enough for inference plumbing tests."""
    h, w, c = shape
    members = []
    for i in range(n):
        key = gen_key(100 + i, block, c)
        m = init_model((h * w * c, *hidden, num_classes), seed * 1000 + i, key.key_id)
        for b in m.biases:
            b += 0.1 * (i + 1)
        members.append((key, m))
    return RandomEnsemble(members, s, rng_seed=seed)


def constant_member(key, d0, logits) -> SubModel:
    k = len(logits)
    return SubModel(key.key_id, (d0, k), [np.zeros((d0, k))], [np.asarray(logits, dtype=np.float64)])


@pytest.fixture(scope="session")
def small_task():
    """A small instance of the default synthetic task (train, test)."""
    train = gen_synthetic(10, 16, 16, 3, 60, seed=3, split="train")
    test = gen_synthetic(10, 16, 16, 3, 10, seed=3, split="test")
    return train, test
