"""Quick oracle suites run by ``uqbed selftest``."""

from __future__ import annotations

import logging

import numpy as np

from . import metrics, oracles
from .algorithms import loss_for, one_hot
from .dataforge import ward_tree
from .netcore import Predictor, PredictorConfig, backward, forward

log = logging.getLogger(__name__)


def check_auc(n_pools: int = 20, seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    for _ in range(n_pools):
        a = rng.integers(0, 5, size=rng.integers(1, 40)).astype(float)
        b = rng.integers(0, 5, size=rng.integers(1, 40)).astype(float)
        if metrics.auc(a, b) != float(oracles.auc_pairwise(a, b)):
            return False
    return True


def check_ward(n_instances: int = 20, seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    for _ in range(n_instances):
        P = rng.normal(size=(rng.integers(2, 10), rng.integers(1, 4)))
        fast = ward_tree(P).merges
        slow = oracles.ward_bruteforce(P)
        for (i, j, c), (i2, j2, c2) in zip(fast, slow):
            if (i, j) != (i2, j2) or abs(c - c2) > 1e-9:
                return False
    return True


def check_gradients(n_nets: int = 5, seed: int = 0) -> bool:
    rng = np.random.default_rng(seed)
    for _ in range(n_nets):
        cfg = PredictorConfig(input_dim=3, num_classes=3, hidden_widths=(4,), feature_dim=3)
        pred = Predictor.init(cfg, int(rng.integers(1 << 30)))
        X = rng.normal(size=(4, 3))
        Y = one_hot(rng.integers(0, 3, size=4), 3)

        def loss():
            pred.touch()
            return loss_for("erm", forward(pred, X)[0], Y).loss

        z, tr = forward(pred, X)
        g = backward(pred, tr, loss_for("erm", z, Y).dlogits)
        num = oracles.numeric_grad(loss, pred.params)
        if oracles.max_rel_error(g, num) > 1e-4:
            return False
    return True


SUITES = {"auc": check_auc, "ward": check_ward, "gradients": check_gradients}


def run_all() -> bool:
    ok = True
    for name, fn in SUITES.items():
        passed = fn()
        log.info("selftest %-10s %s", name, "PASS" if passed else "FAIL")
        ok &= passed
    return ok
