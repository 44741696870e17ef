"""Temperature calibration and best-k ensembling."""

from __future__ import annotations

import math
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import minimize_scalar

from .netcore import input_jacobian, log_softmax, softmax

LOG_TAU_RANGE = (-3.0, 3.0)


class SelectionError(ValueError):
    pass


def _as_stack(logits) -> np.ndarray:
    Z = np.asarray(logits, dtype=float)
    return Z[:, None, :] if Z.ndim == 2 else Z


def nll_at_temperature(logits, labels, tau: float) -> float:
    """Mean NLL of ``mean_m softmax(z_m / tau)``; ``logits`` is ``(N, C)`` or ``(N, M, C)``."""
    Z = _as_stack(logits)
    y = np.asarray(labels, dtype=int)
    lp = log_softmax(Z, tau)[np.arange(len(y)), :, y]  # (N, M)
    m = lp.max(axis=1, keepdims=True)
    lmix = m[:, 0] + np.log(np.mean(np.exp(lp - m), axis=1))
    return float(-np.mean(np.maximum(lmix, np.log(1e-12))))


@dataclass
class CalibrationResult:
    tau: float
    val_nll_before: float
    val_nll_after: float
    trace: list[tuple[float, float]] = field(default_factory=list)


def calibrate_temperature(logits, labels, tol: float = 1e-4) -> CalibrationResult:
    """Fit tau by bounded scalar minimisation over log tau in [-3, 3].

    ``trace`` records every ``(log_tau, nll)`` evaluation.  The result is
    never worse than tau = 1.
    """
    y = np.asarray(labels, dtype=int)
    if len(y) == 0:
        raise ValueError("calibration needs a nonempty validation set")
    Z = _as_stack(logits)
    trace: list[tuple[float, float]] = []

    def f(t):
        v = nll_at_temperature(Z, y, math.exp(t))
        trace.append((t, v))
        return v

    r = minimize_scalar(f, bounds=LOG_TAU_RANGE, method="bounded", options={"xatol": tol})
    best_t, best = float(r.x), float(r.fun)
    before = f(0.0)
    if before < best:
        best_t, best = 0.0, before
    return CalibrationResult(math.exp(best_t), before, best, trace)


PROB_FLOOR = 1e-300


@dataclass
class Ensemble:
    """Average of member predictives with one shared temperature.

    Temperature acts on "calibration logits": the raw logits when the
    predictor is a single softmax, otherwise the log of the averaged
    predictive.  Both are monotone in the class scores, so calibration
    never changes the predicted class.  A ``k = 1`` ensemble is just the
    selected single model.
    """

    members: list
    tau: float = 1.0
    provenance: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if not self.members:
            raise ValueError("an ensemble needs at least one member")
        if len({id(m) for m in self.members}) != len(self.members):
            raise ValueError("ensemble members must be distinct")
        if not self.tau > 0:
            raise ValueError("tau must be positive")

    @property
    def k(self) -> int:
        return len(self.members)

    @property
    def algorithm(self) -> str:
        return self.members[0].algorithm

    @property
    def num_classes(self) -> int:
        return self.members[0].num_classes

    def _single_softmax(self, stack) -> bool:
        return self.k == 1 and stack.shape[1] == 1

    def raw_member_probs(self, X) -> np.ndarray:
        """``(K, N, C)`` uncalibrated member predictives."""
        return np.stack([m.predict_proba(X, 1.0, self.seed) for m in self.members])

    def calibration_logits(self, X) -> np.ndarray:
        if self.k == 1:
            stack = self.members[0].logit_stack(X, self.seed)
            if self._single_softmax(stack):
                return stack[:, 0, :]
            return np.log(np.maximum(softmax(stack, 1.0).mean(axis=1), PROB_FLOOR))
        return np.log(np.maximum(self.raw_member_probs(X).mean(axis=0), PROB_FLOOR))

    def predict_proba(self, X) -> np.ndarray:
        if self.tau == 1.0:
            if self.k == 1:
                return self.members[0].predict_proba(X, 1.0, self.seed)
            return self.raw_member_probs(X).mean(axis=0)
        return softmax(self.calibration_logits(X), self.tau)

    def member_probs(self, X) -> np.ndarray:
        """``(K, N, C)`` member predictives, each tempered by the shared tau."""
        P = self.raw_member_probs(X)
        if self.tau == 1.0:
            return P
        return softmax(np.log(np.maximum(P, PROB_FLOOR)), self.tau)

    def component_probs(self, X) -> np.ndarray:
        """Components whose disagreement the JS measure reads: members, or the stochastic passes of one model."""
        if self.k > 1:
            return self.member_probs(X)
        return np.moveaxis(softmax(self.members[0].logit_stack(X, self.seed), self.tau), 1, 0)

    def features(self, X):
        return self.members[0].features(X)

    def input_jacobian(self, X) -> np.ndarray:
        return np.mean([input_jacobian(m.predictor, X, self.tau) for m in self.members], axis=0)

    def calibrated(self, X_val, y_val) -> "Ensemble":
        """Copy with tau fit on the validation data."""
        r = calibrate_temperature(self.calibration_logits(X_val), y_val)
        prov = dict(self.provenance, calibration=(r.tau, r.val_nll_before, r.val_nll_after))
        return Ensemble(list(self.members), r.tau, prov, self.seed)


def ensemble_predict(ensemble: Ensemble, x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    p = ensemble.predict_proba(np.atleast_2d(x))
    return p[0] if x.ndim == 1 else p


def rank_trials(candidates) -> list[tuple[int, float]]:
    """Trials ordered by mean validation NLL over data seeds, ties to the lower index."""
    by_trial = defaultdict(list)
    for c in candidates:
        by_trial[c.trial].append(c.val_nll)
    means = [(t, float(np.mean(v))) for t, v in by_trial.items()]
    return sorted(means, key=lambda tv: (tv[1], tv[0]))


def ensemble_select(candidates, K: int) -> dict[int, Ensemble]:
    """Pick the best ``K`` hyper-parameter trials and build one ensemble per data seed.

    ``candidates`` need ``trial``, ``data_seed`` and ``val_nll`` attributes
    (plus the predictive interface if the ensemble will be evaluated).
    """
    per_seed = defaultdict(dict)
    for c in candidates:
        per_seed[c.data_seed][c.trial] = c
    # a trial missing any data seed (e.g. a failed run) is not eligible
    complete = [c for c in candidates if all(c.trial in trials for trials in per_seed.values())]
    ranked = rank_trials(complete)
    if K < 1 or len(ranked) < K:
        raise SelectionError(f"need {K} complete trials, have {len(ranked)}")
    chosen = [t for t, _ in ranked[:K]]
    out = {}
    for seed, trials in sorted(per_seed.items()):
        prov = {"trials": chosen, "mean_val_nll": {t: v for t, v in ranked[:K]}}
        out[seed] = Ensemble([trials[t] for t in chosen], provenance=prov)
    return out
