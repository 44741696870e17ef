"""In-domain and out-domain evaluation metrics."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

NLL_FLOOR = 1e-12


def acc_topk(probs, labels, k: int = 1) -> float:
    """Fraction of rows whose label is among the ``k`` largest probabilities.

    Ties in probability are ordered by lowest class index.
    """
    P = np.asarray(probs, dtype=float)
    y = np.asarray(labels, dtype=int)
    C = P.shape[1]
    if not 1 <= k <= C:
        raise ValueError(f"k must lie in [1, {C}], got {k}")
    order = np.argsort(-P, axis=1, kind="stable")[:, :k]
    return float(np.mean(np.any(order == y[:, None], axis=1)))


def nll(probs, labels) -> float:
    P = np.asarray(probs, dtype=float)
    y = np.asarray(labels, dtype=int)
    p = P[np.arange(len(y)), y]
    return float(np.mean(-np.log(np.maximum(p, NLL_FLOOR))))


def ece(probs, labels, num_bins: int = 15) -> float:
    """Expected calibration error over equal-width confidence bins.

    Bin ``b`` covers ``[b/B, (b+1)/B)``; the last bin is closed at 1.
    """
    if num_bins < 1:
        raise ValueError("num_bins must be >= 1")
    P = np.asarray(probs, dtype=float)
    y = np.asarray(labels, dtype=int)
    conf = P.max(axis=1)
    correct = (np.argmax(P, axis=1) == y).astype(float)
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    bins = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, num_bins - 1)
    n = len(y)
    total = 0.0
    for b in range(num_bins):
        m = bins == b
        cnt = int(m.sum())
        if cnt:
            total += cnt / n * abs(correct[m].mean() - conf[m].mean())
    return total


def auc(in_scores, out_scores) -> float:
    """P(out score > in score) with ties counted one half, via average ranks."""
    a = np.asarray(in_scores, dtype=float).ravel()
    b = np.asarray(out_scores, dtype=float).ravel()
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both score pools must be nonempty")
    ranks = rankdata(np.concatenate([a, b]))  # average ranks: exact half-integers
    u = ranks[len(a):].sum() - len(b) * (len(b) + 1) / 2.0
    return u / (len(a) * len(b))


def quantile_threshold(val_scores, level: float = 0.95) -> float:
    """Nearest-rank quantile: the ceil(level * n)-th smallest score."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    s = np.sort(np.asarray(val_scores, dtype=float).ravel())
    if len(s) == 0:
        raise ValueError("validation pool is empty")
    r = max(1, math.ceil(round(level * len(s), 9)))
    return float(s[r - 1])


def confusion_rates(in_scores, out_scores, theta: float) -> dict[str, float]:
    """Rates of the rule "out-domain iff score > theta"."""
    a = np.asarray(in_scores, dtype=float).ravel()
    b = np.asarray(out_scores, dtype=float).ravel()
    if len(a) == 0 or len(b) == 0:
        raise ValueError("both score pools must be nonempty")
    in_out = int(np.sum(a > theta))
    out_out = int(np.sum(b > theta))
    return {
        "InAsIn": (len(a) - in_out) / len(a),
        "InAsOut": in_out / len(a),
        "OutAsIn": (len(b) - out_out) / len(b),
        "OutAsOut": out_out / len(b),
    }


def in_domain_metrics(probs, labels, num_bins: int = 15) -> dict[str, float]:
    C = np.asarray(probs).shape[1]
    return {
        "ACC@1": acc_topk(probs, labels, 1),
        "ACC@5": acc_topk(probs, labels, min(5, C)),
        "ECE": ece(probs, labels, num_bins),
        "NLL": nll(probs, labels),
    }


def out_domain_metrics(val_scores, in_scores, out_scores, level: float = 0.95) -> dict[str, float]:
    theta = quantile_threshold(val_scores, level)
    out = {"AUC": auc(in_scores, out_scores)}
    out.update(confusion_rates(in_scores, out_scores, theta))
    return out
