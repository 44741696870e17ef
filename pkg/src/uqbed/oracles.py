"""Slow, obviously-correct reference computations.

These share no code with the fast paths they check and are used by the
test suite and by ``uqbed selftest``.
"""

from __future__ import annotations

import math
from fractions import Fraction

import numpy as np


def auc_pairwise(in_scores, out_scores) -> Fraction:
    """Exact P(out > in) + 0.5 P(out == in) by comparing every (out, in) pair."""
    a = np.asarray(in_scores, dtype=float).ravel()
    b = np.asarray(out_scores, dtype=float).ravel()
    wins = 2 * int(np.count_nonzero(b[:, None] > a[None, :])) + int(np.count_nonzero(b[:, None] == a[None, :]))
    return Fraction(wins, 2 * len(a) * len(b))


def ward_bruteforce(points):
    """Agglomerate by recomputing every cluster-pair Ward linkage from member sets.

    Returns ``[(i, j, cost), ...]`` with the same node numbering and
    tie-break as the fast implementation's contract.
    """
    P = np.asarray(points, dtype=float)
    n = len(P)
    clusters = {i: [i] for i in range(n)}
    merges = []
    for step in range(n - 1):
        best = None
        ids = sorted(clusters)
        for a_pos, a in enumerate(ids):
            for b in ids[a_pos + 1:]:
                A, B = P[clusters[a]], P[clusters[b]]
                na, nb = len(A), len(B)
                d = A.mean(axis=0) - B.mean(axis=0)
                cost = na * nb / (na + nb) * float(d @ d)
                if best is None or cost < best[2]:
                    best = (a, b, cost)
        a, b, cost = best
        clusters[n + step] = clusters.pop(a) + clusters.pop(b)
        merges.append((a, b, cost))
    return merges


def ece_direct(probs, labels, num_bins: int = 15) -> float:
    """ECE by looping over bins and rows explicitly."""
    n = len(labels)
    total = 0.0
    edges = np.linspace(0.0, 1.0, num_bins + 1)
    for b in range(num_bins):
        lo, hi = edges[b], edges[b + 1]
        conf_sum = acc_sum = 0.0
        count = 0
        for p, y in zip(probs, labels):
            c = max(p)
            inside = lo <= c < hi or (b == num_bins - 1 and c == hi)
            if inside:
                count += 1
                conf_sum += c
                acc_sum += 1.0 if int(np.argmax(p)) == y else 0.0
        if count:
            total += count / n * abs(acc_sum / count - conf_sum / count)
    return total


def numeric_grad(f, params, h: float = 1e-5):
    """Central finite differences of scalar ``f()`` w.r.t. every entry of every array in ``params``."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        it = np.nditer(p, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            old = p[idx]
            p[idx] = old + h
            up = f()
            p[idx] = old - h
            down = f()
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def max_rel_error(a_list, b_list, floor: float = 1e-6) -> float:
    """Largest ``|a-b| / max(|a|+|b|, floor)`` over all entries."""
    worst = 0.0
    for a, b in zip(a_list, b_list):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        err = np.abs(a - b) / np.maximum(np.abs(a) + np.abs(b), floor)
        if err.size:
            worst = max(worst, float(err.max()))
    return worst


def temperature_grid(logits, labels, lo: float = 0.05, hi: float = 20.0, points: int = 400) -> float:
    """Best tau on a geometric grid of ``points`` values (NLL evaluated directly at each)."""
    Z = np.asarray(logits, dtype=float)
    if Z.ndim == 2:
        Z = Z[:, None, :]
    y = np.asarray(labels, dtype=int)
    rows = np.arange(len(y))
    best_tau, best = None, math.inf
    for tau in np.geomspace(lo, hi, points):
        e = np.exp((Z - Z.max(axis=-1, keepdims=True)) / tau)
        p = (e / e.sum(axis=-1, keepdims=True)).mean(axis=1)[rows, y]
        v = float(-np.mean(np.log(np.maximum(p, 1e-12))))
        if v < best:
            best_tau, best = float(tau), v
    return best_tau


def matmul_forward(params, x, dropout_masks=None):
    """Plain-loop ReLU MLP forward used to cross-check the engine (featurizer ReLU, linear head)."""
    h = [float(v) for v in x]
    n = len(params) // 2
    for layer in range(n):
        W, b = params[2 * layer], params[2 * layer + 1]
        out = []
        for j in range(W.shape[1]):
            s = float(b[j])
            for i in range(W.shape[0]):
                s += h[i] * float(W[i, j])
            out.append(s)
        if layer < n - 1:
            out = [max(v, 0.0) for v in out]
            if dropout_masks is not None:
                out = [v * float(m) for v, m in zip(out, dropout_masks[layer])]
        h = out
    return np.array(h)
