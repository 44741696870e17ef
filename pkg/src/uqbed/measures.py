"""Uncertainty measures: small for in-domain inputs, large for out-domain ones.

Softmax statistics operate on probability rows (one row or an ``(N, C)``
batch).  Model-level measures take anything exposing the predictive
interface of :class:`uqbed.posthoc.Ensemble` (a single trained model is
wrapped as a one-member ensemble).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp

from .netcore import input_jacobian

MEASURES = ("largest", "gap", "entropy", "jacobian", "gmm", "augment", "native")


class MeasureError(ValueError):
    """A measure was asked of a model that does not support it."""


class FitError(ValueError):
    pass


def _rows(p):
    p = np.asarray(p, dtype=float)
    return p[None, :] if p.ndim == 1 else p, p.ndim == 1


def _out(v, single):
    return float(v[0]) if single else v


def sorted_scores(p) -> np.ndarray:
    """Softmax scores in decreasing order along the last axis."""
    return -np.sort(-np.asarray(p, dtype=float), axis=-1)


def score_largest(p):
    P, single = _rows(p)
    return _out(-P.max(axis=1), single)


def score_gap(p):
    P, single = _rows(p)
    if P.shape[1] < 2:
        raise ValueError("softmax gap needs at least two classes")
    s = sorted_scores(P)
    return _out(s[:, 1] - s[:, 0], single)


def score_entropy(p):
    P, single = _rows(p)
    logs = np.log(np.where(P > 0, P, 1.0))
    return _out(-np.sum(np.where(P > 0, P * logs, 0.0), axis=1), single)


def score_jacobian(model, x):
    """Squared Frobenius norm of the predictive's input Jacobian.

    ``model`` is a Predictor or an Ensemble; for ensembles the Jacobian of
    the member average is taken.
    """
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    if hasattr(model, "input_jacobian"):
        J = model.input_jacobian(X)
    else:
        J = input_jacobian(model, X)
    return _out(np.sum(J * J, axis=(1, 2)), x.ndim == 1)


# -- class-conditional Gaussian density --------------------------------------

@dataclass
class GmmModel:
    means: np.ndarray        # (C, k)
    covariances: np.ndarray  # (C, k, k)
    weights: np.ndarray      # (C,)

    @property
    def dim(self) -> int:
        return self.means.shape[1]

    def log_densities(self, F) -> np.ndarray:
        """``(N, C)`` log N(f; mu_c, Sigma_c)."""
        F = np.atleast_2d(np.asarray(F, dtype=float))
        k = self.dim
        out = np.empty((len(F), len(self.weights)))
        for c in range(len(self.weights)):
            L = np.linalg.cholesky(self.covariances[c])
            sol = np.linalg.solve(L, (F - self.means[c]).T)
            maha = np.sum(sol * sol, axis=0)
            logdet = 2.0 * np.sum(np.log(np.diag(L)))
            out[:, c] = -0.5 * (maha + logdet + k * np.log(2 * np.pi))
        return out


def fit_gmm(features, labels, num_classes: int | None = None, ridge: float | None = None) -> GmmModel:
    """One full-covariance Gaussian per class.

    Covariances use the biased (1/n) estimator plus ``eps * I`` with
    ``eps = 1e-6 * trace / k`` unless ``ridge`` overrides it.
    """
    F = np.asarray(features, dtype=float)
    y = np.asarray(labels, dtype=int)
    C = int(num_classes if num_classes is not None else y.max() + 1)
    k = F.shape[1]
    means = np.empty((C, k))
    covs = np.empty((C, k, k))
    counts = np.bincount(y, minlength=C)
    for c in range(C):
        if counts[c] < 2:
            raise FitError(f"class {c} has {counts[c]} examples; at least 2 are needed")
        Fc = F[y == c]
        mu = Fc.mean(axis=0)
        D = Fc - mu
        S = D.T @ D / len(Fc)
        eps = 1e-6 * np.trace(S) / k if ridge is None else ridge
        if ridge is None and eps <= 0:
            eps = 1e-6
        means[c] = mu
        covs[c] = S + eps * np.eye(k)
    return GmmModel(means, covs, counts / counts.sum())


def score_gmm(gmm: GmmModel, feature):
    """Minus the class-weighted sum of Gaussian densities (densities, not log-densities)."""
    f = np.asarray(feature, dtype=float)
    ld = gmm.log_densities(f)
    with np.errstate(divide="ignore"):
        logw = np.log(gmm.weights)
    return _out(-np.exp(logsumexp(ld + logw, axis=1)), f.ndim == 1)


def gmm_log_density(gmm: GmmModel, feature):
    """log of the class-weighted density sum; ``-exp`` of this is :func:`score_gmm`."""
    f = np.asarray(feature, dtype=float)
    with np.errstate(divide="ignore"):
        logw = np.log(gmm.weights)
    return _out(logsumexp(gmm.log_densities(f) + logw, axis=1), f.ndim == 1)


# -- model-level measures -----------------------------------------------------

def score_augment(model, x, A: int = 8, noise_scale: float = 0.1, seed: int = 0):
    """Largest-softmax measure on the prediction averaged over ``A`` noisy copies of ``x``."""
    if A < 1:
        raise ValueError("A must be >= 1")
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    rng = np.random.default_rng(seed)
    acc = np.zeros((len(X), model.num_classes))
    for _ in range(A):
        acc += model.predict_proba(X + noise_scale * rng.normal(size=X.shape))
    return _out(-(acc / A).max(axis=1), x.ndim == 1)


def native_mixup(model, x, xbar, ybar, alpha: float, S: int = 8, seed: int = 0, lams=None):
    """Mean over ``S`` Beta(alpha, alpha) draws of the Mixup-criterion violation.

    ``||lam f(x) + (1-lam) ybar - f(lam x + (1-lam) xbar)||^2``; ``lams`` forces
    the lambda values.
    """
    if xbar is None or ybar is None:
        raise MeasureError("native mixup needs the training averages (xbar, ybar)")
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    if lams is None:
        lams = np.random.default_rng(seed).beta(alpha, alpha, size=S)
    fx = model.predict_proba(X)
    total = np.zeros(len(X))
    for lam in np.atleast_1d(lams):
        d = lam * fx + (1 - lam) * ybar - model.predict_proba(lam * X + (1 - lam) * xbar)
        total += np.sum(d * d, axis=1)
    return _out(total / len(np.atleast_1d(lams)), x.ndim == 1)


def native_student_teacher(model, x):
    """Squared disagreement between the RND/OC student and its teacher on the features of ``x``."""
    pair = getattr(model, "auxiliary", None)
    if pair is None:
        raise MeasureError("model has no auxiliary student/teacher pair")
    x = np.asarray(x, dtype=float)
    F = model.features(np.atleast_2d(x))
    d = pair.student_out(F) - pair.teacher_out(F)
    return _out(np.sum(d * d, axis=1), x.ndim == 1)


def native_softlabel(p, lmax: float):
    P, single = _rows(p)
    return _out((P.max(axis=1) - lmax) ** 2, single)


def native_js(members):
    """Entropy of the mean member prediction minus the mean member entropy.

    ``members`` is ``(K, C)`` for one input or ``(K, N, C)`` for a batch.
    """
    M = np.asarray(members, dtype=float)
    single = M.ndim == 2
    if single:
        M = M[:, None, :]
    K, N, C = M.shape
    mean_h = score_entropy(M.reshape(K * N, C)).reshape(K, N).mean(axis=0)
    val = score_entropy(M.mean(axis=0)) - mean_h
    val = np.maximum(val, 0.0)
    return _out(val, single)


# -- dispatch -----------------------------------------------------------------

NATIVE_KIND = {
    "mixup": "mixup",
    "rnd": "student_teacher",
    "oc": "student_teacher",
    "softlabeler": "softlabel",
    "mcdropout": "js",
}


def native_kind(algorithm: str, k: int) -> str:
    """Which Native measure applies; ensembles of several members always use JS divergence."""
    if k > 1:
        return "js"
    try:
        return NATIVE_KIND[algorithm]
    except KeyError:
        raise MeasureError(f"algorithm {algorithm!r} has no native measure") from None


@dataclass
class MeasureContext:
    """Fitted state and knobs a measure may need."""

    gmm: list[GmmModel] | None = None
    augment_count: int = 8
    augment_noise: float = 0.1
    seed: int = 0
    mixup_draws: int = 8
    # rank GMM by -log density: same order as the raw score, without underflow ties
    gmm_log: bool = True


def requires_fit(measure: str) -> bool:
    return measure == "gmm"


def fit_measure(measure: str, ensemble, X_val, y_val, ctx: MeasureContext | None = None) -> MeasureContext:
    """Fit any state ``measure`` needs on in-domain validation data."""
    ctx = ctx or MeasureContext()
    if measure == "gmm":
        ctx.gmm = [fit_gmm(m.features(X_val), y_val, m.num_classes) for m in ensemble.members]
    return ctx


def score(measure: str, ensemble, X, ctx: MeasureContext | None = None) -> np.ndarray:
    """Score every row of ``X``; ``ensemble`` is a :class:`uqbed.posthoc.Ensemble`."""
    ctx = ctx or MeasureContext()
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if measure == "largest":
        return score_largest(ensemble.predict_proba(X))
    if measure == "gap":
        return score_gap(ensemble.predict_proba(X))
    if measure == "entropy":
        return score_entropy(ensemble.predict_proba(X))
    if measure == "jacobian":
        return score_jacobian(ensemble, X)
    if measure == "augment":
        return score_augment(ensemble, X, ctx.augment_count, ctx.augment_noise, ctx.seed)
    if measure == "gmm":
        if ctx.gmm is None:
            raise MeasureError("gmm measure used before fitting")
        if not ctx.gmm_log:
            return np.mean([score_gmm(g, m.features(X)) for g, m in zip(ctx.gmm, ensemble.members)], axis=0)
        L = np.stack([np.atleast_1d(gmm_log_density(g, m.features(X))) for g, m in zip(ctx.gmm, ensemble.members)])
        return -(logsumexp(L, axis=0) - np.log(len(L)))
    if measure == "native":
        kind = native_kind(ensemble.algorithm, ensemble.k)
        if kind == "js":
            return native_js(ensemble.component_probs(X))
        member = ensemble.members[0]
        if kind == "mixup":
            xbar, ybar = member.mixup_means if member.mixup_means is not None else (None, None)
            return native_mixup(ensemble, X, xbar, ybar, member.hparams.mixing_alpha,
                                ctx.mixup_draws, ctx.seed)
        if kind == "student_teacher":
            return native_student_teacher(member, X)
        return native_softlabel(ensemble.predict_proba(X), member.hparams.soft_label)
    raise ValueError(f"unknown measure {measure!r}")
