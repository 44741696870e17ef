"""The eight training procedures, sharing one SGD loop.

Each algorithm differs from plain ERM only through a batch transform
(Mixup, Soft labeler, MIMO), the network head (RBF, MIMO), dropout
(MC-Dropout) or an auxiliary student network trained on the frozen
features (RND, OC).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .dataforge import Dataset
from .netcore import (
    Predictor,
    PredictorConfig,
    SPECTRAL_STATIC_ITERS,
    SgdState,
    backward,
    forward,
    glorot_init,
    initial_spectral_vectors,
    log_softmax,
    read_arrays,
    sgd_step,
    softmax,
    write_arrays,
)

log = logging.getLogger(__name__)

ALGORITHMS = ("erm", "mixup", "softlabeler", "rbf", "rnd", "oc", "mcdropout", "mimo")


class TrainingError(RuntimeError):
    pass


class ContractError(ValueError):
    pass


@dataclass
class HyperParams:
    learning_rate: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    mixing_alpha: float = 0.3
    dropout_rate: float = 0.05
    num_passes: int = 10
    subnetworks: int = 2
    input_repetition: float = 0.6
    batch_repetition: int = 2
    teacher_width: int = 128
    teacher_depth: int = 3
    regularization: float = 0.0
    soft_label: float = 0.9

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class Seeds:
    init: int
    data: int = 0
    trial: int = 0


def _streams(init_seed: int) -> dict[str, np.random.Generator]:
    # Each concern owns its own stream so that e.g. auxiliary training never
    # perturbs the predictor's trajectory.
    names = ("init", "shuffle", "dropout", "algo", "aux", "predict")
    kids = np.random.SeedSequence(init_seed).spawn(len(names))
    return dict(zip(names, (np.random.default_rng(k) for k in kids)))


def algorithm_config(algorithm: str, base: PredictorConfig, hp: HyperParams) -> PredictorConfig:
    """Specialise a base architecture for one algorithm."""
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    if algorithm == "rbf":
        return replace(base, head_kind="rbf", mimo_heads=1, dropout_rate=0.0)
    if algorithm == "mimo":
        return replace(base, head_kind="mimo", mimo_heads=int(hp.subnetworks), dropout_rate=0.0)
    if algorithm == "mcdropout":
        return replace(base, head_kind="linear", mimo_heads=1, dropout_rate=hp.dropout_rate)
    return replace(base, head_kind="linear", mimo_heads=1, dropout_rate=0.0)


# -- auxiliary student / teacher networks (RND, OC) --------------------------

def _mlp_forward(params, x):
    hs = [x]
    h = x
    n = len(params) // 2
    for i in range(n):
        h = h @ params[2 * i] + params[2 * i + 1]
        if i < n - 1:
            h = np.maximum(h, 0.0)
        hs.append(h)
    return h, hs


def _mlp_backward(params, hs, g):
    n = len(params) // 2
    grads = [None] * len(params)
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            g = g * (hs[i + 1] > 0)
        grads[2 * i] = hs[i].T @ g
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ params[2 * i].T
    return grads


@dataclass
class AuxiliaryPair:
    """Student network and its frozen target.  ``teacher is None`` means the zero function (OC)."""

    student: list[np.ndarray]
    teacher: list[np.ndarray] | None
    regularization: float = 0.0

    @classmethod
    def init(cls, in_dim: int, width: int, depth: int, rng: np.random.Generator,
             orthogonal: bool = False, regularization: float = 0.0) -> "AuxiliaryPair":
        shapes = [(in_dim, width)] + [(width, width)] * (depth - 1)
        teacher = None if orthogonal else glorot_init(shapes, rng)
        student = glorot_init(shapes, rng)
        return cls(student, teacher, regularization)

    def student_out(self, features):
        return _mlp_forward(self.student, features)[0]

    def teacher_out(self, features):
        if self.teacher is None:
            return np.zeros((len(features), self.student[-1].shape[0]))
        return _mlp_forward(self.teacher, features)[0]


def oc_penalty(weights) -> float:
    """Sum of ``||W^T W - I||_F^2`` over the given weight matrices."""
    total = 0.0
    for W in weights:
        G = W.T @ W - np.eye(W.shape[1])
        total += float(np.sum(G * G))
    return total


def _oc_penalty_grad(W):
    return 4.0 * W @ (W.T @ W - np.eye(W.shape[1]))


def student_teacher_loss(features, pair: AuxiliaryPair):
    """Squared output distance between student and teacher, per row (or scalar for one row)."""
    f = np.asarray(features, dtype=float)
    single = f.ndim == 1
    F = f[None, :] if single else f
    d = pair.student_out(F) - pair.teacher_out(F)
    out = np.sum(d * d, axis=1)
    return float(out[0]) if single else out


def auxiliary_loss(pair: AuxiliaryPair, features, orthogonal: bool):
    """Mean student/teacher loss (+ orthogonality penalty for OC) and student gradients."""
    out, hs = _mlp_forward(pair.student, features)
    diff = out - pair.teacher_out(features)
    n = len(features)
    loss = float(np.sum(diff * diff)) / n
    grads = _mlp_backward(pair.student, hs, 2.0 * diff / n)
    if orthogonal and pair.regularization > 0:
        Ws = pair.student[0::2]
        loss += pair.regularization * oc_penalty(Ws)
        for i, W in enumerate(Ws):
            grads[2 * i] = grads[2 * i] + pair.regularization * _oc_penalty_grad(W)
    return loss, grads


# -- batch transforms ---------------------------------------------------------

def one_hot(labels, num_classes: int) -> np.ndarray:
    return np.eye(num_classes)[np.asarray(labels, dtype=int)]


def mixup_batch(X, Y, alpha: float, rng: np.random.Generator, lam: float | None = None):
    """Mix each row with a partner from a seeded in-batch permutation, one lambda per batch.

    Returns ``(X_mixed, Y_mixed, lam, perm)``.  ``lam`` may be forced.
    """
    if not alpha > 0:
        raise ValueError("mixup alpha must be positive")
    perm = rng.permutation(len(X))
    drawn = rng.beta(alpha, alpha)
    lam = drawn if lam is None else lam
    Xm = lam * X + (1.0 - lam) * X[perm]
    Ym = lam * Y + (1.0 - lam) * Y[perm]
    return Xm, Ym, lam, perm


def soften_labels(onehot, lmax: float) -> np.ndarray:
    """Replace the one by ``lmax`` and each zero by ``(1 - lmax) / (C - 1)``."""
    Y = np.asarray(onehot, dtype=float)
    C = Y.shape[-1]
    if not (1.0 / C < lmax <= 1.0):
        raise ValueError(f"soft label value must lie in (1/{C}, 1], got {lmax}")
    lmin = (1.0 - lmax) / (C - 1)
    return np.where(Y == 1.0, lmax, lmin)


def mimo_compose(X, Y, T: int, rho: float, batch_repetition: int, rng: np.random.Generator):
    """Stack T examples per row for a MIMO network.

    The batch is tiled ``batch_repetition`` times.  Slot 0 holds the row's own
    example; the other slots hold independent in-batch permutations, except
    that with probability ``rho`` a row reuses slot 0 in every slot.
    Returns inputs ``(N, T*d)`` and targets ``(N, T, C)``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if batch_repetition > 1:
        X = np.tile(X, (batch_repetition, 1))
        Y = np.tile(Y, (batch_repetition, 1))
    n = len(X)
    if T == 1:
        return X, Y[:, None, :]
    idx = np.empty((n, T), dtype=int)
    idx[:, 0] = np.arange(n)
    for t in range(1, T):
        idx[:, t] = rng.permutation(n)
    repeat = rng.random(n) < rho
    idx[repeat, 1:] = idx[repeat, :1]
    return X[idx].reshape(n, -1), Y[idx]


def rbf_transform(z):
    z = np.asarray(z, dtype=float)
    return np.exp(-z * z)


# -- losses -------------------------------------------------------------------

@dataclass
class LossResult:
    loss: float
    dlogits: np.ndarray
    aux_loss: float = 0.0
    aux_grads: list | None = None

    @property
    def total(self) -> float:
        return self.loss + self.aux_loss


def loss_for(algorithm: str, logits, targets, hp: HyperParams | None = None,
             pair: AuxiliaryPair | None = None, features=None) -> LossResult:
    """Cross-entropy of the predictor (summed over heads) plus the auxiliary term for RND/OC.

    ``targets`` are probability vectors shaped ``(N, C)`` or ``(N, T, C)``.
    The auxiliary term only produces student gradients; ``features`` are
    treated as constants.
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    Y = np.asarray(targets, dtype=float)
    if Y.ndim == 2:
        Y = Y[:, None, :]
    if np.any(Y < -1e-6) or np.any(np.abs(Y.sum(axis=-1) - 1.0) > 1e-6):
        raise ContractError("targets must be probability vectors")
    n, T, C = Y.shape
    Z = np.asarray(logits, dtype=float).reshape(n, T, C)
    lp = log_softmax(Z)
    loss = float(-np.sum(Y * lp)) / n
    dlogits = ((np.exp(lp) - Y) / n).reshape(n, T * C)
    res = LossResult(loss, dlogits)
    if algorithm in ("rnd", "oc"):
        if pair is None or features is None:
            raise ContractError(f"{algorithm} loss needs the auxiliary pair and features")
        res.aux_loss, res.aux_grads = auxiliary_loss(pair, features, algorithm == "oc")
    return res


# -- trained models -----------------------------------------------------------

@dataclass
class TrainedModel:
    predictor: Predictor
    algorithm: str
    hparams: HyperParams
    seeds: Seeds
    auxiliary: AuxiliaryPair | None = None
    train_loss: list[float] = field(default_factory=list)
    val_nll_log: list[float] = field(default_factory=list)
    mixup_means: tuple[np.ndarray, np.ndarray] | None = None
    batch_loss: list[float] = field(default_factory=list)  # not persisted

    @property
    def trial(self) -> int:
        return self.seeds.trial

    @property
    def data_seed(self) -> int:
        return self.seeds.data

    @property
    def val_nll(self) -> float:
        return self.val_nll_log[-1] if self.val_nll_log else float("nan")

    @property
    def num_classes(self) -> int:
        return self.predictor.config.num_classes

    def logit_stack(self, X, seed: int = 0) -> np.ndarray:
        """Logits shaped ``(N, M, C)``; the predictive is the mean over M of their softmaxes.

        M is 1 for plain heads, T for MIMO (replicated input) and the number
        of stochastic passes for MC-Dropout.
        """
        cfg = self.predictor.config
        X = np.atleast_2d(np.asarray(X, dtype=float))
        C = cfg.num_classes
        if self.algorithm == "mcdropout":
            rng = np.random.default_rng(seed)
            passes = [forward(self.predictor, X, "eval", rng=rng, stochastic=True)[0]
                      for _ in range(self.hparams.num_passes)]
            return np.stack(passes, axis=1)
        T = cfg.n_heads
        Xin = np.tile(X, (1, T)) if T > 1 else X
        z, _ = forward(self.predictor, Xin, "eval")
        return z.reshape(len(X), T, C)

    def predict_proba(self, X, tau: float = 1.0, seed: int = 0) -> np.ndarray:
        return softmax(self.logit_stack(X, seed), tau).mean(axis=1)

    def features(self, X) -> np.ndarray:
        cfg = self.predictor.config
        X = np.atleast_2d(np.asarray(X, dtype=float))
        Xin = np.tile(X, (1, cfg.n_heads)) if cfg.n_heads > 1 else X
        return forward(self.predictor, Xin, "eval")[1].features


def mimo_predict(model: TrainedModel | Predictor, x) -> np.ndarray:
    """Replicate ``x`` into every MIMO slot and average the per-head softmaxes."""
    pred = model.predictor if isinstance(model, TrainedModel) else model
    cfg = pred.config
    if cfg.head_kind != "mimo":
        raise ValueError("mimo_predict needs a MIMO head")
    x = np.asarray(x, dtype=float)
    X = np.atleast_2d(x)
    z, _ = forward(pred, np.tile(X, (1, cfg.n_heads)), "eval")
    p = softmax(z.reshape(len(X), cfg.n_heads, cfg.num_classes)).mean(axis=1)
    return p[0] if x.ndim == 1 else p


def mean_nll(probs, labels) -> float:
    p = probs[np.arange(len(labels)), labels]
    return float(np.mean(-np.log(np.maximum(p, 1e-12))))


def train_run(algorithm: str, config: PredictorConfig, hp: HyperParams, train: Dataset,
              val: Dataset, seeds: Seeds, *, epochs: int = 60, batch_size: int = 64,
              schedule_period: int = 20, mixup_lambda: float | None = None) -> TrainedModel:
    """Train one model; the result is fully determined by the arguments.

    ``mixup_lambda`` pins the Mixup coefficient (a diagnostic; the draw is
    still consumed so the random streams do not shift).
    """
    if algorithm not in ALGORITHMS:
        raise ValueError(f"unknown algorithm {algorithm!r}")
    C = config.num_classes
    if train.labels.max() >= C or val.labels.max() >= C:
        raise ValueError("labels must be contiguous in 0..C-1")
    cfg = algorithm_config(algorithm, config, hp)
    rngs = _streams(seeds.init)
    params = glorot_init(cfg.layer_shapes(), rngs["init"])
    if cfg.spectral_norm:
        pred = Predictor(cfg, params, initial_spectral_vectors(cfg, rngs["init"]))
        pred.refresh_spectral(SPECTRAL_STATIC_ITERS, converge=True)
    else:
        pred = Predictor(cfg, params)
    pred.rng = rngs["dropout"]
    pair = None
    if algorithm in ("rnd", "oc"):
        pair = AuxiliaryPair.init(cfg.feature_dim, hp.teacher_width, hp.teacher_depth, rngs["aux"],
                                  orthogonal=algorithm == "oc", regularization=hp.regularization)
    opt = SgdState(hp.learning_rate, hp.momentum, hp.weight_decay, schedule_period=schedule_period)
    aux_opt = SgdState(hp.learning_rate, hp.momentum, hp.weight_decay, schedule_period=schedule_period)
    model = TrainedModel(pred, algorithm, hp, seeds, pair)
    if algorithm == "mixup":
        model.mixup_means = (train.features.mean(axis=0), one_hot(train.labels, C).mean(axis=0))

    X_all, Y_all = train.features, one_hot(train.labels, C)
    n = len(train)
    algo_rng = rngs["algo"]
    for epoch in range(epochs):
        lr = opt.lr_at(epoch)
        perm = rngs["shuffle"].permutation(n)
        total, seen = 0.0, 0
        for b, start in enumerate(range(0, n, batch_size)):
            idx = perm[start:start + batch_size]
            X, Y = X_all[idx], Y_all[idx]
            if algorithm == "mixup":
                X, Y, _, _ = mixup_batch(X, Y, hp.mixing_alpha, algo_rng, mixup_lambda)
            elif algorithm == "softlabeler":
                Y = soften_labels(Y, hp.soft_label)
            if algorithm == "mimo":
                Xs, Ys = mimo_compose(X, Y, cfg.n_heads, hp.input_repetition,
                                      int(hp.batch_repetition), algo_rng)
            else:
                Xs, Ys = X, Y[:, None, :]
            if cfg.spectral_norm:
                pred.refresh_spectral(1)
            # overflow here means divergence, which the finiteness check reports
            with np.errstate(over="ignore", invalid="ignore"):
                logits, trace = forward(pred, Xs, "train")
                res = loss_for(algorithm, logits, Ys, hp, pair, trace.features)
            if not np.isfinite(res.total):
                raise TrainingError(f"non-finite loss: algorithm={algorithm} epoch={epoch} batch={b}")
            grads = backward(pred, trace, res.dlogits)
            sgd_step(opt, pred.params, grads, lr)
            pred.touch()
            if pair is not None:
                sgd_step(aux_opt, pair.student, res.aux_grads, lr)
            model.batch_loss.append(res.total)
            total += res.total * len(idx)
            seen += len(idx)
        if cfg.spectral_norm and epoch == epochs - 1:
            pred.refresh_spectral(SPECTRAL_STATIC_ITERS, converge=True)
        model.train_loss.append(total / seen)
        vnll = mean_nll(model.predict_proba(val.features), val.labels)
        if not np.isfinite(vnll):
            raise TrainingError(f"non-finite validation NLL: algorithm={algorithm} epoch={epoch}")
        model.val_nll_log.append(vnll)
        log.debug("%s epoch %d loss %.4f val_nll %.4f", algorithm, epoch, model.train_loss[-1], vnll)
    return model


# -- persistence --------------------------------------------------------------

def save_model(path, model: TrainedModel, extra: dict | None = None):
    groups = {"params": model.predictor.params, "spectral": model.predictor.spectral}
    if model.auxiliary is not None:
        groups["student"] = model.auxiliary.student
        groups["teacher"] = model.auxiliary.teacher or []
    if model.mixup_means is not None:
        groups["mixup_means"] = list(model.mixup_means)
    meta = {
        "config": model.predictor.config.to_dict(),
        "algorithm": model.algorithm,
        "hparams": model.hparams.to_dict(),
        "seeds": asdict(model.seeds),
        "train_loss": model.train_loss,
        "val_nll_log": model.val_nll_log,
        "auxiliary": None if model.auxiliary is None else {
            "orthogonal": model.auxiliary.teacher is None,
            "regularization": model.auxiliary.regularization},
    }
    meta.update(extra or {})
    write_arrays(path, groups, meta)


def load_model(path) -> TrainedModel:
    groups, meta = read_arrays(path)
    cfg = PredictorConfig.from_dict(meta["config"])
    pred = Predictor(cfg, groups["params"], groups["spectral"] or [])
    pair = None
    if meta.get("auxiliary") is not None:
        a = meta["auxiliary"]
        pair = AuxiliaryPair(groups["student"], None if a["orthogonal"] else groups["teacher"],
                             a["regularization"])
    model = TrainedModel(pred, meta["algorithm"], HyperParams(**meta["hparams"]), Seeds(**meta["seeds"]),
                         pair, list(meta["train_loss"]), list(meta["val_nll_log"]))
    if "mixup_means" in groups:
        model.mixup_means = tuple(groups["mixup_means"])
    return model
