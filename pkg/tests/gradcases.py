"""Randomized gradient-check instances shared by the unit and acceptance suites."""

import numpy as np

from uqbed import oracles
from uqbed.algorithms import (
    ALGORITHMS,
    AuxiliaryPair,
    HyperParams,
    algorithm_config,
    auxiliary_loss,
    loss_for,
    mimo_compose,
    mixup_batch,
    one_hot,
    soften_labels,
)
from uqbed.netcore import Predictor, PredictorConfig, backward, forward

H = 1e-5


def build_case(algorithm, spectral, seed):
    """A tiny predictor plus batch for ``algorithm``; returns a dict of closures."""
    rng = np.random.default_rng(seed)
    d, C, n = 3, 3, 5
    hp = HyperParams(dropout_rate=0.3, subnetworks=2, input_repetition=0.5, teacher_width=4,
                     teacher_depth=2, regularization=0.5, soft_label=0.8, mixing_alpha=0.4)
    base = PredictorConfig(input_dim=d, num_classes=C, hidden_widths=(4,), feature_dim=3,
                           spectral_norm=spectral)
    cfg = algorithm_config(algorithm, base, hp)
    pred = Predictor.init(cfg, int(rng.integers(1 << 31)))
    # random biases so no layer sits at an all-zero kink
    for i in range(1, len(pred.params), 2):
        pred.params[i] = 0.1 * rng.normal(size=pred.params[i].shape)
    X = rng.normal(size=(n, d))
    Y = one_hot(rng.integers(0, C, size=n), C)
    if algorithm == "mixup":
        X, Y, _, _ = mixup_batch(X, Y, hp.mixing_alpha, rng)
    elif algorithm == "softlabeler":
        Y = soften_labels(Y, hp.soft_label)
    if algorithm == "mimo":
        Xs, Ys = mimo_compose(X, Y, cfg.n_heads, hp.input_repetition, 1, rng)
    else:
        Xs, Ys = X, Y
    pair = None
    if algorithm in ("rnd", "oc"):
        pair = AuxiliaryPair.init(cfg.feature_dim, hp.teacher_width, hp.teacher_depth, rng,
                                  orthogonal=algorithm == "oc", regularization=hp.regularization)
        for i in range(1, len(pair.student), 2):
            pair.student[i] = 0.1 * rng.normal(size=pair.student[i].shape)
    drop_seed = int(rng.integers(1 << 31))

    def run():
        return forward(pred, Xs, "train", rng=np.random.default_rng(drop_seed))

    def loss():
        z, tr = run()
        return loss_for(algorithm, z, Ys, hp, pair, tr.features).loss

    def analytic():
        pred.touch()
        z, tr = run()
        res = loss_for(algorithm, z, Ys, hp, pair, tr.features)
        return backward(pred, tr, res.dlogits), res, tr

    return {"pred": pred, "pair": pair, "loss": loss, "analytic": analytic, "hp": hp,
            "orthogonal": algorithm == "oc"}


def check_case(algorithm, spectral, seed) -> float:
    """Largest relative error between reverse-mode and central-difference gradients."""
    case = build_case(algorithm, spectral, seed)
    grads, res, tr = case["analytic"]()
    worst = oracles.max_rel_error(grads, oracles.numeric_grad(case["loss"], case["pred"].params, H))
    pair = case["pair"]
    if pair is not None:
        feats = tr.features.copy()

        def aux():
            return auxiliary_loss(pair, feats, case["orthogonal"])[0]

        num = oracles.numeric_grad(aux, pair.student, H)
        worst = max(worst, oracles.max_rel_error(res.aux_grads, num))
    return worst


def all_cases(per_combo=4):
    """Every algorithm's loss, with and without spectral layers, ``per_combo`` seeds each."""
    for k in range(per_combo):
        for spectral in (False, True):
            for alg in ALGORITHMS:
                yield alg, spectral, 1000 * k + 17 * ALGORITHMS.index(alg) + int(spectral)
