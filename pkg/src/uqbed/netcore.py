"""Small feedforward network engine with hand-written reverse mode.

A predictor is a ReLU featurizer followed by a classification head::

    x -> [Linear -> ReLU -> Dropout] * L -> features -> head -> logits

Weights are stored as ``(fan_in, fan_out)`` matrices so a layer computes
``h @ W + b`` on row-major batches.  Everything is float64.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

SPECTRAL_EPS = 1e-12
SPECTRAL_STATIC_ITERS = 30

TIERS = {
    "small": ((64, 64), 32),
    "large": ((256, 256, 256), 128),
}
HEAD_KINDS = ("linear", "rbf", "mimo")


class ShapeError(ValueError):
    """Input or parameter shapes disagree with the predictor config."""


class StaleTraceError(RuntimeError):
    """A trace was replayed against parameters that changed after the forward pass."""


@dataclass(frozen=True)
class PredictorConfig:
    input_dim: int
    num_classes: int
    hidden_widths: tuple[int, ...] = (64, 64)
    feature_dim: int = 32
    head_kind: str = "linear"
    mimo_heads: int = 1
    dropout_rate: float = 0.0
    spectral_norm: bool = False
    size_tier: str = "small"

    def __post_init__(self):
        object.__setattr__(self, "hidden_widths", tuple(int(w) for w in self.hidden_widths))
        if self.input_dim < 1 or self.feature_dim < 1:
            raise ValueError("input_dim and feature_dim must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if any(w < 1 for w in self.hidden_widths):
            raise ValueError("hidden widths must be >= 1")
        if self.head_kind not in HEAD_KINDS:
            raise ValueError(f"unknown head kind {self.head_kind!r}")
        if self.mimo_heads < 1:
            raise ValueError("mimo_heads must be >= 1")
        if self.head_kind != "mimo" and self.mimo_heads != 1:
            raise ValueError("mimo_heads > 1 requires head_kind='mimo'")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must lie in [0, 1)")

    @classmethod
    def for_tier(cls, tier: str, input_dim: int, num_classes: int, **kwargs) -> "PredictorConfig":
        if tier not in TIERS:
            raise ValueError(f"unknown size tier {tier!r}")
        widths, feature_dim = TIERS[tier]
        return cls(input_dim=input_dim, num_classes=num_classes, hidden_widths=widths,
                   feature_dim=feature_dim, size_tier=tier, **kwargs)

    @property
    def n_heads(self) -> int:
        return self.mimo_heads

    @property
    def in_width(self) -> int:
        return self.input_dim * self.n_heads

    @property
    def out_width(self) -> int:
        return self.num_classes * self.n_heads

    @property
    def n_featurizer_layers(self) -> int:
        return len(self.hidden_widths) + 1

    def layer_shapes(self) -> list[tuple[int, int]]:
        dims = [self.in_width, *self.hidden_widths, self.feature_dim]
        shapes = list(zip(dims[:-1], dims[1:]))
        shapes.append((self.feature_dim, self.out_width))
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden_widths"] = list(self.hidden_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PredictorConfig":
        return cls(**d)


def glorot_init(shapes: Sequence[tuple[int, int]], rng: np.random.Generator) -> list[np.ndarray]:
    """Glorot-uniform weights and zero biases, interleaved ``[W0, b0, W1, b1, ...]``."""
    params = []
    for fan_in, fan_out in shapes:
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        params.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)))
        params.append(np.zeros(fan_out))
    return params


SPECTRAL_TOL = 1e-10
SPECTRAL_MAX_ITERS = 10_000


def _power_iteration(W: np.ndarray, v: np.ndarray, iters: int, tol: float | None = None):
    """Alternate ``u = Wv/|Wv|``, ``v = W'u/|W'u|``.

    With ``tol`` the loop runs past ``iters`` until the estimate ``|W'u|``
    changes by less than ``tol`` relative (cold starts on matrices with a
    small top singular gap need far more than a handful of rounds).
    """
    u = None
    prev = -1.0
    k = 0
    while True:
        u = W @ v
        nu = np.linalg.norm(u)
        if nu < SPECTRAL_EPS:
            return np.zeros(W.shape[0]), v
        u = u / nu
        v = W.T @ u
        nv = np.linalg.norm(v)
        if nv < SPECTRAL_EPS:
            return u, v
        v = v / nv
        k += 1
        if k >= iters and (tol is None or abs(nv - prev) <= tol * nv or k >= SPECTRAL_MAX_ITERS):
            return u, v
        prev = nv


def spectral_normalize(W: np.ndarray, power_iters: int = SPECTRAL_STATIC_ITERS,
                       state: np.ndarray | None = None, rng: np.random.Generator | None = None,
                       tol: float | None = SPECTRAL_TOL):
    """Divide ``W`` by a power-iteration estimate of its largest singular value.

    ``state`` is the persistent right singular vector estimate (length
    ``W.shape[1]``); a fresh random one is drawn when omitted.  At least
    ``power_iters`` rounds run, more while the estimate is still moving by
    more than ``tol`` (pass ``tol=None`` for exactly ``power_iters``).
    Returns ``(W_normalized, new_state)``.  Matrices with an estimate below
    1e-12 are returned unchanged.
    """
    W = np.asarray(W, dtype=float)
    if not np.all(np.isfinite(W)):
        raise ValueError("W must be finite")
    if state is None:
        rng = rng or np.random.default_rng(0)
        state = rng.normal(size=W.shape[1])
        state /= np.linalg.norm(state)
    u, v = _power_iteration(W, np.asarray(state, dtype=float), power_iters, tol)
    sigma = float(u @ W @ v) if u is not None else 0.0
    if sigma < SPECTRAL_EPS:
        return W.copy(), v
    return W / sigma, v


def softmax(z, tau: float = 1.0) -> np.ndarray:
    """Softmax of ``z / tau`` along the last axis."""
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    z = np.asarray(z, dtype=float)
    if not np.all(np.isfinite(z)):
        raise FloatingPointError("non-finite logits")
    s = z / tau
    s = s - s.max(axis=-1, keepdims=True)
    e = np.exp(s)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z, tau: float = 1.0) -> np.ndarray:
    z = np.asarray(z, dtype=float)
    s = z / tau
    s = s - s.max(axis=-1, keepdims=True)
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def apply_dropout(activations, rate: float, rng: np.random.Generator):
    """Inverted dropout.  Returns ``(masked, mask)`` where ``mask`` already holds the 1/(1-rate) scale."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("dropout rate must lie in [0, 1)")
    a = np.asarray(activations, dtype=float)
    if rate == 0.0:
        return a.copy(), np.ones_like(a)
    mask = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return a * mask, mask


def initial_spectral_vectors(config: PredictorConfig, rng: np.random.Generator) -> list[np.ndarray]:
    """Random unit starting vectors for power iteration, one per featurizer layer."""
    out = []
    for _, fo in config.layer_shapes()[:config.n_featurizer_layers]:
        v = rng.normal(size=fo)
        out.append(v / np.linalg.norm(v))
    return out


class Predictor:
    """Parameters plus the bits of state a forward pass needs.

    ``params`` alternates weights and biases in layer order; the last pair is
    the head.  ``spectral`` holds one persistent right-singular-vector
    estimate per featurizer weight (only used when the config asks for it).
    """

    def __init__(self, config: PredictorConfig, params: list[np.ndarray],
                 spectral: list[np.ndarray] | None = None, dropout_seed=None):
        shapes = config.layer_shapes()
        if len(params) != 2 * len(shapes):
            raise ShapeError(f"expected {2 * len(shapes)} parameter arrays, got {len(params)}")
        for i, (fi, fo) in enumerate(shapes):
            if params[2 * i].shape != (fi, fo) or params[2 * i + 1].shape != (fo,):
                raise ShapeError(f"layer {i}: expected ({fi}, {fo}) weights")
        self.config = config
        self.params = [np.array(p, dtype=float) for p in params]
        self.rng = np.random.default_rng(dropout_seed)
        self.version = 0
        if spectral is None and config.spectral_norm:
            # no saved vectors: start from a fixed generator so construction stays deterministic
            spectral = initial_spectral_vectors(config, np.random.default_rng(0))
            self.spectral = spectral
            self.refresh_spectral(SPECTRAL_STATIC_ITERS, converge=True)
        else:
            self.spectral = [np.array(v, dtype=float) for v in (spectral or [])]

    @classmethod
    def init(cls, config: PredictorConfig, seed, dropout_seed=None) -> "Predictor":
        rng = np.random.default_rng(seed)
        params = glorot_init(config.layer_shapes(), rng)
        if not config.spectral_norm:
            return cls(config, params, dropout_seed=dropout_seed)
        pred = cls(config, params, initial_spectral_vectors(config, rng), dropout_seed)
        pred.refresh_spectral(SPECTRAL_STATIC_ITERS, converge=True)
        return pred

    def copy(self) -> "Predictor":
        new = Predictor(self.config, self.params, list(self.spectral))
        new.rng = np.random.default_rng()
        new.rng.bit_generator.state = self.rng.bit_generator.state
        return new

    def touch(self):
        """Mark parameters as mutated; outstanding traces become stale."""
        self.version += 1

    def refresh_spectral(self, iters: int = 1, converge: bool = False):
        """Advance the persistent singular-vector estimates by ``iters`` rounds (to convergence if asked)."""
        if not self.config.spectral_norm:
            return
        tol = SPECTRAL_TOL if converge else None
        for i in range(self.config.n_featurizer_layers):
            _, v = _power_iteration(self.params[2 * i], self.spectral[i], iters, tol)
            self.spectral[i] = v
        self.touch()

    def effective_weight(self, i: int):
        """Weight used by layer ``i`` in the forward pass, with ``(sigma, u, v)`` when normalized."""
        W = self.params[2 * i]
        if not self.config.spectral_norm or i >= self.config.n_featurizer_layers:
            return W, None
        v = self.spectral[i]
        u = W @ v
        nu = np.linalg.norm(u)
        if nu < SPECTRAL_EPS:
            return W, None
        u = u / nu
        sigma = float(u @ W @ v)
        if sigma < SPECTRAL_EPS:
            return W, None
        return W / sigma, (sigma, u, v)


@dataclass
class ForwardTrace:
    x: np.ndarray
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)
    weights: list[np.ndarray] = field(default_factory=list)
    spectral: list[tuple | None] = field(default_factory=list)
    features: np.ndarray | None = None
    raw_logits: np.ndarray | None = None
    logits: np.ndarray | None = None
    version: int = -1
    squeeze: bool = False


def forward(predictor: Predictor, x, mode: str = "eval", rng: np.random.Generator | None = None,
            stochastic: bool = False):
    """Run the network on ``x`` (one row or a batch).

    Dropout is active in ``train`` mode, or in ``eval`` mode when
    ``stochastic`` is set (MC-Dropout passes).  ``rng`` overrides the
    predictor's own dropout generator.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    cfg = predictor.config
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 1
    X = x[None, :] if squeeze else x
    if X.ndim != 2 or X.shape[1] != cfg.in_width:
        raise ShapeError(f"expected input width {cfg.in_width}, got shape {x.shape}")
    drop = cfg.dropout_rate > 0 and (mode == "train" or stochastic)
    gen = rng if rng is not None else predictor.rng

    tr = ForwardTrace(x=X, version=predictor.version, squeeze=squeeze)
    h = X
    for i in range(cfg.n_featurizer_layers):
        W, sn = predictor.effective_weight(i)
        a = h @ W + predictor.params[2 * i + 1]
        tr.inputs.append(h)
        tr.weights.append(W)
        tr.spectral.append(sn)
        tr.preacts.append(a)
        h = np.maximum(a, 0.0)
        if drop:
            h, mask = apply_dropout(h, cfg.dropout_rate, gen)
            tr.masks.append(mask)
        else:
            tr.masks.append(None)
    tr.features = h
    z = h @ predictor.params[-2] + predictor.params[-1]
    tr.raw_logits = z
    tr.logits = np.exp(-z * z) if cfg.head_kind == "rbf" else z
    return (tr.logits[0] if squeeze else tr.logits), tr


def replay(predictor: Predictor, trace: ForwardTrace) -> np.ndarray:
    """Recompute logits from a trace's recorded input and dropout masks."""
    cfg = predictor.config
    h = trace.x
    for i in range(cfg.n_featurizer_layers):
        W, _ = predictor.effective_weight(i)
        h = np.maximum(h @ W + predictor.params[2 * i + 1], 0.0)
        if trace.masks[i] is not None:
            h = h * trace.masks[i]
    z = h @ predictor.params[-2] + predictor.params[-1]
    out = np.exp(-z * z) if cfg.head_kind == "rbf" else z
    return out[0] if trace.squeeze else out


def backward(predictor: Predictor, trace: ForwardTrace, dlogits, *, input_grad: bool = False,
             param_grads: bool = True):
    """Reverse-mode pass.  Returns parameter gradients (and the input gradient if asked)."""
    if trace.version != predictor.version:
        raise StaleTraceError("parameters changed since this trace was recorded")
    cfg = predictor.config
    g = np.asarray(dlogits, dtype=float)
    if g.ndim == 1:
        g = g[None, :]
    if g.shape != trace.logits.shape:
        raise ShapeError(f"dlogits shape {g.shape} != logits shape {trace.logits.shape}")
    nl = cfg.n_featurizer_layers
    grads: list = [None] * len(predictor.params)

    if cfg.head_kind == "rbf":
        z = trace.raw_logits
        g = g * (-2.0 * z * np.exp(-z * z))
    if param_grads:
        grads[-2] = trace.features.T @ g
        grads[-1] = g.sum(axis=0)
    dh = g @ predictor.params[-2].T

    for i in range(nl - 1, -1, -1):
        if trace.masks[i] is not None:
            dh = dh * trace.masks[i]
        da = dh * (trace.preacts[i] > 0)
        W = trace.weights[i]
        if param_grads:
            dW = trace.inputs[i].T @ da
            sn = trace.spectral[i]
            if sn is not None:
                sigma, u, v = sn
                # sigma = u^T W v with u, v held fixed
                dW = dW / sigma - (np.sum(dW * predictor.params[2 * i]) / sigma ** 2) * np.outer(u, v)
            grads[2 * i] = dW
            grads[2 * i + 1] = da.sum(axis=0)
        if i > 0 or input_grad:
            dh = da @ W.T

    if input_grad:
        dx = dh[0] if trace.squeeze else dh
        return (grads if param_grads else None), dx
    return grads


def input_jacobian(predictor: Predictor, X, tau: float = 1.0) -> np.ndarray:
    """Jacobian of the predictive softmax w.r.t. the (per-example) input.

    Returns shape ``(N, C, input_dim)``.  MIMO predictors see ``x`` in every
    slot and average their heads, so slot gradients are summed.
    """
    cfg = predictor.config
    X = np.atleast_2d(np.asarray(X, dtype=float))
    T, C = cfg.n_heads, cfg.num_classes
    Xin = np.tile(X, (1, T)) if T > 1 else X
    logits, tr = forward(predictor, Xin, "eval")
    p = softmax(logits.reshape(len(X), T, C), tau)
    jac = np.empty((len(X), C, cfg.input_dim))
    for c in range(C):
        seed = p[:, :, c:c + 1] * ((np.arange(C) == c) - p) / (tau * T)
        _, dx = backward(predictor, tr, seed.reshape(len(X), T * C), input_grad=True, param_grads=False)
        jac[:, c, :] = dx.reshape(len(X), T, cfg.input_dim).sum(axis=1)
    return jac


def input_jacobian_sqnorm(predictor: Predictor, x, tau: float = 1.0):
    """Squared Frobenius norm of the softmax-output Jacobian; scalar for one row, vector for a batch."""
    x = np.asarray(x, dtype=float)
    out = np.sum(input_jacobian(predictor, x, tau) ** 2, axis=(1, 2))
    return float(out[0]) if x.ndim == 1 else out


@dataclass
class SgdState:
    learning_rate: float
    momentum: float = 0.9
    weight_decay: float = 1e-4
    velocity: list[np.ndarray] | None = None
    schedule_period: int = 30
    decay_factor: float = 10.0

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError("learning rate must be nonnegative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be nonnegative")

    def lr_at(self, epoch: int) -> float:
        return self.learning_rate / self.decay_factor ** (epoch // self.schedule_period)


def sgd_step(state: SgdState, params: list[np.ndarray], grads: list[np.ndarray], lr: float | None = None):
    """Heavy-ball momentum with L2 weight decay folded into the gradient.

    ``v <- m*v + (g + wd*w)``, ``w <- w - lr*v``.  Updates ``params`` in place.
    """
    lr = state.learning_rate if lr is None else lr
    if state.velocity is None:
        state.velocity = [np.zeros_like(p) for p in params]
    if len(grads) != len(params) or len(state.velocity) != len(params):
        raise ShapeError("params, grads and velocity lengths differ")
    for p, g, v in zip(params, grads, state.velocity):
        if p.shape != g.shape or p.shape != v.shape:
            raise ShapeError(f"shape mismatch {p.shape} / {g.shape} / {v.shape}")
        v *= state.momentum
        v += g + state.weight_decay * p
        p -= lr * v
    return params, state


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"UQBEDCKPT"
CHECKPOINT_VERSION = 1


def write_arrays(path, groups: dict[str, list[np.ndarray]], meta: dict):
    """Write a checkpoint: magic line, one-line JSON header, little-endian float64 payload."""
    # the header is key-sorted, so the payload follows the same order
    names = sorted(groups)
    layout = {name: [list(a.shape) for a in groups[name]] for name in names}
    payload = b"".join(np.ascontiguousarray(a, dtype="<f8").tobytes()
                       for name in names for a in groups[name])
    header = {"format_version": CHECKPOINT_VERSION, "layout": layout, "meta": meta,
              "payload_bytes": len(payload)}
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC + b" %d\n" % CHECKPOINT_VERSION)
        f.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        f.write(payload)


def read_arrays(path):
    with open(path, "rb") as f:
        magic = f.readline().split()
        if not magic or magic[0] != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        if int(magic[1]) != CHECKPOINT_VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {magic[1]!r}")
        header = json.loads(f.readline().decode("utf-8"))
        payload = f.read()
    if len(payload) != header["payload_bytes"]:
        raise ValueError(f"{path}: truncated payload")
    flat = np.frombuffer(payload, dtype="<f8")
    groups, pos = {}, 0
    for name in sorted(header["layout"]):
        shapes = header["layout"][name]
        arrs = []
        for shape in shapes:
            n = int(np.prod(shape)) if shape else 1
            arrs.append(flat[pos:pos + n].reshape(shape).astype(float))
            pos += n
        groups[name] = arrs
    return groups, header["meta"]


def save_predictor(path, predictor: Predictor, meta: dict | None = None):
    meta = dict(meta or {})
    meta["config"] = predictor.config.to_dict()
    write_arrays(path, {"params": predictor.params, "spectral": predictor.spectral}, meta)


def load_predictor(path) -> tuple[Predictor, dict]:
    groups, meta = read_arrays(path)
    cfg = PredictorConfig.from_dict(meta["config"])
    return Predictor(cfg, groups["params"], groups["spectral"] or None), meta
