"""Glance policy: crop descriptor, one-hidden-layer scorer, 2-way softmax head."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from ._validation import ValidationError, check_finite, check_probability
from .cropgrid import SubVolume
from .optim import AdamW

__all__ = [
    "POOL_GRID",
    "N_GLANCE_FEATURES",
    "GlanceParams",
    "ActionSample",
    "glance_features",
    "policy_forward",
    "policy_backward",
    "softmax",
    "sample_action",
    "sample_actions",
    "decide",
    "glance_flops",
    "GlanceClassifier",
]

POOL_GRID = (4, 4, 2)
QUANTILES = (0.5, 0.9, 0.99)
N_GLANCE_FEATURES = 6 + int(np.prod(POOL_GRID))
DISCARD, SELECT = 0, 1


def glance_features(sub) -> np.ndarray:
    """Fixed-length crop descriptor.

    ``[mean, std, max, q50, q90, q99]`` followed by the crop average-pooled
    onto a 4x4x2 grid (each axis split into near-equal bins), flattened in C
    order.
    """
    x = sub.voxels if isinstance(sub, SubVolume) else sub
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 3 or any(n < g for n, g in zip(x.shape, POOL_GRID)):
        raise ValidationError(f"crop of shape {x.shape} cannot be pooled onto {POOL_GRID}")
    flat = x.ravel()
    # moments about the first voxel so that constant crops come out exact
    d = flat - flat[0]
    head = [flat[0] + d.mean(), d.std(), flat.max(), *np.quantile(flat, QUANTILES)]
    pooled = np.empty(POOL_GRID)
    bx, by, bz = (np.array_split(np.arange(n), g) for n, g in zip(x.shape, POOL_GRID))
    for i, ix in enumerate(bx):
        for j, iy in enumerate(by):
            for k, iz in enumerate(bz):
                pooled[i, j, k] = x[ix[0]:ix[-1] + 1, iy[0]:iy[-1] + 1, iz[0]:iz[-1] + 1].mean()
    return np.concatenate([head, pooled.ravel()])


@dataclass
class GlanceParams:
    """Weights of the glance scorer plus a frozen input standardization.

    Only ``W1, b1, W2, b2`` are trained; ``feature_mean``/``feature_scale``
    are fitted once from training crops and applied before the first layer.
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    feature_mean: np.ndarray
    feature_scale: np.ndarray

    @classmethod
    def init(cls, rng: np.random.Generator, n_features: int = N_GLANCE_FEATURES, hidden: int = 16,
             out_scale: float = 0.01) -> "GlanceParams":
        return cls(
            W1=rng.normal(0.0, 1.0 / np.sqrt(n_features), size=(n_features, hidden)),
            b1=np.zeros(hidden),
            W2=rng.normal(0.0, out_scale, size=(hidden, 2)),
            b2=np.zeros(2),
            feature_mean=np.zeros(n_features),
            feature_scale=np.ones(n_features),
        )

    @classmethod
    def zeros(cls, n_features: int = N_GLANCE_FEATURES, hidden: int = 16) -> "GlanceParams":
        return cls(np.zeros((n_features, hidden)), np.zeros(hidden), np.zeros((hidden, 2)),
                   np.zeros(2), np.zeros(n_features), np.ones(n_features))

    @property
    def n_features(self) -> int:
        return self.W1.shape[0]

    @property
    def hidden(self) -> int:
        return self.W1.shape[1]

    @property
    def n_trainable(self) -> int:
        return self.W1.size + self.b1.size + self.W2.size + self.b2.size

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.W2.ravel(), self.b2])

    def with_vector(self, vec) -> "GlanceParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.n_trainable:
            raise ValidationError(f"expected {self.n_trainable} parameters, got {vec.size}")
        d, h = self.W1.shape
        i = 0
        W1 = vec[i:i + d * h].reshape(d, h); i += d * h
        b1 = vec[i:i + h]; i += h
        W2 = vec[i:i + 2 * h].reshape(h, 2); i += 2 * h
        b2 = vec[i:i + 2]
        return GlanceParams(W1.copy(), b1.copy(), W2.copy(), b2.copy(),
                            self.feature_mean.copy(), self.feature_scale.copy())

    def copy(self) -> "GlanceParams":
        return self.with_vector(self.to_vector())

    def fit_standardization(self, F: np.ndarray) -> "GlanceParams":
        F = np.atleast_2d(np.asarray(F, dtype=np.float64))
        out = self.copy()
        out.feature_mean = F.mean(axis=0)
        scale = F.std(axis=0)
        out.feature_scale = np.where(scale > 1e-8, scale, 1.0)
        return out


@dataclass
class ActionSample:
    action: int
    probs: tuple[float, float]
    logits: tuple[float, float] | None = None


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _forward(params: GlanceParams, f):
    F = np.asarray(f, dtype=np.float64)
    if F.shape[-1] != params.n_features:
        raise ValidationError(f"feature length {F.shape[-1]} does not match params ({params.n_features})")
    x = (F - params.feature_mean) / params.feature_scale
    h = np.tanh(x @ params.W1 + params.b1)
    z = h @ params.W2 + params.b2
    return x, h, z


def policy_forward(params: GlanceParams, f):
    """Return ``(probs, hidden)``; works on one descriptor or a ``(N, D)`` stack.

    ``probs[..., 1]`` is the probability of selecting the crop.
    """
    _, h, z = _forward(params, f)
    return softmax(z), h


def policy_logits(params: GlanceParams, f) -> np.ndarray:
    return _forward(params, f)[2]


def policy_backward(params: GlanceParams, f, upstream) -> GlanceParams:
    """Reverse-mode gradient of a scalar given its gradient on the two logits.

    The result has the layout of ``params``; the standardization fields carry
    zeros since they are not trained.
    """
    x, h, _ = _forward(params, f)
    dz = np.asarray(upstream, dtype=np.float64)
    if dz.shape != h.shape[:-1] + (2,):
        raise ValidationError(f"upstream gradient shape {dz.shape} does not match logits")
    X, H, dZ = np.atleast_2d(x), np.atleast_2d(h), np.atleast_2d(dz)
    dW2 = H.T @ dZ
    db2 = dZ.sum(axis=0)
    dA = (dZ @ params.W2.T) * (1.0 - H * H)
    dW1 = X.T @ dA
    db1 = dA.sum(axis=0)
    return GlanceParams(dW1, db1, dW2, db2, np.zeros_like(params.feature_mean),
                        np.zeros_like(params.feature_scale))


def sample_action(probs, rng: np.random.Generator, logits=None) -> ActionSample:
    p = np.asarray(probs, dtype=np.float64)
    action = SELECT if rng.uniform() < p[1] else DISCARD
    lg = None if logits is None else (float(logits[0]), float(logits[1]))
    return ActionSample(action=action, probs=(float(p[0]), float(p[1])), logits=lg)


def sample_actions(p_select, rng: np.random.Generator) -> np.ndarray:
    p = np.asarray(p_select, dtype=np.float64)
    return (rng.uniform(size=p.shape) < p).astype(np.int64)


def decide(probs, tau: float = 0.5):
    """Deterministic inference decision: select when ``p_select >= tau``."""
    tau = check_probability(tau, "tau", open_interval=True)
    p = np.asarray(probs, dtype=np.float64)
    p_select = p[..., 1] if p.ndim and p.shape[-1] == 2 else p
    out = p_select >= tau
    return bool(out) if np.ndim(out) == 0 else out


def glance_flops(size, n_features: int = N_GLANCE_FEATURES, hidden: int = 16) -> float:
    """Arithmetic operation count for scoring one crop of ``size``."""
    n = int(np.prod(size))
    per_voxel = 1 + 3 + 1 + 1  # mean, std (sub, square, add), max compare, pooling add
    sort = n * np.log2(max(n, 2))  # comparisons for the quantiles
    mlp = 2 * n_features + 2 * n_features * hidden + 4 * hidden + 2 * hidden * 2 + 6
    return float(per_voxel * n + sort + mlp)


class GlanceClassifier(ClassifierMixin, BaseEstimator):
    """Supervised glance head on precomputed descriptors.

    ``loss`` is ``"ce"``, ``"balanced_ce"`` (inverse class frequency weights
    recomputed per batch) or ``"focal"``. The group-relative trainer in
    :mod:`gfscreen.pipeline` reuses ``params_`` of a fitted instance.
    """

    def __init__(self, hidden=16, loss="ce", gamma=2.0, lr=3e-3, weight_decay=0.01, n_epochs=50,
                 batch_size=16, tau=0.5, prob_floor=1e-6, random_state=0):
        self.hidden = hidden
        self.loss = loss
        self.gamma = gamma
        self.lr = lr
        self.weight_decay = weight_decay
        self.n_epochs = n_epochs
        self.batch_size = batch_size
        self.tau = tau
        self.prob_floor = prob_floor
        self.random_state = random_state

    def fit(self, X, y):
        from .grl import supervised_objective

        X, y = check_X_y(X, y, dtype=np.float64)
        y = y.astype(int)
        self.classes_ = np.array([DISCARD, SELECT])
        rng = np.random.default_rng(self.random_state)
        params = GlanceParams.init(rng, X.shape[1], int(self.hidden)).fit_standardization(X)
        n_batches = int(np.ceil(len(X) / self.batch_size))
        opt = AdamW(params.n_trainable, lr=self.lr, weight_decay=self.weight_decay,
                    total_steps=int(self.n_epochs) * n_batches)
        theta = params.to_vector()
        for _ in range(int(self.n_epochs)):
            order = rng.permutation(len(X))
            for b in range(n_batches):
                idx = order[b * self.batch_size:(b + 1) * self.batch_size]
                probs, _ = policy_forward(params, X[idx])
                _, dz = supervised_objective(probs[:, 1], y[idx], self.loss, self.gamma, self.prob_floor)
                check_finite(dz, "glance supervised gradient")
                theta = opt.step(theta, policy_backward(params, X[idx], dz).to_vector())
                params = params.with_vector(theta)
        self.params_ = params
        self.n_features_in_ = X.shape[1]
        return self

    def predict_proba(self, X) -> np.ndarray:
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return policy_forward(self.params_, X)[0]

    def decision_function(self, X) -> np.ndarray:
        z = policy_logits(self.params_, check_array(X, dtype=np.float64))
        return z[:, 1] - z[:, 0]

    def predict(self, X) -> np.ndarray:
        return decide(self.predict_proba(X), self.tau).astype(int)
