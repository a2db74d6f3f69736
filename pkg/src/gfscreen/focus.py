"""Focus segmenter: a view-quality oracle and a trainable per-voxel linear model."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.special import expit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._fnv import fnv1a64
from ._validation import ValidationError, check_finite, check_mask, check_same_shape
from .cropgrid import SubVolume, contained_fraction
from .optim import AdamW
from .synthvol import Lesion, make_rng

__all__ = [
    "N_FEATURE_CHANNELS",
    "SegPrediction",
    "OracleQuality",
    "FocusParams",
    "oracle_segment",
    "extract_features",
    "segment",
    "dice_ce_loss",
    "dice_ce_loss_from_logits",
    "train_step_focus",
    "focus_flops",
    "OracleFocus",
    "FocusSegmenter",
]

N_FEATURE_CHANNELS = 7
DICE_SMOOTH = 1.0


@dataclass
class SegPrediction:
    probs: np.ndarray
    mask: np.ndarray

    @classmethod
    def from_probs(cls, probs: np.ndarray, seg_threshold: float = 0.5) -> "SegPrediction":
        return cls(probs=probs, mask=probs >= seg_threshold)


@dataclass(frozen=True)
class OracleQuality:
    """Knobs of the oracle segmenter.

    ``false_alarm`` is the chance of emitting one spurious blob per crop; the
    default of zero keeps lesion-free crops strictly empty.
    """

    dsc_full: float = 0.95
    frac_exponent: float = 2.0
    center_penalty: float = 1.0
    fail_floor: float = 0.2
    seed_salt: int = 0
    false_alarm: float = 0.0

    def __post_init__(self):
        if not 0.0 < self.dsc_full <= 1.0:
            raise ValidationError("dsc_full must lie in (0, 1]")
        if self.frac_exponent <= 0:
            raise ValidationError("frac_exponent must be > 0")
        if self.center_penalty < 0:
            raise ValidationError("center_penalty must be >= 0")
        if not 0.0 <= self.fail_floor <= 1.0:
            raise ValidationError("fail_floor must lie in [0, 1]")
        if not 0.0 <= self.false_alarm <= 1.0:
            raise ValidationError("false_alarm must lie in [0, 1]")


@dataclass
class FocusParams:
    weights: np.ndarray
    bias: float = 0.0

    @classmethod
    def zeros(cls) -> "FocusParams":
        return cls(np.zeros(N_FEATURE_CHANNELS), 0.0)

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.weights, [self.bias]])

    @classmethod
    def from_vector(cls, vec) -> "FocusParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != N_FEATURE_CHANNELS + 1:
            raise ValidationError(f"focus vector must have {N_FEATURE_CHANNELS + 1} entries")
        return cls(vec[:-1].copy(), float(vec[-1]))

    def copy(self) -> "FocusParams":
        return FocusParams(self.weights.copy(), self.bias)


def _oracle_rng(scan_id: str, origin, size, salt: int) -> np.random.Generator:
    return make_rng(salt, fnv1a64(scan_id.encode("utf-8")), *origin, *size)


def _boundary(mask: np.ndarray) -> np.ndarray:
    return mask & ~ndimage.binary_erosion(mask, border_value=1)


def oracle_segment(sub: SubVolume, lesions: list[Lesion], q: OracleQuality = OracleQuality(),
                   dims=None, seg_threshold: float = 0.5) -> SegPrediction:
    """Simulated segmentation whose quality tracks how well the view frames a lesion.

    A lesion is found with probability
    ``fail_floor + (1 - fail_floor) * c**frac_exponent * exp(-center_penalty * d)``
    where ``c`` is the best contained fraction among lesions touching the crop
    and ``d`` the offset of that lesion's center from the crop center in units
    of the half-size. A hit returns the crop's ground truth with a seeded
    boundary jitter (voxels swapped between the lesion rim and the outer ring)
    so that the expected DSC is about ``dsc_full * c``.

    ``dims`` is the full scan shape; lesion voxel counts are taken over it.
    """
    region = sub.region
    gt = np.asarray(sub.mask_slice, dtype=bool)
    if dims is None:
        dims = tuple(np.asarray(region.origin) + np.asarray(region.size))
        for lesion in lesions:
            dims = tuple(max(n, int(np.ceil(c + a)) + 1) for n, c, a in zip(dims, lesion.center, lesion.semi_axes))
    rng = _oracle_rng(sub.scan_id, region.origin, region.size, q.seed_salt)
    u_hit, u_fa = rng.uniform(size=2)

    best_c, best_d = 0.0, 0.0
    if gt.any():
        half = np.asarray(region.size, dtype=float) / 2.0
        for lesion in lesions:
            c = contained_fraction(region, lesion, dims)
            if c > best_c:
                best_c = c
                best_d = float(np.linalg.norm((np.asarray(lesion.center) - region.center) / half))

    pred = np.zeros(gt.shape, dtype=bool)
    if best_c > 0.0:
        p_hit = q.fail_floor + (1.0 - q.fail_floor) * best_c ** q.frac_exponent * np.exp(-q.center_penalty * best_d)
        if u_hit < p_hit:
            pred = _jitter(gt, q.dsc_full * best_c, rng)
    if u_fa < q.false_alarm:
        pred |= _spurious_blob(gt, rng)
    probs = pred.astype(np.float64)
    return SegPrediction(probs=probs, mask=probs >= seg_threshold)


def _jitter(gt: np.ndarray, target_dsc: float, rng: np.random.Generator) -> np.ndarray:
    # swap e rim voxels for e ring voxels: DSC = 1 - e / |gt| in expectation
    g = int(gt.sum())
    e = int(rng.binomial(g, min(max(1.0 - target_dsc, 0.0), 1.0)))
    e = min(e, g - 1)
    pred = gt.copy()
    if e <= 0:
        return pred
    rim = np.flatnonzero(_boundary(gt))
    core = np.flatnonzero(gt & ~_boundary(gt))
    order = np.concatenate([rng.permutation(rim), rng.permutation(core)])
    pred.flat[order[:e]] = False
    ring = np.flatnonzero(ndimage.binary_dilation(gt) & ~gt)
    n_add = min(e, ring.size)
    if n_add:
        pred.flat[rng.choice(ring, size=n_add, replace=False)] = True
    return pred


def _spurious_blob(gt: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    center = [int(rng.integers(n)) for n in gt.shape]
    grids = np.meshgrid(*[np.arange(n) for n in gt.shape], indexing="ij")
    blob = sum((g - c) ** 2 for g, c in zip(grids, center)) <= 1
    return blob & ~ndimage.binary_dilation(gt, iterations=2)


def extract_features(voxels) -> np.ndarray:
    """Per-voxel feature stack of shape ``(7, X, Y, Z)``.

    Channels: intensity, box mean at radius 1, box mean at radius 2, local
    standard deviation at radius 1, and the three coordinates scaled to
    [-1, 1]. Box filters use mirror padding.
    """
    if isinstance(voxels, SubVolume):
        voxels = voxels.voxels
    x = np.asarray(voxels, dtype=np.float64)
    if x.ndim != 3:
        raise ValidationError(f"expected a 3D crop, got shape {x.shape}")
    mean1 = ndimage.uniform_filter(x, size=3, mode="mirror")
    mean2 = ndimage.uniform_filter(x, size=5, mode="mirror")
    sq1 = ndimage.uniform_filter(x * x, size=3, mode="mirror")
    std1 = np.sqrt(np.maximum(sq1 - mean1 * mean1, 0.0))
    coords = []
    for axis, n in enumerate(x.shape):
        c = np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
        shape = [1, 1, 1]
        shape[axis] = n
        coords.append(np.broadcast_to(c.reshape(shape), x.shape))
    return np.stack([x, mean1, mean2, std1, *coords])


def _logits(params: FocusParams, features: np.ndarray) -> np.ndarray:
    if features.shape[0] != params.weights.size:
        raise ValidationError(
            f"feature stack has {features.shape[0]} channels, params expect {params.weights.size}")
    return np.tensordot(params.weights, features, axes=1) + params.bias


def segment(params: FocusParams, features, seg_threshold: float = 0.5) -> SegPrediction:
    probs = expit(_logits(params, np.asarray(features, dtype=np.float64)))
    return SegPrediction.from_probs(probs, seg_threshold)


def _dice_term_and_grad(p: np.ndarray, g: np.ndarray):
    inter = float(np.sum(p * g))
    denom = float(np.sum(p) + np.sum(g)) + DICE_SMOOTH
    num = 2.0 * inter + DICE_SMOOTH
    dice = num / denom
    d_dice_dp = (2.0 * g * denom - num) / denom ** 2
    return 1.0 - dice, -d_dice_dp


def dice_ce_loss_from_logits(logits, gt):
    """Mean BCE plus soft Dice loss, with the gradient w.r.t. the logits."""
    z = np.asarray(logits, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    check_same_shape(z, g, "logits and gt")
    p = expit(z)
    bce = float(np.mean(g * np.logaddexp(0.0, -z) + (1.0 - g) * np.logaddexp(0.0, z)))
    dice_loss, d_dp = _dice_term_and_grad(p, g)
    grad = (p - g) / z.size + d_dp * p * (1.0 - p)
    return bce + dice_loss, grad


def dice_ce_loss(probs, gt):
    """Same loss evaluated from probabilities; gradient is still w.r.t. logits."""
    p = np.asarray(probs, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    check_same_shape(p, g, "probs and gt")
    pc = np.clip(p, 1e-300, 1.0)
    qc = np.clip(1.0 - p, 1e-300, 1.0)
    bce = float(-np.mean(g * np.log(pc) + (1.0 - g) * np.log(qc)))
    dice_loss, d_dp = _dice_term_and_grad(p, g)
    grad = (p - g) / p.size + d_dp * p * (1.0 - p)
    return bce + dice_loss, grad


def _batch_loss_and_grad(params: FocusParams, batch):
    total, gw, gb = 0.0, np.zeros_like(params.weights), 0.0
    for features, gt in batch:
        loss, dz = dice_ce_loss_from_logits(_logits(params, features), gt)
        total += loss
        gw += np.tensordot(features, dz, axes=([1, 2, 3], [0, 1, 2]))
        gb += float(dz.sum())
    n = max(len(batch), 1)
    return total / n, np.concatenate([gw / n, [gb / n]])


def train_step_focus(params: FocusParams, batch, lr: float, optimizer: AdamW | None = None):
    """One update on the mean Dice-CE loss of ``batch`` (pairs of features, gt mask).

    Uses ``optimizer`` if given, plain gradient descent at ``lr`` otherwise.
    Returns ``(new_params, loss_before_step)``.
    """
    loss, grad = _batch_loss_and_grad(params, batch)
    check_finite(loss, "focus Dice-CE loss")
    theta = params.to_vector()
    if optimizer is None:
        new = theta - lr * grad
    else:
        new = optimizer.step(theta, grad)
    return FocusParams.from_vector(new), loss


# multiply/add counts per voxel, following the arithmetic in extract_features/segment
_FOCUS_FLOPS_PER_VOXEL = (
    27 + 1        # radius-1 box mean
    + 125 + 1     # radius-2 box mean
    + 1 + 27 + 1  # square, radius-1 box mean of squares
    + 3           # mean^2, subtract, sqrt
    + 2 * N_FEATURE_CHANNELS  # linear layer
    + 4           # logistic: negate, exp, add, divide
)


def focus_flops(size) -> float:
    return float(_FOCUS_FLOPS_PER_VOXEL * int(np.prod(size)))


class OracleFocus(BaseEstimator):
    """Estimator wrapper around :func:`oracle_segment`; nothing to learn."""

    def __init__(self, dsc_full=0.95, frac_exponent=2.0, center_penalty=1.0, fail_floor=0.2,
                 seed_salt=0, false_alarm=0.0, seg_threshold=0.5):
        self.dsc_full = dsc_full
        self.frac_exponent = frac_exponent
        self.center_penalty = center_penalty
        self.fail_floor = fail_floor
        self.seed_salt = seed_salt
        self.false_alarm = false_alarm
        self.seg_threshold = seg_threshold

    @property
    def trainable(self) -> bool:
        return False

    def fit(self, X=None, y=None):
        self.quality_ = OracleQuality(self.dsc_full, self.frac_exponent, self.center_penalty,
                                      self.fail_floor, int(self.seed_salt), self.false_alarm)
        return self

    def segment_subvolume(self, sub: SubVolume, scan) -> SegPrediction:
        check_is_fitted(self, "quality_")
        return oracle_segment(sub, scan.lesions, self.quality_, dims=scan.dims,
                              seg_threshold=self.seg_threshold)


class FocusSegmenter(BaseEstimator):
    """Per-voxel logistic model over :func:`extract_features`, trained on Dice-CE."""

    def __init__(self, lr=1e-2, n_steps=500, weight_decay=0.01, seg_threshold=0.5, cosine=True):
        self.lr = lr
        self.n_steps = n_steps
        self.weight_decay = weight_decay
        self.seg_threshold = seg_threshold
        self.cosine = cosine

    @property
    def trainable(self) -> bool:
        return True

    def _init(self, params: FocusParams | None = None, total_steps: int = 0):
        self.params_ = params.copy() if params is not None else FocusParams.zeros()
        self.optimizer_ = AdamW(N_FEATURE_CHANNELS + 1, lr=self.lr, weight_decay=self.weight_decay,
                                total_steps=total_steps, cosine=self.cosine)
        self.loss_curve_ = []
        return self

    def fit(self, X, y):
        """Full-batch training on crops ``X`` (3D arrays) with masks ``y``."""
        if len(X) != len(y) or not len(X):
            raise ValidationError("X and y must be non-empty and of equal length")
        batch = [(extract_features(x), check_mask(m, np.shape(x)).astype(np.float64)) for x, m in zip(X, y)]
        self._init(total_steps=int(self.n_steps))
        for _ in range(int(self.n_steps)):
            self.partial_fit_features(batch)
        return self

    def partial_fit_features(self, batch) -> float:
        if not hasattr(self, "params_"):
            self._init()
        self.params_, loss = train_step_focus(self.params_, batch, self.lr, self.optimizer_)
        self.loss_curve_.append(loss)
        return loss

    def predict_proba(self, X) -> list[np.ndarray]:
        check_is_fitted(self, "params_")
        return [segment(self.params_, extract_features(x), self.seg_threshold).probs for x in X]

    def predict(self, X) -> list[np.ndarray]:
        return [p >= self.seg_threshold for p in self.predict_proba(X)]

    def segment_subvolume(self, sub: SubVolume, scan=None) -> SegPrediction:
        check_is_fitted(self, "params_")
        return segment(self.params_, extract_features(sub.voxels), self.seg_threshold)
