"""Group-relative learning: rewards, advantages and the clipped policy objective."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from ._validation import ValidationError, check_same_shape
from .glance import GlanceParams

__all__ = [
    "GRLConfig",
    "GRLBatch",
    "RefSnapshot",
    "ObjectiveTerms",
    "detection_reward",
    "dsc_reward",
    "action_conditioned_reward",
    "group_advantages",
    "kl_penalty",
    "ce_term",
    "focal_term",
    "surrogate_term",
    "grl_objective",
    "supervised_objective",
    "snapshot_ref",
]

REWARD_KINDS = ("binary_detection", "dsc")
RATIO_MODES = ("select_prob", "sampled_action")


@dataclass(frozen=True)
class GRLConfig:
    group_size: int = 16
    clip_eps: float = 0.1
    ce_alpha: float = 0.1
    kl_beta: float = 0.01
    std_floor: float = 1e-6
    reward_kind: str = "binary_detection"
    ratio_mode: str = "select_prob"
    ref_update: str = "per_epoch"
    prob_floor: float = 1e-6

    def __post_init__(self):
        if self.group_size < 2:
            raise ValidationError("group_size must be >= 2")
        if not 0.0 < self.clip_eps < 1.0:
            raise ValidationError("clip_eps must lie in (0, 1)")
        if self.ce_alpha < 0 or self.kl_beta < 0:
            raise ValidationError("ce_alpha and kl_beta must be >= 0")
        if self.std_floor <= 0:
            raise ValidationError("std_floor must be > 0")
        if self.reward_kind not in REWARD_KINDS:
            raise ValidationError(f"reward_kind must be one of {REWARD_KINDS}")
        if self.ratio_mode not in RATIO_MODES:
            raise ValidationError(f"ratio_mode must be one of {RATIO_MODES}")
        if self.ref_update != "per_epoch":
            raise ValidationError("ref_update must be 'per_epoch'")
        if not 0.0 < self.prob_floor < 0.5:
            raise ValidationError("prob_floor must lie in (0, 0.5)")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class GRLBatch:
    """One group of ``N`` crops.

    ``probs`` and ``ref_probs`` are ``(N, 2)`` arrays of (discard, select)
    probabilities under the current and the reference policy.
    """

    features: np.ndarray
    labels: np.ndarray
    actions: np.ndarray
    probs: np.ndarray
    ref_probs: np.ndarray | None
    rewards: np.ndarray
    advantages: np.ndarray = field(default=None)

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.probs = np.asarray(self.probs, dtype=np.float64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        if self.advantages is None:
            self.advantages = group_advantages(self.rewards)
        self.advantages = np.asarray(self.advantages, dtype=np.float64)
        n = len(self.rewards)
        for name in ("labels", "actions", "advantages"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"GRLBatch.{name} has length {len(getattr(self, name))}, expected {n}")
        if self.probs.shape != (n, 2):
            raise ValidationError(f"GRLBatch.probs must have shape ({n}, 2)")


@dataclass(frozen=True)
class RefSnapshot:
    params: GlanceParams
    epoch: int


class ObjectiveTerms(NamedTuple):
    J: float
    grad_logits: np.ndarray
    surrogate: float
    kl: float
    ce: float


def detection_reward(pred_mask, gt_mask) -> int:
    """1 when the predicted mask touches the lesion mask, else 0."""
    pred, gt = np.asarray(pred_mask, dtype=bool), np.asarray(gt_mask, dtype=bool)
    check_same_shape(pred, gt, "prediction and ground truth")
    return int(np.any(pred & gt))


def dsc_reward(pred_mask, gt_mask) -> float:
    pred, gt = np.asarray(pred_mask, dtype=bool), np.asarray(gt_mask, dtype=bool)
    check_same_shape(pred, gt, "prediction and ground truth")
    denom = int(pred.sum()) + int(gt.sum())
    if denom == 0:
        return 0.0
    return 2.0 * int(np.sum(pred & gt)) / denom


def action_conditioned_reward(action, overlap, gt_empty):
    """Reward for the sampled-action ratio mode.

    1 for selecting a crop whose lesion the focus model found, or for
    discarding a lesion-free crop.
    """
    action, overlap, gt_empty = (np.asarray(v) for v in (action, overlap, gt_empty))
    return (((action == 1) & (overlap > 0)) | ((action == 0) & gt_empty.astype(bool))).astype(np.float64)


def group_advantages(rewards, std_floor: float = 1e-6) -> np.ndarray:
    """``(r - mean) / max(std, std_floor)`` with the population std."""
    r = np.asarray(rewards, dtype=np.float64).ravel()
    if r.size < 2:
        raise ValidationError("advantage normalization needs a group of at least 2")
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return (r - r.mean()) / max(float(r.std()), std_floor)


def kl_penalty(p, p_ref):
    """``r - ln r - 1`` with ``r = p_ref / p``; zero iff the policies agree."""
    r = np.asarray(p_ref, dtype=np.float64) / np.asarray(p, dtype=np.float64)
    out = r - np.log(r) - 1.0
    return float(out) if out.ndim == 0 else out


def ce_term(p_select, y):
    p = np.asarray(p_select, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = -y * np.log(p) - (1.0 - y) * np.log(1.0 - p)
    return float(out) if out.ndim == 0 else out


def focal_term(p_select, y, gamma: float = 2.0):
    if gamma < 0:
        raise ValidationError("gamma must be >= 0")
    p = np.asarray(p_select, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    out = -y * (1.0 - p) ** gamma * np.log(p) - (1.0 - y) * p ** gamma * np.log(1.0 - p)
    return float(out) if out.ndim == 0 else out


def surrogate_term(ratio, advantage, clip_eps: float):
    """``min(ratio * A, clip(ratio, 1 - eps, 1 + eps) * A)``."""
    ratio = np.asarray(ratio, dtype=np.float64)
    a = np.asarray(advantage, dtype=np.float64)
    out = np.minimum(ratio * a, np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * a)
    return float(out) if out.ndim == 0 else out


def _clamped(p, floor):
    pc = np.clip(p, floor, 1.0 - floor)
    return pc, (p > floor) & (p < 1.0 - floor)


def grl_objective(batch: GRLBatch, cfg: GRLConfig) -> ObjectiveTerms:
    """Group-relative objective ``J`` (to be maximized) and ``dJ/dlogits``.

    Per member: clipped ratio surrogate on the advantage, minus
    ``kl_beta`` times the KL approximation against the reference policy,
    minus ``ce_alpha`` times the BCE of the select probability against the
    crop label. ``ratio_mode`` picks whose probability the ratio and KL use:
    the select probability, or that of the sampled action. Members are
    averaged; the reference probabilities carry no gradient.
    """
    if batch.ref_probs is None:
        raise ValidationError("grl_objective needs reference probabilities (take a RefSnapshot first)")
    ref = np.asarray(batch.ref_probs, dtype=np.float64)
    if ref.shape != batch.probs.shape:
        raise ValidationError("reference probabilities do not match the batch")
    n = len(batch.rewards)
    eps, floor = cfg.clip_eps, cfg.prob_floor
    A = batch.advantages

    p_sel, sel_ok = _clamped(batch.probs[:, 1], floor)
    if cfg.ratio_mode == "select_prob":
        q_raw, q_ref_raw = batch.probs[:, 1], ref[:, 1]
        sign = np.ones(n)
    else:
        idx = np.arange(n)
        q_raw, q_ref_raw = batch.probs[idx, batch.actions], ref[idx, batch.actions]
        sign = np.where(batch.actions == 1, 1.0, -1.0)
    q, q_ok = _clamped(q_raw, floor)
    q_ref, _ = _clamped(q_ref_raw, floor)

    s1 = q / q_ref
    unclipped = s1 * A
    clipped = np.clip(s1, 1.0 - eps, 1.0 + eps) * A
    surr = np.minimum(unclipped, clipped)
    d_surr = np.where(unclipped <= clipped, A / q_ref, 0.0)

    r = q_ref / q
    kl = r - np.log(r) - 1.0
    d_kl = 1.0 / q - q_ref / (q * q)

    y = batch.labels
    ce = -y * np.log(p_sel) - (1.0 - y) * np.log(1.0 - p_sel)
    d_ce = -y / p_sel + (1.0 - y) / (1.0 - p_sel)

    terms = surr - cfg.kl_beta * kl - cfg.ce_alpha * ce
    J = float(np.sum(terms) / n)

    # d q / d(z1 - z0): sampled select behaves like p_sel, sampled discard flips sign
    dJ_dq = np.where(q_ok, d_surr - cfg.kl_beta * d_kl, 0.0)
    dJ_dpsel = np.where(sel_ok, -cfg.ce_alpha * d_ce, 0.0)
    p1 = batch.probs[:, 1]
    q_raw = np.asarray(q_raw)
    g_margin = (dJ_dq * q_raw * (1.0 - q_raw) * sign + dJ_dpsel * p1 * (1.0 - p1)) / n
    grad = np.stack([-g_margin, g_margin], axis=1)
    return ObjectiveTerms(J, grad, float(np.mean(surr)), float(np.mean(kl)), float(np.mean(ce)))


def supervised_objective(p_select, y, kind: str = "ce", gamma: float = 2.0, prob_floor: float = 1e-6):
    """Mean classification loss and its gradient on the two logits.

    ``kind``: ``"ce"``, ``"balanced_ce"`` or ``"focal"``.
    """
    p_raw = np.asarray(p_select, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = p_raw.size
    p, ok = _clamped(p_raw, prob_floor)
    weights = np.ones(n)
    if kind in ("ce", "balanced_ce"):
        loss = -y * np.log(p) - (1.0 - y) * np.log(1.0 - p)
        dl_dp = -y / p + (1.0 - y) / (1.0 - p)
        if kind == "balanced_ce":
            n_pos = float(y.sum())
            n_neg = n - n_pos
            w_pos = n / (2.0 * n_pos) if n_pos > 0 else 1.0
            w_neg = n / (2.0 * n_neg) if n_neg > 0 else 1.0
            weights = np.where(y > 0, w_pos, w_neg)
    elif kind == "focal":
        lp, lq = np.log(p), np.log(1.0 - p)
        loss = -y * (1.0 - p) ** gamma * lp - (1.0 - y) * p ** gamma * lq
        dl_dp = (y * (gamma * (1.0 - p) ** (gamma - 1.0) * lp - (1.0 - p) ** gamma / p)
                 + (1.0 - y) * (-gamma * p ** (gamma - 1.0) * lq + p ** gamma / (1.0 - p)))
    else:
        raise ValidationError(f"unknown supervised loss {kind!r}")
    total = float(np.sum(weights * loss) / n)
    g_margin = np.where(ok, weights * dl_dp, 0.0) * p_raw * (1.0 - p_raw) / n
    return total, np.stack([-g_margin, g_margin], axis=1)


def snapshot_ref(params: GlanceParams, epoch: int) -> RefSnapshot:
    """Frozen deep copy of ``params`` to serve as the reference policy."""
    frozen = params.copy()
    for arr in (frozen.W1, frozen.b1, frozen.W2, frozen.b2, frozen.feature_mean, frozen.feature_scale):
        arr.setflags(write=False)
    return RefSnapshot(params=frozen, epoch=int(epoch))
