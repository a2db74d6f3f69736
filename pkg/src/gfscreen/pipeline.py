"""End-to-end glance/focus training, glance-filtered inference and evaluation."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from ._validation import NumericalError, ValidationError, check_triple
from .cropgrid import SubVolume, extract_subvolume, random_crop_group, sliding_windows, stitch
from .focus import FocusParams, FocusSegmenter, OracleFocus, OracleQuality, extract_features
from .glance import GlanceParams, decide, glance_features, policy_backward, policy_forward, sample_actions
from .grl import (
    GRLBatch,
    GRLConfig,
    action_conditioned_reward,
    detection_reward,
    dsc_reward,
    group_advantages,
    grl_objective,
    snapshot_ref,
    supervised_objective,
)
from .metrics import (
    EvalReport,
    FlopModel,
    eval_detection,
    eval_dsc,
    eval_fp_rate,
    flop_report,
    glance_sens_spec,
    preserved_ratio,
)
from .optim import AdamW
from .synthvol import ScanRecord, make_rng

__all__ = [
    "TrainConfig",
    "EpochStats",
    "TrainState",
    "Trainer",
    "train",
    "infer_scan",
    "screen_scans",
    "evaluate",
    "ABLATION_VARIANTS",
    "variant_config",
    "run_ablation",
    "GFScreen",
]

log = logging.getLogger(__name__)

OBJECTIVES = ("grl", "ce", "balanced_ce", "focal")
ABLATION_VARIANTS = ("grl_full", "grl_no_ce", "grl_dsc_reward", "ce_only", "balanced_ce", "focal")
LOSS_CURVE_COLUMNS = ("step", "epoch", "neg_J", "surrogate", "kl", "ce", "focus_loss", "mean_reward", "select_rate")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    steps_per_epoch: int = 20
    batch_volumes: int = 4
    crops_per_volume: int = 4
    lr_glance: float = 3e-3
    lr_focus: float = 1e-2
    weight_decay: float = 0.01
    cosine: bool = True
    crop_size: tuple[int, int, int] = (16, 16, 8)
    pos_bias: float = 0.5
    grl: GRLConfig = field(default_factory=GRLConfig)
    focus_mode: str = "oracle"
    oracle: OracleQuality = field(default_factory=OracleQuality)
    glance_hidden: int = 16
    objective: str = "grl"
    focal_gamma: float = 2.0
    standardize_crops: int = 256
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "crop_size", check_triple(self.crop_size, "crop_size"))
        if isinstance(self.grl, dict):
            object.__setattr__(self, "grl", GRLConfig(**self.grl))
        if isinstance(self.oracle, dict):
            object.__setattr__(self, "oracle", OracleQuality(**self.oracle))
        if self.epochs < 0 or self.steps_per_epoch < 1:
            raise ValidationError("epochs must be >= 0 and steps_per_epoch >= 1")
        if self.batch_volumes * self.crops_per_volume != self.grl.group_size:
            raise ValidationError(
                f"batch_volumes x crops_per_volume = {self.batch_volumes * self.crops_per_volume} "
                f"must equal grl.group_size = {self.grl.group_size}")
        if self.focus_mode not in ("oracle", "trainable"):
            raise ValidationError("focus_mode must be 'oracle' or 'trainable'")
        if self.objective not in OBJECTIVES:
            raise ValidationError(f"objective must be one of {OBJECTIVES}")
        if not 0.0 <= self.pos_bias <= 1.0:
            raise ValidationError("pos_bias must lie in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["crop_size"] = list(self.crop_size)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "crop_size" in d:
            d["crop_size"] = tuple(d["crop_size"])
        return cls(**d)


@dataclass
class EpochStats:
    epoch: int
    neg_J: float
    surrogate: float
    kl: float
    ce: float
    focus_loss: float
    mean_reward: float
    select_rate: float
    selected_reward: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainState:
    """Everything needed to continue training bit-exactly."""

    glance: GlanceParams
    focus: FocusParams
    glance_opt: AdamW
    focus_opt: AdamW
    epoch: int = 0
    best_epoch: int = -1
    best_score: float = -np.inf
    best_glance: GlanceParams | None = None
    best_focus: FocusParams | None = None


def _make_focus(cfg: TrainConfig):
    if cfg.focus_mode == "oracle":
        q = cfg.oracle
        return OracleFocus(q.dsc_full, q.frac_exponent, q.center_penalty, q.fail_floor,
                           q.seed_salt, q.false_alarm).fit()
    return FocusSegmenter(lr=cfg.lr_focus, weight_decay=cfg.weight_decay)


class Trainer:
    """Joint training loop; the glance and focus updates share one forward pass."""

    def __init__(self, cfg: TrainConfig, scans: list[ScanRecord]):
        if not scans:
            raise ValidationError("training needs at least one scan")
        self.cfg = cfg
        self.scans = list(scans)
        self.focus_model = _make_focus(cfg)
        self.loss_rows: list[dict] = []
        self.history: list[EpochStats] = []

    @property
    def total_steps(self) -> int:
        return self.cfg.epochs * self.cfg.steps_per_epoch

    def init_state(self) -> TrainState:
        cfg = self.cfg
        glance = GlanceParams.init(make_rng(cfg.seed, 5), hidden=cfg.glance_hidden)
        rng = make_rng(cfg.seed, 6)
        feats = []
        per_scan = max(1, cfg.standardize_crops // len(self.scans))
        for scan in self.scans:
            feats += [glance_features(s) for s in random_crop_group(scan, per_scan, cfg.crop_size, rng, cfg.pos_bias)]
        glance = glance.fit_standardization(np.stack(feats))
        focus = FocusParams.zeros()
        return TrainState(
            glance=glance,
            focus=focus,
            glance_opt=AdamW(glance.n_trainable, lr=cfg.lr_glance, weight_decay=cfg.weight_decay,
                             total_steps=self.total_steps, cosine=cfg.cosine),
            focus_opt=AdamW(focus.to_vector().size, lr=cfg.lr_focus, weight_decay=cfg.weight_decay,
                            total_steps=self.total_steps, cosine=cfg.cosine),
        )

    def _segment(self, state: TrainState, sub: SubVolume, scan: ScanRecord):
        if self.cfg.focus_mode == "oracle":
            return self.focus_model.segment_subvolume(sub, scan)
        self.focus_model.params_ = state.focus
        return self.focus_model.segment_subvolume(sub, scan)

    def _rewards(self, overlap, dscs, labels, actions):
        grl = self.cfg.grl
        if grl.ratio_mode == "select_prob":
            return overlap.astype(np.float64) if grl.reward_kind == "binary_detection" else dscs
        gt_empty = labels == 0
        if grl.reward_kind == "binary_detection":
            return action_conditioned_reward(actions, overlap, gt_empty)
        return np.where(actions == 1, dscs, gt_empty.astype(np.float64))

    def step(self, state: TrainState, ref: GlanceParams, rng: np.random.Generator) -> dict:
        cfg = self.cfg
        idx = rng.choice(len(self.scans), size=cfg.batch_volumes, replace=len(self.scans) < cfg.batch_volumes)
        subs, owners = [], []
        for i in idx:
            scan = self.scans[int(i)]
            group = random_crop_group(scan, cfg.crops_per_volume, cfg.crop_size, rng, cfg.pos_bias)
            subs += group
            owners += [scan] * len(group)

        preds = [self._segment(state, s, scan) for s, scan in zip(subs, owners)]
        labels = np.array([s.label for s in subs], dtype=np.float64)
        overlap = np.array([detection_reward(p.mask, s.mask_slice) for p, s in zip(preds, subs)])
        dscs = np.array([dsc_reward(p.mask, s.mask_slice) for p, s in zip(preds, subs)])

        F = np.stack([glance_features(s) for s in subs])
        probs, _ = policy_forward(state.glance, F)
        ref_probs, _ = policy_forward(ref, F)
        actions = sample_actions(probs[:, 1], rng)
        rewards = self._rewards(overlap, dscs, labels, actions)

        row = {"mean_reward": float(rewards.mean()), "select_rate": float(actions.mean()),
               "selected_reward": float(overlap[actions == 1].mean()) if actions.any() else 0.0}
        if cfg.objective == "grl":
            batch = GRLBatch(F, labels, actions, probs, ref_probs, rewards,
                             group_advantages(rewards, cfg.grl.std_floor))
            terms = grl_objective(batch, cfg.grl)
            upstream = -terms.grad_logits
            row.update(neg_J=-terms.J, surrogate=terms.surrogate, kl=terms.kl, ce=terms.ce)
        else:
            loss, upstream = supervised_objective(probs[:, 1], labels, cfg.objective, cfg.focal_gamma,
                                                  cfg.grl.prob_floor)
            row.update(neg_J=loss, surrogate=0.0, kl=0.0, ce=loss)
        grad = policy_backward(state.glance, F, upstream).to_vector()
        if not (np.isfinite(row["neg_J"]) and np.all(np.isfinite(grad))):
            raise NumericalError(f"non-finite glance loss/gradient at epoch {state.epoch}")
        state.glance = state.glance.with_vector(state.glance_opt.step(state.glance.to_vector(), grad))

        focus_loss = 0.0
        if cfg.focus_mode == "trainable":
            batch = [(extract_features(s.voxels), s.mask_slice.astype(np.float64)) for s in subs]
            from .focus import train_step_focus

            state.focus, focus_loss = train_step_focus(state.focus, batch, cfg.lr_focus, state.focus_opt)
            if not np.isfinite(focus_loss):
                raise NumericalError(f"non-finite focus loss at epoch {state.epoch}")
        row["focus_loss"] = float(focus_loss)
        return row

    def run_epoch(self, state: TrainState) -> EpochStats:
        cfg = self.cfg
        ref = snapshot_ref(state.glance, state.epoch)
        rng = make_rng(cfg.seed, 7, state.epoch)
        rows = []
        for k in range(cfg.steps_per_epoch):
            row = self.step(state, ref.params, rng)
            row["step"] = state.epoch * cfg.steps_per_epoch + k
            row["epoch"] = state.epoch
            rows.append(row)
        self.loss_rows += [{c: r[c] for c in LOSS_CURVE_COLUMNS} for r in rows]
        stats = EpochStats(
            epoch=state.epoch,
            **{k: float(np.mean([r[k] for r in rows])) for k in
               ("neg_J", "surrogate", "kl", "ce", "focus_loss", "mean_reward", "select_rate", "selected_reward")},
        )
        self.history.append(stats)
        if stats.selected_reward > state.best_score:
            state.best_score = stats.selected_reward
            state.best_epoch = state.epoch
            state.best_glance = state.glance.copy()
            state.best_focus = state.focus.copy()
        state.epoch += 1
        log.info("epoch %d: -J=%.4f reward=%.3f select=%.3f selected_reward=%.3f", stats.epoch,
                 stats.neg_J, stats.mean_reward, stats.select_rate, stats.selected_reward)
        return stats

    def fit(self, state: TrainState | None = None, stop_after: int | None = None) -> TrainState:
        state = state if state is not None else self.init_state()
        last = self.cfg.epochs if stop_after is None else min(self.cfg.epochs, stop_after)
        while state.epoch < last:
            self.run_epoch(state)
        return state


def train(cfg: TrainConfig, scans: list[ScanRecord]):
    """Train both models; returns ``(glance_params, focus_params, epoch_stats)``."""
    trainer = Trainer(cfg, scans)
    state = trainer.fit()
    return state.glance, state.focus, trainer.history


def infer_scan(glance: GlanceParams | None, focus, scan: ScanRecord, window, stride, tau: float = 0.5,
               seg_threshold: float = 0.5, select_all: bool = False):
    """Sliding-window screening of one scan.

    Windows the glance model selects go to ``focus``; the rest count as
    background. ``glance=None`` is the segment-everything baseline.
    Returns ``(mask, stats)`` where stats lists every window with its
    selection probability and decision.
    """
    regions = sliding_windows(scan.dims, window, stride)
    entries, selected, p_select = [], [], []
    for region in regions:
        sub = extract_subvolume(scan, region)
        if glance is None or select_all:
            keep, p = True, 1.0
        else:
            probs, _ = policy_forward(glance, glance_features(sub))
            p = float(probs[1])
            keep = decide(probs, tau)
        if keep:
            entries.append((region, focus.segment_subvolume(sub, scan).probs))
        else:
            entries.append((region, None))
        selected.append(bool(keep))
        p_select.append(p)
    kept = [(r, pr) for (r, pr), s in zip(entries, selected) if s]
    mask = stitch(scan.dims, kept, [True] * len(kept), seg_threshold)
    stats = {
        "scan_id": scan.scan_id,
        "glance_used": glance is not None,
        "n_windows": len(regions),
        "n_selected": int(sum(selected)),
        "windows": [{"region": r.to_dict(), "selected": s, "p_select": p}
                    for r, s, p in zip(regions, selected, p_select)],
    }
    return mask, stats


def evaluate(results, fm: FlopModel, variant: str = "") -> EvalReport:
    """Aggregate metrics over ``(scan, pred_mask, stats, split)`` tuples."""
    per_scan, decisions, labels = [], [], []
    n_total = n_sel = 0
    glance_used = False
    for scan, pred, stats, split in results:
        dsc = eval_dsc(pred, scan.mask)
        per_scan.append({
            "scan_id": scan.scan_id, "split": split, "healthy": bool(scan.healthy), "dsc": dsc,
            "pred_voxels": int(np.count_nonzero(pred)), "gt_voxels": int(np.count_nonzero(scan.mask)),
            "n_windows": stats["n_windows"], "n_selected": stats["n_selected"],
        })
        for w in stats["windows"]:
            region = w["region"]
            sl = tuple(slice(o, o + s) for o, s in zip(region["origin"], region["size"]))
            labels.append(bool(scan.mask[sl].any()))
            decisions.append(bool(w["selected"]))
        n_total += stats["n_windows"]
        n_sel += stats["n_selected"]
        glance_used = glance_used or stats["glance_used"]
    det = eval_detection((pred, scan.mask) for scan, pred, _, _ in results)
    diseased = [r["dsc"] for r in per_scan if not r["healthy"]]
    healthy_preds = [pred for scan, pred, _, _ in results if scan.healthy]
    sens, spec = glance_sens_spec(decisions, labels)
    flops = flop_report(n_sel, n_total, fm, glance_used)
    return EvalReport(
        per_scan=per_scan,
        aggregate_dsc=float(np.mean(diseased)) if diseased else 1.0,
        detection_f1=det.f1,
        zero_positive=det.zero_positive,
        detection_counts={"tp": det.tp, "fp": det.fp, "fn": det.fn, "tn": det.tn},
        glance_sensitivity=sens,
        glance_specificity=spec,
        preserved_ratio=preserved_ratio(n_sel, n_total),
        positive_window_prevalence=float(np.mean(labels)) if labels else 0.0,
        fp_rate=eval_fp_rate(healthy_preds),
        n_windows=n_total,
        n_selected=n_sel,
        variant=variant,
        **flops,
    )


def variant_config(variant: str, cfg: TrainConfig) -> TrainConfig:
    """Training config for one row of the RL ablation."""
    if variant == "grl_full":
        return replace(cfg, objective="grl")
    if variant == "grl_no_ce":
        return replace(cfg, objective="grl", grl=replace(cfg.grl, ce_alpha=0.0))
    if variant == "grl_dsc_reward":
        return replace(cfg, objective="grl", grl=replace(cfg.grl, reward_kind="dsc"))
    if variant == "ce_only":
        return replace(cfg, objective="ce")
    if variant == "balanced_ce":
        return replace(cfg, objective="balanced_ce")
    if variant == "focal":
        return replace(cfg, objective="focal")
    raise ValidationError(f"unknown ablation variant {variant!r}; expected one of {ABLATION_VARIANTS}")


def screen_scans(glance, focus, scans_with_split, window, stride, tau, seg_threshold, select_all=False):
    out = []
    for scan, split in scans_with_split:
        mask, stats = infer_scan(glance, focus, scan, window, stride, tau, seg_threshold, select_all)
        out.append((scan, mask, stats, split))
    return out


def _inference_focus(cfg: TrainConfig, focus_params: FocusParams):
    model = _make_focus(cfg)
    if cfg.focus_mode == "trainable":
        model.params_ = focus_params
    return model


def run_ablation(variant: str, cfg: TrainConfig, train_scans, eval_scans, window=None, stride=None,
                 tau: float = 0.5, seg_threshold: float = 0.5) -> EvalReport:
    """Train one ablation variant and evaluate it on ``eval_scans`` ((scan, split) pairs)."""
    vcfg = variant_config(variant, cfg)
    window = tuple(window or cfg.crop_size)
    stride = tuple(stride or window)
    glance, focus_params, _ = train(vcfg, train_scans)
    focus = _inference_focus(vcfg, focus_params)
    results = screen_scans(glance, focus, eval_scans, window, stride, tau, seg_threshold)
    return evaluate(results, FlopModel.for_window(window, cfg.glance_hidden), variant=variant)


class GFScreen(BaseEstimator):
    """Glance-and-focus screener with an estimator interface.

    ``fit`` trains on a list of :class:`ScanRecord`; ``predict`` returns one
    binary lesion mask per scan. Training hyperparameters are collected in
    ``config`` (a :class:`TrainConfig`).
    """

    def __init__(self, config: TrainConfig | None = None, window=None, stride=None, tau=0.5,
                 seg_threshold=0.5, use_glance=True):
        self.config = config
        self.window = window
        self.stride = stride
        self.tau = tau
        self.seg_threshold = seg_threshold
        self.use_glance = use_glance

    def _cfg(self) -> TrainConfig:
        return self.config if self.config is not None else TrainConfig()

    def _geometry(self):
        window = tuple(self.window or self._cfg().crop_size)
        return window, tuple(self.stride or window)

    def fit(self, scans, y=None):
        trainer = Trainer(self._cfg(), scans)
        state = trainer.fit()
        self.glance_params_ = state.glance
        self.focus_params_ = state.focus
        self.history_ = trainer.history
        self.loss_curve_ = trainer.loss_rows
        self.focus_model_ = _inference_focus(self._cfg(), state.focus)
        return self

    def screen(self, scan: ScanRecord):
        check_is_fitted(self, "glance_params_")
        window, stride = self._geometry()
        glance = self.glance_params_ if self.use_glance else None
        return infer_scan(glance, self.focus_model_, scan, window, stride, self.tau, self.seg_threshold)

    def predict(self, scans) -> list[np.ndarray]:
        return [self.screen(scan)[0] for scan in scans]

    def evaluate(self, scans, splits=None) -> EvalReport:
        check_is_fitted(self, "glance_params_")
        window, stride = self._geometry()
        splits = splits or ["healthy-val" if s.healthy else "val" for s in scans]
        glance = self.glance_params_ if self.use_glance else None
        results = screen_scans(glance, self.focus_model_, list(zip(scans, splits)), window, stride,
                               self.tau, self.seg_threshold)
        return evaluate(results, FlopModel.for_window(window, self._cfg().glance_hidden))

    def score(self, scans, y=None) -> float:
        """Mean scan-level DSC."""
        return float(np.mean([eval_dsc(m, s.mask) for m, s in zip(self.predict(scans), scans)]))
