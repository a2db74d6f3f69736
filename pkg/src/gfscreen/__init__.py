"""Glance-and-focus lesion screening on synthetic volumes.

A lightweight glance policy scores fixed-size sub-volumes and discards the
ones it deems lesion-free; a focus segmenter runs only on what is kept. The
glance policy is trained with group-relative policy learning (normalized
group advantages, a clipped ratio surrogate and a KL penalty to a frozen
reference) or, for comparison, with plain classification losses.
"""
from ._validation import NumericalError, ValidationError
from .config import ExperimentConfig, load_config
from .cropgrid import CropRegion, SubVolume, extract_subvolume, random_crop_group, sliding_windows, stitch
from .focus import FocusParams, FocusSegmenter, OracleFocus, OracleQuality, dice_ce_loss, oracle_segment
from .glance import GlanceClassifier, GlanceParams, policy_backward, policy_forward
from .grl import GRLBatch, GRLConfig, group_advantages, grl_objective, kl_penalty, surrogate_term
from .metrics import EvalReport, FlopModel
from .pipeline import GFScreen, TrainConfig, Trainer, evaluate, infer_scan, run_ablation, train
from .synthvol import ScanRecord, VolumeSpec, generate_scan

__version__ = "0.1.0"

__all__ = [
    "NumericalError",
    "ValidationError",
    "ExperimentConfig",
    "load_config",
    "CropRegion",
    "SubVolume",
    "extract_subvolume",
    "random_crop_group",
    "sliding_windows",
    "stitch",
    "FocusParams",
    "FocusSegmenter",
    "OracleFocus",
    "OracleQuality",
    "dice_ce_loss",
    "oracle_segment",
    "GlanceClassifier",
    "GlanceParams",
    "policy_backward",
    "policy_forward",
    "GRLBatch",
    "GRLConfig",
    "group_advantages",
    "grl_objective",
    "kl_penalty",
    "surrogate_term",
    "EvalReport",
    "FlopModel",
    "GFScreen",
    "TrainConfig",
    "Trainer",
    "evaluate",
    "infer_scan",
    "run_ablation",
    "train",
    "ScanRecord",
    "VolumeSpec",
    "generate_scan",
]
