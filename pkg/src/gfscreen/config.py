"""Experiment configuration: dataset recipe, training and inference settings.

A config file is a JSON object with the required fields ``seed``,
``dataset``, ``train`` and ``inference``; anything left out inside those
sections takes the library default, and the fully resolved config (with
every default spelled out) is what runs and what gets echoed to disk.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from importlib import resources
from pathlib import Path

import numpy as np

from ._validation import ValidationError, check_triple
from .io import SPLITS, config_digest, load_json
from .pipeline import TrainConfig
from .synthvol import VolumeSpec

__all__ = ["DatasetSpec", "InferenceParams", "ExperimentConfig", "load_config", "packaged_config"]

REQUIRED = ("seed", "dataset", "train", "inference")
_SPLIT_CODES = {"train": 1, "val": 2, "healthy-val": 3}


def _known(cls, d: dict, where: str) -> dict:
    names = set(cls.__dataclass_fields__)
    unknown = sorted(set(d) - names)
    if unknown:
        raise ValidationError(f"{where}: unknown field {unknown[0]!r}")
    return d


@dataclass(frozen=True)
class DatasetSpec:
    """Per-split scan counts plus the volume recipe shared by all scans.

    ``healthy-val`` scans use the same recipe with no lesions. The recipe's
    own ``seed`` is ignored; each scan gets a seed derived from the
    experiment seed, its split and its index.
    """

    counts: dict = field(default_factory=lambda: {"train": 40, "val": 15, "healthy-val": 10})
    volume: VolumeSpec = field(default_factory=VolumeSpec)

    def __post_init__(self):
        if isinstance(self.volume, dict):
            object.__setattr__(self, "volume", VolumeSpec.from_dict(_known(VolumeSpec, self.volume, "dataset.volume")))
        counts = dict(self.counts)
        for split in counts:
            if split not in SPLITS:
                raise ValidationError(f"dataset.counts: unknown split {split!r}; expected one of {SPLITS}")
        for split in SPLITS:
            n = counts.setdefault(split, 0)
            if not isinstance(n, int) or n < 0:
                raise ValidationError(f"dataset.counts.{split} must be a non-negative integer")
        object.__setattr__(self, "counts", {s: counts[s] for s in SPLITS})

    def to_dict(self) -> dict:
        return {"counts": dict(self.counts), "volume": self.volume.to_dict()}


@dataclass(frozen=True)
class InferenceParams:
    window: tuple[int, int, int] = (16, 16, 8)
    stride: tuple[int, int, int] = (16, 16, 8)
    tau: float = 0.5
    seg_threshold: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "window", check_triple(self.window, "inference.window"))
        object.__setattr__(self, "stride", check_triple(self.stride, "inference.stride"))
        if not 0.0 <= self.tau <= 1.0:
            raise ValidationError("inference.tau must lie in [0, 1]")
        if not 0.0 < self.seg_threshold < 1.0:
            raise ValidationError("inference.seg_threshold must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {"window": list(self.window), "stride": list(self.stride), "tau": self.tau,
                "seg_threshold": self.seg_threshold}


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a CLI run needs. ``seed`` drives data generation and training."""

    seed: int
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    train: TrainConfig = field(default_factory=TrainConfig)
    inference: InferenceParams = field(default_factory=InferenceParams)
    out_dir: str = "runs/default"

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or not 0 <= self.seed < 2**63:
            raise ValidationError(f"seed must be a non-negative integer, got {self.seed!r}")
        # the experiment seed is the single source of training randomness
        if self.train.seed != self.seed:
            object.__setattr__(self, "train", replace(self.train, seed=self.seed))

    @classmethod
    def from_dict(cls, d: dict, seed: int | None = None) -> "ExperimentConfig":
        if not isinstance(d, dict):
            raise ValidationError("config must be a JSON object")
        d = dict(d)
        if seed is not None:
            d["seed"] = int(seed)
        for name in REQUIRED:
            if name not in d:
                raise ValidationError(f"config: missing required field {name!r}")
        _known(cls, d, "config")
        for name in ("dataset", "train", "inference"):
            if not isinstance(d[name], dict):
                raise ValidationError(f"config.{name} must be an object")
        try:
            train = dict(d["train"])
            _known(TrainConfig, train, "train")
            train.setdefault("seed", d["seed"])
            return cls(
                seed=d["seed"],
                dataset=DatasetSpec(**_known(DatasetSpec, d["dataset"], "dataset")),
                train=TrainConfig.from_dict(train),
                inference=InferenceParams(**_known(InferenceParams, d["inference"], "inference")),
                out_dir=d.get("out_dir", cls.out_dir),
            )
        except TypeError as exc:
            raise ValidationError(f"config: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "dataset": self.dataset.to_dict(),
            "train": self.train.to_dict(),
            "inference": self.inference.to_dict(),
            "out_dir": self.out_dir,
        }

    @property
    def digest(self) -> str:
        return config_digest(self.to_dict())

    def scan_seed(self, split: str, index: int) -> int:
        ss = np.random.SeedSequence([self.seed, _SPLIT_CODES[split], index])
        return int(ss.generate_state(1, np.uint64)[0])

    def scan_specs(self):
        """``(scan_id, split, VolumeSpec)`` for every scan of the dataset."""
        out = []
        for split in SPLITS:
            for i in range(self.dataset.counts[split]):
                spec = replace(self.dataset.volume, seed=self.scan_seed(split, i))
                if split == "healthy-val":
                    spec = replace(spec, target_fg_fraction=0.0)
                out.append((f"{split}-{i:03d}", split, spec))
        return out

    def dump(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def packaged_config(name: str) -> Path:
    """Path of a config shipped with the package (``reference``, ``hard``, ``smoke``)."""
    stem = name[:-5] if name.endswith(".json") else name
    path = Path(str(resources.files("gfscreen") / "configs" / f"{stem}.json"))
    if not path.is_file():
        raise ValidationError(f"no packaged config named {name!r}")
    return path


def load_config(path_or_name, seed: int | None = None) -> ExperimentConfig:
    """Load a config file, falling back to a packaged config of that name."""
    path = Path(path_or_name)
    if not path.is_file() and path.parent == Path(".") and path.suffix in ("", ".json"):
        path = packaged_config(str(path_or_name))
    return ExperimentConfig.from_dict(load_json(path), seed=seed)
