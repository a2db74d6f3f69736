"""Crop geometry: sliding windows, random training crops, containment, stitching."""
from __future__ import annotations

from dataclasses import dataclass
from itertools import product

import numpy as np

from ._validation import ValidationError, check_probability, check_triple
from .synthvol import Lesion, ScanRecord

__all__ = [
    "CropRegion",
    "SubVolume",
    "sliding_windows",
    "extract_subvolume",
    "random_crop_group",
    "contained_fraction",
    "stitch",
]


@dataclass(frozen=True)
class CropRegion:
    origin: tuple[int, int, int]
    size: tuple[int, int, int]

    @property
    def slices(self) -> tuple[slice, slice, slice]:
        return tuple(slice(o, o + s) for o, s in zip(self.origin, self.size))

    @property
    def center(self) -> np.ndarray:
        # geometric center in voxel-center coordinates
        return np.asarray(self.origin, dtype=float) + (np.asarray(self.size, dtype=float) - 1.0) / 2.0

    def contains_point(self, point) -> bool:
        return all(o - 0.5 <= p < o + s - 0.5 for o, s, p in zip(self.origin, self.size, point))

    def fits(self, dims) -> bool:
        return all(o >= 0 and o + s <= n for o, s, n in zip(self.origin, self.size, dims))

    def to_dict(self) -> dict:
        return {"origin": list(self.origin), "size": list(self.size)}

    @classmethod
    def from_dict(cls, d: dict) -> "CropRegion":
        return cls(tuple(int(v) for v in d["origin"]), tuple(int(v) for v in d["size"]))


@dataclass
class SubVolume:
    voxels: np.ndarray
    mask_slice: np.ndarray
    region: CropRegion
    label: int
    scan_id: str = ""


def _axis_origins(n: int, w: int, s: int) -> list[int]:
    # a stride longer than the window would leave gaps, so it is capped at the window
    origins = list(range(0, n - w + 1, min(s, w)))
    if origins[-1] + w < n:
        origins.append(n - w)
    return origins


def sliding_windows(dims, window, stride) -> list[CropRegion]:
    """Exhaustive window cover; the last window on each axis ends at the border.

    Strides beyond the window length are treated as the window length.
    """
    dims = check_triple(dims, "dims")
    window = check_triple(window, "window")
    stride = check_triple(stride, "stride")
    if any(w > n for w, n in zip(window, dims)):
        raise ValidationError(f"window {window} larger than volume {dims}")
    per_axis = [_axis_origins(n, w, s) for n, w, s in zip(dims, window, stride)]
    return [CropRegion(tuple(o), window) for o in product(*per_axis)]


def extract_subvolume(scan: ScanRecord, region: CropRegion) -> SubVolume:
    if not region.fits(scan.dims):
        raise ValidationError(f"region {region} does not fit volume {scan.dims}")
    sl = region.slices
    mask_slice = scan.mask[sl]
    return SubVolume(
        voxels=scan.volume[sl],
        mask_slice=mask_slice,
        region=region,
        label=int(mask_slice.any()),
        scan_id=scan.scan_id,
    )


def random_crop_group(scan: ScanRecord, n_crops: int, size, rng: np.random.Generator,
                      pos_bias: float = 0.5) -> list[SubVolume]:
    """Draw ``n_crops`` training crops from ``scan``.

    With probability ``pos_bias`` (per crop, diseased scans only) the origin is
    drawn uniformly among origins whose crop contains the center voxel of a
    randomly chosen lesion; otherwise uniformly over all valid origins.
    """
    size = check_triple(size, "size")
    dims = scan.dims
    if any(s > n for s, n in zip(size, dims)):
        raise ValidationError(f"crop size {size} exceeds volume {dims}")
    pos_bias = check_probability(pos_bias, "pos_bias")
    crops = []
    for _ in range(int(n_crops)):
        biased = rng.uniform() < pos_bias
        if biased and scan.lesions:
            lesion = scan.lesions[int(rng.integers(len(scan.lesions)))]
            cvox = np.rint(lesion.center).astype(int)
            origin = []
            for c, s, n in zip(cvox, size, dims):
                lo, hi = max(0, c - s + 1), min(c, n - s)
                origin.append(int(rng.integers(lo, hi + 1)))
        else:
            origin = [int(rng.integers(0, n - s + 1)) for s, n in zip(size, dims)]
        crops.append(extract_subvolume(scan, CropRegion(tuple(origin), size)))
    return crops


def contained_fraction(region: CropRegion, lesion: Lesion, dims) -> float:
    """Share of the lesion's voxels that fall inside ``region``."""
    full = lesion.voxel_mask(dims)
    total = int(full.sum())
    if total == 0:
        raise ValidationError("degenerate lesion descriptor: zero voxels")
    return int(full[region.slices].sum()) / total


def stitch(dims, entries, selected, threshold: float = 0.5) -> np.ndarray:
    """Fuse per-window probabilities of the selected windows into a full mask.

    Overlaps are averaged; voxels no selected window covers get probability 0.
    """
    dims = check_triple(dims, "dims")
    if len(entries) != len(selected):
        raise ValidationError("entries and selected differ in length")
    acc = np.zeros(dims, dtype=np.float64)
    cnt = np.zeros(dims, dtype=np.int32)
    for (region, probs), keep in zip(entries, selected):
        if not keep:
            continue
        probs = np.asarray(probs, dtype=np.float64)
        if probs.shape != tuple(region.size):
            raise ValidationError(f"probability grid {probs.shape} does not match region {region.size}")
        sl = region.slices
        acc[sl] += probs
        cnt[sl] += 1
    mean = np.divide(acc, cnt, out=np.zeros_like(acc), where=cnt > 0)
    return (cnt > 0) & (mean >= threshold)
