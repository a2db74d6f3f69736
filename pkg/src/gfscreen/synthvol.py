"""Deterministic synthetic volumetric scans with ellipsoidal lesions.

Intensities are synthesized in window units (HU-like), then clipped and
normalized to [0, 1] with :func:`normalize_window`, so both the chest and
the abdomen windows go through the same generator.

All randomness comes from numpy's ``PCG64`` bit generator seeded through a
``SeedSequence``; streams are split by integer keys (:func:`make_rng`), which
keeps generated scans bit-identical across platforms.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from ._validation import ValidationError, check_triple

__all__ = [
    "HUWindow",
    "WINDOWS",
    "VolumeSpec",
    "Lesion",
    "ScanRecord",
    "make_rng",
    "normalize_window",
    "foreground_fraction",
    "generate_scan",
]


@dataclass(frozen=True)
class HUWindow:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValidationError(f"window lo must be < hi, got [{self.lo}, {self.hi}]")


WINDOWS = {
    "chest": HUWindow(-900.0, 650.0),
    "abdomen": HUWindow(-175.0, 250.0),
}

_POLARITIES = ("mixed", "bright", "dark")


def make_rng(seed: int, *keys: int) -> np.random.Generator:
    """PCG64 generator for the stream identified by ``(seed, *keys)``."""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *(int(k) & 0xFFFFFFFFFFFFFFFF for k in keys)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


@dataclass(frozen=True)
class VolumeSpec:
    """Recipe for one synthetic scan.

    ``target_fg_fraction`` is the intended fraction of lesion voxels; zero
    produces a healthy scan. ``lesion_polarity`` selects the sign of the
    lesion intensity delta (``"mixed"`` draws it per lesion).
    ``texture_scale`` and ``organ_scale`` multiply the amplitude of the
    smooth background texture and of the organ blobs; ``noise_scale`` is the
    std of added white noise.
    """

    dims: tuple[int, int, int] = (48, 48, 16)
    spacing: tuple[float, float, float] = (1.0, 1.0, 3.0)
    window_tag: str = "abdomen"
    lesion_count_range: tuple[int, int] = (1, 3)
    target_fg_fraction: float = 0.00085
    noise_scale: float = 0.01
    seed: int = 0
    lesion_polarity: str = "mixed"
    texture_scale: float = 1.0
    organ_scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "dims", check_triple(self.dims, "dims", minimum=8))
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))
        object.__setattr__(self, "lesion_count_range", tuple(int(v) for v in self.lesion_count_range))
        if self.window_tag not in WINDOWS:
            raise ValidationError(f"window_tag must be one of {sorted(WINDOWS)}, got {self.window_tag!r}")
        lo, hi = self.lesion_count_range
        if lo < 0 or lo > hi:
            raise ValidationError(f"lesion_count_range must satisfy 0 <= min <= max, got {(lo, hi)}")
        if not 0.0 <= self.target_fg_fraction < 0.05:
            raise ValidationError(f"target_fg_fraction must lie in [0, 0.05), got {self.target_fg_fraction}")
        if min(self.noise_scale, self.texture_scale, self.organ_scale) < 0:
            raise ValidationError("noise_scale, texture_scale and organ_scale must be >= 0")
        if not 0 <= int(self.seed) < 2**64:
            raise ValidationError("seed must be an unsigned 64-bit integer")
        if self.lesion_polarity not in _POLARITIES:
            raise ValidationError(f"lesion_polarity must be one of {_POLARITIES}")

    @property
    def window(self) -> HUWindow:
        return WINDOWS[self.window_tag]

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "window_tag": self.window_tag,
            "lesion_count_range": list(self.lesion_count_range),
            "target_fg_fraction": self.target_fg_fraction,
            "noise_scale": self.noise_scale,
            "seed": int(self.seed),
            "lesion_polarity": self.lesion_polarity,
            "texture_scale": self.texture_scale,
            "organ_scale": self.organ_scale,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "VolumeSpec":
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()})


@dataclass(frozen=True)
class Lesion:
    """Axis-aligned ellipsoid in voxel coordinates (voxel centers are integers)."""

    center: tuple[float, float, float]
    semi_axes: tuple[float, float, float]
    delta: float

    def bbox(self, dims) -> tuple[slice, slice, slice]:
        sl = []
        for c, a, n in zip(self.center, self.semi_axes, dims):
            lo = max(int(np.ceil(c - a)), 0)
            hi = min(int(np.floor(c + a)), n - 1)
            sl.append(slice(lo, max(hi + 1, lo)))
        return tuple(sl)

    def voxel_mask(self, dims) -> np.ndarray:
        """Boolean grid of voxels whose centers fall inside the ellipsoid."""
        dims = tuple(dims)
        mask = np.zeros(dims, dtype=bool)
        box = self.bbox(dims)
        mask[box] = _ellipsoid_inside(box, self.center, self.semi_axes)
        return mask

    def n_voxels(self, dims) -> int:
        box = self.bbox(dims)
        return int(_ellipsoid_inside(box, self.center, self.semi_axes).sum())

    def to_dict(self) -> dict:
        return {"center": list(self.center), "semi_axes": list(self.semi_axes), "delta": self.delta}

    @classmethod
    def from_dict(cls, d: dict) -> "Lesion":
        return cls(tuple(float(v) for v in d["center"]),
                   tuple(float(v) for v in d["semi_axes"]), float(d["delta"]))


def _ellipsoid_inside(box, center, semi_axes) -> np.ndarray:
    axes = [np.arange(s.start, s.stop, dtype=np.float64) for s in box]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    r2 = (((gx - center[0]) / semi_axes[0]) ** 2
          + ((gy - center[1]) / semi_axes[1]) ** 2
          + ((gz - center[2]) / semi_axes[2]) ** 2)
    return r2 <= 1.0


@dataclass
class ScanRecord:
    volume: np.ndarray
    mask: np.ndarray
    lesions: list[Lesion]
    healthy: bool
    spec: VolumeSpec
    scan_id: str = ""
    meta: dict = field(default_factory=dict)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.volume.shape)


def normalize_window(raw, w: HUWindow) -> np.ndarray:
    """Clip to the window and rescale: ``v -> clamp((v - lo) / (hi - lo), 0, 1)``."""
    raw = np.asarray(raw, dtype=np.float64)
    return np.clip((raw - w.lo) / (w.hi - w.lo), 0.0, 1.0)


def foreground_fraction(mask) -> float:
    mask = np.asarray(mask)
    if mask.size == 0:
        return 0.0
    return float(np.count_nonzero(mask)) / mask.size


def _value_noise(dims, rng: np.random.Generator, cell: float) -> np.ndarray:
    # random lattice every `cell` voxels, trilinearly interpolated
    lattice_shape = tuple(int(np.ceil((n - 1) / cell)) + 2 for n in dims)
    lattice = rng.uniform(-1.0, 1.0, size=lattice_shape)
    coords = np.meshgrid(*[np.arange(n, dtype=np.float64) / cell for n in dims], indexing="ij")
    return ndimage.map_coordinates(lattice, coords, order=1, mode="nearest")


def _background(spec: VolumeSpec, rng: np.random.Generator) -> np.ndarray:
    dims = spec.dims
    u = np.full(dims, 0.30)
    for octave, amp in enumerate((0.08, 0.04, 0.02)):
        u += spec.texture_scale * amp * _value_noise(dims, rng, cell=16.0 / 2**octave)
    grids = np.meshgrid(*[np.arange(n, dtype=np.float64) for n in dims], indexing="ij")
    for _ in range(int(rng.integers(1, 4))):
        center = [rng.uniform(0.25 * n, 0.75 * n) for n in dims]
        sigma = [rng.uniform(0.15, 0.3) * n for n in dims]
        amp = spec.organ_scale * rng.uniform(0.15, 0.3)
        r2 = sum(((g - c) / s) ** 2 for g, c, s in zip(grids, center, sigma))
        u += amp * np.exp(-0.5 * r2)
    return u


def _calibrated_semi_axes(target: float, aspect: np.ndarray, frac: np.ndarray) -> np.ndarray:
    """Scale ``aspect`` so the voxelized ellipsoid holds about ``target`` voxels.

    Every semi-axis stays >= 1 voxel.
    """
    s_min = 1.0 / aspect.min()

    def count(s):
        axes = s * aspect
        ext = int(np.ceil(axes.max())) + 1
        box = tuple(slice(-ext, ext + 1) for _ in range(3))
        return int(_ellipsoid_inside(box, frac, axes).sum())

    if count(s_min) >= target:
        return s_min * aspect
    lo, hi = s_min, s_min
    while count(hi) < target:
        hi *= 1.5
    for _ in range(30):
        mid = 0.5 * (lo + hi)
        if count(mid) < target:
            lo = mid
        else:
            hi = mid
    s = lo if abs(count(lo) - target) < abs(count(hi) - target) else hi
    return s * aspect


def _place_lesions(spec: VolumeSpec, rng: np.random.Generator) -> list[Lesion]:
    if spec.target_fg_fraction == 0.0:
        return []
    lo, hi = spec.lesion_count_range
    k = int(rng.integers(lo, hi + 1))
    if k == 0:
        return []
    total = spec.target_fg_fraction * float(np.prod(spec.dims))
    shares = rng.uniform(0.5, 1.5, size=k)
    shares = shares / shares.sum()
    lesions = []
    for i in range(k):
        aspect = rng.uniform(0.75, 1.33, size=3)
        aspect = aspect / np.prod(aspect) ** (1.0 / 3.0)
        frac = rng.uniform(0.0, 1.0, size=3)
        axes = _calibrated_semi_axes(total * shares[i], aspect, frac)
        center = []
        for n, a, f in zip(spec.dims, axes, frac):
            # integer base b such that b + f - a >= 0 and b + f + a <= n - 1
            b_lo = int(np.ceil(a - f))
            b_hi = int(np.floor(n - 1 - a - f))
            if b_lo > b_hi:
                raise ValidationError(
                    f"dims {spec.dims} too small to contain a lesion with semi-axes "
                    f"{tuple(round(float(x), 2) for x in axes)}")
            center.append(float(rng.integers(b_lo, b_hi + 1)) + float(f))
        magnitude = float(rng.uniform(0.15, 0.4))
        if spec.lesion_polarity == "bright":
            sign = 1.0
        elif spec.lesion_polarity == "dark":
            sign = -1.0
        else:
            sign = 1.0 if rng.uniform() < 0.5 else -1.0
        lesions.append(Lesion(tuple(center), tuple(float(a) for a in axes), sign * magnitude))
    return lesions


def generate_scan(spec: VolumeSpec, scan_id: str | None = None) -> ScanRecord:
    """Synthesize one scan; a pure function of ``spec``."""
    rng_bg = make_rng(spec.seed, 0)
    rng_lesion = make_rng(spec.seed, 1)
    rng_noise = make_rng(spec.seed, 2)

    u = _background(spec, rng_bg)
    lesions = _place_lesions(spec, rng_lesion)
    mask = np.zeros(spec.dims, dtype=bool)
    for lesion in lesions:
        m = lesion.voxel_mask(spec.dims)
        u[m] += lesion.delta
        mask |= m
    if spec.noise_scale > 0:
        u += spec.noise_scale * rng_noise.standard_normal(spec.dims)

    w = spec.window
    raw = w.lo + u * (w.hi - w.lo)
    volume = normalize_window(raw, w).astype(np.float32)
    return ScanRecord(
        volume=volume,
        mask=mask,
        lesions=lesions,
        healthy=not lesions,
        spec=spec,
        scan_id=scan_id if scan_id is not None else f"scan-{int(spec.seed)}",
    )
