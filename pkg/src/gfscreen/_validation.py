"""Input validation helpers shared by the estimators and the functional core."""
from __future__ import annotations

import numpy as np
from sklearn.utils.validation import check_array


class ValidationError(ValueError):
    """Raised for malformed inputs, configs and files (CLI exit code 1)."""


class NumericalError(RuntimeError):
    """Raised when a loss or gradient turns non-finite (CLI exit code 2)."""


def check_triple(value, name: str, *, minimum: int = 1) -> tuple[int, int, int]:
    try:
        triple = tuple(int(v) for v in value)
    except TypeError as exc:
        raise ValidationError(f"{name} must be an integer triple, got {value!r}") from exc
    if len(triple) != 3:
        raise ValidationError(f"{name} must have 3 entries, got {len(triple)}")
    if any(v < minimum for v in triple):
        raise ValidationError(f"{name} entries must be >= {minimum}, got {triple}")
    return triple


def check_volume(volume, name: str = "volume", dtype=np.float64) -> np.ndarray:
    """Return `volume` as a finite 3D array."""
    arr = check_array(volume, allow_nd=True, ensure_2d=False, dtype=dtype,
                      ensure_min_samples=1, input_name=name)
    if arr.ndim != 3:
        raise ValidationError(f"{name} must be 3D, got shape {arr.shape}")
    return arr


def check_mask(mask, shape: tuple[int, ...] | None = None, name: str = "mask") -> np.ndarray:
    arr = np.asarray(mask)
    if arr.ndim != 3:
        raise ValidationError(f"{name} must be 3D, got shape {arr.shape}")
    if shape is not None and arr.shape != tuple(shape):
        raise ValidationError(f"{name} shape {arr.shape} does not match {tuple(shape)}")
    return arr.astype(bool, copy=False)


def check_same_shape(a: np.ndarray, b: np.ndarray, what: str = "inputs") -> None:
    if a.shape != b.shape:
        raise ValidationError(f"{what} have mismatched shapes {a.shape} and {b.shape}")


def check_probability(p: float, name: str, *, open_interval: bool = False) -> float:
    p = float(p)
    ok = 0.0 < p < 1.0 if open_interval else 0.0 <= p <= 1.0
    if not ok:
        bounds = "(0, 1)" if open_interval else "[0, 1]"
        raise ValidationError(f"{name} must lie in {bounds}, got {p}")
    return p


def check_finite(value, what: str) -> None:
    if not np.all(np.isfinite(value)):
        raise NumericalError(f"non-finite value detected in {what}")
