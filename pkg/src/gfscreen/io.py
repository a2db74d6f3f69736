"""On-disk formats: scan blobs with JSON sidecars, manifests, checkpoints.

Volumes are little-endian float32 in x-fastest (Fortran) order; masks are
packed bitsets in the same voxel order (``np.packbits``, little bit order).
All JSON is UTF-8 with sorted keys. Checkpoints are::

    b"GFSCKPT\\0" | u64 LE header length | header JSON | float32 weights | float64 resume

The header lists the named arrays of both sections with their shapes and an
FNV-1a 64 digest of each section. The float32 section is the canonical
weight vector; the optional float64 section carries the exact training state
(parameters, optimizer moments, best-epoch tracking, loss rows) so a resumed
run matches an uninterrupted one bit for bit.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._fnv import fnv1a64_hex
from ._validation import ValidationError
from .focus import FocusParams
from .glance import GlanceParams
from .grl import GRLConfig
from .synthvol import Lesion, ScanRecord, VolumeSpec

__all__ = [
    "CHECKPOINT_VERSION",
    "dump_json",
    "load_json",
    "config_digest",
    "write_mask",
    "read_mask",
    "write_scan",
    "read_scan",
    "write_manifest",
    "read_manifest",
    "Checkpoint",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_VERSION = 1
_MAGIC = b"GFSCKPT\0"


def dump_json(path, obj) -> None:
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False)
    Path(path).write_text(text + "\n", encoding="utf-8")


def load_json(path):
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"file not found: {path}")
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValidationError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from exc


def config_digest(cfg: dict) -> str:
    """FNV-1a 64 of the canonical (sorted, compact) JSON encoding."""
    return fnv1a64_hex(json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode("utf-8"))


# -- scans -------------------------------------------------------------------

def _volume_bytes(volume: np.ndarray) -> bytes:
    return np.asarray(volume, dtype="<f4").tobytes(order="F")


def _mask_bytes(mask: np.ndarray) -> bytes:
    bits = np.asarray(mask, dtype=bool).ravel(order="F")
    return np.packbits(bits, bitorder="little").tobytes()


def write_mask(path, mask) -> str:
    """Write a packed-bit mask blob; returns its digest."""
    blob = _mask_bytes(mask)
    Path(path).write_bytes(blob)
    return fnv1a64_hex(blob)


def read_mask(path, dims) -> np.ndarray:
    dims = tuple(int(n) for n in dims)
    n = int(np.prod(dims))
    raw = np.frombuffer(Path(path).read_bytes(), dtype=np.uint8)
    if raw.size != (n + 7) // 8:
        raise ValidationError(f"{path}: mask blob has {raw.size} bytes, expected {(n + 7) // 8} for dims {dims}")
    bits = np.unpackbits(raw, count=n, bitorder="little").astype(bool)
    return bits.reshape(dims, order="F")


def write_scan(directory, scan: ScanRecord, digest: str = "") -> Path:
    """Write ``<id>.vol``, ``<id>.mask`` and the ``<id>.json`` sidecar; returns the sidecar path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    stem = scan.scan_id
    vol = _volume_bytes(scan.volume)
    (directory / f"{stem}.vol").write_bytes(vol)
    mask_digest = write_mask(directory / f"{stem}.mask", scan.mask)
    spec = scan.spec
    sidecar = {
        "scan_id": stem,
        "dims": list(scan.dims),
        "spacing": list(spec.spacing),
        "window_tag": spec.window_tag,
        "healthy": bool(scan.healthy),
        "seed": int(spec.seed),
        "lesions": [lesion.to_dict() for lesion in scan.lesions],
        "spec": spec.to_dict(),
        "volume_file": f"{stem}.vol",
        "mask_file": f"{stem}.mask",
        "volume_digest": fnv1a64_hex(vol),
        "mask_digest": mask_digest,
        "config_digest": digest,
    }
    path = directory / f"{stem}.json"
    dump_json(path, sidecar)
    return path


def read_scan(sidecar_path) -> ScanRecord:
    sidecar_path = Path(sidecar_path)
    meta = load_json(sidecar_path)
    try:
        dims = tuple(int(n) for n in meta["dims"])
        vol_path = sidecar_path.parent / meta["volume_file"]
        mask_path = sidecar_path.parent / meta["mask_file"]
        spec = VolumeSpec.from_dict(meta["spec"])
        lesions = [Lesion.from_dict(d) for d in meta["lesions"]]
    except KeyError as exc:
        raise ValidationError(f"{sidecar_path}: sidecar missing field {exc.args[0]!r}") from exc
    for p in (vol_path, mask_path):
        if not p.is_file():
            raise ValidationError(f"file not found: {p}")
    vol_blob = vol_path.read_bytes()
    if fnv1a64_hex(vol_blob) != meta["volume_digest"]:
        raise ValidationError(f"{vol_path}: digest mismatch")
    n = int(np.prod(dims))
    if len(vol_blob) != 4 * n:
        raise ValidationError(f"{vol_path}: expected {4 * n} bytes for dims {dims}, got {len(vol_blob)}")
    volume = np.frombuffer(vol_blob, dtype="<f4").reshape(dims, order="F").astype(np.float32)
    mask = read_mask(mask_path, dims)
    return ScanRecord(volume=volume, mask=mask, lesions=lesions, healthy=bool(meta["healthy"]),
                      spec=spec, scan_id=meta["scan_id"])


# -- manifest ----------------------------------------------------------------

SPLITS = ("train", "val", "healthy-val")


def write_manifest(path, entries, digest: str = "") -> None:
    """``entries``: iterable of ``(scan_id, split, sidecar path relative to the manifest)``."""
    rows = []
    for scan_id, split, sidecar in entries:
        if split not in SPLITS:
            raise ValidationError(f"unknown split {split!r}; expected one of {SPLITS}")
        rows.append({"scan_id": scan_id, "split": split, "sidecar": str(sidecar), "config_digest": digest})
    text = json.dumps(rows, sort_keys=True, indent=2)
    Path(path).write_text(text + "\n", encoding="utf-8")


def read_manifest(path, splits=None) -> list[tuple[ScanRecord, str]]:
    """Load the scans of a manifest as ``(scan, split)`` pairs, optionally filtered by split."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"dataset manifest not found: {path}")
    rows = load_json(path)
    if not isinstance(rows, list):
        raise ValidationError(f"{path}: manifest must be a JSON list")
    out = []
    for row in rows:
        if splits is not None and row["split"] not in splits:
            continue
        out.append((read_scan(path.parent / row["sidecar"]), row["split"]))
    return out


# -- checkpoints -------------------------------------------------------------

def _pack(arrays: dict[str, np.ndarray], dtype: str):
    names = sorted(arrays)
    layout = [{"name": k, "shape": list(np.shape(arrays[k]))} for k in names]
    blob = b"".join(np.asarray(arrays[k], dtype=dtype).tobytes(order="C") for k in names)
    return layout, blob


def _unpack(layout, blob: bytes, dtype: str) -> dict[str, np.ndarray]:
    flat = np.frombuffer(blob, dtype=dtype)
    out, i = {}, 0
    for item in layout:
        shape = tuple(item["shape"])
        n = int(np.prod(shape)) if shape else 1
        out[item["name"]] = flat[i:i + n].astype(np.float64).reshape(shape)
        i += n
    if i != flat.size:
        raise ValidationError(f"checkpoint section has {flat.size} values, layout expects {i}")
    return out


def _model_arrays(glance: GlanceParams, focus: FocusParams, prefix: str = "") -> dict[str, np.ndarray]:
    return {
        f"{prefix}glance.W1": glance.W1, f"{prefix}glance.b1": glance.b1,
        f"{prefix}glance.W2": glance.W2, f"{prefix}glance.b2": glance.b2,
        f"{prefix}glance.feature_mean": glance.feature_mean,
        f"{prefix}glance.feature_scale": glance.feature_scale,
        f"{prefix}focus.weights": focus.weights, f"{prefix}focus.bias": np.array([focus.bias]),
    }


def _models_from(arrays: dict, prefix: str = ""):
    g = GlanceParams(*(arrays[f"{prefix}glance.{k}"].copy() for k in
                       ("W1", "b1", "W2", "b2", "feature_mean", "feature_scale")))
    f = FocusParams(arrays[f"{prefix}focus.weights"].copy(), float(arrays[f"{prefix}focus.bias"][0]))
    return g, f


@dataclass
class Checkpoint:
    glance: GlanceParams
    focus: FocusParams
    grl: GRLConfig
    epoch: int
    seed: int
    train_config: dict = field(default_factory=dict)
    history: list = field(default_factory=list)
    resume: dict | None = None
    config_digest: str = ""
    kind: str = "final"
    header: dict = field(default_factory=dict)


def save_checkpoint(path, glance: GlanceParams, focus: FocusParams, grl: GRLConfig, epoch: int, seed: int, *,
                    train_config: dict | None = None, history=None, resume: dict | None = None,
                    digest: str = "", kind: str = "final") -> None:
    """Write a checkpoint. ``resume`` maps names to float64 arrays (see :func:`state_arrays`)."""
    w_layout, w_blob = _pack(_model_arrays(glance, focus), "<f4")
    header = {
        "format_version": CHECKPOINT_VERSION,
        "kind": kind,
        "epoch": int(epoch),
        "seed": int(seed),
        "grl": grl.to_dict(),
        "train_config": train_config or {},
        "history": list(history or []),
        "config_digest": digest,
        "weights": {"layout": w_layout, "nbytes": len(w_blob), "digest": fnv1a64_hex(w_blob)},
        "resume": None,
    }
    r_blob = b""
    if resume is not None:
        r_layout, r_blob = _pack(resume, "<f8")
        header["resume"] = {"layout": r_layout, "nbytes": len(r_blob), "digest": fnv1a64_hex(r_blob)}
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")
    Path(path).write_bytes(_MAGIC + struct.pack("<Q", len(head)) + head + w_blob + r_blob)


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[:8] != _MAGIC or len(raw) < 16:
        raise ValidationError(f"{path}: not a checkpoint file")
    (n_head,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + n_head].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ValidationError(f"{path}: corrupt checkpoint header") from exc
    version = header.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {version!r} (expected {CHECKPOINT_VERSION})")
    off = 16 + n_head
    w = header["weights"]
    w_blob = raw[off:off + w["nbytes"]]
    if fnv1a64_hex(w_blob) != w["digest"]:
        raise ValidationError(f"{path}: weight digest mismatch")
    off += w["nbytes"]
    resume = None
    if header["resume"] is not None:
        r = header["resume"]
        r_blob = raw[off:off + r["nbytes"]]
        if fnv1a64_hex(r_blob) != r["digest"]:
            raise ValidationError(f"{path}: resume-state digest mismatch")
        resume = _unpack(r["layout"], r_blob, "<f8")
        off += r["nbytes"]
    if off != len(raw):
        raise ValidationError(f"{path}: {len(raw) - off} trailing bytes")
    if resume is not None:
        # exact float64 parameters win over the float32 copy
        glance, focus = _models_from(resume, "state.")
    else:
        glance, focus = _models_from(_unpack(w["layout"], w_blob, "<f4"))
    return Checkpoint(glance=glance, focus=focus, grl=GRLConfig(**header["grl"]), epoch=header["epoch"],
                      seed=header["seed"], train_config=header["train_config"], history=header["history"],
                      resume=resume, config_digest=header["config_digest"], kind=header["kind"], header=header)


def state_arrays(state, loss_rows, columns) -> dict[str, np.ndarray]:
    """Float64 arrays capturing a :class:`~gfscreen.pipeline.TrainState` exactly."""
    arrays = _model_arrays(state.glance, state.focus, "state.")
    arrays["opt.glance"] = state.glance_opt.state_vector()
    arrays["opt.focus"] = state.focus_opt.state_vector()
    arrays["best.epoch_score"] = np.array([float(state.best_epoch), float(state.best_score)])
    if state.best_glance is not None:
        arrays.update(_model_arrays(state.best_glance, state.best_focus, "best."))
    arrays["loss_rows"] = np.array([[float(r[c]) for c in columns] for r in loss_rows]).reshape(-1, len(columns))
    return arrays


def restore_state(ckpt: Checkpoint, state):
    """Load the resume section of ``ckpt`` into a freshly initialized ``state``; returns loss rows."""
    if ckpt.resume is None:
        raise ValidationError("checkpoint has no resume section")
    r = ckpt.resume
    state.glance, state.focus = _models_from(r, "state.")
    state.glance_opt.load_state_vector(r["opt.glance"])
    state.focus_opt.load_state_vector(r["opt.focus"])
    state.epoch = int(ckpt.epoch)
    state.best_epoch = int(r["best.epoch_score"][0])
    state.best_score = float(r["best.epoch_score"][1])
    if "best.glance.W1" in r:
        state.best_glance, state.best_focus = _models_from(r, "best.")
    return r["loss_rows"]
