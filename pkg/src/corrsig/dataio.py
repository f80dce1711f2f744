"""Dataset IO: per-patient slice files with JSON sidecars plus a manifest.

Layout: one directory per patient under the dataset root, containing
``slice_<i>.<channel>.raw`` files for channels t2w, adc, hist, mask, label.
Raw files are little-endian float32 (mask/label: uint8); each has a JSON
sidecar ``slice_<i>.<channel>.json`` with
{height, width, dtype, spacing_mm, missing_label}.  A ``manifest.json`` at
the root lists patients and their train/val/test split membership.
"""

import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import DataError

CHANNELS = ("t2w", "adc", "hist", "mask", "label")
SPLITS = ("train", "val", "test")


@dataclass
class SliceRecord:
    patient_id: str
    slice_index: int
    t2w: np.ndarray
    adc: np.ndarray
    mask: np.ndarray
    label: np.ndarray
    hist: Optional[np.ndarray] = None
    spacing_mm: tuple = (0.29, 0.29)
    missing_label: bool = False
    corrnet_map: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def shape(self):
        return self.t2w.shape


def _sidecar_path(raw_path):
    base, _ = os.path.splitext(raw_path)
    return base + ".json"


def _write_raw(path, arr, dtype):
    a = np.ascontiguousarray(arr, dtype=dtype)
    with open(path, "wb") as fh:
        fh.write(a.tobytes())


def _read_raw(path, dtype, count):
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except FileNotFoundError:
        raise DataError("missing raw file: %s" % path) from None
    arr = np.frombuffer(raw, dtype=dtype)
    if arr.size != count:
        raise DataError("%s: expected %d values, file holds %d" % (path, count, arr.size))
    return arr


def _channel_dtype(channel):
    return "|u1" if channel in ("mask", "label") else "<f4"


def write_slice(patient_dir, record: SliceRecord):
    os.makedirs(patient_dir, exist_ok=True)
    h, w = record.t2w.shape
    arrays = {
        "t2w": record.t2w,
        "adc": record.adc,
        "mask": record.mask,
        "label": record.label,
    }
    if record.hist is not None:
        arrays["hist"] = record.hist
    for channel, arr in arrays.items():
        raw_path = os.path.join(
            patient_dir, "slice_%d.%s.raw" % (record.slice_index, channel))
        _write_raw(raw_path, arr, _channel_dtype(channel))
        sidecar = {
            "height": int(h),
            "width": int(w),
            "dtype": "uint8" if channel in ("mask", "label") else "float32",
            "spacing_mm": [float(record.spacing_mm[0]), float(record.spacing_mm[1])],
            "missing_label": bool(record.missing_label),
        }
        with open(_sidecar_path(raw_path), "w") as fh:
            json.dump(sidecar, fh)


def read_slice(patient_dir, slice_index, patient_id=None, with_hist=True):
    if patient_id is None:
        patient_id = os.path.basename(os.path.normpath(patient_dir))
    t2w_raw = os.path.join(patient_dir, "slice_%d.t2w.raw" % slice_index)
    side_path = _sidecar_path(t2w_raw)
    try:
        with open(side_path) as fh:
            side = json.load(fh)
    except FileNotFoundError:
        raise DataError("missing sidecar: %s" % side_path) from None
    except json.JSONDecodeError as exc:
        raise DataError("bad sidecar %s: %s" % (side_path, exc)) from exc
    h, w = int(side["height"]), int(side["width"])
    spacing = tuple(side.get("spacing_mm", (0.29, 0.29)))
    missing_label = bool(side.get("missing_label", False))

    def load(channel, channels=1):
        path = os.path.join(patient_dir, "slice_%d.%s.raw" % (slice_index, channel))
        dtype = _channel_dtype(channel)
        arr = _read_raw(path, dtype, channels * h * w)
        if channels > 1:
            arr = arr.reshape(channels, h, w)
        else:
            arr = arr.reshape(h, w)
        if channel in ("mask", "label"):
            return (arr > 0).astype(np.uint8)
        return arr.astype(np.float32)

    hist = None
    if with_hist:
        hist_path = os.path.join(patient_dir, "slice_%d.hist.raw" % slice_index)
        if os.path.exists(hist_path):
            hist = load("hist", channels=3)
    return SliceRecord(
        patient_id=patient_id,
        slice_index=slice_index,
        t2w=load("t2w"),
        adc=load("adc"),
        mask=load("mask"),
        label=load("label"),
        hist=hist,
        spacing_mm=spacing,
        missing_label=missing_label,
    )


def slice_indices(patient_dir):
    indices = []
    for name in os.listdir(patient_dir):
        if name.endswith(".t2w.raw"):
            indices.append(int(name.split(".")[0].split("_")[1]))
    return sorted(indices)


def write_manifest(root, patients):
    """patients: list of {"id": str, "split": str, "n_slices": int}."""
    for p in patients:
        if p["split"] not in SPLITS:
            raise DataError("unknown split %r for patient %s" % (p["split"], p["id"]))
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump({"patients": patients}, fh, indent=1, sort_keys=True)


def read_manifest(root):
    path = os.path.join(root, "manifest.json")
    try:
        with open(path) as fh:
            manifest = json.load(fh)
    except FileNotFoundError:
        raise DataError("no manifest.json under %s" % root) from None
    except json.JSONDecodeError as exc:
        raise DataError("malformed manifest %s: %s" % (path, exc)) from exc
    if not isinstance(manifest, dict) or "patients" not in manifest:
        raise DataError("malformed manifest %s: no 'patients' list" % path)
    for p in manifest["patients"]:
        if p.get("split") not in SPLITS:
            raise DataError(
                "manifest %s: patient %r has bad split %r"
                % (path, p.get("id"), p.get("split")))
    return manifest


def load_patient(root, patient_id, with_hist=True):
    pdir = os.path.join(root, patient_id)
    if not os.path.isdir(pdir):
        raise DataError("missing patient directory: %s" % pdir)
    return [read_slice(pdir, i, patient_id, with_hist=with_hist)
            for i in slice_indices(pdir)]


def load_split(root, split, with_hist=True):
    """Return {patient_id: [SliceRecord, ...]} for one split (or all if None)."""
    manifest = read_manifest(root)
    out = {}
    for p in manifest["patients"]:
        if split is not None and p["split"] != split:
            continue
        out[p["id"]] = load_patient(root, p["id"], with_hist=with_hist)
    return out


def write_prob_map(path, prob, spacing_mm=(0.29, 0.29)):
    """Write a probability map as .prob.raw + sidecar."""
    if not path.endswith(".prob.raw"):
        raise DataError("probability maps use the .prob.raw suffix: %s" % path)
    prob = np.asarray(prob, dtype=np.float32)
    _write_raw(path, prob, "<f4")
    sidecar = {
        "height": int(prob.shape[0]),
        "width": int(prob.shape[1]),
        "dtype": "float32",
        "spacing_mm": [float(spacing_mm[0]), float(spacing_mm[1])],
        "missing_label": False,
    }
    with open(_sidecar_path(path), "w") as fh:
        json.dump(sidecar, fh)


def read_prob_map(path):
    side_path = _sidecar_path(path)
    try:
        with open(side_path) as fh:
            side = json.load(fh)
    except FileNotFoundError:
        raise DataError("missing sidecar: %s" % side_path) from None
    h, w = int(side["height"]), int(side["width"])
    return _read_raw(path, "<f4", h * w).reshape(h, w).astype(np.float32)


def write_overlay_png(path, base_image, prob, mask=None):
    """Render probability in red over a grayscale base. Needs Pillow."""
    try:
        from PIL import Image
    except ImportError:  # pragma: no cover - optional dependency
        return False
    base = np.asarray(base_image, dtype=np.float64)
    lo, hi = base.min(), base.max()
    gray = np.zeros_like(base) if hi == lo else (base - lo) / (hi - lo)
    rgb = np.stack([gray, gray, gray], axis=-1)
    p = np.clip(np.asarray(prob, dtype=np.float64), 0, 1)
    if mask is not None:
        p = p * (np.asarray(mask) > 0)
    rgb[..., 0] = np.clip(rgb[..., 0] + p, 0, 1)
    rgb[..., 1] *= 1.0 - 0.5 * p
    rgb[..., 2] *= 1.0 - 0.5 * p
    Image.fromarray((rgb * 255).astype(np.uint8)).save(path)
    return True
