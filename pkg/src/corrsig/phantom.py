"""Synthetic registered paired-modality phantoms with planted lesions.

Each patient is an elliptical "prostate" over textured noise.  Lesions are
smooth plateau-core blobs spanning adjacent slices; they darken both MRI
channels by a multiple of the background standard deviation, and darken the
histology channels through a field that shares a configurable fraction of
the MRI lesion signal.  Realism is deliberately minimal: the phantoms exist
to exercise the pipeline's math, not to simulate anatomy.
"""

import dataclasses
import json
import os

import numpy as np
from scipy import ndimage

from . import dataio
from .errors import ConfigError, DataError, GenerationError
from .preprocess import gaussian_smooth

TRAIN_FRAC = 0.695
VAL_FRAC = 0.095
_PLACE_RETRIES = 60
# background composition per modality: (base level, texture amp, noise amp)
_T2W_BG = (100.0, 4.0, 3.0)
_ADC_BG = (200.0, 6.0, 4.5)
_HIST_BASE = (0.8, 0.6, 0.7)
_HIST_TEXTURE = 0.02
_HIST_NOISE = 0.015
_HIST_DARKEN = 0.35
_HIST_CHANNEL_W = (1.0, 0.8, 0.9)


@dataclasses.dataclass
class PhantomConfig:
    n_patients: int = 12
    slices_per_patient: int = 7
    lesions_per_patient: tuple = (1, 3)
    lesion_radius_px: tuple = (6.0, 14.0)
    mri_contrast: float = 2.0
    cross_modal_correlation: float = 0.9
    noise_sigma: float = 1.0
    seed: int = 0
    image_hw: tuple = (240, 220)
    spacing_mm: tuple = (0.29, 0.29)

    def __post_init__(self):
        self.lesions_per_patient = tuple(int(v) for v in self.lesions_per_patient)
        self.lesion_radius_px = tuple(float(v) for v in self.lesion_radius_px)
        self.image_hw = tuple(int(v) for v in self.image_hw)
        self.spacing_mm = tuple(float(v) for v in self.spacing_mm)
        if self.n_patients < 3:
            raise ConfigError("n_patients must be >= 3 to fill all splits")
        if self.slices_per_patient < 1:
            raise ConfigError("slices_per_patient must be >= 1")
        lo, hi = self.lesions_per_patient
        if not (0 < lo <= hi):
            raise ConfigError("lesions_per_patient range must satisfy 0 < lo <= hi")
        rlo, rhi = self.lesion_radius_px
        if not (0 < rlo <= rhi):
            raise ConfigError("lesion_radius_px range must satisfy 0 < lo <= hi")
        if not 0.0 <= self.cross_modal_correlation <= 1.0:
            raise ConfigError("cross_modal_correlation must be in [0, 1]")
        if self.mri_contrast < 0:
            raise ConfigError("mri_contrast must be >= 0")
        if self.noise_sigma <= 0:
            raise ConfigError("noise_sigma must be > 0")
        if min(self.image_hw) < 64:
            raise ConfigError("image_hw must be at least 64 pixels per side")

    def to_dict(self):
        return {f.name: list(v) if isinstance(v, tuple) else v
                for f in dataclasses.fields(self)
                for v in [getattr(self, f.name)]}

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError("unknown phantom config keys: %s"
                              % ", ".join(sorted(unknown)))
        return cls(**d)


def split_counts(n_patients: int):
    """(n_train, n_val, n_test) mirroring 66/9/20 proportions, all nonempty."""
    n_val = max(1, int(round(n_patients * VAL_FRAC)))
    n_train = max(1, min(int(round(n_patients * TRAIN_FRAC)),
                         n_patients - n_val - 1))
    return n_train, n_val, n_patients - n_train - n_val


def _smooth_field(rng, shape, sigma=8.0):
    field = gaussian_smooth(rng.normal(size=shape).astype(np.float32), sigma)
    sd = field.std()
    return field / sd if sd > 0 else field


def _ellipse(h, w, center, semi):
    rr, cc = np.ogrid[:h, :w]
    return (((rr - center[0]) / semi[0]) ** 2
            + ((cc - center[1]) / semi[1]) ** 2) <= 1.0


def _mask_volume(rng, n_slices, h, w):
    cy = h / 2 + rng.uniform(-6, 6)
    cx = w / 2 + rng.uniform(-6, 6)
    ay = h * rng.uniform(0.30, 0.34)
    ax = w * rng.uniform(0.33, 0.37)
    mid = (n_slices - 1) / 2.0
    vol = np.zeros((n_slices, h, w), np.uint8)
    for s in range(n_slices):
        # gland narrows toward the end slices
        scale = 0.55 + 0.45 * np.sqrt(max(0.0, 1.0 - ((s - mid) / (mid + 0.75)) ** 2)) \
            if n_slices > 1 else 1.0
        vol[s] = _ellipse(h, w, (cy, cx), (ay * scale, ax * scale))
    return vol


def _blob(h, w, center, radius):
    rr, cc = np.ogrid[:h, :w]
    dist = np.hypot(rr - center[0], cc - center[1])
    prof = np.zeros((h, w), np.float32)
    core = dist <= 0.6 * radius
    ring = (dist > 0.6 * radius) & (dist <= radius)
    prof[core] = 1.0
    t = (dist[ring] - 0.6 * radius) / (0.4 * radius)
    prof[ring] = np.cos(0.5 * np.pi * t).astype(np.float32) ** 2
    return prof


def _lesion_field(rng, mask_vol, cfg, patient_id):
    """Max-combined plateau/cosine blobs; placement keeps each blob's full
    footprint inside the mask on every slice it spans."""
    n_slices, h, w = mask_vol.shape
    edt = np.stack([ndimage.distance_transform_edt(m) for m in mask_vol])
    field = np.zeros(mask_vol.shape, np.float32)
    lo, hi = cfg.lesions_per_patient
    n_lesions = int(rng.integers(lo, hi + 1))
    for _ in range(n_lesions):
        placed = False
        for _attempt in range(_PLACE_RETRIES):
            radius = rng.uniform(*cfg.lesion_radius_px)
            depth = int(rng.integers(1, 3))
            s0 = int(rng.integers(0, n_slices))
            spans = [(s0 + ds, radius * np.sqrt(max(0.0, 1.0 - (ds / (depth + 0.5)) ** 2)))
                     for ds in range(-depth, depth + 1) if 0 <= s0 + ds < n_slices]
            valid = np.ones((h, w), bool)
            for s, r_s in spans:
                valid &= edt[s] > r_s + 1.0
            centers = np.argwhere(valid)
            if len(centers) == 0:
                continue
            cy, cx = centers[int(rng.integers(len(centers)))]
            for s, r_s in spans:
                if r_s > 0:
                    np.maximum(field[s], _blob(h, w, (cy, cx), r_s), out=field[s])
            placed = True
            break
        if not placed:
            raise GenerationError(
                "could not place a lesion inside the mask for patient %s "
                "after %d attempts" % (patient_id, _PLACE_RETRIES))
    return field


def _mri_channel(rng, mask_vol, field, base, texture_amp, noise_amp, contrast, noise_sigma):
    n_slices = mask_vol.shape[0]
    img = np.empty(mask_vol.shape, np.float32)
    for s in range(n_slices):
        texture = _smooth_field(rng, mask_vol.shape[1:])
        noise = rng.normal(size=mask_vol.shape[1:]).astype(np.float32)
        img[s] = base + texture_amp * texture + noise_amp * noise_sigma * noise
    sigma_bg = float(img[mask_vol.astype(bool)].std())
    img -= contrast * sigma_bg * field
    img = np.where(mask_vol.astype(bool), img, 0.25 * img)
    return img.astype(np.float32)


def _hist_volume(rng, mask_vol, hist_field, noise_sigma):
    n_slices, h, w = mask_vol.shape
    out = np.empty((n_slices, 3, h, w), np.float32)
    for s in range(n_slices):
        for ch in range(3):
            texture = _smooth_field(rng, (h, w), sigma=5.0)
            noise = rng.normal(size=(h, w)).astype(np.float32)
            plane = (_HIST_BASE[ch] + _HIST_TEXTURE * texture
                     + _HIST_NOISE * noise_sigma * noise
                     - _HIST_DARKEN * _HIST_CHANNEL_W[ch] * hist_field[s])
            out[s, ch] = np.clip(plane, 0.0, 1.0)
    return out


def generate(cfg: PhantomConfig, out_dir: str):
    """Write a full phantom dataset (slices + manifest) under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    n_train, n_val, _ = split_counts(cfg.n_patients)
    h, w = cfg.image_hw
    rho = cfg.cross_modal_correlation
    patients = []
    streams = np.random.SeedSequence(cfg.seed).spawn(cfg.n_patients)
    for p in range(cfg.n_patients):
        pid = "p%03d" % p
        rng = np.random.default_rng(streams[p])
        mask_vol = _mask_volume(rng, cfg.slices_per_patient, h, w)
        mri_field = _lesion_field(rng, mask_vol, cfg, pid)
        indep_field = _lesion_field(rng, mask_vol, cfg, pid)
        hist_field = np.clip(rho * mri_field + (1.0 - rho) * indep_field, 0.0, 1.0)
        label_vol = ((mri_field >= 0.5) & mask_vol.astype(bool)).astype(np.uint8)
        t2w = _mri_channel(rng, mask_vol, mri_field, *_T2W_BG,
                           cfg.mri_contrast, cfg.noise_sigma)
        adc = _mri_channel(rng, mask_vol, mri_field, *_ADC_BG,
                           cfg.mri_contrast, cfg.noise_sigma)
        hist = _hist_volume(rng, mask_vol, hist_field, cfg.noise_sigma)
        split = "train" if p < n_train else ("val" if p < n_train + n_val else "test")
        pdir = os.path.join(out_dir, pid)
        for s in range(cfg.slices_per_patient):
            dataio.write_slice(pdir, dataio.SliceRecord(
                patient_id=pid, slice_index=s,
                t2w=t2w[s], adc=adc[s], mask=mask_vol[s], label=label_vol[s],
                hist=hist[s], spacing_mm=cfg.spacing_mm))
        patients.append({"id": pid, "split": split,
                         "n_slices": cfg.slices_per_patient})
    dataio.write_manifest(out_dir, patients)
    with open(os.path.join(out_dir, "phantom_config.json"), "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=1, sort_keys=True)
    return {"patients": patients}


def describe(root: str):
    """Summary counts for a generated dataset, recomputed from the files."""
    from . import metrics

    manifest = dataio.read_manifest(root)
    splits = {s: {"n_patients": 0, "n_slices": 0} for s in dataio.SPLITS}
    n_lesions = 0
    cancer_px = 0
    mask_px = 0
    n_slices = 0
    for p in manifest["patients"]:
        recs = dataio.load_patient(root, p["id"], with_hist=False)
        if len(recs) != p["n_slices"]:
            raise DataError("patient %s: manifest says %d slices, found %d"
                            % (p["id"], p["n_slices"], len(recs)))
        labels = np.stack([r.label for r in recs])
        masks = np.stack([r.mask for r in recs])
        n_lesions += len(metrics.extract_lesions(labels & masks))
        cancer_px += int((labels & masks).sum())
        mask_px += int(masks.sum())
        splits[p["split"]]["n_patients"] += 1
        splits[p["split"]]["n_slices"] += len(recs)
        n_slices += len(recs)
    return {
        "n_patients": len(manifest["patients"]),
        "n_slices": n_slices,
        "n_lesions": n_lesions,
        "cancer_pixel_fraction": cancer_px / mask_px if mask_px else 0.0,
        "splits": splits,
    }
