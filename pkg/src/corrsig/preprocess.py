"""Preprocessing chain: smoothing, resampling to a common grid, histogram
standardization inside the prostate mask, and z-score normalization.

Percentiles throughout the histogram standardization are nearest-rank order
statistics (an actual sample value, not an interpolated one).  Order
statistics commute exactly with monotone maps, so the standardized image's
in-mask landmarks land on the standard scale to within float rounding, which
is what downstream fidelity checks require.
"""

import math
from dataclasses import dataclass

import numpy as np
from scipy.ndimage import correlate1d

from .dataio import SliceRecord
from .errors import ConfigError, DataError, DimensionError
from .ops import _interp_matrix

TARGET_HW = (224, 224)
DECILES = tuple(float(p) for p in range(10, 100, 10))
CLIP_PERCENTILES = (1.0, 99.0)
# standardized-intensity range; [0,1] keeps float32 rounding of the output
# far below landmark-fidelity tolerances (z-normalization follows anyway)
STANDARD_RANGE = (0.0, 1.0)


def gaussian_kernel(sigma):
    if sigma <= 0:
        raise ConfigError("gaussian_smooth: sigma must be positive, got %r" % sigma)
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def gaussian_smooth(image, sigma):
    """Separable Gaussian blur with reflect border handling."""
    k = gaussian_kernel(sigma)
    out = np.asarray(image, dtype=np.float64)
    # scipy's "mirror" is reflection about the edge pixel (numpy pad "reflect")
    out = correlate1d(out, k, axis=-1, mode="mirror")
    out = correlate1d(out, k, axis=-2, mode="mirror")
    return out.astype(np.float32)


def _pad_to_square(image, fill=0.0):
    h, w = image.shape[-2:]
    side = max(h, w)
    if h == side and w == side:
        return image
    top = (side - h) // 2
    left = (side - w) // 2
    pad = [(0, 0)] * (image.ndim - 2) + [(top, side - h - top), (left, side - w - left)]
    return np.pad(image, pad, constant_values=fill)


def _nearest_indices(n_out, n_in):
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(np.rint(src).astype(np.int64), 0, n_in - 1)


def resample(image, target_hw=TARGET_HW, interp="bilinear"):
    """Pad symmetrically to square, then scale to target_hw.

    interp: "bilinear" for intensity images, "nearest" for masks/labels
    (keeps them binary).
    """
    image = np.asarray(image)
    if image.ndim not in (2, 3) or image.shape[-1] == 0 or image.shape[-2] == 0:
        raise DimensionError("resample: empty or non-2d image %r" % (image.shape,))
    th, tw = target_hw
    if th <= 0 or tw <= 0:
        raise ConfigError("resample: bad target size %r" % (target_hw,))
    sq = _pad_to_square(image)
    side = sq.shape[-1]
    if interp == "nearest":
        ri = _nearest_indices(th, side)
        ci = _nearest_indices(tw, side)
        return sq[..., ri[:, None], ci[None, :]]
    if interp != "bilinear":
        raise ConfigError("resample: unknown interp %r" % interp)
    left = _interp_matrix(th, side, np.float64)
    right = _interp_matrix(tw, side, np.float64)
    out = np.matmul(np.matmul(left, sq.astype(np.float64)), right.T)
    return out.astype(np.float32)


def resample_spacing(spacing_mm, in_shape, target_hw=TARGET_HW):
    side = max(in_shape)
    return (spacing_mm[0] * side / target_hw[0], spacing_mm[1] * side / target_hw[1])


@dataclass
class NyulModel:
    percentile_landmarks: tuple = DECILES
    standard_scale: np.ndarray = None
    clip_percentiles: tuple = CLIP_PERCENTILES

    def to_dict(self):
        return {
            "percentile_landmarks": list(self.percentile_landmarks),
            "standard_scale": [float(v) for v in self.standard_scale],
            "clip_percentiles": list(self.clip_percentiles),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            percentile_landmarks=tuple(d["percentile_landmarks"]),
            standard_scale=np.asarray(d["standard_scale"], dtype=np.float64),
            clip_percentiles=tuple(d["clip_percentiles"]),
        )


def _nearest_rank(sorted_vals, pct):
    # classic nearest-rank percentile: an order statistic, never interpolated
    n = sorted_vals.size
    rank = max(int(math.ceil(pct / 100.0 * n)), 1)
    return sorted_vals[rank - 1]


def _landmark_vector(image, mask, model_or_none=None, name="image"):
    vals = np.asarray(image, dtype=np.float64)[np.asarray(mask) > 0]
    if vals.size == 0:
        raise DataError("nyul: empty mask on %s" % name)
    vals = np.sort(vals)
    lo_p, hi_p = CLIP_PERCENTILES if model_or_none is None else model_or_none.clip_percentiles
    deciles = DECILES if model_or_none is None else model_or_none.percentile_landmarks
    lo = _nearest_rank(vals, lo_p)
    hi = _nearest_rank(vals, hi_p)
    clipped = np.clip(vals, lo, hi)
    landmarks = [lo]
    landmarks += [_nearest_rank(clipped, p) for p in deciles]
    landmarks.append(hi)
    return np.asarray(landmarks, dtype=np.float64)


def nyul_learn(images, masks):
    """Learn the standard scale from training images and their masks."""
    if len(images) < 2:
        raise ConfigError("nyul_learn needs at least 2 training images")
    if len(images) != len(masks):
        raise DimensionError("nyul_learn: %d images vs %d masks" % (len(images), len(masks)))
    lo, hi = STANDARD_RANGE
    mapped = []
    for i, (img, msk) in enumerate(zip(images, masks)):
        v = _landmark_vector(img, msk, name="slice %d" % i)
        span = v[-1] - v[0]
        if span <= 0:
            raise DataError("nyul_learn: degenerate intensity range on slice %d" % i)
        mapped.append(lo + (v - v[0]) / span * (hi - lo))
    scale = np.mean(mapped, axis=0)
    if np.any(np.diff(scale) <= 0):
        raise DataError("nyul_learn: standard scale is not strictly increasing")
    return NyulModel(standard_scale=scale)


def nyul_apply(image, mask, model):
    """Map all pixels through the piecewise-linear landmark match.

    End segments extrapolate linearly; only landmark estimation clips.
    """
    if model.standard_scale is None:
        raise ConfigError("nyul_apply: model has not been learned")
    v = _landmark_vector(image, mask, model)
    if np.any(np.diff(v) <= 0):
        raise DataError("nyul_apply: degenerate (non-increasing) landmarks")
    scale = np.asarray(model.standard_scale, dtype=np.float64)
    x = np.asarray(image, dtype=np.float64)
    out = np.interp(x, v, scale)
    slope_lo = (scale[1] - scale[0]) / (v[1] - v[0])
    slope_hi = (scale[-1] - scale[-2]) / (v[-1] - v[-2])
    below = x < v[0]
    above = x > v[-1]
    out[below] = scale[0] + (x[below] - v[0]) * slope_lo
    out[above] = scale[-1] + (x[above] - v[-1]) * slope_hi
    return out.astype(np.float32)


def znorm_stats(images, masks):
    """Pooled in-mask mean/std across a list of images."""
    vals = np.concatenate([
        np.asarray(img, dtype=np.float64)[np.asarray(m) > 0]
        for img, m in zip(images, masks)])
    if vals.size == 0:
        raise DataError("znorm_stats: no in-mask pixels")
    mu = float(vals.mean())
    sd = float(vals.std())
    if sd == 0:
        raise DataError("znorm_stats: zero in-mask variance")
    return mu, sd


def znorm(image, mask, stats=None):
    """(x - mu) / sigma over all pixels; stats default to this image's own."""
    if stats is None:
        stats = znorm_stats([image], [mask])
    mu, sd = stats
    return ((np.asarray(image, dtype=np.float64) - mu) / sd).astype(np.float32)


def normalize_unit_range(channels):
    """Per-channel min-max scaling to [0,1] for histopathology."""
    arr = np.asarray(channels, dtype=np.float64)
    out = np.zeros_like(arr)
    for c in range(arr.shape[0]):
        lo, hi = arr[c].min(), arr[c].max()
        if hi > lo:
            out[c] = (arr[c] - lo) / (hi - lo)
    return out.astype(np.float32)


def augment_hflip(record):
    """Mirror every channel about the vertical axis."""

    def flip(a):
        return None if a is None else np.ascontiguousarray(a[..., ::-1])

    return SliceRecord(
        patient_id=record.patient_id + "_flip",
        slice_index=record.slice_index,
        t2w=flip(record.t2w),
        adc=flip(record.adc),
        mask=flip(record.mask),
        label=flip(record.label),
        hist=flip(record.hist),
        spacing_mm=record.spacing_mm,
        missing_label=record.missing_label,
        corrnet_map=flip(record.corrnet_map),
    )


def resample_record(record, target_hw=TARGET_HW, hist_sigma=0.25):
    """Smooth histopathology, then bring every channel onto the target grid."""
    hist = record.hist
    if hist is not None:
        hist = gaussian_smooth(hist, hist_sigma)
        hist = resample(hist, target_hw, "bilinear")
        hist = normalize_unit_range(hist)
    mask = resample(record.mask, target_hw, "nearest").astype(np.uint8)
    label = resample(record.label, target_hw, "nearest").astype(np.uint8)
    label &= mask  # labels are only meaningful inside the prostate
    return SliceRecord(
        patient_id=record.patient_id,
        slice_index=record.slice_index,
        t2w=resample(record.t2w, target_hw, "bilinear"),
        adc=resample(record.adc, target_hw, "bilinear"),
        mask=mask,
        label=label,
        hist=hist,
        spacing_mm=resample_spacing(record.spacing_mm, record.mask.shape, target_hw),
        missing_label=record.missing_label,
    )


def standardize_split(slices, nyul_models, z_stats):
    """Apply learned per-modality Nyul + z-normalization in place."""
    for rec in slices:
        rec.t2w = znorm(nyul_apply(rec.t2w, rec.mask, nyul_models["t2w"]),
                        rec.mask, z_stats["t2w"])
        rec.adc = znorm(nyul_apply(rec.adc, rec.mask, nyul_models["adc"]),
                        rec.mask, z_stats["adc"])
    return slices


def fit_normalization(train_slices):
    """Learn Nyul models and pooled z-stats (post-Nyul) from training slices."""
    models = {}
    stats = {}
    for modality in ("t2w", "adc"):
        images = [getattr(r, modality) for r in train_slices]
        masks = [r.mask for r in train_slices]
        models[modality] = nyul_learn(images, masks)
        standardized = [nyul_apply(img, m, models[modality])
                        for img, m in zip(images, masks)]
        stats[modality] = znorm_stats(standardized, masks)
    return models, stats
