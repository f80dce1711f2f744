"""Fixed two-layer convolutional feature extraction and per-pixel view assembly.

The extractor is the first two 3x3 conv layers of a VGG-16-style network
(64 filters each, ReLU after both), applied with frozen weights loaded from
a CSWT file.  Grayscale MRI is replicated to 3 channels.  Each 224x224 image
becomes a 64x224x224 feature map; per-pixel views pair the concatenated
T2W+ADC feature vector R (128) with the histopathology vector P (64).
"""

from dataclasses import dataclass

import numpy as np

from . import cswt, ops
from .errors import DataError, DimensionError, UsageError
from .tensor import Tensor, no_grad

ENTRY_NAMES = ("conv1.weight", "conv1.bias", "conv2.weight", "conv2.bias")


@dataclass
class ExtractorWeights:
    conv1_w: np.ndarray  # (64, 3, 3, 3)
    conv1_b: np.ndarray  # (64,)
    conv2_w: np.ndarray  # (64, 64, 3, 3)
    conv2_b: np.ndarray  # (64,)

    def __post_init__(self):
        shapes = {
            "conv1.weight": (self.conv1_w, (64, 3, 3, 3)),
            "conv1.bias": (self.conv1_b, (64,)),
            "conv2.weight": (self.conv2_w, (64, 64, 3, 3)),
            "conv2.bias": (self.conv2_b, (64,)),
        }
        for name, (arr, want) in shapes.items():
            if arr.shape != want:
                raise DimensionError(
                    "extractor %s: shape %r, expected %r" % (name, arr.shape, want))
            if not np.all(np.isfinite(arr)):
                raise DataError("extractor %s contains non-finite values" % name)


def random_extractor(seed):
    """Seeded He-initialized extractor (stand-in for converted VGG weights)."""
    rng = np.random.default_rng(seed)

    def he(shape):
        fan_in = int(np.prod(shape[1:]))
        return (rng.normal(size=shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)

    return ExtractorWeights(
        conv1_w=he((64, 3, 3, 3)),
        conv1_b=np.zeros(64, np.float32),
        conv2_w=he((64, 64, 3, 3)),
        conv2_b=np.zeros(64, np.float32),
    )


def save_extractor(path, weights, meta=None):
    cswt.save_weights(path, {
        "conv1.weight": weights.conv1_w,
        "conv1.bias": weights.conv1_b,
        "conv2.weight": weights.conv2_w,
        "conv2.bias": weights.conv2_b,
    }, meta=meta)


def load_extractor(path):
    arrays, _ = cswt.load_weights(path)
    missing = [n for n in ENTRY_NAMES if n not in arrays]
    if missing:
        raise DataError("%s: missing extractor entries %s" % (path, missing))
    return ExtractorWeights(
        conv1_w=arrays["conv1.weight"],
        conv1_b=arrays["conv1.bias"],
        conv2_w=arrays["conv2.weight"],
        conv2_b=arrays["conv2.bias"],
    )


def to_3channel(image):
    """Replicate a grayscale (H,W) image to (3,H,W); pass (3,H,W) through."""
    arr = np.asarray(image, dtype=np.float32)
    if arr.ndim == 2:
        return np.broadcast_to(arr, (3,) + arr.shape).copy()
    if arr.ndim == 3 and arr.shape[0] == 3:
        return arr
    raise DimensionError("expected (H,W) or (3,H,W), got %r" % (arr.shape,))


def extract(image, weights, batch=None):
    """conv(3->64) -> ReLU -> conv(64->64) -> ReLU with same-padding.

    image: (3,H,W) or a batch (N,3,H,W); returns float32 of matching layout
    with 64 channels.
    """
    arr = np.asarray(image, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    if arr.ndim != 4 or arr.shape[1] != 3:
        raise DimensionError("extract: expected 3-channel input, got %r" % (arr.shape,))
    with no_grad():
        x = Tensor(arr)
        x = ops.relu(ops.conv2d(x, Tensor(weights.conv1_w), Tensor(weights.conv1_b),
                                stride=1, padding=1))
        x = ops.relu(ops.conv2d(x, Tensor(weights.conv2_w), Tensor(weights.conv2_b),
                                stride=1, padding=1))
    out = x.data
    return out[0] if single else out


def extract_mri(image_2d, weights):
    return extract(to_3channel(image_2d), weights)


@dataclass
class PixelViews:
    """Struct-of-arrays batch of per-pixel two-view samples."""

    R: np.ndarray        # (N, 128) concatenated T2W+ADC features
    P: np.ndarray        # (N, 64) histopathology features
    slice_ids: np.ndarray
    rows: np.ndarray
    cols: np.ndarray
    labels: np.ndarray   # uint8, 1 = cancer

    def __len__(self):
        return self.R.shape[0]


def build_views(record, weights, slice_id=0):
    """Per-pixel views for every in-mask pixel of one preprocessed slice."""
    if record.hist is None:
        raise UsageError(
            "build_views needs histopathology (training-time only operation)")
    f_t2w = extract_mri(record.t2w, weights)
    f_adc = extract_mri(record.adc, weights)
    f_hist = extract(np.asarray(record.hist, np.float32), weights)
    rows, cols = np.nonzero(record.mask)
    r = np.concatenate([f_t2w[:, rows, cols], f_adc[:, rows, cols]], axis=0).T
    p = f_hist[:, rows, cols].T
    return PixelViews(
        R=np.ascontiguousarray(r, np.float32),
        P=np.ascontiguousarray(p, np.float32),
        slice_ids=np.full(rows.size, slice_id, np.int32),
        rows=rows.astype(np.int32),
        cols=cols.astype(np.int32),
        labels=record.label[rows, cols].astype(np.uint8),
    )


def concat_views(view_list):
    if not view_list:
        raise UsageError("concat_views: empty list")
    return PixelViews(
        R=np.concatenate([v.R for v in view_list]),
        P=np.concatenate([v.P for v in view_list]),
        slice_ids=np.concatenate([v.slice_ids for v in view_list]),
        rows=np.concatenate([v.rows for v in view_list]),
        cols=np.concatenate([v.cols for v in view_list]),
        labels=np.concatenate([v.labels for v in view_list]),
    )


def _take(views, idx):
    return PixelViews(
        R=views.R[idx], P=views.P[idx], slice_ids=views.slice_ids[idx],
        rows=views.rows[idx], cols=views.cols[idx], labels=views.labels[idx])


def balanced_sample(views, seed):
    """All cancer pixels plus an equal-count benign sample, shuffled.

    Benign pixels are drawn without replacement unless there are fewer benign
    than cancer pixels.
    """
    rng = np.random.default_rng(seed)
    pos = np.nonzero(views.labels == 1)[0]
    neg = np.nonzero(views.labels == 0)[0]
    if pos.size == 0:
        raise DataError("balanced_sample: no cancer pixels in the cohort")
    if neg.size == 0:
        raise DataError("balanced_sample: no benign pixels in the cohort")
    take = rng.choice(neg, size=pos.size, replace=neg.size < pos.size)
    idx = np.concatenate([pos, take])
    rng.shuffle(idx)
    return _take(views, idx)
