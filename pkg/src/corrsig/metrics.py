"""Pixel- and lesion-level evaluation of probability maps.

Pixel metrics (sensitivity, specificity, ROC AUC) pool every in-mask pixel
across slices and patients.  Lesion metrics score each connected cancer
component by a high percentile of its predicted probabilities and compare
against matched label-free negative regions resampled inside the mask.
"""

import dataclasses
import json

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import DataError, DimensionError, MetricError

MIN_LESION_PX = 10
LESION_PERCENTILE = 90.0
N_RESAMPLES = 100
ROC_MAX_POINTS = 257
_PLACE_RETRIES = 200


def _score_label_arrays(scores, labels):
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).ravel()
    if s.shape != y.shape:
        raise DimensionError("scores %s vs labels %s" % (s.shape, y.shape))
    y = y.astype(bool)
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("undefined-metric: need both classes, got %d positive / %d negative"
                          % (n_pos, n_neg))
    return s, y, n_pos, n_neg


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank (Mann-Whitney) statistic.

    Equals the fraction of (positive, negative) pairs where the positive
    scores higher, ties counted 1/2.
    """
    s, y, n_pos, n_neg = _score_label_arrays(scores, labels)
    r = rankdata(s)  # average ranks make tied pairs count exactly 1/2
    return float((r[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def sens_spec(scores, labels, threshold: float):
    """(sensitivity, specificity) with positives predicted at score >= threshold."""
    s, y, n_pos, n_neg = _score_label_arrays(scores, labels)
    pred = s >= threshold
    sens = float(np.count_nonzero(pred & y) / n_pos)
    spec = float(np.count_nonzero(~pred & ~y) / n_neg)
    return sens, spec


def roc_curve(scores, labels, max_points: int = ROC_MAX_POINTS):
    """(n, 2) array of (fpr, tpr) points from exact score sorting.

    One point per distinct score threshold plus the (0, 0) origin, decimated
    to at most max_points while always keeping both endpoints.
    """
    s, y, n_pos, n_neg = _score_label_arrays(scores, labels)
    order = np.argsort(-s, kind="stable")
    ys = y[order]
    ss = s[order]
    # last index of each group of tied scores
    last = np.r_[np.nonzero(np.diff(ss))[0], ys.size - 1]
    tp = np.cumsum(ys)[last]
    fp = (last + 1) - tp
    curve = np.concatenate([[[0.0, 0.0]],
                            np.column_stack([fp / n_neg, tp / n_pos])])
    if len(curve) > max_points:
        keep = np.unique(np.round(np.linspace(0, len(curve) - 1, max_points)).astype(int))
        curve = curve[keep]
    return curve


def _as_volume(maps, dtype):
    vol = np.stack([np.asarray(m) for m in maps]) if not isinstance(maps, np.ndarray) else maps
    if vol.ndim != 3:
        raise DimensionError("expected a stack of 2-d slices, got shape %s" % (vol.shape,))
    return vol.astype(dtype, copy=False)


@dataclasses.dataclass(frozen=True)
class Lesion:
    """One connected cancer component: (n, 3) integer (slice, row, col) pixels."""
    pixels: np.ndarray

    @property
    def size(self) -> int:
        return len(self.pixels)

    @property
    def slice_ids(self):
        return tuple(np.unique(self.pixels[:, 0]).tolist())


def extract_lesions(label_volume, min_size: int = MIN_LESION_PX):
    """Connected cancer components of a (slices, H, W) binary volume.

    In-plane connectivity is 4-neighbor; face contact across adjacent slices
    joins components, which partitions pixels exactly as merging per-slice
    components that overlap by at least one pixel.  Components smaller than
    min_size pixels are discarded.
    """
    vol = _as_volume(label_volume, bool)
    lab, n = ndimage.label(vol, structure=ndimage.generate_binary_structure(3, 1))
    sizes = np.bincount(lab.ravel(), minlength=n + 1)
    lesions = []
    for i, sl in enumerate(ndimage.find_objects(lab), start=1):
        if sizes[i] < min_size:
            continue
        local = np.argwhere(lab[sl] == i)
        offset = np.array([s.start for s in sl])
        lesions.append(Lesion(pixels=local + offset))
    return lesions


def _lesion_score(prob, lesion):
    vals = prob[tuple(lesion.pixels.T)]
    return float(np.percentile(vals, LESION_PERCENTILE))


def _negative_pixels(lesion, free, rng):
    """Random label-free in-mask placement of the lesion's footprint.

    Tries in-plane translations on the lesion's own slices; if none fits
    after a bounded number of draws, falls back to a random pixel set of
    equal size.
    """
    px = lesion.pixels
    n_sl, h, w = free.shape
    rmin, cmin = px[:, 1].min(), px[:, 2].min()
    rmax, cmax = px[:, 1].max(), px[:, 2].max()
    for _ in range(_PLACE_RETRIES):
        dr = int(rng.integers(-rmin, h - rmax))
        dc = int(rng.integers(-cmin, w - cmax))
        cand = px + np.array([0, dr, dc])
        if free[tuple(cand.T)].all():
            return cand
    flat = np.flatnonzero(free)
    if flat.size == 0:
        raise DataError("no in-mask label-free pixels to place negative regions")
    picks = rng.choice(flat, size=lesion.size, replace=flat.size < lesion.size)
    return np.column_stack(np.unravel_index(picks, free.shape))


def _negative_scores(prob, lesions, free, rng):
    out = np.empty(len(lesions))
    for i, les in enumerate(lesions):
        neg = _negative_pixels(les, free, rng)
        out[i] = float(np.percentile(prob[tuple(neg.T)], LESION_PERCENTILE))
    return out


def lesion_auc(prob_maps, label_volume, mask_volume, seed: int = 0,
               n_resamples: int = N_RESAMPLES, min_size: int = MIN_LESION_PX):
    """(mean, std, per-resample AUC list) for one patient volume.

    Each lesion is scored by the 90th percentile of its predicted
    probabilities; each resampling draws one equal-count set of matched
    negative regions and computes lesion-vs-negative AUC.
    """
    prob = _as_volume(prob_maps, np.float64)
    label = _as_volume(label_volume, bool)
    mask = _as_volume(mask_volume, bool)
    lesions = extract_lesions(label, min_size)
    if not lesions:
        raise MetricError("undefined-metric: no lesions of >= %d px" % min_size)
    free = mask & ~label
    if not free.any():
        raise DataError("no in-mask label-free pixels to place negative regions")
    pos = np.array([_lesion_score(prob, les) for les in lesions])
    ones = np.ones(len(lesions), np.uint8)
    aucs = []
    for child in np.random.SeedSequence(seed).spawn(n_resamples):
        rng = np.random.default_rng(child)
        neg = _negative_scores(prob, lesions, free, rng)
        aucs.append(roc_auc(np.r_[pos, neg], np.r_[ones, 0 * ones]))
    aucs = np.asarray(aucs)
    return float(aucs.mean()), float(aucs.std()), aucs.tolist()


@dataclasses.dataclass
class EvalReport:
    threshold: float
    n_pixels: int
    sensitivity: float
    specificity: float
    pixel_auc: float
    roc: list
    lesion_auc_mean: float = None
    lesion_auc_std: float = None
    lesion_aucs: list = dataclasses.field(default_factory=list)
    n_lesions: int = 0
    n_resamples: int = N_RESAMPLES
    min_lesion_px: int = MIN_LESION_PX

    def to_dict(self):
        return {
            "threshold": self.threshold,
            "n_pixels": self.n_pixels,
            "sensitivity": self.sensitivity,
            "specificity": self.specificity,
            "pixel_auc": self.pixel_auc,
            "roc": [[float(f), float(t)] for f, t in self.roc],
            "lesion": {
                "mean": self.lesion_auc_mean,
                "std": self.lesion_auc_std,
                "n_lesions": self.n_lesions,
                "n_resamples": self.n_resamples,
                "min_lesion_px": self.min_lesion_px,
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        les = d["lesion"]
        return cls(threshold=d["threshold"], n_pixels=d["n_pixels"],
                   sensitivity=d["sensitivity"], specificity=d["specificity"],
                   pixel_auc=d["pixel_auc"], roc=d["roc"],
                   lesion_auc_mean=les["mean"], lesion_auc_std=les["std"],
                   n_lesions=les["n_lesions"], n_resamples=les["n_resamples"],
                   min_lesion_px=les["min_lesion_px"])


def evaluate(prob_maps, split, threshold: float = 0.5, seed: int = 0,
             n_resamples: int = N_RESAMPLES, min_size: int = MIN_LESION_PX) -> EvalReport:
    """Evaluate {patient: [prob map, ...]} against {patient: [SliceRecord, ...]}.

    Pixel metrics pool all in-mask pixels of the split.  Lesion metrics pool
    lesions across patients; negative regions are redrawn per resampling
    within each patient's own volume.
    """
    patients = sorted(split)
    scores, labels = [], []
    vols = {}
    for pid in patients:
        recs = split[pid]
        if pid not in prob_maps:
            raise DataError("missing prediction for patient %s" % pid)
        maps = prob_maps[pid]
        if len(maps) != len(recs):
            raise DataError("patient %s: %d predictions for %d slices"
                            % (pid, len(maps), len(recs)))
        for rec, pm in zip(recs, maps):
            pm = np.asarray(pm)
            if pm.shape != rec.mask.shape:
                raise DataError("patient %s slice %d: prediction shape %s vs mask %s"
                                % (pid, rec.slice_index, pm.shape, rec.mask.shape))
        prob = np.stack([np.asarray(m, np.float64) for m in maps])
        mask = np.stack([r.mask.astype(bool) for r in recs])
        label = np.stack([r.label.astype(bool) for r in recs]) & mask
        scores.append(prob[mask])
        labels.append(label[mask])
        vols[pid] = (prob, mask, label)

    scores = np.concatenate(scores)
    labels = np.concatenate(labels)
    sens, spec = sens_spec(scores, labels, threshold)
    report = EvalReport(threshold=float(threshold), n_pixels=int(scores.size),
                        sensitivity=sens, specificity=spec,
                        pixel_auc=roc_auc(scores, labels),
                        roc=roc_curve(scores, labels).tolist(),
                        n_resamples=n_resamples, min_lesion_px=min_size)

    per_patient = {}
    for pid in patients:
        prob, mask, label = vols[pid]
        lesions = extract_lesions(label, min_size)
        if not lesions:
            continue
        free = mask & ~label
        pos = np.array([_lesion_score(prob, les) for les in lesions])
        per_patient[pid] = (prob, lesions, free, pos)
    if not per_patient:
        return report

    report.n_lesions = sum(len(v[1]) for v in per_patient.values())
    aucs = []
    for child in np.random.SeedSequence(seed).spawn(n_resamples):
        rng = np.random.default_rng(child)
        pos_all, neg_all = [], []
        for pid in sorted(per_patient):
            prob, lesions, free, pos = per_patient[pid]
            if not free.any():
                raise DataError("patient %s: no in-mask label-free pixels for negatives" % pid)
            pos_all.append(pos)
            neg_all.append(_negative_scores(prob, lesions, free, rng))
        pos_all = np.concatenate(pos_all)
        neg_all = np.concatenate(neg_all)
        y = np.r_[np.ones(pos_all.size, np.uint8), np.zeros(neg_all.size, np.uint8)]
        aucs.append(roc_auc(np.r_[pos_all, neg_all], y))
    report.lesion_aucs = aucs
    report.lesion_auc_mean = float(np.mean(aucs))
    report.lesion_auc_std = float(np.std(aucs))
    return report
