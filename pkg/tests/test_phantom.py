import hashlib
import os

import numpy as np
import pytest

from corrsig import dataio, metrics, phantom
from corrsig.errors import ConfigError, GenerationError


def _small_cfg(**kw):
    base = dict(n_patients=3, slices_per_patient=3, lesions_per_patient=(1, 2),
                lesion_radius_px=(5.0, 8.0), image_hw=(96, 96), seed=7)
    base.update(kw)
    return phantom.PhantomConfig(**base)


def _tree_digest(root):
    out = {}
    for dirpath, _, files in os.walk(root):
        for name in sorted(files):
            path = os.path.join(dirpath, name)
            with open(path, "rb") as fh:
                out[os.path.relpath(path, root)] = hashlib.sha256(fh.read()).hexdigest()
    return out


# ------------------------------------------------------------------ config

def test_config_validation():
    with pytest.raises(ConfigError):
        phantom.PhantomConfig(n_patients=2)
    with pytest.raises(ConfigError):
        phantom.PhantomConfig(cross_modal_correlation=1.5)
    with pytest.raises(ConfigError):
        phantom.PhantomConfig(lesion_radius_px=(8.0, 5.0))
    with pytest.raises(ConfigError):
        phantom.PhantomConfig(lesions_per_patient=(0, 2))
    with pytest.raises(ConfigError):
        phantom.PhantomConfig(noise_sigma=0.0)
    with pytest.raises(ConfigError):
        phantom.PhantomConfig(image_hw=(32, 224))


def test_config_roundtrip_and_unknown_key():
    cfg = _small_cfg()
    back = phantom.PhantomConfig.from_dict(cfg.to_dict())
    assert back == cfg
    with pytest.raises(ConfigError, match="zorblax"):
        phantom.PhantomConfig.from_dict({"zorblax": 1})


def test_split_counts_match_cohort_proportions():
    assert phantom.split_counts(29) == (20, 3, 6)
    assert phantom.split_counts(12) == (8, 1, 3)
    assert phantom.split_counts(3) == (1, 1, 1)
    for n in range(3, 40):
        tr, va, te = phantom.split_counts(n)
        assert tr >= 1 and va >= 1 and te >= 1
        assert tr + va + te == n


# ---------------------------------------------------------------- generate

def test_labels_inside_masks(tmp_path):
    phantom.generate(_small_cfg(), str(tmp_path))
    for pid in ("p000", "p001", "p002"):
        for rec in dataio.load_patient(str(tmp_path), pid):
            assert (rec.label & ~rec.mask).sum() == 0
            assert rec.hist.shape == (3, 96, 96)
            assert rec.hist.min() >= 0.0 and rec.hist.max() <= 1.0


def test_every_patient_has_cancer_somewhere(tmp_path):
    phantom.generate(_small_cfg(), str(tmp_path))
    for pid in ("p000", "p001", "p002"):
        recs = dataio.load_patient(str(tmp_path), pid)
        assert sum(int(r.label.sum()) for r in recs) > 0


def test_same_seed_byte_identical(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    phantom.generate(_small_cfg(), str(a))
    phantom.generate(_small_cfg(), str(b))
    da, db = _tree_digest(str(a)), _tree_digest(str(b))
    assert da == db
    assert len(da) > 0


def test_different_seed_differs(tmp_path):
    a = tmp_path / "a"
    b = tmp_path / "b"
    phantom.generate(_small_cfg(), str(a))
    phantom.generate(_small_cfg(seed=8), str(b))
    assert _tree_digest(str(a)) != _tree_digest(str(b))


def test_manifest_split_sizes(tmp_path):
    cfg = phantom.PhantomConfig(n_patients=12, slices_per_patient=2,
                                image_hw=(96, 96), lesion_radius_px=(5.0, 8.0),
                                seed=3)
    phantom.generate(cfg, str(tmp_path))
    manifest = dataio.read_manifest(str(tmp_path))
    counts = {"train": 0, "val": 0, "test": 0}
    for p in manifest["patients"]:
        counts[p["split"]] += 1
    assert (counts["train"], counts["val"], counts["test"]) == (8, 1, 3)


def test_intensity_threshold_oracle_reaches_08(tmp_path):
    cfg = phantom.PhantomConfig(n_patients=3, slices_per_patient=5,
                                mri_contrast=2.0, seed=11)
    phantom.generate(cfg, str(tmp_path))
    scores, labels = [], []
    for pid in ("p000", "p001", "p002"):
        for rec in dataio.load_patient(str(tmp_path), pid):
            inside = rec.mask.astype(bool)
            scores.append(-rec.t2w[inside])  # lesions are darker
            labels.append(rec.label[inside])
    auc = metrics.roc_auc(np.concatenate(scores), np.concatenate(labels))
    assert auc >= 0.8


def test_cross_modal_correlation_controls_hist_coupling(tmp_path):
    def pooled_corr(rho, seed=13):
        root = str(tmp_path / ("rho%d" % round(rho * 10)))
        cfg = phantom.PhantomConfig(n_patients=4, slices_per_patient=5,
                                    cross_modal_correlation=rho, seed=seed)
        phantom.generate(cfg, root)
        dark, lab = [], []
        for p in dataio.read_manifest(root)["patients"]:
            for rec in dataio.load_patient(root, p["id"]):
                inside = rec.mask.astype(bool)
                dark.append(0.8 - rec.hist[0][inside])
                lab.append(rec.label[inside])
        return float(np.corrcoef(np.concatenate(dark), np.concatenate(lab))[0, 1])

    assert pooled_corr(1.0) > 0.4
    assert abs(pooled_corr(0.0)) < 0.15


def test_generation_error_when_lesion_cannot_fit(tmp_path):
    cfg = _small_cfg(lesion_radius_px=(60.0, 80.0))
    with pytest.raises(GenerationError, match="p000"):
        phantom.generate(cfg, str(tmp_path))


# ---------------------------------------------------------------- describe

def test_describe_counts_match_directory_walk(tmp_path):
    cfg = _small_cfg(slices_per_patient=4)
    phantom.generate(cfg, str(tmp_path))
    d = phantom.describe(str(tmp_path))
    pdirs = [n for n in os.listdir(str(tmp_path))
             if os.path.isdir(os.path.join(str(tmp_path), n))]
    n_raw = sum(len([f for f in os.listdir(os.path.join(str(tmp_path), p))
                     if f.endswith(".t2w.raw")]) for p in pdirs)
    assert d["n_patients"] == len(pdirs) == 3
    assert d["n_slices"] == n_raw == 12
    assert d["n_lesions"] >= 3  # at least one lesion per patient
    assert 0.0 < d["cancer_pixel_fraction"] < 0.5
    by_split = d["splits"]
    assert sum(v["n_patients"] for v in by_split.values()) == 3


def test_describe_needs_manifest(tmp_path):
    from corrsig.errors import DataError
    with pytest.raises(DataError):
        phantom.describe(str(tmp_path))
