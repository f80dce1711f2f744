"""
Learning MRI features that correlate with histopathology
========================================================

Step one of the two-step model.  Each in-mask pixel yields two views: 128
convolutional features from the MRI channels and 64 from histopathology.
A linear two-view network learns a k-dimensional common space by
reconstructing both views while maximizing cross-view correlation.  At
test time only the MRI half (W.R + b) is applied - histopathology is a
training-time teacher.
"""

import os
import tempfile

import numpy as np

from corrsig import corrnet, dataio, featext, phantom, preprocess

work = tempfile.mkdtemp(prefix="corrsig_demo_")

# the feature extractor is the first two 3x3 conv layers of a fixed CNN;
# here seeded random weights stand in for pretrained ones
weights = featext.random_extractor(seed=0)


def phantom_views(rho, seed=3):
    """Balanced per-pixel views from a small phantom at one coupling."""
    root = os.path.join(work, "rho%.1f" % rho)
    phantom.generate(phantom.PhantomConfig(
        n_patients=6, slices_per_patient=4, image_hw=(96, 96),
        lesion_radius_px=(8.0, 12.0), cross_modal_correlation=rho,
        seed=seed), root)
    split = dataio.load_split(root, "train", with_hist=True)
    recs = [preprocess.resample_record(r, (112, 112))
            for pid in sorted(split) for r in split[pid]]
    models, stats = preprocess.fit_normalization(recs)
    preprocess.standardize_split(recs, models, stats)
    views = featext.concat_views(
        [featext.build_views(r, weights, slice_id=i)
         for i, r in enumerate(recs)])
    return featext.balanced_sample(views, seed=0), recs


views, recs = phantom_views(rho=0.9)
print("balanced views:", len(views), "R dim", views.R.shape[1],
      "P dim", views.P.shape[1], "(%.0f%% cancer)"
      % (100 * views.labels.mean()))


def heldout_correlation(views):
    """Train on 3/4 of the views, report correlation on the held-out 1/4."""
    n_hold = len(views) // 4
    hold = featext._take(views, np.arange(n_hold))
    train = featext._take(views, np.arange(n_hold, len(views)))
    cfg = corrnet.CorrNetTrainConfig(k=3, lam=2.0, lr=3e-3, epochs=400,
                                     batch_size=min(512, len(train)), seed=0)
    params, trace = corrnet.train_corrnet(train, cfg)
    mc = corrnet.mean_correlation(corrnet.hidden(hold.R, None, params),
                                  corrnet.hidden(None, hold.P, params))
    return params, mc, trace


params, mc, trace = heldout_correlation(views)
print("loss: %.1f -> %.1f over %d epochs" % (trace[0], trace[-1], len(trace)))
print("held-out cross-view correlation at rho=0.9: %.3f" % mc)

# negative control: with independent lesions in the two modalities there
# is nothing cross-modal to learn, and held-out correlation sits at chance
ctrl_views, _ = phantom_views(rho=0.0)
_, ctrl_mc, _ = heldout_correlation(ctrl_views)
print("same training at rho=0.0:                  %.3f" % ctrl_mc)

# inference uses MRI alone: project a full slice's features to k channels
rec = recs[0]
feats = np.concatenate([featext.extract_mri(rec.t2w, weights),
                        featext.extract_mri(rec.adc, weights)])
cmap = corrnet.project(feats, params)
print("projected feature map:", cmap.shape)
for ch in range(cmap.shape[0]):
    inside = cmap[ch][rec.label.astype(bool)].mean()
    outside = cmap[ch][(rec.mask & ~rec.label).astype(bool)].mean()
    print("  channel %d mean inside cancer %6.3f vs benign %6.3f"
          % (ch, inside, outside))
