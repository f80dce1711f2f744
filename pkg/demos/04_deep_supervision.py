"""
Deeply supervised prediction heads
==================================

Step two of the two-step model.  The predictor is an edge-detection-style
CNN: a VGG trunk whose blocks each emit an upsampled 1-channel side output,
all supervised with balanced cross-entropy, plus a 1x1-conv fusion of every
side logit.  The three-stream variant gives T2W, ADC, and the correlational
feature map their own first three blocks before fusing.
"""

import numpy as np

from corrsig import metrics, predictor

# ---- architecture inventory ------------------------------------------
model = predictor.build("hedbranch3", k=2, seed=0)
print("streams:", model.input_spec())
print("side outputs:", model.n_side, "->", ", ".join(model.side_tags))

# forward pass on a small batch; inputs must be multiples of 16 because
# the trunk pools four times
rng = np.random.default_rng(1)
streams = {"t2w": rng.normal(size=(1, 3, 64, 64)).astype(np.float32),
           "adc": rng.normal(size=(1, 3, 64, 64)).astype(np.float32),
           "corr": rng.normal(size=(1, 6, 64, 64)).astype(np.float32)}
out = predictor.forward(model, streams)
print("fused output:", out["fused"].shape, "probabilities in [%.3f, %.3f]"
      % (out["fused"].numpy().min(), out["fused"].numpy().max()))

# streams stay independent until the shared trunk: zeroing ADC cannot
# change the T2W or corr side outputs
zeroed = dict(streams, adc=np.zeros_like(streams["adc"]))
out2 = predictor.forward(model, zeroed)
for i, tag in enumerate(model.side_tags):
    same = (out["side"][i].numpy() == out2["side"][i].numpy()).all()
    print("  %-10s unchanged by ADC zeroing: %s" % (tag, same))

# ---- training: overfit two labeled slices ----------------------------
# the label is carried (noisily) by the corr stream, so a short training
# run should push training AUC well above chance
hw, k, n = 32, 1, 4
labels = np.zeros((n, hw, hw), np.uint8)
corr = np.empty((n, k, hw, hw), np.float32)
for i in range(n):
    r, c = rng.integers(4, hw - 12, size=2)
    labels[i, r:r + 8, c:c + 8] = 1
    corr[i, 0] = (labels[i] * 2.0 - 1.0) + 0.4 * rng.normal(size=(hw, hw))
slices = {"t2w": rng.normal(size=(n, hw, hw)).astype(np.float32),
          "adc": rng.normal(size=(n, hw, hw)).astype(np.float32),
          "corr": corr}
windows = predictor.WindowSet(
    slices=slices, labels=labels,
    windows=np.stack([np.arange(n)] * 3, axis=1),
    patient_ids=["demo"] * n, slice_ids=list(range(n)))

small = predictor.build("hed3", k=k, seed=0)
cfg = predictor.PredictorTrainConfig(lr=1e-3, weight_decay=0.0,
                                     max_epochs=20, patience=None,
                                     batch_size=4, seed=0)
history = predictor.train_predictor(small, windows, None, cfg)
print("train loss: %.3f -> %.3f" % (history["train_loss"][0],
                                    history["train_loss"][-1]))

probs = predictor.predict_windows(small, windows)
auc = metrics.roc_auc(probs.ravel(), labels.ravel())
print("training pixel AUC after %d epochs: %.3f" % (cfg.max_epochs, auc))
