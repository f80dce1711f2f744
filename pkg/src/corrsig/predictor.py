"""Deeply supervised HED-style cancer predictors.

Two variants over 3-adjacent-slice windows of 224x224 inputs:

* hed3 -- one stream of stacked cross-modal projection maps through five
  VGG-style blocks, one side output per block (5 side + 1 fused).
* hedbranch3 -- separate T2W / ADC / projection streams through their own
  copies of blocks 1-3 (9 side taps), concatenated into shared blocks 4-5
  (2 more taps): 11 side + 1 fused.

Every side tap is a 1x1 conv to a single-channel logit map, bilinearly
upsampled to the input resolution; the fuse head is a 1x1 conv over the
stacked pre-sigmoid side maps.  Training minimizes the sum of per-output
balanced cross-entropies.  Prediction consumes MRI only.
"""

import dataclasses

import numpy as np

from . import corrnet, cswt, featext, ops
from .errors import ConfigError, DataError, DimensionError, TrainingError, UsageError
from .optim import Adam
from .tensor import Tensor, no_grad

VARIANTS = ("hed3", "hedbranch3")
# (filter width, conv layers) per block, VGG-16 trunk
_PER_STREAM = ((64, 2), (128, 2), (256, 3))
_SHARED = ((512, 3), (512, 3))
_HED3 = _PER_STREAM + _SHARED
_STREAMS = ("t2w", "adc", "corr")
_LOG_FLOOR = 1e-7


@dataclasses.dataclass
class PredictorModel:
    variant: str
    k: int
    params: dict
    bn_states: dict
    side_tags: tuple

    @property
    def n_side(self) -> int:
        return len(self.side_tags)

    def input_spec(self):
        if self.variant == "hed3":
            return {"corr": 3 * self.k}
        return {"t2w": 3, "adc": 3, "corr": 3 * self.k}


def _he_conv(rng, c_out, c_in, ksize):
    fan = c_in * ksize * ksize
    w = rng.normal(0.0, np.sqrt(2.0 / fan), (c_out, c_in, ksize, ksize))
    return Tensor(w.astype(np.float32), requires_grad=True)


def _zeros(n):
    return Tensor(np.zeros(n, np.float32), requires_grad=True)


def build(variant: str, k: int, seed: int = 0) -> PredictorModel:
    if variant not in VARIANTS:
        raise ConfigError("unknown variant %r, expected one of %s" % (variant, VARIANTS))
    if k < 1:
        raise ConfigError("k must be >= 1")
    rng = np.random.default_rng(seed)
    params, bn_states = {}, {}

    def add_block(prefix, c_in, width, n_conv):
        c = c_in
        for i in range(1, n_conv + 1):
            params["%s.conv%d.weight" % (prefix, i)] = _he_conv(rng, width, c, 3)
            params["%s.conv%d.bias" % (prefix, i)] = _zeros(width)
            c = width
        params["%s.bn.gamma" % prefix] = Tensor(np.ones(width, np.float32),
                                                requires_grad=True)
        params["%s.bn.beta" % prefix] = _zeros(width)
        bn_states[prefix] = ops.BatchNormState(width)
        return width

    def add_side(tag, c_in):
        params["side.%s.weight" % tag] = _he_conv(rng, 1, c_in, 1)
        params["side.%s.bias" % tag] = _zeros(1)

    side_tags = []
    if variant == "hed3":
        c = 3 * k
        for b, (width, n_conv) in enumerate(_HED3, start=1):
            c = add_block("main.b%d" % b, c, width, n_conv)
            add_side("main.b%d" % b, c)
            side_tags.append("main.b%d" % b)
    else:
        for stream in _STREAMS:
            c = 3 * k if stream == "corr" else 3
            for b, (width, n_conv) in enumerate(_PER_STREAM, start=1):
                c = add_block("%s.b%d" % (stream, b), c, width, n_conv)
                add_side("%s.b%d" % (stream, b), c)
                side_tags.append("%s.b%d" % (stream, b))
        c = 3 * _PER_STREAM[-1][0]
        for b, (width, n_conv) in enumerate(_SHARED, start=4):
            c = add_block("shared.b%d" % b, c, width, n_conv)
            add_side("shared.b%d" % b, c)
            side_tags.append("shared.b%d" % b)

    n_side = len(side_tags)
    params["fuse.weight"] = Tensor(np.full((1, n_side, 1, 1), 1.0 / n_side, np.float32),
                                   requires_grad=True)
    params["fuse.bias"] = _zeros(1)
    return PredictorModel(variant=variant, k=k, params=params,
                          bn_states=bn_states, side_tags=tuple(side_tags))


def parameters(model):
    return list(model.params.values())


def _block(model, prefix, x, training):
    p = model.params
    i = 1
    while "%s.conv%d.weight" % (prefix, i) in p:
        x = ops.conv2d(x, p["%s.conv%d.weight" % (prefix, i)],
                       p["%s.conv%d.bias" % (prefix, i)], padding=1)
        if "%s.conv%d.weight" % (prefix, i + 1) in p:
            x = ops.relu(x)
        else:
            x = ops.batchnorm(x, p["%s.bn.gamma" % prefix], p["%s.bn.beta" % prefix],
                              state=model.bn_states[prefix], training=training)
            x = ops.relu(x)
        i += 1
    return x


def _side_logit(model, tag, x, out_hw):
    p = model.params
    logit = ops.conv2d(x, p["side.%s.weight" % tag], p["side.%s.bias" % tag])
    if logit.shape[2:] != out_hw:
        logit = ops.upsample_bilinear(logit, out_hw[0], out_hw[1])
    return logit


def _check_inputs(model, inputs):
    spec = model.input_spec()
    hw = None
    out = {}
    for name, channels in spec.items():
        if name not in inputs:
            raise DimensionError("missing input stream %r" % name)
        x = inputs[name]
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, np.float32))
        if x.ndim != 4 or x.shape[1] != channels:
            raise DimensionError("stream %r: expected (N, %d, H, W), got %s"
                                 % (name, channels, (x.shape,)))
        if hw is None:
            hw = x.shape[2:]
            if hw[0] % 16 or hw[1] % 16 or min(hw) < 16:
                raise DimensionError("input H and W must be multiples of 16, got %s"
                                     % (hw,))
        elif x.shape[2:] != hw:
            raise DimensionError("stream %r: spatial size %s differs from %s"
                                 % (name, x.shape[2:], hw))
        out[name] = x
    return out, hw


def forward(model, inputs, training: bool = False):
    """{"side": [prob maps in tap order], "fused": prob map}, all (N, 1, H, W).

    inputs maps stream name to a (N, C, H, W) array or Tensor; streams the
    variant does not use are ignored.
    """
    ins, hw = _check_inputs(model, inputs)
    side_logits = []
    if model.variant == "hed3":
        x = ins["corr"]
        for b in range(1, 6):
            x = _block(model, "main.b%d" % b, x, training)
            side_logits.append(_side_logit(model, "main.b%d" % b, x, hw))
            if b < 5:
                x = ops.maxpool2d(x)
    else:
        stream_out = []
        for stream in _STREAMS:
            x = ins[stream]
            for b in range(1, 4):
                x = _block(model, "%s.b%d" % (stream, b), x, training)
                side_logits.append(_side_logit(model, "%s.b%d" % (stream, b), x, hw))
                x = ops.maxpool2d(x)
            stream_out.append(x)
        x = ops.concat(stream_out, axis=1)
        for b in (4, 5):
            x = _block(model, "shared.b%d" % b, x, training)
            side_logits.append(_side_logit(model, "shared.b%d" % b, x, hw))
            if b == 4:
                x = ops.maxpool2d(x)
    fused_logit = ops.conv2d(ops.concat(side_logits, axis=1),
                             model.params["fuse.weight"], model.params["fuse.bias"])
    return {"side": [ops.sigmoid(l) for l in side_logits],
            "fused": ops.sigmoid(fused_logit)}


def balanced_bce(pred, label):
    """Class-balanced cross-entropy, averaged over the batch.

    Per image with beta = |negatives| / |pixels|:
        loss = -[beta * sum_{y=1} log p + (1 - beta) * sum_{y=0} log(1 - p)] / pixels
    with log arguments floored at 1e-7.
    """
    p = pred if isinstance(pred, Tensor) else Tensor(np.asarray(pred, np.float32))
    y = np.asarray(label)
    if y.size != p.size or p.ndim < 2:
        raise DimensionError("pred %s vs label %s" % (p.shape, y.shape))
    y = (y.reshape(p.shape) > 0)
    n = p.shape[0]
    pixels = y[0].size
    beta = (~y).reshape(n, -1).sum(axis=1) / pixels
    beta = beta.reshape((n,) + (1,) * (p.ndim - 1))
    w_pos = np.where(y, beta, 0.0).astype(np.float32)
    w_neg = np.where(y, 0.0, 1.0 - beta).astype(np.float32)
    log_p = p.clip(_LOG_FLOOR, None).log()
    log_q = (1.0 - p).clip(_LOG_FLOOR, None).log()
    total = (Tensor(w_pos) * log_p + Tensor(w_neg) * log_q).sum()
    return -total / float(n * pixels)


@dataclasses.dataclass
class WindowSet:
    """3-slice prediction windows stored as a slice table plus indices.

    Windows are assembled per batch in take(); storing only the slice
    arrays keeps memory at one copy of the data instead of three.
    """
    slices: dict            # "t2w"/"adc": (S, H, W); "corr": (S, k, H, W)
    labels: np.ndarray      # (S, H, W) uint8
    windows: np.ndarray     # (N, 3) row indices (prev, center, next)
    patient_ids: list       # per window
    slice_ids: list

    def __len__(self):
        return len(self.windows)

    def take(self, idx):
        """({stream: (B, C, H, W)}, (B, H, W) labels) for window rows idx."""
        w = self.windows[idx]
        corr = self.slices["corr"][w]
        b, _, k, h, wd = corr.shape
        streams = {"t2w": self.slices["t2w"][w],
                   "adc": self.slices["adc"][w],
                   "corr": corr.reshape(b, 3 * k, h, wd)}
        return streams, self.labels[w[:, 1]]


def build_windows(split, k: int) -> WindowSet:
    """3-adjacent-slice windows (replicate edge padding) for every slice.

    split: {patient_id: [SliceRecord, ...]} with corrnet_map attached.
    """
    t2w, adc, corr, labels = [], [], [], []
    windows, pids, sids = [], [], []
    for pid in sorted(split):
        recs = sorted(split[pid], key=lambda r: r.slice_index)
        for r in recs:
            if r.corrnet_map is None:
                raise UsageError("slice %s/%d has no corrnet_map attached"
                                 % (pid, r.slice_index))
            if r.corrnet_map.shape[0] != k:
                raise DimensionError("slice %s/%d: corrnet_map has %d channels, need k=%d"
                                     % (pid, r.slice_index, r.corrnet_map.shape[0], k))
        base = len(t2w)
        n = len(recs)
        for i, r in enumerate(recs):
            t2w.append(np.asarray(r.t2w, np.float32))
            adc.append(np.asarray(r.adc, np.float32))
            corr.append(np.asarray(r.corrnet_map, np.float32))
            labels.append(r.label)
            windows.append((base + max(i - 1, 0), base + i, base + min(i + 1, n - 1)))
            pids.append(pid)
            sids.append(r.slice_index)
    if not windows:
        raise UsageError("no slices to window")
    return WindowSet(
        slices={"t2w": np.stack(t2w), "adc": np.stack(adc), "corr": np.stack(corr)},
        labels=np.stack(labels).astype(np.uint8),
        windows=np.asarray(windows, np.int64),
        patient_ids=pids, slice_ids=sids)


@dataclasses.dataclass
class PredictorTrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.1
    max_epochs: int = 200
    patience: int = 10         # None disables early stopping
    batch_size: int = 4
    seed: int = 0
    decoupled_wd: bool = False

    def __post_init__(self):
        if self.lr <= 0 or self.max_epochs < 1 or self.batch_size < 1:
            raise ConfigError("lr, max_epochs and batch_size must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if self.patience is not None and self.patience < 1:
            raise ConfigError("patience must be >= 1 or None")


def _snapshot(model):
    return ({name: t.data.copy() for name, t in model.params.items()},
            {prefix: (st.mean.copy(), st.var.copy())
             for prefix, st in model.bn_states.items()})


def _restore(model, snap):
    params, states = snap
    for name, arr in params.items():
        model.params[name].data = arr.copy()
    for prefix, (mean, var) in states.items():
        model.bn_states[prefix].mean = mean.copy()
        model.bn_states[prefix].var = var.copy()


def _fused_loss(model, windows, batch_size):
    total = 0.0
    with no_grad():
        for start in range(0, len(windows), batch_size):
            idx = np.arange(start, min(start + batch_size, len(windows)))
            streams, labels = windows.take(idx)
            out = forward(model, streams, training=False)
            total += balanced_bce(out["fused"], labels).item() * len(idx)
    return total / len(windows)


def train_predictor(model, train_windows, val_windows, cfg: PredictorTrainConfig = None):
    """Optimize the sum of per-output balanced cross-entropies in place.

    Early stopping tracks the validation fused-output loss and restores the
    best parameters; pass val_windows=None (or patience=None) to disable it.
    Returns {"train_loss": [...], "val_loss": [...], "best_epoch": int}.
    """
    cfg = cfg or PredictorTrainConfig()
    if len(train_windows) == 0:
        raise UsageError("empty training set")
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(parameters(model), lr=cfg.lr, weight_decay=cfg.weight_decay,
               decoupled=cfg.decoupled_wd)
    history = {"train_loss": [], "val_loss": [], "best_epoch": 0}
    best_val = None
    best_snap = None
    bad_epochs = 0
    for epoch in range(cfg.max_epochs):
        perm = rng.permutation(len(train_windows))
        total = 0.0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            streams, labels = train_windows.take(idx)
            out = forward(model, streams, training=True)
            loss = balanced_bce(out["fused"], labels)
            for side in out["side"]:
                loss = loss + balanced_bce(side, labels)
            step_loss = loss.item()
            if not np.isfinite(step_loss):
                raise TrainingError("predictor loss diverged at epoch %d" % epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += step_loss * len(idx)
            # drop the step graph now; holding it through the next forward
            # (or the validation pass) doubles peak memory at large sizes
            streams = out = side = loss = None
        history["train_loss"].append(total / len(perm))
        if val_windows is None or len(val_windows) == 0:
            continue
        val_loss = _fused_loss(model, val_windows, cfg.batch_size)
        history["val_loss"].append(val_loss)
        if best_val is None or val_loss < best_val:
            best_val = val_loss
            best_snap = _snapshot(model)
            history["best_epoch"] = epoch
            bad_epochs = 0
        else:
            bad_epochs += 1
            if cfg.patience is not None and bad_epochs >= cfg.patience:
                break
    if best_snap is not None:
        _restore(model, best_snap)
    return history


def predict_windows(model, windows, batch_size: int = 4):
    """(N, H, W) fused probability maps in eval mode."""
    out = []
    with no_grad():
        for start in range(0, len(windows), batch_size):
            idx = np.arange(start, min(start + batch_size, len(windows)))
            streams, _ = windows.take(idx)
            res = forward(model, streams, training=False)
            out.append(res["fused"].numpy()[:, 0])
    return np.concatenate(out)


def corrnet_map(record, extractor_weights, corrnet_params):
    """k-channel cross-modal projection map for one slice, from MRI only."""
    feats = np.concatenate([featext.extract_mri(record.t2w, extractor_weights),
                            featext.extract_mri(record.adc, extractor_weights)])
    return corrnet.project(feats, corrnet_params)


def attach_corrnet_maps(records, extractor_weights, corrnet_params):
    for r in records:
        r.corrnet_map = corrnet_map(r, extractor_weights, corrnet_params)


def predict_volume(model, records, corrnet_params, extractor_weights,
                   batch_size: int = 4):
    """Fused probability map per slice of one patient, MRI inputs only."""
    if len(records) < 1:
        raise DataError("predict_volume needs at least one slice")
    recs = sorted(records, key=lambda r: r.slice_index)
    for r in recs:
        if r.corrnet_map is None:
            r.corrnet_map = corrnet_map(r, extractor_weights, corrnet_params)
    windows = build_windows({recs[0].patient_id: recs}, model.k)
    probs = predict_windows(model, windows, batch_size)
    return [probs[i] for i in range(len(recs))]


def save_predictor(path, model, epoch: int = 0, val_loss: float = 0.0):
    arrays = {name: t.data for name, t in model.params.items()}
    for prefix, st in model.bn_states.items():
        arrays["bnstat.%s.mean" % prefix] = st.mean
        arrays["bnstat.%s.var" % prefix] = st.var
    meta = {"variant": model.variant, "k": int(model.k),
            "epoch": int(epoch), "val_loss": float(val_loss)}
    cswt.save_weights(path, arrays, meta)


def load_predictor(path):
    arrays, meta = cswt.load_weights(path)
    for key in ("variant", "k", "epoch", "val_loss"):
        if key not in meta:
            raise DataError("predictor checkpoint %s lacks meta key %r" % (path, key))
    model = build(meta["variant"], int(meta["k"]))
    for name, t in model.params.items():
        if name not in arrays:
            raise DataError("checkpoint %s: missing entry %r" % (path, name))
        if arrays[name].shape != t.data.shape:
            raise DataError("checkpoint %s: entry %r has shape %s, expected %s"
                            % (path, name, arrays[name].shape, t.data.shape))
        t.data = arrays[name]
    for prefix, st in model.bn_states.items():
        st.load({"mean": arrays["bnstat.%s.mean" % prefix],
                 "var": arrays["bnstat.%s.var" % prefix]})
    return model, meta
