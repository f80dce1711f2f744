"""Linear correlational network over per-pixel two-view features.

The hidden layer is a shared linear map of both views,
H(Z) = W R + V P + b, with single-view variants H(R) = W R + b and
H(P) = V P + b.  The decoder reconstructs the stacked views,
Z' = [W' h ; V' h] + b'.  Training minimizes the summed squared
reconstruction errors of all three hidden variants minus lambda times the
cross-view correlation of H(R) and H(P); correlation is Pearson per hidden
coordinate, summed over the k coordinates.

After training only W and b are needed: project() maps MRI feature vectors
(or whole 128-channel feature maps) into the k-dimensional representation,
with no histopathology input.
"""

from dataclasses import dataclass, field

import numpy as np

from . import cswt, ops
from .errors import DataError, DimensionError, TrainingError, UsageError
from .optim import Adam
from .tensor import Tensor, no_grad

R_DIM = 128
P_DIM = 64
Z_DIM = R_DIM + P_DIM
CORR_EPS = 1e-12


@dataclass
class CorrNetParams:
    W: np.ndarray   # (k, 128)
    V: np.ndarray   # (k, 64)
    b: np.ndarray   # (k,)
    Wp: np.ndarray  # (128, k)
    Vp: np.ndarray  # (64, k)
    bp: np.ndarray  # (192,)

    @property
    def k(self):
        return self.W.shape[0]

    def __post_init__(self):
        k = self.W.shape[0]
        want = {"W": (k, R_DIM), "V": (k, P_DIM), "b": (k,),
                "Wp": (R_DIM, k), "Vp": (P_DIM, k), "bp": (Z_DIM,)}
        for name, shape in want.items():
            arr = getattr(self, name)
            if arr.shape != shape:
                raise DimensionError(
                    "corrnet %s: shape %r, expected %r" % (name, arr.shape, shape))


@dataclass
class CorrNetTrainConfig:
    k: int = 5
    lam: float = 2.0
    lr: float = 1e-5
    epochs: int = 300
    batch_size: int = 4096
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise UsageError("corrnet k must be >= 1")
        if self.lam < 0 or self.lr <= 0 or self.epochs < 1 or self.batch_size < 2:
            raise UsageError("invalid corrnet training config")


def init_params(k, seed):
    rng = np.random.default_rng(seed)

    def init(rows, cols):
        return (rng.normal(size=(rows, cols)) / np.sqrt(cols)).astype(np.float32)

    return CorrNetParams(
        W=init(k, R_DIM), V=init(k, P_DIM), b=np.zeros(k, np.float32),
        Wp=init(R_DIM, k), Vp=init(P_DIM, k), bp=np.zeros(Z_DIM, np.float32))


def hidden(R, P, params):
    """H(Z), H(R) or H(P) depending on which views are given (None = absent)."""
    if R is None and P is None:
        raise UsageError("hidden: at least one view must be present")
    h = np.broadcast_to(params.b, (1, params.k)).astype(np.float64)
    if R is not None:
        R = np.atleast_2d(np.asarray(R, np.float64))
        h = h + R @ params.W.T.astype(np.float64)
    if P is not None:
        P = np.atleast_2d(np.asarray(P, np.float64))
        h = h + P @ params.V.T.astype(np.float64)
    return h.astype(np.float32)


def reconstruct(h, params):
    h = np.atleast_2d(np.asarray(h, np.float64))
    if h.shape[1] != params.k:
        raise DimensionError("reconstruct: hidden width %d != k=%d" % (h.shape[1], params.k))
    z = np.concatenate([h @ params.Wp.T.astype(np.float64),
                        h @ params.Vp.T.astype(np.float64)], axis=1)
    return (z + params.bp).astype(np.float32)


def correlation(HR, HP):
    """Sum over hidden coordinates of the per-coordinate Pearson correlation."""
    HR = np.asarray(HR, np.float64)
    HP = np.asarray(HP, np.float64)
    if HR.shape != HP.shape:
        raise DimensionError("correlation: %r vs %r" % (HR.shape, HP.shape))
    if HR.ndim != 2 or HR.shape[0] < 2:
        raise UsageError("correlation needs a batch of at least 2 samples")
    a = HR - HR.mean(axis=0)
    b = HP - HP.mean(axis=0)
    na = np.sqrt((a * a).sum(axis=0))
    nb = np.sqrt((b * b).sum(axis=0))
    ok = (na >= CORR_EPS) & (nb >= CORR_EPS)
    num = (a * b).sum(axis=0)
    out = np.zeros(HR.shape[1])
    out[ok] = num[ok] / (na[ok] * nb[ok])
    return float(out.sum())


def mean_correlation(HR, HP):
    """Per-coordinate Pearson mean, in [-1, 1]; the reported metric."""
    return correlation(HR, HP) / HR.shape[1]


def _loss_graph(Rb, Pb, t, lam):
    """Differentiable Eq-style objective on one batch of views."""
    hz = ops.linear(Rb, t["W"], t["b"]) + ops.matmul(Pb, t["V"].transpose())
    hr = ops.linear(Rb, t["W"], t["b"])
    hp = ops.linear(Pb, t["V"], t["b"])
    z = ops.concat([Rb, Pb], axis=1)

    def recon_err(h):
        zr = ops.concat([ops.matmul(h, t["Wp"].transpose()),
                         ops.matmul(h, t["Vp"].transpose())], axis=1) + t["bp"]
        d = z - zr
        return (d * d).sum()

    loss = recon_err(hz) + recon_err(hr) + recon_err(hp)
    if lam != 0.0:
        a = hr - hr.mean(axis=0, keepdims=True)
        b = hp - hp.mean(axis=0, keepdims=True)
        # eps**2 under the sqrt realizes the variance floor: exact-zero norms
        # give a 0/eps = 0 term instead of a division error
        den = ((a * a).sum(axis=0) * (b * b).sum(axis=0) + CORR_EPS ** 2).sqrt()
        corr = ((a * b).sum(axis=0) / den).sum()
        loss = loss - lam * corr
    return loss


def corrnet_loss(R, P, params, lam):
    """Objective value J on one batch (reconstruction sums minus lam*corr)."""
    R = np.atleast_2d(np.asarray(R, np.float32))
    P = np.atleast_2d(np.asarray(P, np.float32))
    if R.shape[0] == 0:
        raise UsageError("corrnet_loss: empty batch")
    if R.shape[0] < 2:
        raise UsageError("corrnet_loss: batch must have >= 2 samples")
    t = _param_tensors(params, requires_grad=False)
    with no_grad():
        val = _loss_graph(Tensor(R), Tensor(P), t, lam)
    return val.item()


def _param_tensors(params, requires_grad=True):
    return {name: Tensor(getattr(params, name), requires_grad=requires_grad)
            for name in ("W", "V", "b", "Wp", "Vp", "bp")}


def train_corrnet(views, cfg):
    """Minibatch Adam on the correlational objective.

    views: PixelViews (balanced_sample already applied) or an (R, P) pair.
    Returns (CorrNetParams, per-epoch mean-loss trace).
    """
    if hasattr(views, "R"):
        R, P = views.R, views.P
    else:
        R, P = views
    R = np.asarray(R, np.float32)
    P = np.asarray(P, np.float32)
    n = R.shape[0]
    if n < cfg.batch_size:
        raise UsageError(
            "train_corrnet: %d views < batch_size %d" % (n, cfg.batch_size))
    params = init_params(cfg.k, cfg.seed)
    t = _param_tensors(params)
    opt = Adam(list(t.values()), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    trace = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        total = 0.0
        count = 0
        for start in range(0, n - cfg.batch_size + 1, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            loss = _loss_graph(Tensor(R[idx]), Tensor(P[idx]), t, cfg.lam)
            val = loss.item()
            if not np.isfinite(val):
                raise TrainingError("corrnet loss diverged at epoch %d" % epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += val
            count += idx.size
        trace.append(total / count)
    return CorrNetParams(**{name: tt.data for name, tt in t.items()}), trace


def project(features, params):
    """W . R + b for a feature vector (128,), batch (N,128), or map (128,H,W)."""
    f = np.asarray(features, np.float32)
    if f.ndim == 1:
        if f.shape != (R_DIM,):
            raise DimensionError("project: expected (%d,), got %r" % (R_DIM, f.shape))
        return (params.W @ f + params.b).astype(np.float32)
    if f.ndim == 2:
        if f.shape[1] != R_DIM:
            raise DimensionError("project: expected (N,%d), got %r" % (R_DIM, f.shape))
        return (f @ params.W.T + params.b).astype(np.float32)
    if f.ndim == 3:
        if f.shape[0] != R_DIM:
            raise DimensionError(
                "project: expected (%d,H,W), got %r" % (R_DIM, f.shape))
        out = np.tensordot(params.W, f, axes=([1], [0]))
        return (out + params.b[:, None, None]).astype(np.float32)
    raise DimensionError("project: unsupported rank %d" % f.ndim)


def save_corrnet(path, params, meta):
    required = {"k", "lambda", "epochs", "seed"}
    missing = required - set(meta)
    if missing:
        raise UsageError("corrnet meta missing keys: %s" % sorted(missing))
    cswt.save_weights(path, {
        "W": params.W, "V": params.V, "b": params.b,
        "Wp": params.Wp, "Vp": params.Vp, "bp": params.bp,
    }, meta=meta)


def load_corrnet(path):
    arrays, meta = cswt.load_weights(path)
    try:
        params = CorrNetParams(
            W=arrays["W"], V=arrays["V"], b=arrays["b"],
            Wp=arrays["Wp"], Vp=arrays["Vp"], bp=arrays["bp"])
    except KeyError as exc:
        raise DataError("%s: missing corrnet entry %s" % (path, exc)) from exc
    return params, meta
