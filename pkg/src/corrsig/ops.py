"""Forward and backward kernels for the tensor engine.

Implementation notes that matter for correctness and memory:

* conv2d lowers to im2col + batched GEMM.  The column matrix is a real copy
  (about C*k*k*H'*W' floats per image), so it is only kept for the backward
  pass when small; otherwise it is rebuilt from the saved input, trading one
  extra strided copy for hundreds of MB of retained activations.
* Reductions and batchnorm statistics accumulate in float64 and round back
  to the input dtype, so results do not depend on summation order tricks.
* maxpool2d breaks ties toward the first maximal element in scan order.
* Kernels are dtype-polymorphic: float64 tensors run the same code paths,
  which is what the finite-difference gradient checks rely on.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided
from scipy.special import expit

from .errors import ConfigError, DimensionError
from .tensor import Function, Tensor

# keep im2col buffers for backward only below this size (bytes)
_COLS_CACHE_BYTES = 32 * 1024 * 1024


def _unbroadcast(grad, shape):
    """Sum grad down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    axes = tuple(ax for ax, n in enumerate(shape) if n == 1 and grad.shape[ax] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# ---------------------------------------------------------------------------
# elementwise arithmetic


class Add(Function):
    kind = "add"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, go):
        sa, sb = self.shapes
        return _unbroadcast(go, sa), _unbroadcast(go.copy(), sb)


class Sub(Function):
    kind = "add"

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, go):
        sa, sb = self.shapes
        return _unbroadcast(go, sa), _unbroadcast(-go, sb)


class Mul(Function):
    kind = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, go):
        ga = _unbroadcast(go * self.b, self.a.shape)
        gb = _unbroadcast(go * self.a, self.b.shape)
        return ga, gb


class Div(Function):
    kind = "mul"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a / b

    def backward(self, go):
        ga = _unbroadcast(go / self.b, self.a.shape)
        gb = _unbroadcast(-go * self.a / (self.b * self.b), self.b.shape)
        return ga, gb


class Neg(Function):
    kind = "mul"

    def forward(self, a):
        return -a

    def backward(self, go):
        return (-go,)


class PowConst(Function):
    kind = "mul"

    def forward(self, a, p=2.0):
        self.a, self.p = a, p
        return a ** p

    def backward(self, go):
        return (go * self.p * self.a ** (self.p - 1.0),)


class Sqrt(Function):
    kind = "mul"

    def forward(self, a):
        self.out = np.sqrt(a)
        return self.out

    def backward(self, go):
        return (go / (2.0 * self.out),)


class Exp(Function):
    kind = "mul"

    def forward(self, a):
        self.out = np.exp(a)
        return self.out

    def backward(self, go):
        return (go * self.out,)


class Log(Function):
    kind = "mul"

    def forward(self, a):
        self.a = a
        return np.log(a)

    def backward(self, go):
        return (go / self.a,)


class Clip(Function):
    kind = "mul"

    def forward(self, a, lo=None, hi=None):
        self.mask = np.ones(a.shape, dtype=bool)
        if lo is not None:
            self.mask &= a >= lo
        if hi is not None:
            self.mask &= a <= hi
        return np.clip(a, lo, hi)

    def backward(self, go):
        return (go * self.mask,)


# ---------------------------------------------------------------------------
# activations


class ReLU(Function):
    kind = "relu"

    def forward(self, a):
        self.mask = a > 0
        return np.maximum(a, 0)

    def backward(self, go):
        return (go * self.mask,)


class Sigmoid(Function):
    kind = "sigmoid"

    def forward(self, a):
        self.out = expit(a)
        return self.out

    def backward(self, go):
        return (go * self.out * (1.0 - self.out),)


# ---------------------------------------------------------------------------
# shape ops


class Reshape(Function):
    kind = "reduce"

    def forward(self, a, shape=None):
        self.orig = a.shape
        return a.reshape(shape)

    def backward(self, go):
        return (go.reshape(self.orig),)


class Transpose(Function):
    kind = "reduce"

    def forward(self, a, axes=None):
        self.axes = axes
        return np.transpose(a, axes)

    def backward(self, go):
        if self.axes is None:
            return (np.transpose(go),)
        inv = np.argsort(self.axes)
        return (np.transpose(go, inv),)


class Concat(Function):
    kind = "concat"

    def forward(self, *arrays, axis=0):
        self.axis = axis
        self.sizes = [a.shape[axis] for a in arrays]
        return np.concatenate(arrays, axis=axis)

    def backward(self, go):
        splits = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(go, splits, axis=self.axis))


class Sum(Function):
    kind = "reduce"

    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axis = axis
        self.keepdims = keepdims
        out = a.sum(axis=axis, keepdims=keepdims, dtype=np.float64)
        return out.astype(a.dtype)

    def backward(self, go):
        if self.axis is not None and not self.keepdims:
            axes = self.axis if isinstance(self.axis, tuple) else (self.axis,)
            go = np.expand_dims(go, axes)
        g = np.empty(self.shape, dtype=go.dtype)
        g[...] = go
        return (g,)


class Mean(Function):
    kind = "reduce"

    def forward(self, a, axis=None, keepdims=False):
        self.shape = a.shape
        self.axis = axis
        self.keepdims = keepdims
        out = a.mean(axis=axis, keepdims=keepdims, dtype=np.float64)
        if axis is None:
            self.n = a.size
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            self.n = int(np.prod([a.shape[ax] for ax in axes]))
        return np.asarray(out).astype(a.dtype)

    def backward(self, go):
        if self.axis is not None and not self.keepdims:
            axes = self.axis if isinstance(self.axis, tuple) else (self.axis,)
            go = np.expand_dims(go, axes)
        g = np.empty(self.shape, dtype=go.dtype)
        g[...] = go
        g /= self.n
        return (g,)


# ---------------------------------------------------------------------------
# linear algebra


class MatMul(Function):
    kind = "linear"

    def forward(self, a, b):
        self.a, self.b = a, b
        return a @ b

    def backward(self, go):
        return go @ self.b.T, self.a.T @ go


class Linear(Function):
    """x[N,I] @ w[O,I].T + b[O] -> [N,O]."""

    kind = "linear"

    def forward(self, x, w, b):
        if x.shape[1] != w.shape[1]:
            raise DimensionError(
                "linear: input width %d != weight width %d" % (x.shape[1], w.shape[1]))
        self.x, self.w = x, w
        return x @ w.T + b

    def backward(self, go):
        gx = go @ self.w
        gw = go.T @ self.x
        gb = go.sum(axis=0, dtype=np.float64).astype(go.dtype)
        return gx, gw, gb


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp, kh, kw, stride, ho, wo):
    n, c, _, _ = xp.shape
    s0, s1, s2, s3 = xp.strides
    view = as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(s0, s1, s2, s3, s2 * stride, s3 * stride),
    )
    return view.reshape(n, c * kh * kw, ho * wo)


def _pad2d(x, p):
    if p == 0:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=x.dtype)
    out[:, :, p:p + h, p:p + w] = x
    return out


class Conv2d(Function):
    kind = "conv2d"

    def forward(self, x, w, b, stride=1, padding=0):
        if x.ndim != 4 or w.ndim != 4:
            raise DimensionError("conv2d expects 4-d input and weight")
        n, c, h, wd = x.shape
        f, cw, kh, kw = w.shape
        if c != cw:
            raise DimensionError(
                "conv2d: input has %d channels, weight expects %d" % (c, cw))
        if b.shape != (f,):
            raise DimensionError("conv2d: bias shape %r != (%d,)" % (b.shape, f))
        if kh % 2 == 0 or kw % 2 == 0:
            raise ConfigError("conv2d: kernel dims must be odd, got %dx%d" % (kh, kw))
        if padding < 0 or stride < 1:
            raise ConfigError("conv2d: bad stride/padding")
        ho, rh = divmod(h + 2 * padding - kh, stride)
        wo, rw = divmod(wd + 2 * padding - kw, stride)
        if rh or rw or ho < 0 or wo < 0:
            raise ConfigError(
                "conv2d: size %dx%d with k=%dx%d pad=%d stride=%d has no integral output"
                % (h, wd, kh, kw, padding, stride))
        ho += 1
        wo += 1
        xp = _pad2d(x, padding)
        cols = _im2col(xp, kh, kw, stride, ho, wo)
        wmat = w.reshape(f, c * kh * kw)
        out = np.matmul(wmat, cols)
        out += b.reshape(1, f, 1)
        self.x, self.w = x, w
        self.geom = (stride, padding, ho, wo)
        self.cols = cols if cols.nbytes <= _COLS_CACHE_BYTES else None
        return out.reshape(n, f, ho, wo)

    def backward(self, go):
        x, w = self.x, self.w
        stride, padding, ho, wo = self.geom
        n, c, h, wd = x.shape
        f, _, kh, kw = w.shape
        go_mat = go.reshape(n, f, ho * wo)
        cols = self.cols
        if cols is None:
            cols = _im2col(_pad2d(x, padding), kh, kw, stride, ho, wo)
        gw = np.matmul(go_mat, cols.transpose(0, 2, 1)).sum(axis=0)
        cols = None  # done with the column buffer; gcols below is just as big
        gb = go.sum(axis=(0, 2, 3), dtype=np.float64).astype(go.dtype)
        wmat = w.reshape(f, c * kh * kw)
        gcols = np.matmul(wmat.T, go_mat).reshape(n, c, kh, kw, ho, wo)
        gxp = np.zeros((n, c, h + 2 * padding, wd + 2 * padding), dtype=go.dtype)
        for i in range(kh):
            ilim = i + stride * ho
            for j in range(kw):
                gxp[:, :, i:ilim:stride, j:j + stride * wo:stride] += gcols[:, :, i, j]
        if padding:
            gx = gxp[:, :, padding:padding + h, padding:padding + wd]
        else:
            gx = gxp
        return gx, gw.reshape(w.shape), gb


# ---------------------------------------------------------------------------
# pooling


class MaxPool2d(Function):
    kind = "maxpool2d"

    def forward(self, x, k=2, stride=None):
        if stride is None:
            stride = k
        if x.ndim != 4:
            raise DimensionError("maxpool2d expects 4-d input")
        n, c, h, w = x.shape
        self.k, self.stride, self.in_shape = k, stride, x.shape
        if k == stride:
            if h % k or w % k:
                raise ConfigError(
                    "maxpool2d: %dx%d not divisible by window %d" % (h, w, k))
            ho, wo = h // k, w // k
            win = x.reshape(n, c, ho, k, wo, k).transpose(0, 1, 2, 4, 3, 5)
            win = win.reshape(n, c, ho, wo, k * k)
            self.idx = win.argmax(axis=-1).astype(np.int16)
            return np.take_along_axis(win, self.idx[..., None], axis=-1)[..., 0]
        if h < k or w < k or (h - k) % stride or (w - k) % stride:
            raise ConfigError("maxpool2d: window/stride does not tile input")
        ho = (h - k) // stride + 1
        wo = (w - k) // stride + 1
        s0, s1, s2, s3 = x.strides
        win = as_strided(
            x, shape=(n, c, ho, wo, k, k),
            strides=(s0, s1, s2 * stride, s3 * stride, s2, s3))
        win = win.reshape(n, c, ho, wo, k * k)
        self.idx = win.argmax(axis=-1).astype(np.int16)
        return np.take_along_axis(win, self.idx[..., None], axis=-1)[..., 0]

    def backward(self, go):
        k, stride = self.k, self.stride
        n, c, h, w = self.in_shape
        ho, wo = go.shape[2], go.shape[3]
        if k == stride:
            gwin = np.zeros((n, c, ho, wo, k * k), dtype=go.dtype)
            np.put_along_axis(gwin, self.idx[..., None], go[..., None], axis=-1)
            gwin = gwin.reshape(n, c, ho, wo, k, k).transpose(0, 1, 2, 4, 3, 5)
            return (gwin.reshape(n, c, h, w),)
        gx = np.zeros((n, c, h, w), dtype=go.dtype)
        rows = self.idx // k
        cols = self.idx % k
        oi, oj = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
        abs_r = oi[None, None] * stride + rows
        abs_c = oj[None, None] * stride + cols
        nn = np.arange(n)[:, None, None, None]
        cc = np.arange(c)[None, :, None, None]
        np.add.at(gx, (nn, cc, abs_r, abs_c), go)
        return (gx,)


# ---------------------------------------------------------------------------
# batch normalization


class BatchNormState:
    """Running statistics for one batchnorm layer."""

    def __init__(self, channels: int):
        self.mean = np.zeros(channels, dtype=np.float32)
        self.var = np.ones(channels, dtype=np.float32)
        self.momentum = 0.1

    def state_dict(self):
        return {"mean": self.mean, "var": self.var}

    def load(self, d):
        self.mean = np.asarray(d["mean"], dtype=np.float32).copy()
        self.var = np.asarray(d["var"], dtype=np.float32).copy()


_BN_EPS = 1e-5


class BatchNorm(Function):
    kind = "batchnorm"

    def forward(self, x, gamma, beta, state=None, training=True):
        if x.ndim != 4:
            raise DimensionError("batchnorm expects 4-d input")
        n, c, h, w = x.shape
        if n == 0:
            raise DimensionError("batchnorm: zero-size batch")
        red = (0, 2, 3)
        if training:
            cnt = n * h * w
            if cnt < 2:
                raise DimensionError("batchnorm train mode needs N*H*W >= 2")
            mu64 = x.mean(axis=red, dtype=np.float64)
            var64 = np.square(x.astype(np.float64) - mu64.reshape(1, c, 1, 1)).mean(axis=red)
            if state is not None:
                m = state.momentum
                unbiased = var64 * cnt / (cnt - 1)
                state.mean = ((1 - m) * state.mean + m * mu64).astype(np.float32)
                state.var = ((1 - m) * state.var + m * unbiased).astype(np.float32)
            mu = mu64.astype(x.dtype)
            istd = (1.0 / np.sqrt(var64 + _BN_EPS)).astype(x.dtype)
        else:
            if state is None:
                raise ConfigError("batchnorm eval mode requires running stats")
            mu = state.mean.astype(x.dtype)
            istd = 1.0 / np.sqrt(state.var.astype(x.dtype) + np.asarray(_BN_EPS, x.dtype))
        xhat = (x - mu.reshape(1, c, 1, 1)) * istd.reshape(1, c, 1, 1)
        self.xhat, self.istd, self.gamma = xhat, istd, gamma
        self.training = training
        return gamma.reshape(1, c, 1, 1) * xhat + beta.reshape(1, c, 1, 1)

    def backward(self, go):
        xhat, istd, gamma = self.xhat, self.istd, self.gamma
        n, c, h, w = go.shape
        red = (0, 2, 3)
        gbeta = go.sum(axis=red, dtype=np.float64).astype(go.dtype)
        ggamma = (go * xhat).sum(axis=red, dtype=np.float64).astype(go.dtype)
        gs = (gamma * istd).reshape(1, c, 1, 1)
        if not self.training:
            return go * gs, ggamma, gbeta
        cnt = n * h * w
        gx = gs / cnt * (
            cnt * go
            - gbeta.reshape(1, c, 1, 1)
            - xhat * ggamma.reshape(1, c, 1, 1)
        )
        return gx, ggamma, gbeta


# ---------------------------------------------------------------------------
# bilinear upsampling


def _interp_matrix(n_out, n_in, dtype):
    # align_corners=False convention: sample at pixel centers
    m = np.zeros((n_out, n_in), dtype=np.float64)
    if n_in == 1:
        m[:, 0] = 1.0
        return m.astype(dtype)
    src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1.0)
    i0 = np.minimum(np.floor(src).astype(np.int64), n_in - 2)
    f = src - i0
    rows = np.arange(n_out)
    m[rows, i0] += 1.0 - f
    m[rows, i0 + 1] += f
    return m.astype(dtype)


class UpsampleBilinear(Function):
    kind = "upsample"

    def forward(self, x, out_h=None, out_w=None):
        if x.ndim != 4:
            raise DimensionError("upsample expects 4-d input")
        _, _, h, w = x.shape
        self.left = _interp_matrix(out_h, h, x.dtype)
        self.right = _interp_matrix(out_w, w, x.dtype)
        return np.matmul(np.matmul(self.left, x), self.right.T)

    def backward(self, go):
        return (np.matmul(np.matmul(self.left.T, go), self.right),)


# ---------------------------------------------------------------------------
# functional API


def conv2d(x, w, b, stride=1, padding=0):
    return Conv2d.apply(x, w, b, stride=stride, padding=padding)


def maxpool2d(x, k=2, stride=None):
    return MaxPool2d.apply(x, k=k, stride=stride)


def batchnorm(x, gamma, beta, state=None, training=True):
    return BatchNorm.apply(x, gamma, beta, state=state, training=training)


def relu(x):
    return ReLU.apply(x)


def sigmoid(x):
    return Sigmoid.apply(x)


def linear(x, w, b):
    return Linear.apply(x, w, b)


def matmul(a, b):
    return MatMul.apply(a, b)


def concat(tensors, axis=0):
    return Concat.apply(*tensors, axis=axis)


def upsample_bilinear(x, out_h, out_w):
    return UpsampleBilinear.apply(x, out_h=out_h, out_w=out_w)


def _wrap(v):
    return v if isinstance(v, Tensor) else Tensor(np.asarray(v, dtype=np.float32))


def _t_add(self, other):
    return Add.apply(self, _wrap(other))


def _t_radd(self, other):
    return Add.apply(_wrap(other), self)


def _t_sub(self, other):
    return Sub.apply(self, _wrap(other))


def _t_rsub(self, other):
    return Sub.apply(_wrap(other), self)


def _t_mul(self, other):
    return Mul.apply(self, _wrap(other))


def _t_div(self, other):
    return Div.apply(self, _wrap(other))


def _t_rdiv(self, other):
    return Div.apply(_wrap(other), self)


def _t_neg(self):
    return Neg.apply(self)


def _t_pow(self, p):
    return PowConst.apply(self, p=float(p))


Tensor.__add__ = _t_add
Tensor.__radd__ = _t_radd
Tensor.__sub__ = _t_sub
Tensor.__rsub__ = _t_rsub
Tensor.__mul__ = _t_mul
Tensor.__rmul__ = _t_mul
Tensor.__truediv__ = _t_div
Tensor.__rtruediv__ = _t_rdiv
Tensor.__neg__ = _t_neg
Tensor.__pow__ = _t_pow
Tensor.sum = lambda self, axis=None, keepdims=False: Sum.apply(self, axis=axis, keepdims=keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: Mean.apply(self, axis=axis, keepdims=keepdims)
Tensor.reshape = lambda self, *shape: Reshape.apply(self, shape=shape if len(shape) > 1 else shape[0])
Tensor.transpose = lambda self, axes=None: Transpose.apply(self, axes=axes)
Tensor.exp = lambda self: Exp.apply(self)
Tensor.log = lambda self: Log.apply(self)
Tensor.sqrt = lambda self: Sqrt.apply(self)
Tensor.clip = lambda self, lo=None, hi=None: Clip.apply(self, lo=lo, hi=hi)
Tensor.relu = lambda self: ReLU.apply(self)
Tensor.sigmoid = lambda self: Sigmoid.apply(self)
