"""Forward-value oracles and finite-difference gradient checks for every op."""

import numpy as np
import pytest

from corrsig import ConfigError, DimensionError, Tensor
from corrsig import ops

from util import gradcheck, rand_t

torch = pytest.importorskip("torch", reason="torch used only as a cross-check oracle")
torch.set_num_threads(1)


# ---------------------------------------------------------------------------
# forward value checks


def test_conv_identity_kernel():
    rng = np.random.default_rng(0)
    x = Tensor(rng.normal(size=(1, 1, 4, 4)).astype(np.float32))
    w = Tensor(np.ones((1, 1, 1, 1), np.float32))
    b = Tensor(np.zeros(1, np.float32))
    y = ops.conv2d(x, w, b)
    np.testing.assert_array_equal(y.data, x.data)


def test_conv_box_filter_constant_interior():
    c = 3.7
    x = Tensor(np.full((1, 1, 8, 8), c, np.float32))
    w = Tensor(np.full((1, 1, 3, 3), 1.0 / 9.0, np.float32))
    b = Tensor(np.zeros(1, np.float32))
    y = ops.conv2d(x, w, b, padding=1)
    np.testing.assert_allclose(y.data[0, 0, 1:-1, 1:-1], c, rtol=1e-6)


def test_conv_same_padding_preserves_shape():
    x = Tensor(np.zeros((2, 3, 13, 17), np.float32))
    w = Tensor(np.zeros((5, 3, 3, 3), np.float32))
    b = Tensor(np.zeros(5, np.float32))
    assert ops.conv2d(x, w, b, stride=1, padding=1).shape == (2, 5, 13, 17)


def test_conv_rejects_bad_geometry():
    x = Tensor(np.zeros((1, 3, 8, 8), np.float32))
    b = Tensor(np.zeros(4, np.float32))
    with pytest.raises(DimensionError):
        ops.conv2d(x, Tensor(np.zeros((4, 2, 3, 3), np.float32)), b)
    with pytest.raises(ConfigError):
        ops.conv2d(x, Tensor(np.zeros((4, 3, 2, 2), np.float32)), b)
    with pytest.raises(ConfigError):
        # (8 - 3) / 2 is not integral
        ops.conv2d(x, Tensor(np.zeros((4, 3, 3, 3), np.float32)), b, stride=2)


def test_conv_matches_torch():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(2, 3, 9, 11)).astype(np.float32)
    w = rng.normal(size=(4, 3, 3, 3)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    for stride, pad in [(1, 0), (1, 1), (2, 1), (3, 0)]:
        hh = (9 + 2 * pad - 3) % stride
        ww = (11 + 2 * pad - 3) % stride
        if hh or ww:
            continue
        ours = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, padding=pad)
        ref = torch.nn.functional.conv2d(
            torch.from_numpy(x), torch.from_numpy(w), torch.from_numpy(b),
            stride=stride, padding=pad)
        np.testing.assert_allclose(ours.data, ref.numpy(), rtol=1e-4, atol=1e-5)


def test_maxpool_basic():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]], np.float32))
    y = ops.maxpool2d(x, 2)
    assert y.shape == (1, 1, 1, 1)
    assert y.item() == 4.0


def test_maxpool_constant_stays_constant():
    x = Tensor(np.full((1, 2, 8, 8), 1.25, np.float32))
    y = ops.maxpool2d(x, 2)
    np.testing.assert_array_equal(y.data, np.full((1, 2, 4, 4), 1.25, np.float32))


def test_maxpool_rejects_indivisible():
    with pytest.raises(ConfigError):
        ops.maxpool2d(Tensor(np.zeros((1, 1, 7, 8), np.float32)), 2)


def test_maxpool_matches_torch():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(2, 3, 12, 12)).astype(np.float32)
    for k, s in [(2, 2), (3, 3), (3, 1), (2, 1)]:
        ours = ops.maxpool2d(Tensor(x), k, s)
        ref = torch.nn.functional.max_pool2d(torch.from_numpy(x), k, s)
        np.testing.assert_array_equal(ours.data, ref.numpy())


def test_maxpool_tie_goes_to_first_in_scan_order():
    x = np.zeros((1, 1, 2, 2), np.float32)  # all tied
    t = Tensor(x, requires_grad=True)
    ops.maxpool2d(t, 2).sum().backward()
    expect = np.zeros((1, 1, 2, 2), np.float32)
    expect[0, 0, 0, 0] = 1.0
    np.testing.assert_array_equal(t.grad, expect)


def test_batchnorm_normalizes():
    rng = np.random.default_rng(3)
    x = Tensor(rng.normal(2.0, 3.0, size=(4, 5, 6, 6)).astype(np.float32))
    g = Tensor(np.ones(5, np.float32))
    b = Tensor(np.zeros(5, np.float32))
    y = ops.batchnorm(x, g, b, training=True).data.astype(np.float64)
    mu = y.mean(axis=(0, 2, 3))
    var = y.var(axis=(0, 2, 3))
    assert np.abs(mu).max() < 1e-5
    assert np.abs(var - 1).max() < 1e-4


def test_batchnorm_gamma_zero_gives_beta():
    x = Tensor(np.random.default_rng(4).normal(size=(2, 3, 4, 4)).astype(np.float32))
    g = Tensor(np.zeros(3, np.float32))
    b = Tensor(np.array([1.0, -2.0, 0.5], np.float32))
    y = ops.batchnorm(x, g, b, training=True)
    np.testing.assert_allclose(y.data, b.data.reshape(1, 3, 1, 1) * np.ones_like(y.data))


def test_batchnorm_running_stats_and_eval_match_torch():
    rng = np.random.default_rng(5)
    x1 = rng.normal(1.0, 2.0, size=(4, 3, 5, 5)).astype(np.float32)
    x2 = rng.normal(-1.0, 0.5, size=(4, 3, 5, 5)).astype(np.float32)
    g = np.array([1.0, 0.5, 2.0], np.float32)
    b = np.array([0.0, 1.0, -1.0], np.float32)

    st = ops.BatchNormState(3)
    for x in (x1, x2):
        ops.batchnorm(Tensor(x), Tensor(g), Tensor(b), state=st, training=True)
    out = ops.batchnorm(Tensor(x1), Tensor(g), Tensor(b), state=st, training=False)

    ref = torch.nn.BatchNorm2d(3, eps=1e-5, momentum=0.1)
    with torch.no_grad():
        ref.weight.copy_(torch.from_numpy(g))
        ref.bias.copy_(torch.from_numpy(b))
    ref.train()
    for x in (x1, x2):
        ref(torch.from_numpy(x))
    ref.eval()
    with torch.no_grad():
        expect = ref(torch.from_numpy(x1)).numpy()
    np.testing.assert_allclose(st.mean, ref.running_mean.numpy(), rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(st.var, ref.running_var.numpy(), rtol=1e-5, atol=1e-6)
    np.testing.assert_allclose(out.data, expect, rtol=1e-4, atol=1e-5)


def test_batchnorm_rejects_singleton():
    x = Tensor(np.zeros((1, 2, 1, 1), np.float32))
    g = Tensor(np.ones(2, np.float32))
    b = Tensor(np.zeros(2, np.float32))
    with pytest.raises(DimensionError):
        ops.batchnorm(x, g, b, training=True)


def test_relu_values():
    x = Tensor(np.array([-5.0, 0.0, 5.0], np.float32))
    np.testing.assert_array_equal(ops.relu(x).data, [0.0, 0.0, 5.0])


def test_sigmoid_values():
    assert abs(ops.sigmoid(Tensor(np.zeros(1, np.float32))).data[0] - 0.5) < 1e-7
    # overflow-safe at extreme logits
    big = ops.sigmoid(Tensor(np.array([1e4, -1e4], np.float32))).data
    assert big[0] == 1.0 and big[1] == 0.0


def test_upsample_constant():
    x = Tensor(np.full((1, 2, 7, 7), 2.5, np.float32))
    y = ops.upsample_bilinear(x, 224, 224)
    assert y.shape == (1, 2, 224, 224)
    np.testing.assert_allclose(y.data, 2.5, rtol=1e-6)


def test_upsample_matches_torch():
    rng = np.random.default_rng(6)
    for hw_in, hw_out in [(7, 224), (28, 224), (14, 112), (5, 9)]:
        x = rng.normal(size=(2, 3, hw_in, hw_in)).astype(np.float32)
        ours = ops.upsample_bilinear(Tensor(x), hw_out, hw_out)
        ref = torch.nn.functional.interpolate(
            torch.from_numpy(x), size=(hw_out, hw_out), mode="bilinear",
            align_corners=False)
        np.testing.assert_allclose(ours.data, ref.numpy(), rtol=1e-4, atol=1e-5)


# ---------------------------------------------------------------------------
# gradient checks (float64)


def test_grad_elementwise_chain():
    rng = np.random.default_rng(10)
    x = rand_t(rng, 3, 4, lo=0.2, hi=1.5)
    y = rand_t(rng, 3, 4, lo=0.2, hi=1.5)

    def fn(a, b):
        return ((a * b + a / b - b + 2.0) * (a ** 2.0)).sum()

    gradcheck(fn, [x, y])


def test_grad_exp_log_sqrt():
    rng = np.random.default_rng(11)
    x = rand_t(rng, 5, lo=0.3, hi=2.0)
    gradcheck(lambda a: (a.exp() + a.log() + a.sqrt()).sum(), [x])


def test_grad_clip_away_from_knots():
    rng = np.random.default_rng(12)
    x = rand_t(rng, 20, lo=-2.0, hi=2.0)
    # keep samples off the clip boundaries so FD sees a smooth function
    x.data[np.abs(np.abs(x.data) - 1.0) < 0.05] = 0.5
    gradcheck(lambda a: (a.clip(-1.0, 1.0) * a.clip(-1.0, 1.0)).sum(), [x])


def test_grad_relu_off_kink():
    rng = np.random.default_rng(13)
    x = rand_t(rng, 4, 5)
    x.data[np.abs(x.data) < 0.05] = 0.5
    gradcheck(lambda a: (a.relu() * 3.0).sum(), [x])


def test_grad_sigmoid():
    rng = np.random.default_rng(14)
    x = rand_t(rng, 4, 4, lo=-3.0, hi=3.0)
    gradcheck(lambda a: a.sigmoid().sum(), [x])


def test_sigmoid_grad_closed_form():
    x = Tensor(np.random.default_rng(15).normal(size=10), requires_grad=True)
    s = ops.sigmoid(x)
    s.sum().backward()
    np.testing.assert_allclose(x.grad, s.data * (1 - s.data), rtol=1e-12)


def test_grad_reductions():
    rng = np.random.default_rng(16)
    x = rand_t(rng, 2, 3, 4)
    gradcheck(lambda a: a.sum(), [x])
    gradcheck(lambda a: a.mean(), [x])
    gradcheck(lambda a: a.sum(axis=(0, 2)).mean(), [x])
    gradcheck(lambda a: a.mean(axis=1, keepdims=True).sum(), [x])


def test_grad_shape_ops():
    rng = np.random.default_rng(17)
    x = rand_t(rng, 2, 6)
    y = rand_t(rng, 3, 4)
    gradcheck(lambda a: (a.reshape(3, 4) * 2.0).sum(), [x])
    gradcheck(lambda a: (a.transpose((1, 0)) ** 2.0).sum(), [y])
    gradcheck(lambda a, b: (ops.concat([a.reshape(3, 4), b], axis=0) ** 2.0).sum(), [x, y])


def test_grad_matmul_linear():
    rng = np.random.default_rng(18)
    a = rand_t(rng, 4, 3)
    b = rand_t(rng, 3, 5)
    gradcheck(lambda p, q: (ops.matmul(p, q) ** 2.0).sum(), [a, b])
    x = rand_t(rng, 6, 4)
    w = rand_t(rng, 2, 4)
    bias = rand_t(rng, 2)
    gradcheck(lambda p, q, r: (ops.linear(p, q, r) ** 2.0).sum(), [x, w, bias])


@pytest.mark.parametrize("stride,pad,hw", [(1, 0, 8), (1, 1, 8), (1, 2, 7), (2, 1, 9)])
def test_grad_conv2d(stride, pad, hw):
    rng = np.random.default_rng(100 + stride * 10 + pad)
    x = rand_t(rng, 2, 3, hw, hw)
    w = rand_t(rng, 4, 3, 3, 3)
    b = rand_t(rng, 4)
    gradcheck(lambda p, q, r: (ops.conv2d(p, q, r, stride=stride, padding=pad) ** 2.0).sum(),
              [x, w, b])


def test_grad_maxpool():
    rng = np.random.default_rng(19)
    # distinct values so the argmax is FD-stable
    vals = rng.permutation(64).astype(np.float64) * 0.1
    x = Tensor(vals.reshape(1, 1, 8, 8), requires_grad=True)
    gradcheck(lambda a: (ops.maxpool2d(a, 2) ** 2.0).sum(), [x])
    x2 = Tensor(rng.permutation(100).astype(np.float64).reshape(1, 1, 10, 10) * 0.1,
                requires_grad=True)
    gradcheck(lambda a: (ops.maxpool2d(a, 4, 2) ** 2.0).sum(), [x2])


def test_grad_batchnorm_train_and_eval():
    rng = np.random.default_rng(20)
    x = rand_t(rng, 3, 2, 4, 4)
    g = rand_t(rng, 2, lo=0.5, hi=1.5)
    b = rand_t(rng, 2)
    gradcheck(lambda p, q, r: (ops.batchnorm(p, q, r, training=True) ** 2.0).sum(),
              [x, g, b])
    st = ops.BatchNormState(2)
    st.mean = np.array([0.1, -0.2], np.float32)
    st.var = np.array([1.5, 0.7], np.float32)
    gradcheck(lambda p, q, r: (ops.batchnorm(p, q, r, state=st, training=False) ** 2.0).sum(),
              [x, g, b])


def test_grad_upsample():
    rng = np.random.default_rng(21)
    x = rand_t(rng, 2, 2, 5, 7)
    gradcheck(lambda a: (ops.upsample_bilinear(a, 11, 13) ** 2.0).sum(), [x])


def test_grad_composed_block():
    rng = np.random.default_rng(22)
    x = rand_t(rng, 2, 3, 8, 8)
    w = rand_t(rng, 4, 3, 3, 3)
    b = rand_t(rng, 4)
    g = rand_t(rng, 4, lo=0.5, hi=1.5)
    be = rand_t(rng, 4)

    def fn(p, q, r, s, t):
        h = ops.conv2d(p, q, r, padding=1)
        h = ops.batchnorm(h, s, t, training=True)
        h = ops.relu(h + 0.3)  # offset keeps activations off the kink
        h = ops.maxpool2d(h, 2)
        h = ops.upsample_bilinear(h, 8, 8)
        return (h * h).sum()

    gradcheck(fn, [x, w, b, g, be])
