import numpy as np
import pytest
import scipy.linalg as sla

from corrsig import DimensionError, TrainingError, UsageError
from corrsig import corrnet as cn


def _params(k=3, seed=0):
    return cn.init_params(k, seed)


def _zero_params(k):
    return cn.CorrNetParams(
        W=np.zeros((k, 128), np.float32), V=np.zeros((k, 64), np.float32),
        b=np.zeros(k, np.float32), Wp=np.zeros((128, k), np.float32),
        Vp=np.zeros((64, k), np.float32), bp=np.zeros(192, np.float32))


def _identity_params():
    """k=192 exact autoencoder: H(Z) = Z and reconstruct(H(Z)) = Z."""
    k = 192
    W = np.zeros((k, 128), np.float32)
    W[:128, :] = np.eye(128)
    V = np.zeros((k, 64), np.float32)
    V[128:, :] = np.eye(64)
    Wp = np.zeros((128, k), np.float32)
    Wp[:, :128] = np.eye(128)
    Vp = np.zeros((64, k), np.float32)
    Vp[:, 128:] = np.eye(64)
    return cn.CorrNetParams(W=W, V=V, b=np.zeros(k, np.float32),
                            Wp=Wp, Vp=Vp, bp=np.zeros(192, np.float32))


def _shared_latent(rng, n, noise=0.01, d=5):
    s = rng.normal(size=(n, d))
    A = rng.normal(size=(128, d))
    B = rng.normal(size=(64, d))
    R = (s @ A.T + noise * rng.normal(size=(n, 128))).astype(np.float32)
    P = (s @ B.T + noise * rng.normal(size=(n, 64))).astype(np.float32)
    return R, P


def cca_canonical_correlations(R, P, k, ridge=1e-8):
    """Closed-form CCA: singular values of whitened cross-covariance."""
    R = np.asarray(R, np.float64)
    P = np.asarray(P, np.float64)
    R = R - R.mean(0)
    P = P - P.mean(0)
    n = R.shape[0]
    crr = R.T @ R / n + ridge * np.eye(R.shape[1])
    cpp = P.T @ P / n + ridge * np.eye(P.shape[1])
    crp = R.T @ P / n
    iso_r = sla.fractional_matrix_power(crr, -0.5).real
    iso_p = sla.fractional_matrix_power(cpp, -0.5).real
    return sla.svdvals(iso_r @ crp @ iso_p)[:k]


# ---------------------------------------------------------------------------
# hidden / reconstruct


def test_hidden_zero_weights_gives_bias():
    p = _zero_params(3)
    p.b[:] = [1.0, -2.0, 0.5]
    rng = np.random.default_rng(0)
    out = cn.hidden(rng.normal(size=(4, 128)), rng.normal(size=(4, 64)), p)
    np.testing.assert_allclose(out, np.tile(p.b, (4, 1)), atol=1e-6)


def test_hidden_zero_inputs_gives_bias():
    p = _params(4, 1)
    out = cn.hidden(np.zeros((2, 128)), np.zeros((2, 64)), p)
    np.testing.assert_allclose(out, np.tile(p.b, (2, 1)), atol=1e-6)


def test_hidden_linearity_identity():
    p = _params(5, 2)
    rng = np.random.default_rng(2)
    R = rng.normal(size=(6, 128))
    P = rng.normal(size=(6, 64))
    full = cn.hidden(R, P, p)
    parts = cn.hidden(R, None, p) + cn.hidden(None, P, p) - p.b
    np.testing.assert_allclose(full, parts, atol=1e-5)


def test_hidden_requires_a_view():
    with pytest.raises(UsageError):
        cn.hidden(None, None, _params())


def test_reconstruct_zero_hidden_gives_bias():
    p = _params(3, 3)
    p.bp[:] = np.arange(192, dtype=np.float32) * 0.01
    out = cn.reconstruct(np.zeros((2, 3)), p)
    np.testing.assert_allclose(out, np.tile(p.bp, (2, 1)), atol=1e-6)


def test_reconstruct_width_is_192():
    out = cn.reconstruct(np.zeros((7, 5)), _params(5, 4))
    assert out.shape == (7, 192)


def test_identity_autoencoder_reconstructs_exactly():
    p = _identity_params()
    rng = np.random.default_rng(5)
    R = rng.normal(size=(3, 128)).astype(np.float32)
    P = rng.normal(size=(3, 64)).astype(np.float32)
    h = cn.hidden(R, P, p)
    z = cn.reconstruct(h, p)
    np.testing.assert_allclose(z, np.concatenate([R, P], axis=1), atol=1e-6)


# ---------------------------------------------------------------------------
# correlation


def test_correlation_self_is_k():
    rng = np.random.default_rng(6)
    H = rng.normal(size=(50, 4))
    assert abs(cn.correlation(H, H) - 4.0) < 1e-9
    assert abs(cn.correlation(H, -H) + 4.0) < 1e-9


def test_correlation_matches_brute_force():
    rng = np.random.default_rng(7)
    for _ in range(20):
        HR = rng.normal(size=(100, 3))
        HP = rng.normal(size=(100, 3))
        expect = sum(np.corrcoef(HR[:, j], HP[:, j])[0, 1] for j in range(3))
        assert abs(cn.correlation(HR, HP) - expect) < 1e-6


def test_correlation_scale_invariant():
    rng = np.random.default_rng(8)
    HR = rng.normal(size=(64, 5))
    HP = rng.normal(size=(64, 5))
    base = cn.correlation(HR, HP)
    assert abs(cn.correlation(3.7 * HR + 2.0, HP) - base) < 1e-6


def test_correlation_constant_coordinate_is_zero():
    rng = np.random.default_rng(9)
    HR = rng.normal(size=(32, 2))
    HP = rng.normal(size=(32, 2))
    HR[:, 1] = 5.0  # zero variance coordinate
    with_const = cn.correlation(HR, HP)
    only_first = cn.correlation(HR[:, :1], HP[:, :1])
    assert abs(with_const - only_first) < 1e-9


def test_correlation_needs_two_samples():
    with pytest.raises(UsageError):
        cn.correlation(np.ones((1, 3)), np.ones((1, 3)))


# ---------------------------------------------------------------------------
# loss


def test_loss_zero_params_zero_inputs():
    p = _zero_params(4)
    val = cn.corrnet_loss(np.zeros((8, 128)), np.zeros((8, 64)), p, lam=3.0)
    assert val == 0.0


def test_loss_identity_autoencoder_hand_computed():
    p = _identity_params()
    rng = np.random.default_rng(10)
    R = rng.normal(size=(2, 128)).astype(np.float32)
    P = rng.normal(size=(2, 64)).astype(np.float32)
    # H(Z) reconstructs exactly; H(R) misses P, H(P) misses R
    expect = float((P.astype(np.float64) ** 2).sum() + (R.astype(np.float64) ** 2).sum())
    got = cn.corrnet_loss(R, P, p, lam=0.0)
    assert abs(got - expect) / expect < 1e-5


def test_loss_lambda_zero_is_pure_reconstruction():
    p = _params(4, 11)
    rng = np.random.default_rng(11)
    R = rng.normal(size=(16, 128)).astype(np.float32)
    P = rng.normal(size=(16, 64)).astype(np.float32)
    Rd, Pd = R.astype(np.float64), P.astype(np.float64)
    z = np.concatenate([Rd, Pd], axis=1)

    def recon(h):
        return np.concatenate([h @ p.Wp.T.astype(np.float64),
                               h @ p.Vp.T.astype(np.float64)], axis=1) + p.bp

    expect = 0.0
    for h in (cn.hidden(R, P, p), cn.hidden(R, None, p), cn.hidden(None, P, p)):
        d = z - recon(h.astype(np.float64))
        expect += (d * d).sum()
    got = cn.corrnet_loss(R, P, p, lam=0.0)
    assert abs(got - expect) / expect < 1e-4


def test_loss_lambda_couples_correlation():
    p = _params(4, 12)
    rng = np.random.default_rng(12)
    R = rng.normal(size=(32, 128)).astype(np.float32)
    P = rng.normal(size=(32, 64)).astype(np.float32)
    base = cn.corrnet_loss(R, P, p, lam=0.0)
    coupled = cn.corrnet_loss(R, P, p, lam=2.0)
    corr = cn.correlation(cn.hidden(R, None, p), cn.hidden(None, P, p))
    assert abs((base - 2.0 * corr) - coupled) < max(1e-6 * abs(base), 1e-3)


def test_loss_rejects_tiny_batch():
    p = _params(2, 13)
    with pytest.raises(UsageError):
        cn.corrnet_loss(np.zeros((0, 128)), np.zeros((0, 64)), p, lam=0.0)
    with pytest.raises(UsageError):
        cn.corrnet_loss(np.zeros((1, 128)), np.zeros((1, 64)), p, lam=0.0)


# ---------------------------------------------------------------------------
# training


def test_train_loss_decreases_early_with_paper_defaults():
    ok = 0
    for seed in range(10):
        rng = np.random.default_rng(100 + seed)
        R, P = _shared_latent(rng, 4096, d=5)
        cfg = cn.CorrNetTrainConfig(k=5, lam=2.0, lr=1e-5, epochs=10,
                                    batch_size=2048, seed=seed)
        _, trace = cn.train_corrnet((R, P), cfg)
        assert len(trace) == 10
        if all(np.isfinite(trace)) and trace[-1] <= trace[0]:
            ok += 1
    assert ok >= 9


def test_train_reaches_cca_optimum():
    rng = np.random.default_rng(42)
    R, P = _shared_latent(rng, 6000, d=5)
    cfg = cn.CorrNetTrainConfig(k=5, lam=2.0, lr=1e-3, epochs=120,
                                batch_size=1024, seed=0)
    params, _ = cn.train_corrnet((R[:5000], P[:5000]), cfg)
    hr = cn.hidden(R[5000:], None, params)
    hp = cn.hidden(None, P[5000:], params)
    got = cn.mean_correlation(hr, hp)
    optimum = cca_canonical_correlations(R[:5000], P[:5000], 5).mean()
    assert got >= 0.9 * optimum


def test_train_deterministic():
    rng = np.random.default_rng(14)
    R, P = _shared_latent(rng, 2048, d=3)
    cfg = cn.CorrNetTrainConfig(k=3, lam=2.0, lr=1e-4, epochs=3,
                                batch_size=1024, seed=7)
    p1, t1 = cn.train_corrnet((R, P), cfg)
    p2, t2 = cn.train_corrnet((R, P), cfg)
    np.testing.assert_array_equal(p1.W, p2.W)
    np.testing.assert_array_equal(p1.bp, p2.bp)
    assert t1 == t2


def test_train_nan_data_raises_with_epoch():
    rng = np.random.default_rng(15)
    R, P = _shared_latent(rng, 1024, d=2)
    R[10, :] = np.nan
    cfg = cn.CorrNetTrainConfig(k=2, lam=2.0, lr=1e-4, epochs=2,
                                batch_size=512, seed=0)
    with pytest.raises(TrainingError, match="epoch 0"):
        cn.train_corrnet((R, P), cfg)


def test_train_requires_enough_views():
    cfg = cn.CorrNetTrainConfig(k=2, batch_size=4096)
    with pytest.raises(UsageError):
        cn.train_corrnet((np.zeros((10, 128), np.float32),
                          np.zeros((10, 64), np.float32)), cfg)


# ---------------------------------------------------------------------------
# projection and serialization


def test_project_selector_row():
    p = _zero_params(1)
    p.W[0, 0] = 1.0
    fmap = np.random.default_rng(16).normal(size=(128, 6, 7)).astype(np.float32)
    out = cn.project(fmap, p)
    assert out.shape == (1, 6, 7)
    np.testing.assert_allclose(out[0], fmap[0], atol=1e-7)


def test_project_imagewide_equals_per_pixel():
    p = _params(5, 17)
    fmap = np.random.default_rng(17).normal(size=(128, 8, 8)).astype(np.float32)
    whole = cn.project(fmap, p)
    assert whole.shape == (5, 8, 8)
    for r in range(8):
        for c in range(8):
            np.testing.assert_allclose(
                whole[:, r, c], cn.project(fmap[:, r, c], p), rtol=1e-5, atol=1e-6)


def test_project_shape_errors():
    with pytest.raises(DimensionError):
        cn.project(np.zeros(64, np.float32), _params())
    with pytest.raises(DimensionError):
        cn.project(np.zeros((64, 8, 8), np.float32), _params())


def test_corrnet_roundtrip(tmp_path):
    p = _params(5, 18)
    path = str(tmp_path / "cn.cswt")
    meta = {"k": 5, "lambda": 2.0, "epochs": 300, "seed": 18}
    cn.save_corrnet(path, p, meta)
    back, m = cn.load_corrnet(path)
    np.testing.assert_array_equal(back.W, p.W)
    np.testing.assert_array_equal(back.Vp, p.Vp)
    assert m["k"] == 5 and m["lambda"] == 2.0


def test_save_requires_meta_keys(tmp_path):
    with pytest.raises(UsageError):
        cn.save_corrnet(str(tmp_path / "x.cswt"), _params(), {"k": 5})
