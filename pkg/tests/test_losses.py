import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lappyr import tensor as T
from lappyr.gradcheck import loss_checks
from lappyr.losses import (
    BilateralParams,
    FeatureExtractor,
    LossConfig,
    LossWeights,
    compute_loss,
    data_loss,
    joint_bilateral_filter,
    luminance,
    perceptual_loss,
    total_loss,
    tv_loss,
)
from lappyr.tensor import Tensor


def _reflect(i, n):
    return -i if i < 0 else (2 * (n - 1) - i if i >= n else i)


def brute_bilateral(pred, guide, sigma_s, sigma_r, window):
    """Double loop over pixels and neighbours of one [C,H,W] image."""
    lum = 0.299 * guide[0] + 0.587 * guide[1] + 0.114 * guide[2]
    c, h, w = pred.shape
    r = window // 2
    out = np.zeros_like(pred, dtype=float)
    for y in range(h):
        for x in range(w):
            acc, norm = np.zeros(c), 0.0
            for dy in range(-r, r + 1):
                for dx in range(-r, r + 1):
                    qy, qx = _reflect(y + dy, h), _reflect(x + dx, w)
                    wgt = math.exp(-(dy * dy + dx * dx) / (2 * sigma_s**2))
                    wgt *= math.exp(-((lum[qy, qx] - lum[y, x]) ** 2) / (2 * sigma_r**2))
                    acc += wgt * pred[:, qy, qx]
                    norm += wgt
            out[:, y, x] = acc / norm
    return out


def test_bilateral_matches_brute_force_two_region():
    guide = np.zeros((1, 3, 3, 3))
    guide[..., :, 2:] = 0.8
    pred = np.random.default_rng(0).random((1, 3, 3, 3))
    p = BilateralParams(sigma_s=1.0, sigma_r=0.2, window=3)
    got = joint_bilateral_filter(pred, guide, p).data
    np.testing.assert_allclose(got[0], brute_bilateral(pred[0], guide[0], 1.0, 0.2, 3), atol=1e-6)


def test_bilateral_adaptive_sigma_matches_brute_force():
    rng = np.random.default_rng(1)
    guide, pred = rng.random((2, 1, 3, 7, 6))
    sig = max(0.05, float(luminance(guide).std()))
    got = joint_bilateral_filter(pred, guide, BilateralParams()).data
    np.testing.assert_allclose(got[0], brute_bilateral(pred[0], guide[0], 1.0, sig, 5), atol=1e-10)


@settings(max_examples=25, deadline=None)
@given(st.floats(-2, 2), st.integers(0, 2**31 - 1), st.sampled_from([1, 3, 5, 7]))
def test_bilateral_preserves_constants(c, seed, window):
    guide = np.random.default_rng(seed).random((1, 3, 9, 8))
    out = joint_bilateral_filter(np.full(guide.shape, c), guide, BilateralParams(window=window)).data
    assert np.max(np.abs(out - c)) < 1e-6


def test_bilateral_infinite_range_is_gaussian_blur():
    rng = np.random.default_rng(2)
    guide, pred = rng.random((2, 1, 3, 10, 10))
    got = joint_bilateral_filter(pred, guide, BilateralParams(sigma_r=np.inf)).data
    big = brute_bilateral(pred[0], guide[0], 1.0, 1e12, 5)
    np.testing.assert_allclose(got[0], big, atol=1e-6)


def test_bilateral_shape_mismatch():
    with pytest.raises(T.ShapeError):
        joint_bilateral_filter(np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 5)))


def test_bilateral_params_validation():
    with pytest.raises(ValueError):
        BilateralParams(window=4)
    with pytest.raises(ValueError):
        BilateralParams(sigma_s=0)


def test_data_loss_window_one_is_plain_mse():
    rng = np.random.default_rng(3)
    a, s, A, S, I = rng.random((5, 1, 3, 6, 6))
    got = data_loss(Tensor(a), Tensor(s), A, S, I, BilateralParams(window=1)).item()
    expected = np.mean((a - A) ** 2) + np.mean((s - S) ** 2) + np.mean((a * s - I) ** 2)
    assert got == pytest.approx(expected, rel=1e-14)


def test_data_loss_constant_perfect_is_zero():
    A, S = np.full((1, 3, 8, 8), 0.4), np.full((1, 3, 8, 8), 0.7)
    assert data_loss(Tensor(A), Tensor(S), A, S, A * S).item() == pytest.approx(0.0, abs=1e-15)


def test_data_loss_perturbed_image():
    rng = np.random.default_rng(4)
    A, S = rng.random((2, 1, 3, 8, 8))
    A[:], S[:] = 0.3, 0.6
    got = data_loss(Tensor(A), Tensor(S), A, S, A * S + 0.1).item()
    assert got == pytest.approx(0.01, abs=1e-12)


def test_data_loss_piecewise_constant_matches_oracle():
    A = np.zeros((1, 3, 8, 8))
    A[..., :4] = 0.2
    A[..., 4:] = 0.9
    S = np.full_like(A, 0.5)
    S[..., 4:, :] = 1.0
    got = data_loss(Tensor(A), Tensor(S), A, S, A * S).item()
    # only cross-region leakage through the range kernel remains
    expected = 0.0
    for C in (A, S):
        sig = max(0.05, float(luminance(C).std()))
        expected += np.mean((brute_bilateral(C[0], C[0], 1.0, sig, 5) - C[0]) ** 2)
    assert got == pytest.approx(expected, rel=1e-9, abs=1e-15)
    # a narrow range kernel stops the leakage across region boundaries
    narrow = data_loss(Tensor(A), Tensor(S), A, S, A * S, BilateralParams(sigma_r=0.01)).item()
    assert narrow < 1e-10


def test_data_loss_shape_mismatch():
    with pytest.raises(T.ShapeError):
        data_loss(Tensor(np.zeros((1, 3, 4, 4))), Tensor(np.zeros((1, 3, 4, 4))),
                  np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 4)), np.zeros((1, 3, 4, 8)))


def straight_perceptual(a, s, A, S, fx):
    """Direct recomputation with scipy correlation, independent of tensor.conv2d."""
    from scipy.ndimage import correlate

    def feats(x):
        out = []
        for k, stage in enumerate(fx.stages):
            if k:
                c, h, w = x.shape
                x = x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4))
            for wt, b in stage:
                y = np.zeros((wt.shape[0],) + x.shape[1:])
                for o in range(wt.shape[0]):
                    for i in range(wt.shape[1]):
                        y[o] += correlate(x[i], wt[o, i], mode="mirror")
                    y[o] += b[o]
                x = np.maximum(y, 0)
            out.append(x)
        return out

    total = 0.0
    for p, t in ((a, A), (s, S)):
        for fp, ft in zip(feats(p), feats(t)):
            total += np.sum((fp - ft) ** 2) / fp.size
    return total


def test_perceptual_matches_straight_line():
    rng = np.random.default_rng(5)
    a, s, A, S = rng.random((4, 3, 32, 32))
    fx = FeatureExtractor.surrogate()
    got = perceptual_loss(Tensor(a[None]), Tensor(s[None]), A[None], S[None], fx).item()
    assert got == pytest.approx(straight_perceptual(a, s, A, S, fx), rel=1e-6)


def test_perceptual_zero_and_symmetric():
    rng = np.random.default_rng(6)
    a, s, A, S = rng.random((4, 1, 3, 16, 16))
    fx = FeatureExtractor.surrogate()
    assert perceptual_loss(Tensor(A), Tensor(S), A, S, fx).item() == 0.0
    fwd = perceptual_loss(Tensor(a), Tensor(s), A, S, fx).item()
    rev = perceptual_loss(Tensor(A), Tensor(S), a, s, fx).item()
    assert fwd == pytest.approx(rev, rel=1e-12)


def test_extractor_tap_shapes_and_extent_error():
    fx = FeatureExtractor.surrogate()
    assert fx.tap_shapes(32, 48) == [(8, 32, 48), (16, 16, 24), (32, 8, 12), (32, 4, 6)]
    taps = fx(Tensor(np.zeros((1, 3, 32, 48))))
    assert [t.shape[1:] for t in taps] == fx.tap_shapes(32, 48)
    with pytest.raises(T.ShapeError, match="too small"):
        fx(Tensor(np.zeros((1, 3, 8, 8))))


def test_extractor_file_round_trip(tmp_path):
    from lappyr.checkpoint import write_tensors

    fx = FeatureExtractor.surrogate(seed=3)
    path = tmp_path / "fx.ckpt"
    write_tensors(path, {"kind": "extractor"}, fx.named_tensors())
    fy = FeatureExtractor.from_file(path)
    x = Tensor(np.random.default_rng(0).random((1, 3, 16, 16)))
    for a, b in zip(fx(x), fy(x)):
        assert a.data.tobytes() == b.data.tobytes()


def test_tv_examples():
    a = Tensor(np.array([[[[0.0, 1.0], [0.0, 1.0]]]]))
    s = Tensor(np.zeros((1, 1, 2, 2)))
    assert tv_loss(a, s).item() == 2.0
    assert tv_loss(Tensor(np.full((1, 3, 5, 5), 0.3)), s if False else Tensor(np.full((1, 3, 5, 5), 0.9))).item() == 0.0
    assert tv_loss(a, s, reduction="mean").item() == 2.0 / 4


def test_tv_shift_invariant():
    rng = np.random.default_rng(7)
    a, s = rng.random((2, 1, 3, 6, 6))
    base = tv_loss(Tensor(a), Tensor(s)).item()
    assert tv_loss(Tensor(a + 0.5), Tensor(s - 0.25)).item() == pytest.approx(base, rel=1e-12)


def test_total_loss_weights():
    parts = {"data": Tensor(1.0), "percep": Tensor(1.0), "tv": Tensor(1.0)}
    assert total_loss(parts).item() == pytest.approx(1.5001, abs=1e-15)
    assert total_loss({k: Tensor(0.0) for k in parts}).item() == 0.0
    w = LossWeights(lambda_p=0.0, lambda_t=0.0)
    assert total_loss({"data": Tensor(0.7), "percep": Tensor(3.0), "tv": Tensor(9.0)}, w).item() == 0.7
    with pytest.raises(ValueError):
        LossWeights(lambda_d=-1)


def test_losses_nonnegative_and_zero_at_truth():
    rng = np.random.default_rng(8)
    A, S = rng.uniform(0.1, 0.9, (2, 1, 3, 16, 16))
    a, s = rng.uniform(0.1, 0.9, (2, 1, 3, 16, 16))
    total, parts = compute_loss(Tensor(a), Tensor(s), A, S, A * S)
    assert total.item() > 0 and all(p.item() >= 0 for p in parts.values())
    cfg = LossConfig(weights=LossWeights(lambda_t=0.0), bilateral=BilateralParams(window=1))
    total, parts = compute_loss(Tensor(A), Tensor(S), A, S, A * S, cfg)
    assert total.item() == 0.0


def test_compute_loss_skips_perceptual_when_too_small():
    A = np.full((1, 3, 8, 8), 0.5)
    _, parts = compute_loss(Tensor(A), Tensor(A), A, A, A * A)
    assert "percep" not in parts


def test_loss_gradients_match_finite_differences():
    for res in loss_checks(seed=2):
        assert res.passed, f"{res.name}: {res.max_rel_error:.3e}"
