import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stdf4d import losses as L
from stdf4d.losses import LossWeights


def pattern(h=16, w=16):
    ii, jj = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    img = ((ii // 2 + jj // 2) % 2).astype(float)
    return np.repeat(img[..., None], 3, axis=2)


def test_l1_examples():
    a = np.full((4, 4, 3), 0.25)
    assert L.l1_loss(a, a) == 0.0
    assert L.l1_loss(a, a + 0.5) == 0.5
    with pytest.raises(ValueError):
        L.l1_loss(a, np.zeros((4, 3, 3)))


def test_dssim_examples():
    a = pattern()
    assert L.dssim_loss(a, a) == pytest.approx(0.0, abs=1e-15)
    anti = L.dssim_loss(a, 1.0 - a)
    # zero padding at the border keeps SSIM above -1; the interior sits near it
    assert 0.85 < anti <= 1.0
    with pytest.raises(ValueError):
        L.ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_ssim_matches_direct_window_oracle():
    """Per-pixel weighted window sums over a zero-padded image."""
    rng = np.random.default_rng(0)
    h, w = 13, 12
    a, b = rng.uniform(0, 1, (h, w)), rng.uniform(0, 1, (h, w))
    k = np.exp(-0.5 * ((np.arange(11) - 5) / 1.5) ** 2)
    k /= k.sum()
    win = np.outer(k, k)
    pa, pb = np.pad(a, 5), np.pad(b, 5)
    c1, c2 = 0.01**2, 0.03**2
    vals = []
    for i in range(h):
        for j in range(w):
            wa, wb = pa[i:i + 11, j:j + 11], pb[i:i + 11, j:j + 11]
            ma, mb = (win * wa).sum(), (win * wb).sum()
            va = (win * wa * wa).sum() - ma * ma
            vb = (win * wb * wb).sum() - mb * mb
            cab = (win * wa * wb).sum() - ma * mb
            vals.append((2 * ma * mb + c1) * (2 * cab + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2)))
    assert L.ssim(a, b) == pytest.approx(np.mean(vals), rel=1e-12)


def test_gradient_l1_identity_and_constant_shift():
    a = pattern()
    assert L.gradient_l1(a, a) == 0.0
    # image gradients ignore a constant offset
    assert L.gradient_l1(a, a + 0.3) == pytest.approx(0.0, abs=1e-15)
    assert L.gradient_l1(a, np.zeros_like(a)) > 0


def test_input_loss_mixes_l1_and_dssim():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(0, 1, (16, 16, 3)), rng.uniform(0, 1, (16, 16, 3))
    w = LossWeights()
    want = 0.8 * L.l1_loss(a, b) + 0.2 * L.dssim_loss(a, b)
    assert L.input_view_loss(a, b, w) == pytest.approx(want, rel=1e-14)
    assert L.input_view_loss(a, a, w) == pytest.approx(0.0, abs=1e-15)


def test_gen_loss_plugin_contract():
    rng = np.random.default_rng(2)
    a, b = rng.uniform(0, 1, (16, 16, 3)), rng.uniform(0, 1, (16, 16, 3))
    w = LossWeights()
    assert L.gen_view_loss(a, a, w) == 0.0
    assert L.gen_view_loss(a, b, w, L.zero_perceptual) == pytest.approx(0.02 * L.l1_loss(a, b), rel=1e-15)


def test_pose_loss_examples():
    w = LossWeights()
    q = np.array([1.0, 0, 0, 0])
    assert L.pose_loss_grad([(q, np.zeros(3), q, np.zeros(3))], w)[0] == 0.0
    val, _ = L.pose_loss_grad([(q, np.array([0.3, 0, 4]), q, np.zeros(3))], w)
    assert val == pytest.approx(0.1 * math.hypot(0.3, 4.0), rel=1e-14)
    assert val / 0.1 == pytest.approx(4.01123, abs=1e-5)


def test_pose_loss_sign_invariant():
    w = LossWeights()
    q0 = np.array([0.6, 0.8, 0, 0])
    assert L.pose_loss_grad([(-q0, np.zeros(3), q0, np.zeros(3))], w)[0] == 0.0


def test_total_loss_sums_components():
    assert L.total_loss({}) == 0.0
    assert L.total_loss({"input": 1.0, "gen": 0.5, "pose": 0.25, "tv": 0.125, "smooth": 0.0625}) == 1.9375


def test_psnr_examples():
    a = np.zeros((4, 4, 3))
    assert L.psnr(a, a) == math.inf
    assert L.psnr(a, a + 0.5) == pytest.approx(10 * math.log10(4.0), rel=1e-14)
    assert L.psnr(a, a + 0.5) == pytest.approx(6.0206, abs=1e-4)


def test_weights_reject_negative():
    with pytest.raises(ValueError):
        LossWeights(lambda1=-1.0)


@given(st.integers(0, 10**6))
@settings(max_examples=20, deadline=None)
def test_losses_non_negative_and_symmetric(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0, 1, (12, 12, 3)), rng.uniform(0, 1, (12, 12, 3))
    for fn in (L.l1_loss, L.dssim_loss, L.gradient_l1):
        assert fn(a, b) >= 0
        assert fn(a, b) == pytest.approx(fn(b, a), rel=1e-12)
