import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from stdf4d.gauss4d import (
    DensifyOptions,
    Gaussian4D,
    GaussianSet,
    covariance4d,
    densify_prune,
    gaussian_covariance,
    logit,
    rotation4d,
    slice_at,
    slice_dense_oracle,
    slice_vjp,
)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_gaussian(rng, t_center=0.0):
    return Gaussian4D(
        np.r_[rng.normal(size=3), t_center + rng.normal()],
        rng.uniform(-1.5, 0.5, size=4),
        unit(rng.normal(size=4)),
        unit(rng.normal(size=4)),
        float(rng.normal()),
        rng.uniform(0, 1, size=3),
    )


def test_identity_pair_is_identity_bit_exact():
    r = rotation4d([1.0, 0, 0, 0], [1.0, 0, 0, 0])
    assert np.array_equal(r, np.eye(4))


@given(st.integers(0, 10**6))
@settings(max_examples=50)
def test_rotation_is_special_orthogonal(seed):
    rng = np.random.default_rng(seed)
    r = rotation4d(unit(rng.normal(size=4)), unit(rng.normal(size=4)))
    assert np.max(np.abs(r.T @ r - np.eye(4))) < 1e-10
    assert abs(np.linalg.det(r) - 1.0) < 1e-10


def test_rotation_double_cover():
    rng = np.random.default_rng(1)
    ql, qr = unit(rng.normal(size=4)), unit(rng.normal(size=4))
    assert np.allclose(rotation4d(ql, qr), rotation4d(-ql, -qr), atol=1e-15)


def test_rotation_rejects_non_unit():
    with pytest.raises(ValueError):
        rotation4d([2.0, 0, 0, 0], [1.0, 0, 0, 0])


def test_left_right_factors_commute():
    # left- and right-isoclinic rotations commute: L(a) R(b) = R(b) L(a)
    rng = np.random.default_rng(2)
    a, b = unit(rng.normal(size=4)), unit(rng.normal(size=4))
    e = np.array([1.0, 0, 0, 0])
    assert np.allclose(rotation4d(a, e) @ rotation4d(e, b), rotation4d(e, b) @ rotation4d(a, e), atol=1e-14)


def test_covariance_diagonal_cases():
    eye = np.eye(4)
    assert np.allclose(covariance4d(np.zeros(4), eye), eye)
    assert np.allclose(covariance4d([math.log(2), 0, 0, 0], eye), np.diag([4.0, 1, 1, 1]))


@given(st.integers(0, 10**6))
@settings(max_examples=40)
def test_covariance_eigenvalues_match_scales(seed):
    rng = np.random.default_rng(seed)
    g = random_gaussian(rng)
    ev = np.sort(np.linalg.eigvalsh(gaussian_covariance(g)))
    want = np.sort(np.exp(2 * g.log_scales))
    assert np.allclose(ev, want, rtol=1e-9, atol=1e-12)


def test_slice_decoupled_time():
    g = Gaussian4D(np.array([1.0, 2, 3, 0.5]), np.array([0.0, math.log(2), 0, math.log(0.7)]),
                   np.array([1.0, 0, 0, 0]), np.array([1.0, 0, 0, 0]), 0.0, np.ones(3))
    for t in (-1.0, 0.5, 3.0):
        sl = slice_at(g, t)
        assert np.array_equal(sl.mean3[0], g.mu[:3])
        assert np.allclose(sl.cov3[0], np.diag([1.0, 4.0, 1.0]))
    assert slice_at(g, 0.5).temporal_weight[0] == 1.0
    assert slice_at(g, 0.5 + 0.7).temporal_weight[0] == pytest.approx(math.exp(-0.5), rel=1e-12)
    assert math.exp(-0.5) == pytest.approx(0.60653, abs=1e-5)


def test_slice_degenerate_time_rejected():
    g = Gaussian4D(np.zeros(4), np.array([0.0, 0, 0, -20.0]), np.array([1.0, 0, 0, 0]),
                   np.array([1.0, 0, 0, 0]), 0.0, np.ones(3))
    with pytest.raises(ValueError):
        slice_at(g, 0.0)


@given(st.integers(0, 10**6), st.floats(-3, 3))
@settings(max_examples=60)
def test_slice_matches_schur_oracle(seed, t):
    g = random_gaussian(np.random.default_rng(seed))
    sl = slice_at(g, t)
    m, c, w = slice_dense_oracle(g.mu, gaussian_covariance(g), t)
    assert np.allclose(sl.mean3[0], m, rtol=1e-10, atol=1e-12)
    assert np.allclose(sl.cov3[0], c, rtol=1e-10, atol=1e-12)
    assert sl.temporal_weight[0] == pytest.approx(w, rel=1e-10)
    assert np.min(np.linalg.eigvalsh(sl.cov3[0])) >= -1e-10


@given(st.integers(0, 10**6), st.floats(0.01, 2.0), st.floats(0.01, 2.0))
@settings(max_examples=40)
def test_weight_peaks_at_center_and_decreases(seed, d1, d2):
    g = random_gaussian(np.random.default_rng(seed))
    near, far = sorted((d1, d2))
    if far - near < 1e-6:
        return
    mt = g.mu[3]
    w0 = slice_at(g, mt).temporal_weight[0]
    assert w0 == 1.0
    for sign in (-1, 1):
        wn = slice_at(g, mt + sign * near).temporal_weight[0]
        wf = slice_at(g, mt + sign * far).temporal_weight[0]
        assert w0 > wn > wf or (wn == wf == 0.0)


def test_slice_set_matches_per_primitive():
    rng = np.random.default_rng(5)
    gs = [random_gaussian(rng) for _ in range(6)]
    batch = slice_at(GaussianSet.from_list(gs), 0.3)
    for k, g in enumerate(gs):
        one = slice_at(g, 0.3)
        assert np.allclose(batch.mean3[k], one.mean3[0], atol=1e-15)
        assert np.allclose(batch.cov3[k], one.cov3[0], atol=1e-15)


def test_slice_pullback_handles_empty_set():
    empty = GaussianSet.from_list([])
    sl, back = slice_vjp(empty, 0.0)
    assert len(sl) == 0
    assert back()["mu"].shape == (0, 4)


def _set(n, opacity=0.9, seed=0):
    rng = np.random.default_rng(seed)
    gs = GaussianSet.from_list(random_gaussian(rng) for _ in range(n))
    gs.opacity_logit[:] = logit(opacity)
    return gs


def test_densify_noop():
    gs = _set(5)
    out, src, is_clone = densify_prune(gs, np.zeros(5), DensifyOptions(), np.random.default_rng(0))
    assert list(src) == list(range(5)) and not is_clone.any()
    assert np.array_equal(out.mu, gs.mu)


def test_densify_prunes_low_opacity():
    gs = _set(4)
    gs.opacity_logit[2] = -10.0
    assert 1 / (1 + math.exp(10)) == pytest.approx(4.5398e-5, rel=1e-4)
    out, src, _ = densify_prune(gs, np.zeros(4), DensifyOptions(), np.random.default_rng(0))
    assert list(src) == [0, 1, 3] and len(out) == 3


def test_densify_clone_within_jitter():
    gs = _set(3)
    opts = DensifyOptions(jitter=(0.01, 0.01, 0.01, 0.1))
    out, src, is_clone = densify_prune(gs, np.array([0.0, 1.0, 0.0]), opts, np.random.default_rng(0))
    assert len(out) == 4 and list(src) == [0, 1, 2, 1] and list(is_clone) == [False] * 3 + [True]
    # 6 sigma of the per-axis jitter
    assert np.all(np.abs(out.mu[3] - gs.mu[1]) < 6 * np.array(opts.jitter))


def test_densify_budget_records_warning():
    gs = _set(3)
    opts = DensifyOptions(max_count=4)
    out, src, _ = densify_prune(gs, np.array([1.0, 3.0, 2.0]), opts, np.random.default_rng(0))
    # only room for the strongest one
    assert len(out) == 4 and src[-1] == 1
    assert opts.warnings and "budget" in opts.warnings[0]


def test_densify_deterministic_in_seed():
    gs = _set(4)
    stats = np.array([1.0, 0, 1.0, 0])
    a = densify_prune(gs, stats, DensifyOptions(), np.random.default_rng(7))[0]
    b = densify_prune(gs, stats, DensifyOptions(), np.random.default_rng(7))[0]
    assert a.mu.tobytes() == b.mu.tobytes()
