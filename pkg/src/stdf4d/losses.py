"""Photometric losses, pose regularizer and image metrics.

Images are (H, W, 3) float arrays in [0, 1]. Every loss has a ``*_grad``
form returning ``(value, gradient w.r.t. the first image)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


@dataclass(frozen=True)
class LossWeights:
    lambda_dssim: float = 0.2
    lambda1: float = 0.02
    lambda2: float = 0.2
    lambda_p: float = 0.1
    lambda_s: float = 1e-4
    tv_weight: float = 2e-4

    def __post_init__(self):
        for name, val in self.__dict__.items():
            if val < 0:
                raise ValueError(f"{name} must be non-negative")


def _check_shapes(a, b):
    if np.shape(a) != np.shape(b):
        raise ValueError(f"image shapes differ: {np.shape(a)} vs {np.shape(b)}")


def l1_loss(a, b) -> float:
    return l1_loss_grad(a, b)[0]


def l1_loss_grad(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    d = a - b
    return float(np.mean(np.abs(d))), np.sign(d) / d.size


# -- SSIM -------------------------------------------------------------------


def _gauss_kernel(size=SSIM_WINDOW, sigma=SSIM_SIGMA):
    x = np.arange(size) - size // 2
    k = np.exp(-(x * x) / (2 * sigma * sigma))
    return k / k.sum()


_FILTER_CACHE: dict[int, np.ndarray] = {}


def _filter_matrix(n: int) -> np.ndarray:
    """Dense 'same' convolution with zero padding along one axis."""
    if n not in _FILTER_CACHE:
        k = _gauss_kernel()
        r = len(k) // 2
        m = np.zeros((n, n))
        for i in range(n):
            for j in range(max(0, i - r), min(n, i + r + 1)):
                m[i, j] = k[j - i + r]
        _FILTER_CACHE[n] = m
    return _FILTER_CACHE[n]


def _blur(x, kh, kw):
    # x: (H, W, C); rows then columns
    y = np.tensordot(kh, x, axes=(1, 0))
    return np.einsum("lk,ikc->ilc", kw, y, optimize=True)


def _blur_t(x, kh, kw):
    y = np.tensordot(kh.T, x, axes=(1, 0))
    return np.einsum("kl,ikc->ilc", kw, y, optimize=True)


def ssim_grad(a, b):
    """Mean SSIM over pixels and channels and its gradient w.r.t. ``a``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    if a.ndim == 2:
        a, b = a[:, :, None], b[:, :, None]
        squeeze = True
    else:
        squeeze = False
    h, w = a.shape[:2]
    if min(h, w) < SSIM_WINDOW:
        raise ValueError(f"image smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} SSIM window")
    kh, kw = _filter_matrix(h), _filter_matrix(w)
    mu_a = _blur(a, kh, kw)
    mu_b = _blur(b, kh, kw)
    s_aa = _blur(a * a, kh, kw) - mu_a * mu_a
    s_bb = _blur(b * b, kh, kw) - mu_b * mu_b
    s_ab = _blur(a * b, kh, kw) - mu_a * mu_b
    n1 = 2 * mu_a * mu_b + SSIM_C1
    n2 = 2 * s_ab + SSIM_C2
    d1 = mu_a * mu_a + mu_b * mu_b + SSIM_C1
    d2 = s_aa + s_bb + SSIM_C2
    smap = (n1 * n2) / (d1 * d2)
    val = float(np.mean(smap))
    g = 1.0 / smap.size
    # partials of the map w.r.t. mu_a, s_aa, s_ab
    g_n1 = g * n2 / (d1 * d2)
    g_n2 = g * n1 / (d1 * d2)
    g_d1 = -g * smap / d1
    g_d2 = -g * smap / d2
    g_mu_a = g_n1 * 2 * mu_b + g_d1 * 2 * mu_a
    g_saa = g_d2
    g_sab = 2 * g_n2
    # s_aa = F(a^2) - mu_a^2, s_ab = F(ab) - mu_a mu_b
    g_mu_a = g_mu_a - 2 * mu_a * g_saa - mu_b * g_sab
    grad = _blur_t(g_mu_a, kh, kw) + 2 * a * _blur_t(g_saa, kh, kw) + b * _blur_t(g_sab, kh, kw)
    if squeeze:
        grad = grad[:, :, 0]
    return val, grad


def ssim(a, b) -> float:
    return ssim_grad(a, b)[0]


def dssim_loss_grad(a, b):
    s, g = ssim_grad(a, b)
    return (1.0 - s) / 2.0, -0.5 * g


def dssim_loss(a, b) -> float:
    return dssim_loss_grad(a, b)[0]


# -- perceptual substitute --------------------------------------------------


def _pool2(x):
    h, w = x.shape[0] // 2 * 2, x.shape[1] // 2 * 2
    x = x[:h, :w]
    return 0.25 * (x[0::2, 0::2] + x[1::2, 0::2] + x[0::2, 1::2] + x[1::2, 1::2])


def _pool2_t(g, shape):
    out = np.zeros(shape)
    q = 0.25 * g
    out[0 : 2 * g.shape[0] : 2, 0 : 2 * g.shape[1] : 2] += q
    out[1 : 2 * g.shape[0] : 2, 0 : 2 * g.shape[1] : 2] += q
    out[0 : 2 * g.shape[0] : 2, 1 : 2 * g.shape[1] : 2] += q
    out[1 : 2 * g.shape[0] : 2, 1 : 2 * g.shape[1] : 2] += q
    return out


def _grad_l1(a, b):
    """Mean |grad a - grad b| over both finite-difference directions."""
    dxa, dxb = np.diff(a, axis=1), np.diff(b, axis=1)
    dya, dyb = np.diff(a, axis=0), np.diff(b, axis=0)
    ex, ey = dxa - dxb, dya - dyb
    val = 0.5 * (np.mean(np.abs(ex)) + np.mean(np.abs(ey)))
    gx = 0.5 * np.sign(ex) / ex.size
    gy = 0.5 * np.sign(ey) / ey.size
    g = np.zeros_like(a)
    g[:, 1:] += gx
    g[:, :-1] -= gx
    g[1:] += gy
    g[:-1] -= gy
    return float(val), g


def gradient_l1_grad(a, b, levels: int = 2):
    """Image-gradient L1 averaged over a 2x2 average-pooling pyramid."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    total = 0.0
    grad = np.zeros_like(a)
    shapes = []
    xa, xb = a, b
    for lvl in range(levels):
        if lvl > 0:
            shapes.append(xa.shape)
            xa, xb = _pool2(xa), _pool2(xb)
        v, g = _grad_l1(xa, xb)
        for shp in reversed(shapes):
            g = _pool2_t(g, shp)
        total += v / levels
        grad += g / levels
    return total, grad


def gradient_l1(a, b, levels: int = 2) -> float:
    return gradient_l1_grad(a, b, levels)[0]


PerceptualFn = Callable[[np.ndarray, np.ndarray], tuple[float, np.ndarray]]


def zero_perceptual(a, b):
    return 0.0, np.zeros_like(np.asarray(a, dtype=np.float64))


# -- combined terms -----------------------------------------------------------


def input_view_loss_grad(rendered, target, w: LossWeights):
    l1, g1 = l1_loss_grad(rendered, target)
    if w.lambda_dssim == 0:
        return l1, g1
    ds, gd = dssim_loss_grad(rendered, target)
    lam = w.lambda_dssim
    return (1 - lam) * l1 + lam * ds, (1 - lam) * g1 + lam * gd


def input_view_loss(rendered, target, w: LossWeights) -> float:
    return input_view_loss_grad(rendered, target, w)[0]


def gen_view_loss_grad(rendered, target, w: LossWeights, perceptual: PerceptualFn = gradient_l1_grad):
    l1, g1 = l1_loss_grad(rendered, target)
    pv, pg = perceptual(rendered, target)
    return w.lambda1 * l1 + w.lambda2 * pv, w.lambda1 * g1 + w.lambda2 * pg


def gen_view_loss(rendered, target, w: LossWeights, perceptual: PerceptualFn = gradient_l1_grad) -> float:
    return gen_view_loss_grad(rendered, target, w, perceptual)[0]


def _safe_norm_grad(v):
    n = float(np.linalg.norm(v))
    if n == 0.0:
        return 0.0, np.zeros_like(v)
    return n, v / n


def align_sign(q, q_ref):
    """Flip ``q`` onto the hemisphere of ``q_ref`` (double cover)."""
    return q if np.dot(q, q_ref) >= 0 else -q


def pose_loss_grad(poses, w: LossWeights):
    """``lambda_p * sum(|t - t0| + |q - q0|)`` over ``(q, t, q0, t0)`` tuples.

    Returns the value and a list of ``(g_q, g_t)``. The norm's subgradient
    at zero is taken as zero.
    """
    total = 0.0
    grads = []
    for q, t, q0, t0 in poses:
        q = np.asarray(q, dtype=np.float64)
        sign = 1.0 if np.dot(q, q0) >= 0 else -1.0
        nt, gt = _safe_norm_grad(np.asarray(t, dtype=np.float64) - t0)
        nq, gq = _safe_norm_grad(sign * q - q0)
        total += nt + nq
        grads.append((w.lambda_p * sign * gq, w.lambda_p * gt))
    return w.lambda_p * total, grads


def pose_loss(views, w: LossWeights) -> float:
    return pose_loss_grad([(v.q_cam, v.t_cam, v.q_init, v.t_init) for v in views], w)[0]


def total_loss(components: dict) -> float:
    """Sum of the five components in fixed order; missing ones count as zero."""
    total = 0.0
    for key in ("input", "gen", "pose", "tv", "smooth"):
        total += components.get(key, 0.0)
    return total


# -- metrics --------------------------------------------------------------------


def psnr(a, b, peak: float = 1.0) -> float:
    """PSNR in dB; identical images give ``math.inf``."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _check_shapes(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)
