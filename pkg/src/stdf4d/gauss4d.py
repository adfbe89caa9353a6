"""4D Gaussian primitives and temporal slicing.

Rotations use the isotropic pair ``R = L(q_l) @ R(q_r)``, where ``L(q)``
and ``R(q)`` are the 4x4 matrices of left and right quaternion
multiplication (components ordered ``(w, x, y, z)`` acting on
``(x, y, z, t)``). All functions are batched over a leading axis.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

UNIT_TOL = 1e-6

# L(q) = sum_k q_k * _LEFT[k], R(q) = sum_k q_k * _RIGHT[k]
_LEFT = np.zeros((4, 4, 4))
_RIGHT = np.zeros((4, 4, 4))
for _k, _m in enumerate(
    [
        [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]],
        [[0, -1, 0, 0], [1, 0, 0, 0], [0, 0, 0, -1], [0, 0, 1, 0]],
        [[0, 0, -1, 0], [0, 0, 0, 1], [1, 0, 0, 0], [0, -1, 0, 0]],
        [[0, 0, 0, -1], [0, 0, -1, 0], [0, 1, 0, 0], [1, 0, 0, 0]],
    ]
):
    _LEFT[_k] = _m
for _k, _m in enumerate(
    [
        [[1, 0, 0, 0], [0, 1, 0, 0], [0, 0, 1, 0], [0, 0, 0, 1]],
        [[0, -1, 0, 0], [1, 0, 0, 0], [0, 0, 0, 1], [0, 0, -1, 0]],
        [[0, 0, -1, 0], [0, 0, 0, -1], [1, 0, 0, 0], [0, 1, 0, 0]],
        [[0, 0, 0, -1], [0, 0, 1, 0], [0, -1, 0, 0], [1, 0, 0, 0]],
    ]
):
    _RIGHT[_k] = _m


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class Gaussian4D:
    mu: np.ndarray
    log_scales: np.ndarray
    q_l: np.ndarray
    q_r: np.ndarray
    opacity_logit: float
    color: np.ndarray

    @property
    def opacity(self) -> float:
        return float(sigmoid(self.opacity_logit))


@dataclass
class GaussianSet:
    """Struct-of-arrays batch of 4D Gaussians."""

    mu: np.ndarray  # (N, 4)
    log_scales: np.ndarray  # (N, 4)
    q_l: np.ndarray  # (N, 4)
    q_r: np.ndarray  # (N, 4)
    opacity_logit: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)

    FIELDS = ("mu", "log_scales", "q_l", "q_r", "opacity_logit", "color")

    def __len__(self) -> int:
        return len(self.mu)

    def __getitem__(self, i) -> Gaussian4D:
        return Gaussian4D(
            self.mu[i].copy(),
            self.log_scales[i].copy(),
            self.q_l[i].copy(),
            self.q_r[i].copy(),
            float(self.opacity_logit[i]),
            self.color[i].copy(),
        )

    @classmethod
    def from_list(cls, gs) -> GaussianSet:
        gs = list(gs)
        return cls(
            np.array([g.mu for g in gs], dtype=np.float64).reshape(-1, 4),
            np.array([g.log_scales for g in gs], dtype=np.float64).reshape(-1, 4),
            np.array([g.q_l for g in gs], dtype=np.float64).reshape(-1, 4),
            np.array([g.q_r for g in gs], dtype=np.float64).reshape(-1, 4),
            np.array([g.opacity_logit for g in gs], dtype=np.float64).reshape(-1),
            np.array([g.color for g in gs], dtype=np.float64).reshape(-1, 3),
        )

    def copy(self) -> GaussianSet:
        return GaussianSet(*(getattr(self, f).copy() for f in self.FIELDS))

    def take(self, idx) -> GaussianSet:
        return GaussianSet(*(getattr(self, f)[idx] for f in self.FIELDS))


@dataclass
class Sliced3D:
    """Batch of 3D Gaussians obtained by conditioning on a time value."""

    mean3: np.ndarray  # (N, 3)
    cov3: np.ndarray  # (N, 3, 3)
    temporal_weight: np.ndarray  # (N,)
    opacity: np.ndarray  # (N,)
    color: np.ndarray  # (N, 3)

    def __len__(self) -> int:
        return len(self.mean3)

    @classmethod
    def empty(cls) -> Sliced3D:
        return cls(np.zeros((0, 3)), np.zeros((0, 3, 3)), np.zeros(0), np.zeros(0), np.zeros((0, 3)))


# -- quaternions ------------------------------------------------------------


def normalize_quat_vjp(q: np.ndarray, min_norm: float = 1e-12):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n < min_norm):
        raise ValueError("degenerate quaternion (norm below 1e-12)")
    qn = q / n

    def pullback(g):
        return (g - qn * np.sum(qn * g, axis=-1, keepdims=True)) / n

    return qn, pullback


def _check_unit(q, name):
    err = np.abs(np.linalg.norm(q, axis=-1) - 1.0)
    if np.any(err > UNIT_TOL):
        raise ValueError(f"{name} is not a unit quaternion (deviation {err.max():.3g})")


def rotation4d(q_l, q_r) -> np.ndarray:
    """``L(q_l) @ R(q_r)`` for unit quaternions; batched over leading axes."""
    q_l = np.asarray(q_l, dtype=np.float64)
    q_r = np.asarray(q_r, dtype=np.float64)
    _check_unit(q_l, "q_l")
    _check_unit(q_r, "q_r")
    lm = np.einsum("...k,kij->...ij", q_l, _LEFT)
    rm = np.einsum("...k,kij->...ij", q_r, _RIGHT)
    return lm @ rm


def rotation4d_vjp(q_l, q_r):
    q_l = np.asarray(q_l, dtype=np.float64)
    q_r = np.asarray(q_r, dtype=np.float64)
    _check_unit(q_l, "q_l")
    _check_unit(q_r, "q_r")
    lm = np.einsum("...k,kij->...ij", q_l, _LEFT)
    rm = np.einsum("...k,kij->...ij", q_r, _RIGHT)
    out = lm @ rm

    def pullback(g):
        gl = g @ np.swapaxes(rm, -1, -2)
        gr = np.swapaxes(lm, -1, -2) @ g
        return np.einsum("...ij,kij->...k", gl, _LEFT), np.einsum("...ij,kij->...k", gr, _RIGHT)

    return out, pullback


def covariance4d(log_scales, rot) -> np.ndarray:
    return covariance4d_vjp(log_scales, rot)[0]


def covariance4d_vjp(log_scales, rot):
    """``R diag(exp(2 log_scales)) R^T``."""
    s = np.exp(np.asarray(log_scales, dtype=np.float64))
    m = rot * s[..., None, :]
    cov = m @ np.swapaxes(m, -1, -2)

    def pullback(g):
        gm = (g + np.swapaxes(g, -1, -2)) @ m
        grot = gm * s[..., None, :]
        gs = np.sum(gm * rot, axis=-2)
        return gs * s, grot

    return cov, pullback


def gaussian_covariance(g: Gaussian4D) -> np.ndarray:
    """Covariance of a single primitive (quaternions normalized first)."""
    ql = np.asarray(g.q_l, dtype=np.float64)
    qr = np.asarray(g.q_r, dtype=np.float64)
    rot = rotation4d(ql / np.linalg.norm(ql), qr / np.linalg.norm(qr))
    return covariance4d(g.log_scales, rot)


def condition_vjp(mu: np.ndarray, cov: np.ndarray, t):
    """Condition 4D Gaussians (mean ``mu``, covariance ``cov``) on time ``t``.

    Returns ``(mean3, cov3, weight)`` and a pullback
    ``(g_mean3, g_cov3, g_weight) -> (g_mu, g_cov, g_t)``. The temporal
    decay rate is ``1 / cov[3, 3]``.
    """
    a = cov[..., :3, :3]
    b = cov[..., :3, 3]
    c = cov[..., 3, 3]
    if np.any(c < 1e-12):
        raise ValueError("degenerate temporal extent (Sigma_tt < 1e-12)")
    dt = t - mu[..., 3]
    k = dt / c
    mean3 = mu[..., :3] + b * k[..., None]
    bb = b[..., :, None] * b[..., None, :]
    cov3 = a - bb / c[..., None, None]
    weight = np.exp(-0.5 * dt * dt / c)

    def pullback(gm, gc, gw):
        gm = np.zeros_like(mean3) if gm is None else gm
        gc = np.zeros_like(cov3) if gc is None else gc
        gw = np.zeros_like(weight) if gw is None else gw
        gmu = np.zeros_like(mu)
        gmu[..., :3] = gm
        gcov = np.zeros_like(cov)
        gcov[..., :3, :3] = gc
        gsym = gc + np.swapaxes(gc, -1, -2)
        gb = gm * k[..., None] - np.einsum("...ij,...j->...i", gsym, b) / c[..., None]
        gcov[..., :3, 3] = gb
        gmb = np.sum(gm * b, axis=-1)
        bgb = np.einsum("...i,...ij,...j->...", b, gc, b)
        gcc = -gmb * dt / (c * c) + bgb / (c * c) + gw * weight * 0.5 * dt * dt / (c * c)
        gcov[..., 3, 3] = gcc
        gdt = gmb / c - gw * weight * dt / c
        gmu[..., 3] = -gdt
        return gmu, gcov, gdt

    return mean3, cov3, weight, pullback


def slice_vjp(gs: GaussianSet, t: float):
    """Slice a Gaussian batch at time ``t``.

    Quaternions are normalized inside, so raw (unnormalized) parameters
    can be differentiated. The pullback maps a gradient on the
    :class:`Sliced3D` fields (``mean3, cov3, temporal_weight, opacity,
    color``; ``None`` means zero) to a dict of gradients keyed by
    :attr:`GaussianSet.FIELDS` plus ``"t"``.
    """
    n = len(gs)
    if n == 0:
        return Sliced3D.empty(), lambda *a, **k: {f: np.zeros_like(getattr(gs, f)) for f in gs.FIELDS} | {"t": 0.0}
    ql, back_ql = normalize_quat_vjp(gs.q_l)
    qr, back_qr = normalize_quat_vjp(gs.q_r)
    rot, back_rot = rotation4d_vjp(ql, qr)
    cov, back_cov = covariance4d_vjp(gs.log_scales, rot)
    mean3, cov3, weight, back_cond = condition_vjp(gs.mu, cov, t)
    opacity = sigmoid(gs.opacity_logit)
    out = Sliced3D(mean3, cov3, weight, opacity, gs.color.copy())

    def pullback(g_mean3=None, g_cov3=None, g_weight=None, g_opacity=None, g_color=None):
        gmu, gcov, gdt = back_cond(g_mean3, g_cov3, g_weight)
        gls, grot = back_cov(gcov)
        gql, gqr = back_rot(grot)
        grads = {
            "mu": gmu,
            "log_scales": gls,
            "q_l": back_ql(gql),
            "q_r": back_qr(gqr),
            "opacity_logit": np.zeros(n) if g_opacity is None else g_opacity * opacity * (1.0 - opacity),
            "color": np.zeros((n, 3)) if g_color is None else np.asarray(g_color, dtype=np.float64),
            "t": float(np.sum(gdt)),
        }
        return grads

    return out, pullback


def slice_at(g, t: float) -> Sliced3D:
    """Slice one :class:`Gaussian4D` or a :class:`GaussianSet` at time ``t``."""
    gs = GaussianSet.from_list([g]) if isinstance(g, Gaussian4D) else g
    return slice_vjp(gs, t)[0]


def slice_dense_oracle(mu, cov, t):
    """Reference conditional Gaussian via an explicit Schur complement (single primitive)."""
    mu = np.asarray(mu, dtype=np.float64)
    cov = np.asarray(cov, dtype=np.float64)
    s_xx = cov[:3, :3]
    s_xt = cov[:3, 3:4]
    s_tt = cov[3:4, 3:4]
    inv_tt = np.linalg.inv(s_tt)
    mean3 = mu[:3] + (s_xt @ inv_tt @ np.array([[t - mu[3]]]))[:, 0]
    cov3 = s_xx - s_xt @ inv_tt @ s_xt.T
    weight = float(np.exp(-0.5 * (t - mu[3]) ** 2 * inv_tt[0, 0]))
    return mean3, cov3, weight


# -- densification ----------------------------------------------------------


@dataclass
class DensifyOptions:
    prune_opacity: float = 0.005
    clone_grad_threshold: float = 2e-4
    max_count: int = 200
    jitter: tuple[float, float, float, float] = (0.01, 0.01, 0.01, 0.1)
    warnings: list[str] = field(default_factory=list)


def densify_prune(gs: GaussianSet, grad_stats: np.ndarray, opts: DensifyOptions, rng: np.random.Generator):
    """Prune low-opacity primitives, clone high-gradient ones.

    Returns ``(new_set, source_index)`` where ``source_index[k]`` is the
    row of ``gs`` that row ``k`` of the result came from, and a boolean
    mask marking the clones.
    """
    grad_stats = np.asarray(grad_stats, dtype=np.float64)
    alpha = sigmoid(gs.opacity_logit)
    keep = np.flatnonzero(alpha >= opts.prune_opacity)
    clone = keep[grad_stats[keep] > opts.clone_grad_threshold]
    room = max(opts.max_count - len(keep), 0)
    if len(clone) > room:
        msg = f"clone budget exceeded: {len(clone)} requested, {room} allowed"
        log.warning(msg)
        opts.warnings.append(msg)
        order = np.argsort(-grad_stats[clone], kind="stable")
        clone = np.sort(clone[order[:room]])
    src = np.concatenate([keep, clone]).astype(np.intp)
    out = gs.take(src).copy()
    if len(clone):
        jitter = rng.normal(size=(len(clone), 4)) * np.asarray(opts.jitter)
        out.mu[len(keep):] += jitter
    is_clone = np.zeros(len(src), dtype=bool)
    is_clone[len(keep):] = True
    return out, src, is_clone
