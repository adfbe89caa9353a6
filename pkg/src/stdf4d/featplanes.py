"""Multi-resolution 2D feature planes over (x, y, z, t, s).

Nine axis pairs are used (every pair except ``(t, s)``). A query projects
a 5D grid coordinate onto each plane, bilinearly interpolates, multiplies
the nine results element-wise and concatenates the products across
scales.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

log = logging.getLogger(__name__)

AXES = ("x", "y", "z", "t", "s")
AXIS_INDEX = {a: i for i, a in enumerate(AXES)}
PLANE_PAIRS = (
    ("x", "y"),
    ("x", "z"),
    ("y", "z"),
    ("x", "t"),
    ("y", "t"),
    ("z", "t"),
    ("x", "s"),
    ("y", "s"),
    ("z", "s"),
)
POSE_PAIRS = (("x", "s"), ("y", "s"), ("z", "s"))


def pair_name(pair) -> str:
    return pair[0] + pair[1]


@dataclass
class FeaturePlane:
    axes: tuple[str, str]
    base_res: tuple[int, int]
    scale: int
    channels: int
    values: np.ndarray

    def __post_init__(self):
        a, b = self.axes
        if a == b or a not in AXIS_INDEX or b not in AXIS_INDEX:
            raise ValueError(f"invalid axis pair {self.axes}")
        if {a, b} == {"t", "s"}:
            raise ValueError("the (t, s) plane is not part of the factorization")
        expect = (self.scale * self.base_res[0], self.scale * self.base_res[1], self.channels)
        if self.values.shape != expect:
            raise ValueError(f"plane {a}{b} has shape {self.values.shape}, expected {expect}")


@dataclass
class PlaneSet:
    """Nine planes per scale, keyed by ``(pair_name, scale)``.

    ``resolution`` holds the base resolution of each of the five axes.
    """

    resolution: dict[str, int]
    scales: tuple[int, ...]
    channels: int
    planes: dict[tuple[str, int], FeaturePlane] = field(default_factory=dict)

    def __post_init__(self):
        self.scales = tuple(self.scales)
        if list(self.scales) != sorted(self.scales):
            raise ValueError("scales must be ascending")
        expected = {(pair_name(p), sc) for p in PLANE_PAIRS for sc in self.scales}
        if self.planes and set(self.planes) != expected:
            raise ValueError("plane set must hold every axis pair at every scale")

    @classmethod
    def create(cls, resolution, scales=(1, 2), channels=16, rng=None, init="kplanes"):
        """Allocate a plane set.

        ``init="kplanes"``: spatial planes uniform in [0.1, 0.5], planes
        involving t or s set to one. ``init="ones"`` fills everything with 1.
        """
        rng = rng or np.random.default_rng(0)
        planes = {}
        for sc in scales:
            for pair in PLANE_PAIRS:
                shape = (sc * resolution[pair[0]], sc * resolution[pair[1]], channels)
                if init == "kplanes" and pair[1] not in ("t", "s"):
                    vals = rng.uniform(0.1, 0.5, size=shape)
                elif init in ("kplanes", "ones"):
                    vals = np.ones(shape)
                else:
                    raise ValueError(f"unknown init {init!r}")
                planes[(pair_name(pair), sc)] = FeaturePlane(
                    pair, (resolution[pair[0]], resolution[pair[1]]), sc, channels, vals
                )
        return cls(dict(resolution), tuple(scales), channels, planes)

    def keys(self):
        return [(pair_name(p), sc) for sc in self.scales for p in PLANE_PAIRS]

    def param_name(self, key) -> str:
        return f"planes.{key[0]}.{key[1]}"

    def register(self, store) -> None:
        """Move the grids into ``store`` and alias them (in-place updates)."""
        for key in self.keys():
            self.planes[key].values = store.add(self.param_name(key), self.planes[key].values)

    def bind(self, store) -> PlaneSet:
        """A copy of this layout whose grids alias the arrays held in ``store``."""
        planes = {}
        for key in self.keys():
            p = self.planes[key]
            planes[key] = FeaturePlane(p.axes, p.base_res, p.scale, p.channels, store.get(self.param_name(key)))
        return PlaneSet(dict(self.resolution), self.scales, self.channels, planes)

    @property
    def out_dim(self) -> int:
        return self.channels * len(self.scales)


def project(c: np.ndarray, axes, scale: int = 1) -> np.ndarray:
    """Pick the two named components of ``c`` (shape (..., 5)) and scale them."""
    c = np.asarray(c, dtype=np.float64)
    i, j = AXIS_INDEX[axes[0]], AXIS_INDEX[axes[1]]
    return np.stack([c[..., i], c[..., j]], axis=-1) * scale


def _axis_cell(u: np.ndarray, n: int):
    """Clamp to [0, n-1]; return (lower index, fraction, in-range mask)."""
    lo, hi = 0.0, float(n - 1)
    inside = (u >= lo) & (u <= hi)
    uc = np.clip(u, lo, hi)
    if n == 1:
        return np.zeros(u.shape, dtype=np.intp), np.zeros_like(uc), np.zeros(u.shape, dtype=bool)
    i0 = np.minimum(np.floor(uc).astype(np.intp), n - 2)
    return i0, uc - i0, inside


def plane_interp(values: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Bilinear lookup of a (Ni, Nj, h) grid at points ``p`` of shape (N, 2)."""
    return plane_interp_vjp(values, p)[0]


def plane_interp_vjp(values: np.ndarray, p: np.ndarray):
    """Forward lookup plus a pullback ``g -> (grad_values, grad_p)``.

    Out-of-range coordinates clamp to the border node; their coordinate
    gradient is zero.
    """
    p = np.atleast_2d(np.asarray(p, dtype=np.float64))
    ni, nj, h = values.shape
    i0, fu, in_u = _axis_cell(p[:, 0], ni)
    j0, fv, in_v = _axis_cell(p[:, 1], nj)
    i1 = np.minimum(i0 + 1, ni - 1)
    j1 = np.minimum(j0 + 1, nj - 1)
    v00 = values[i0, j0]
    v01 = values[i0, j1]
    v10 = values[i1, j0]
    v11 = values[i1, j1]
    wu0, wu1 = (1.0 - fu)[:, None], fu[:, None]
    wv0, wv1 = (1.0 - fv)[:, None], fv[:, None]
    out = wu0 * wv0 * v00 + wu0 * wv1 * v01 + wu1 * wv0 * v10 + wu1 * wv1 * v11

    def pullback(g: np.ndarray):
        gvals = np.zeros_like(values)
        np.add.at(gvals, (i0, j0), g * (wu0 * wv0))
        np.add.at(gvals, (i0, j1), g * (wu0 * wv1))
        np.add.at(gvals, (i1, j0), g * (wu1 * wv0))
        np.add.at(gvals, (i1, j1), g * (wu1 * wv1))
        du = np.sum(g * (wv0 * (v10 - v00) + wv1 * (v11 - v01)), axis=1)
        dv = np.sum(g * (wu0 * (v01 - v00) + wu1 * (v11 - v10)), axis=1)
        gp = np.stack([du * in_u, dv * in_v], axis=1)
        return gvals, gp

    return out, pullback


def fuse(features) -> np.ndarray:
    return fuse_vjp(features)[0]


def fuse_vjp(features):
    """Element-wise product of nine equal-shape feature arrays."""
    features = list(features)
    if len(features) != len(PLANE_PAIRS):
        raise ValueError(f"fuse needs {len(PLANE_PAIRS)} plane features, got {len(features)}")
    shape = np.shape(features[0])
    if any(np.shape(f) != shape for f in features):
        raise ValueError("plane features differ in shape")
    k = len(features)
    # prefix[i] = f0*...*f(i-1), suffix[i] = f(i+1)*...*f(k-1); avoids dividing by zeros
    prefix = [np.ones(shape)]
    for f in features[:-1]:
        prefix.append(prefix[-1] * f)
    out = prefix[-1] * features[-1]
    suffix = [None] * k
    acc = np.ones(shape)
    for i in range(k - 1, -1, -1):
        suffix[i] = acc
        acc = acc * features[i]

    def pullback(g):
        return [g * prefix[i] * suffix[i] for i in range(k)]

    return out, pullback


def multiscale_feature(planes: PlaneSet, c: np.ndarray) -> np.ndarray:
    return multiscale_feature_vjp(planes, c)[0]


def multiscale_feature_vjp(planes: PlaneSet, c: np.ndarray):
    """Fused features of shape (N, h * n_scales); pullback gives plane and coordinate grads.

    The pullback returns ``(grads, grad_c)`` with ``grads`` keyed like
    ``planes.planes``.
    """
    c = np.atleast_2d(np.asarray(c, dtype=np.float64))
    outs, backs = [], []
    for sc in planes.scales:
        per_plane, plane_backs = [], []
        for pair in PLANE_PAIRS:
            key = (pair_name(pair), sc)
            f, b = plane_interp_vjp(planes.planes[key].values, project(c, pair, sc))
            per_plane.append(f)
            plane_backs.append((key, pair, b))
        fused, fuse_back = fuse_vjp(per_plane)
        outs.append(fused)
        backs.append((sc, fuse_back, plane_backs))
    out = np.concatenate(outs, axis=1)
    h = planes.channels

    def pullback(g):
        grads = {}
        gc = np.zeros_like(c)
        for k, (sc, fuse_back, plane_backs) in enumerate(backs):
            gf = fuse_back(g[:, k * h : (k + 1) * h])
            for gfi, (key, pair, b) in zip(gf, plane_backs):
                gvals, gp = b(gfi)
                grads[key] = gvals
                gc[:, AXIS_INDEX[pair[0]]] += gp[:, 0] * sc
                gc[:, AXIS_INDEX[pair[1]]] += gp[:, 1] * sc
        return grads, gc

    return out, pullback


def tv_loss(planes: PlaneSet) -> float:
    return tv_loss_grad(planes)[0]


def tv_loss_grad(planes: PlaneSet):
    """Total variation over every plane and scale.

    Per plane and axis: mean of squared differences between adjacent
    nodes (over positions and channels); axes of length one contribute
    nothing. The per-plane sums are averaged over all planes.
    """
    keys = planes.keys()
    total = 0.0
    grads = {}
    for key in keys:
        vals = planes.planes[key].values
        g = np.zeros_like(vals)
        for axis in (0, 1):
            if vals.shape[axis] < 2:
                continue
            d = np.diff(vals, axis=axis)
            flat = d.reshape(-1)
            total += float(flat @ flat) / d.size
            gd = d
            gd *= 2.0 / d.size
            if axis == 0:
                g[1:] += gd
                g[:-1] -= gd
            else:
                g[:, 1:] += gd
                g[:, :-1] -= gd
        grads[key] = g
    n = len(keys)
    for key in keys:
        grads[key] /= n
    return total / n, grads


def smooth_loss(planes: PlaneSet, weight: float) -> float:
    return smooth_loss_grad(planes, weight)[0]


def smooth_loss_grad(planes: PlaneSet, weight: float):
    """Second-difference penalty along the pose axis of the xs, ys, zs planes.

    For each such plane (at every scale) the squared L2 norm over channels
    of ``(P[i,s-1]-P[i,s]) - (P[i,s]-P[i,s+1])`` is summed over positions
    and divided by the plane's node count ``Ni*Ns``; the result is averaged
    over the planes and multiplied by ``weight``.
    """
    keys = [(pair_name(p), sc) for sc in planes.scales for p in POSE_PAIRS]
    grads = {}
    if any(planes.planes[k].values.shape[1] < 3 for k in keys):
        log.warning("pose axis shorter than 3 nodes; smoothness loss disabled")
        return 0.0, {k: np.zeros_like(planes.planes[k].values) for k in keys}
    total = 0.0
    n = len(keys)
    for key in keys:
        vals = planes.planes[key].values
        ni, ns = vals.shape[:2]
        d2 = vals[:, :-2] - 2.0 * vals[:, 1:-1] + vals[:, 2:]
        total += float(np.sum(d2 * d2)) / (ni * ns)
        gd = (2.0 * weight / (ni * ns * n)) * d2
        g = np.zeros_like(vals)
        g[:, :-2] += gd
        g[:, 1:-1] -= 2.0 * gd
        g[:, 2:] += gd
        grads[key] = g
    return weight * total / n, grads
