"""Spatio-temporal distortion field.

Maps a canonical Gaussian's spatial center plus a (time index, pose index)
pair to additive deltas on its 4D mean, both rotation quaternions and its
log-scales. Features come from nine factorized planes over
``(x, y, z, t, s)``; a ReLU trunk and four linear heads decode them. The
heads start at zero so an untrained field is exactly the identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .featplanes import PlaneSet, multiscale_feature_vjp
from .gauss4d import GaussianSet, normalize_quat_vjp

HEADS = ("mu", "ql", "qr", "s")


@dataclass(frozen=True)
class SceneBounds:
    min_xyz: tuple[float, float, float]
    max_xyz: tuple[float, float, float]
    t_count: int
    s_count: int

    def __post_init__(self):
        lo = np.asarray(self.min_xyz, dtype=np.float64)
        hi = np.asarray(self.max_xyz, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,):
            raise ValueError("bounds must be 3-vectors")
        if np.any(hi - lo <= 0):
            raise ValueError("degenerate scene bounds: max must exceed min on every axis")
        if self.t_count < 1 or self.s_count < 1:
            raise ValueError("t_count and s_count must be positive")

    @property
    def extent(self) -> float:
        return float(np.max(np.asarray(self.max_xyz) - np.asarray(self.min_xyz)))

    def to_dict(self) -> dict:
        return {"min_xyz": list(self.min_xyz), "max_xyz": list(self.max_xyz),
                "t_count": self.t_count, "s_count": self.s_count}

    @classmethod
    def from_dict(cls, d) -> SceneBounds:
        return cls(tuple(d["min_xyz"]), tuple(d["max_xyz"]), int(d["t_count"]), int(d["s_count"]))


@dataclass(frozen=True)
class FieldConfig:
    spatial_res: int = 64
    scales: tuple[int, ...] = (1, 2)
    channels: int = 16
    hidden: int = 64
    depth: int = 2
    use_t: bool = True
    use_s: bool = True

    def to_dict(self) -> dict:
        return {"spatial_res": self.spatial_res, "scales": list(self.scales), "channels": self.channels,
                "hidden": self.hidden, "depth": self.depth, "use_t": self.use_t, "use_s": self.use_s}

    @classmethod
    def from_dict(cls, d) -> FieldConfig:
        d = dict(d)
        d["scales"] = tuple(d["scales"])
        return cls(**d)


def normalize_coord_vjp(bounds: SceneBounds, world, t_index, s_index, spatial_res: int = 64):
    """World xyz -> [0, N-1] per axis (clamped); t and s pass through as grid coordinates.

    Returns ``(coords (N, 5), pullback g_coords -> g_world)``.
    """
    world = np.atleast_2d(np.asarray(world, dtype=np.float64))
    n = len(world)
    t_index = np.broadcast_to(np.asarray(t_index, dtype=np.float64), (n,))
    s_index = np.broadcast_to(np.asarray(s_index, dtype=np.float64), (n,))
    if np.any(t_index < 0) or np.any(t_index >= bounds.t_count):
        raise ValueError("t_index out of range")
    if np.any(s_index < 0) or np.any(s_index >= bounds.s_count):
        raise ValueError("s_index out of range")
    lo = np.asarray(bounds.min_xyz, dtype=np.float64)
    hi = np.asarray(bounds.max_xyz, dtype=np.float64)
    scale = (spatial_res - 1) / (hi - lo)
    raw = (world - lo) * scale
    inside = (raw >= 0) & (raw <= spatial_res - 1)
    xyz = np.clip(raw, 0.0, spatial_res - 1)
    coords = np.concatenate([xyz, t_index[:, None], s_index[:, None]], axis=1)

    def pullback(g):
        return g[:, :3] * scale * inside

    return coords, pullback


def normalize_coord(bounds, world, t_index, s_index, spatial_res: int = 64) -> np.ndarray:
    return normalize_coord_vjp(bounds, world, t_index, s_index, spatial_res)[0]


class DistortionField:
    """Plane features + trunk MLP + four 4-dim heads.

    Parameters are registered into a :class:`~stdf4d.diffcore.ParamStore`
    under ``planes.*``, ``mlp.*`` and ``head.*``; :meth:`bind` rebuilds a
    field view over a store (e.g. a loaded checkpoint).
    """

    def __init__(self, bounds: SceneBounds, config: FieldConfig = FieldConfig(), store=None, rng=None):
        self.bounds = bounds
        self.config = config
        rng = rng or np.random.default_rng(0)
        res = {"x": config.spatial_res, "y": config.spatial_res, "z": config.spatial_res,
               "t": bounds.t_count, "s": bounds.s_count}
        self.planes = PlaneSet.create(res, config.scales, config.channels, rng=rng)
        self.weights: dict[str, np.ndarray] = {}
        dims = [self.planes.out_dim] + [config.hidden] * config.depth
        for k in range(config.depth):
            fan_in = dims[k]
            self.weights[f"mlp.w{k}"] = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, dims[k + 1]))
            self.weights[f"mlp.b{k}"] = np.zeros(dims[k + 1])
        for head in HEADS:
            self.weights[f"head.{head}.w"] = np.zeros((dims[-1], 4))
            self.weights[f"head.{head}.b"] = np.zeros(4)
        if store is not None:
            self.register(store)

    def register(self, store) -> None:
        self.planes.register(store)
        for name in list(self.weights):
            self.weights[name] = store.add(name, self.weights[name])

    @classmethod
    def bind(cls, store, bounds: SceneBounds, config: FieldConfig) -> DistortionField:
        field = cls.__new__(cls)
        field.bounds = bounds
        field.config = config
        res = {"x": config.spatial_res, "y": config.spatial_res, "z": config.spatial_res,
               "t": bounds.t_count, "s": bounds.s_count}
        layout = PlaneSet.create(res, config.scales, config.channels, init="ones")
        field.planes = layout.bind(store)
        field.weights = {n: store.get(n) for n in store.names("mlp.") + store.names("head.")}
        return field

    def param_names(self) -> list[str]:
        return [self.planes.param_name(k) for k in self.planes.keys()] + list(self.weights)

    def _coords(self, coords):
        c = coords.copy()
        # ablations: collapse an index axis onto node 0
        if not self.config.use_t:
            c[:, 3] = 0.0
        if not self.config.use_s:
            c[:, 4] = 0.0
        return c

    def query_vjp(self, centers, t_index, s_index):
        """Deltas for N Gaussian centers at one (t, s) pair.

        Returns ``(deltas, pullback)``; ``deltas`` maps head name to an
        (N, 4) array. The pullback takes the same mapping of gradients and
        returns ``(param_grads, g_centers)``.
        """
        coords, back_norm = normalize_coord_vjp(self.bounds, centers, t_index, s_index, self.config.spatial_res)
        feats, back_feat = multiscale_feature_vjp(self.planes, self._coords(coords))
        acts = [feats]
        pre = []
        x = feats
        for k in range(self.config.depth):
            z = x @ self.weights[f"mlp.w{k}"] + self.weights[f"mlp.b{k}"]
            pre.append(z)
            x = np.maximum(z, 0.0)
            acts.append(x)
        out = {h: x @ self.weights[f"head.{h}.w"] + self.weights[f"head.{h}.b"] for h in HEADS}

        def pullback(g):
            grads = {}
            top = acts[-1]
            gx = np.zeros_like(top)
            for h in HEADS:
                gh = g.get(h)
                if gh is None:
                    continue
                grads[f"head.{h}.w"] = top.T @ gh
                grads[f"head.{h}.b"] = gh.sum(axis=0)
                gx += gh @ self.weights[f"head.{h}.w"].T
            for k in range(self.config.depth - 1, -1, -1):
                gz = gx * (pre[k] > 0)
                grads[f"mlp.w{k}"] = acts[k].T @ gz
                grads[f"mlp.b{k}"] = gz.sum(axis=0)
                gx = gz @ self.weights[f"mlp.w{k}"].T
            plane_grads, gc = back_feat(gx)
            for key, gv in plane_grads.items():
                grads[self.planes.param_name(key)] = gv
            if not self.config.use_t:
                gc[:, 3] = 0.0
            if not self.config.use_s:
                gc[:, 4] = 0.0
            return grads, back_norm(gc)

        return out, pullback


@dataclass
class Distortion:
    d_mu: np.ndarray
    d_ql: np.ndarray
    d_qr: np.ndarray
    d_s: np.ndarray

    @classmethod
    def zeros(cls, n: int = 1) -> Distortion:
        return cls(np.zeros((n, 4)), np.zeros((n, 4)), np.zeros((n, 4)), np.zeros((n, 4)))


def query(field: DistortionField, gs: GaussianSet, t_index: int, s_index: int) -> Distortion:
    out, _ = field.query_vjp(gs.mu[:, :3], t_index, s_index)
    return Distortion(out["mu"], out["ql"], out["qr"], out["s"])


def apply_distortion_vjp(gs: GaussianSet, d: Distortion):
    """Distorted copy of ``gs``; the canonical set is never modified.

    Quaternions: canonical ones are normalized, the delta added, and the
    sum normalized again. Pullback maps gradients on the distorted set to
    ``(grads on canonical fields, Distortion of gradients)``.
    """
    qln, back_ql0 = normalize_quat_vjp(gs.q_l)
    qrn, back_qr0 = normalize_quat_vjp(gs.q_r)
    ql2, back_ql1 = normalize_quat_vjp(qln + d.d_ql)
    qr2, back_qr1 = normalize_quat_vjp(qrn + d.d_qr)
    out = GaussianSet(gs.mu + d.d_mu, gs.log_scales + d.d_s, ql2, qr2, gs.opacity_logit.copy(), gs.color.copy())

    def pullback(g: dict):
        gql_sum = back_ql1(g["q_l"])
        gqr_sum = back_qr1(g["q_r"])
        canon = {
            "mu": g["mu"],
            "log_scales": g["log_scales"],
            "q_l": back_ql0(gql_sum),
            "q_r": back_qr0(gqr_sum),
            "opacity_logit": g["opacity_logit"],
            "color": g["color"],
        }
        return canon, Distortion(g["mu"], gql_sum, gqr_sum, g["log_scales"])

    return out, pullback


def apply_distortion(gs: GaussianSet, d: Distortion) -> GaussianSet:
    return apply_distortion_vjp(gs, d)[0]


def distortion_magnitude(field: DistortionField, gs: GaussianSet, t_index: int, s_index: int) -> np.ndarray:
    """Per-primitive spatial displacement ``|d_mu[:3]|`` in world units."""
    d = query(field, gs, t_index, s_index)
    return np.linalg.norm(d.d_mu[:, :3], axis=1)
