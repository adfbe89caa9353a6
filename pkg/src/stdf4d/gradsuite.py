"""Randomized finite-difference fixtures for every differentiable operation.

Each fixture builds a small :class:`ParamStore` from a seed and a scalar
``f(store)`` that contracts the operation's outputs with fixed random
weights, then accumulates the hand-derived gradient. Covariances enter as
``L @ L.T`` so probes stay on symmetric matrices.
"""

from __future__ import annotations

import numpy as np

from . import featplanes as fp
from .diffcore import ParamStore, grad_check
from .gauss4d import GaussianSet, Sliced3D, covariance4d_vjp, normalize_quat_vjp, rotation4d_vjp, slice_vjp
from .losses import (
    LossWeights,
    dssim_loss_grad,
    gen_view_loss_grad,
    gradient_l1_grad,
    input_view_loss_grad,
    l1_loss_grad,
    pose_loss_grad,
)
from .splat import CameraView, _project_vjp, render_vjp
from .stdf import Distortion, DistortionField, FieldConfig, SceneBounds, apply_distortion_vjp
from .synth import look_at

BOUNDS = SceneBounds((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0), 4, 4)
SMALL_FIELD = FieldConfig(spatial_res=5, scales=(1, 2), channels=3, hidden=6, depth=2)


def _unit_quats(rng, n):
    q = rng.normal(size=(n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def _camera(size=16, az=0.3, el=0.2, dist=3.0):
    c = dist * np.array([np.cos(el) * np.sin(az), -np.cos(el) * np.cos(az), np.sin(el)])
    q, t = look_at(c)
    f = 0.5 * size / np.tan(np.radians(25.0))
    return CameraView(size, size, f, f, (size - 1) / 2, (size - 1) / 2, q, t)


def _sym_cov(store, name):
    chol = store.get(name)
    cov = chol @ np.swapaxes(chol, -1, -2)

    def back(g):
        store.accumulate(name, (g + np.swapaxes(g, -1, -2)) @ chol)

    return cov, back


def _chol3(rng, n, lo=0.1, hi=0.25):
    m = np.tril(rng.normal(0.0, 0.04, size=(n, 3, 3)), -1)
    m[:, [0, 1, 2], [0, 1, 2]] = rng.uniform(lo, hi, size=(n, 3))
    return m


def fx_plane_interp(seed):
    rng = np.random.default_rng(seed)
    s = ParamStore()
    s.add("values", rng.normal(size=(6, 5, 3)))
    s.add("p", np.stack([rng.uniform(0.05, 4.95, 8), rng.uniform(0.05, 3.95, 8)], axis=1))
    w = rng.normal(size=(8, 3))

    def f(st):
        out, back = fp.plane_interp_vjp(st.get("values"), st.get("p"))
        gv, gp = back(w)
        st.accumulate("values", gv)
        st.accumulate("p", gp)
        return float(np.sum(w * out))

    return f, s, {}


def fx_fuse(seed):
    rng = np.random.default_rng(seed)
    s = ParamStore()
    for k in range(9):
        s.add(f"f{k}", rng.uniform(0.5, 1.5, size=(4, 3)))
    w = rng.normal(size=(4, 3))

    def f(st):
        out, back = fp.fuse_vjp([st.get(f"f{k}") for k in range(9)])
        for k, g in enumerate(back(w)):
            st.accumulate(f"f{k}", g)
        return float(np.sum(w * out))

    return f, s, {}


def _small_field(rng, store):
    field = DistortionField(BOUNDS, SMALL_FIELD, rng=rng)
    for key in field.planes.keys():
        field.planes.planes[key].values[...] = rng.uniform(0.6, 1.4, size=field.planes.planes[key].values.shape)
    for name, arr in field.weights.items():
        if name.startswith("head."):
            arr[...] = rng.normal(0.0, 0.3, size=arr.shape)
        elif name.startswith("mlp.b"):
            arr[...] = rng.normal(0.0, 0.1, size=arr.shape)
    field.register(store)
    return field


def fx_field_query(seed):
    rng = np.random.default_rng(seed)
    s = ParamStore()
    field = _small_field(rng, s)
    s.add("centers", rng.uniform(-0.8, 0.8, size=(5, 3)))
    t_idx, s_idx = 1.3, 2.6
    ws = {h: rng.normal(size=(5, 4)) for h in ("mu", "ql", "qr", "s")}

    def f(st):
        out, back = field.query_vjp(st.get("centers"), t_idx, s_idx)
        grads, gc = back(ws)
        for name, g in grads.items():
            st.accumulate(name, g)
        st.accumulate("centers", gc)
        return float(sum(np.sum(ws[h] * out[h]) for h in ws))

    return f, s, {"max_per_entry": 6}


def _random_gaussians(rng, n, t_center=0.0):
    mu = np.concatenate([rng.uniform(-0.3, 0.3, size=(n, 3)), rng.uniform(-0.3, 0.3, size=(n, 1)) + t_center],
                        axis=1)
    return GaussianSet(
        mu,
        np.log(rng.uniform(0.12, 0.3, size=(n, 4))),
        _unit_quats(rng, n),
        _unit_quats(rng, n),
        rng.normal(0.0, 0.5, size=n),
        rng.uniform(0.1, 0.9, size=(n, 3)),
    )


def _gauss_store(gs: GaussianSet, prefix="g."):
    s = ParamStore()
    for name in GaussianSet.FIELDS:
        s.add(prefix + name, getattr(gs, name))
    return s


def _gauss_from(st, prefix="g."):
    return GaussianSet(*(st.get(prefix + f) for f in GaussianSet.FIELDS))


def fx_distortion(seed):
    rng = np.random.default_rng(seed)
    n = 4
    s = _gauss_store(_random_gaussians(rng, n))
    for k in ("d_mu", "d_ql", "d_qr", "d_s"):
        s.add(k, rng.normal(0.0, 0.2, size=(n, 4)))
    w = {f: rng.normal(size=np.shape(getattr(_gauss_from(s), f))) for f in GaussianSet.FIELDS}

    def f(st):
        d = Distortion(st.get("d_mu"), st.get("d_ql"), st.get("d_qr"), st.get("d_s"))
        out, back = apply_distortion_vjp(_gauss_from(st), d)
        canon, gd = back(w)
        for name, g in canon.items():
            st.accumulate("g." + name, g)
        for k in ("d_mu", "d_ql", "d_qr", "d_s"):
            st.accumulate(k, getattr(gd, k))
        return float(sum(np.sum(w[k] * getattr(out, k)) for k in GaussianSet.FIELDS))

    return f, s, {}


def fx_rotation(seed):
    rng = np.random.default_rng(seed)
    s = ParamStore()
    s.add("q_l", rng.normal(size=(3, 4)))
    s.add("q_r", rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4, 4))

    def f(st):
        ql, bl = normalize_quat_vjp(st.get("q_l"))
        qr, br = normalize_quat_vjp(st.get("q_r"))
        rot, back = rotation4d_vjp(ql, qr)
        gl, gr = back(w)
        st.accumulate("q_l", bl(gl))
        st.accumulate("q_r", br(gr))
        return float(np.sum(w * rot))

    return f, s, {}


def fx_covariance(seed):
    rng = np.random.default_rng(seed)
    s = ParamStore()
    s.add("log_scales", rng.normal(-1.0, 0.3, size=(3, 4)))
    s.add("q_l", rng.normal(size=(3, 4)))
    s.add("q_r", rng.normal(size=(3, 4)))
    w = rng.normal(size=(3, 4, 4))

    def f(st):
        ql, bl = normalize_quat_vjp(st.get("q_l"))
        qr, br = normalize_quat_vjp(st.get("q_r"))
        rot, back_rot = rotation4d_vjp(ql, qr)
        cov, back_cov = covariance4d_vjp(st.get("log_scales"), rot)
        gls, grot = back_cov(w)
        gl, gr = back_rot(grot)
        st.accumulate("log_scales", gls)
        st.accumulate("q_l", bl(gl))
        st.accumulate("q_r", br(gr))
        return float(np.sum(w * cov))

    return f, s, {}


def fx_slicing(seed):
    rng = np.random.default_rng(seed)
    n = 4
    s = _gauss_store(_random_gaussians(rng, n))
    s.add("t", np.array([rng.uniform(-0.2, 0.2)]))
    w = [rng.normal(size=(n, 3)), rng.normal(size=(n, 3, 3)), rng.normal(size=n), rng.normal(size=n),
         rng.normal(size=(n, 3))]

    def f(st):
        sl, back = slice_vjp(_gauss_from(st), float(st.get("t")[0]))
        g = back(*w)
        for name in GaussianSet.FIELDS:
            st.accumulate("g." + name, g[name])
        st.accumulate("t", np.array([np.sum(g["t"])]))
        outs = (sl.mean3, sl.cov3, sl.temporal_weight, sl.opacity, sl.color)
        return float(sum(np.sum(wk * o) for wk, o in zip(w, outs)))

    return f, s, {}


def fx_projection(seed):
    rng = np.random.default_rng(seed)
    n = 4
    cam = _camera()
    s = ParamStore()
    s.add("mean3", rng.uniform(-0.4, 0.4, size=(n, 3)))
    s.add("chol", _chol3(rng, n))
    s.add("q_cam", cam.q_cam + rng.normal(0.0, 0.02, size=4))
    s.add("t_cam", cam.t_cam.copy())
    w2, wc = rng.normal(size=(n, 2)), rng.normal(size=(n, 2, 2))

    def f(st):
        cov, back_cov = _sym_cov(st, "chol")
        q = st.get("q_cam")
        view = cam.with_pose(q, st.get("t_cam"))
        proj, back = _project_vjp(view, st.get("mean3"), cov)
        gm, gc, gq, gt = back(w2, wc)
        st.accumulate("mean3", gm)
        back_cov(gc)
        _, bq = normalize_quat_vjp(q)
        st.accumulate("q_cam", bq(gq))
        st.accumulate("t_cam", gt)
        return float(np.sum(w2 * proj.mean2) + np.sum(wc * proj.cov2))

    return f, s, {}


def fx_render(seed):
    rng = np.random.default_rng(seed)
    n = 4
    cam = _camera(12)
    s = ParamStore()
    s.add("mean3", rng.uniform(-0.35, 0.35, size=(n, 3)))
    s.add("chol", _chol3(rng, n, 0.15, 0.3))
    s.add("tw", rng.uniform(0.4, 1.0, size=n))
    s.add("opacity", rng.uniform(0.2, 0.8, size=n))
    s.add("color", rng.uniform(0.1, 0.9, size=(n, 3)))
    s.add("attr", rng.uniform(0.0, 1.0, size=n))
    s.add("q_cam", cam.q_cam.copy())
    s.add("t_cam", cam.t_cam.copy())
    wc, wa, wt = rng.normal(size=(12, 12, 3)), rng.normal(size=(12, 12)), rng.normal(size=(12, 12))

    def f(st):
        cov, back_cov = _sym_cov(st, "chol")
        q = st.get("q_cam")
        view = cam.with_pose(q, st.get("t_cam"))
        sl = Sliced3D(st.get("mean3"), cov, st.get("tw"), st.get("opacity"), st.get("color"))
        img, back = render_vjp(view, sl, attr=st.get("attr"))
        g = back(wc, wa, wt)
        st.accumulate("mean3", g["mean3"])
        back_cov(g["cov3"])
        st.accumulate("tw", g["temporal_weight"])
        st.accumulate("opacity", g["opacity"])
        st.accumulate("color", g["color"])
        st.accumulate("attr", g["attr"])
        _, bq = normalize_quat_vjp(q)
        st.accumulate("q_cam", bq(g["q_cam"]))
        st.accumulate("t_cam", g["t_cam"])
        return float(np.sum(wc * img.color) + np.sum(wa * img.alpha) + np.sum(wt * img.attribute))

    return f, s, {}


def _image_fixture(seed, loss_grad):
    rng = np.random.default_rng(seed)
    s = ParamStore()
    s.add("img", rng.uniform(0.0, 1.0, size=(16, 16, 3)))
    target = rng.uniform(0.0, 1.0, size=(16, 16, 3))

    def f(st):
        val, g = loss_grad(st.get("img"), target)
        st.accumulate("img", g)
        return float(val)

    return f, s, {"max_per_entry": 96}


def fx_l1(seed):
    return _image_fixture(seed, l1_loss_grad)


def fx_dssim(seed):
    return _image_fixture(seed, dssim_loss_grad)


def fx_gradient_l1(seed):
    return _image_fixture(seed, gradient_l1_grad)


def fx_input_loss(seed):
    w = LossWeights()
    return _image_fixture(seed, lambda a, b: input_view_loss_grad(a, b, w))


def fx_gen_loss(seed):
    w = LossWeights()
    return _image_fixture(seed, lambda a, b: gen_view_loss_grad(a, b, w))


def fx_pose_loss(seed):
    rng = np.random.default_rng(seed)
    s = ParamStore()
    q0 = _unit_quats(rng, 3)
    t0 = rng.normal(size=(3, 3))
    s.add("q", q0 + rng.normal(0.0, 0.05, size=(3, 4)))
    s.add("t", t0 + rng.normal(0.0, 0.05, size=(3, 3)))
    w = LossWeights()

    def f(st):
        val, grads = pose_loss_grad([(st.get("q")[k], st.get("t")[k], q0[k], t0[k]) for k in range(3)], w)
        for k, (gq, gt) in enumerate(grads):
            st.grad("q")[k] += gq
            st.grad("t")[k] += gt
        return float(val)

    return f, s, {}


def _plane_fixture(seed, loss):
    rng = np.random.default_rng(seed)
    res = {"x": 5, "y": 4, "z": 4, "t": 3, "s": 5}
    planes = fp.PlaneSet.create(res, (1, 2), 3, rng=rng)
    for key in planes.keys():
        planes.planes[key].values[...] = rng.normal(size=planes.planes[key].values.shape)
    s = ParamStore()
    planes.register(s)

    def f(st):
        val, grads = loss(planes)
        for key, g in grads.items():
            st.accumulate(planes.param_name(key), g)
        return float(val)

    return f, s, {"max_per_entry": 10}


def fx_tv(seed):
    return _plane_fixture(seed, fp.tv_loss_grad)


def fx_smooth(seed):
    return _plane_fixture(seed, lambda p: fp.smooth_loss_grad(p, 0.5))


def fx_total_loss(seed):
    """Every active parameter group through the full per-iteration loss (5 Gaussians, 16x16)."""
    from .config import TrainConfig
    from .train import Model, Phase, compute_losses

    rng = np.random.default_rng(seed)
    n = 5
    bounds = SceneBounds((-1.0,) * 3, (1.0,) * 3, 4, 3)
    gs = _random_gaussians(rng, n, t_center=1.5)
    store = ParamStore()
    for name in GaussianSet.FIELDS:
        store.add("gauss." + name, getattr(gs, name))
    gen_cams = [_camera(16, az=-0.3), _camera(16, az=0.4)]
    for c in gen_cams:
        c.q_init, c.t_init = c.q_cam.copy(), c.t_cam.copy()
    store.add("cam.q", np.array([c.q_cam + rng.normal(0.0, 0.01, 4) for c in gen_cams]))
    store.add("cam.t", np.array([c.t_cam + rng.normal(0.0, 0.01, 3) for c in gen_cams]))
    fc = FieldConfig(spatial_res=3, scales=(1, 2), channels=3, hidden=6, depth=2)
    field = DistortionField(bounds, fc, rng=rng)
    for key in field.planes.keys():
        field.planes.planes[key].values[...] = rng.uniform(0.6, 1.4, size=field.planes.planes[key].values.shape)
    # live ReLUs and non-trivial heads keep every gradient well above finite-difference noise
    for name, arr in field.weights.items():
        if name.startswith("head."):
            arr[...] = rng.normal(0.0, 0.1, size=arr.shape)
        elif name.startswith("mlp.b"):
            arr[...] = rng.uniform(0.6, 1.0, size=arr.shape)
    field.register(store)
    model = Model(store, bounds, fc, gen_cams)
    weights = LossWeights(lambda1=1.0, lambda2=1.0, lambda_s=1.0, tv_weight=1.0)
    cfg = TrainConfig(field_config=fc, cutoff_sigma=None, weights=weights)
    in_view = _camera(16, az=0.0, el=0.1)
    in_view = CameraView(16, 16, in_view.fx, in_view.fy, in_view.cx, in_view.cy, in_view.q_cam, in_view.t_cam,
                         "input", 1)
    in_target = rng.uniform(0.0, 1.0, size=(16, 16, 3))
    gen_target = rng.uniform(0.0, 1.0, size=(16, 16, 3))
    phase = Phase(warmup=False, train_field=True, train_pose=True)

    def f(st):
        comps = compute_losses(model, cfg, (in_view, in_target), (model.gen_view(1, 2), gen_target), phase)
        return float(comps["total"])

    return f, store, {"max_per_entry": 4}


SUITE = {
    "plane_interp": fx_plane_interp,
    "fuse": fx_fuse,
    "field_query": fx_field_query,
    "distortion": fx_distortion,
    "rotation": fx_rotation,
    "covariance": fx_covariance,
    "slicing": fx_slicing,
    "projection": fx_projection,
    "render": fx_render,
    "loss_l1": fx_l1,
    "loss_dssim": fx_dssim,
    "loss_gradient_l1": fx_gradient_l1,
    "loss_input": fx_input_loss,
    "loss_gen": fx_gen_loss,
    "loss_pose": fx_pose_loss,
    "loss_tv": fx_tv,
    "loss_smooth": fx_smooth,
    "total_loss": fx_total_loss,
}


def check(name: str, seed: int, h: float = 1e-5):
    f, store, kw = SUITE[name](seed)
    return grad_check(f, store, h=h, rng=np.random.default_rng([seed, 7]), **kw)


def run_suite(names=None, seeds=range(20), h: float = 1e-5) -> dict[str, float]:
    """Worst relative error per fixture over the seeds."""
    worst = {}
    for name in names or SUITE:
        worst[name] = max(check(name, s, h).max_rel_error for s in seeds)
    return worst
