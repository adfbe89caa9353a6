"""Joint optimization of canonical 4D Gaussians, distortion field and camera poses.

Real (input) views are rendered from the canonical Gaussians; generated
views from the Gaussians distorted by the field at that view's
``(t_index, s_index)``. During warm-up only the Gaussians and the
input-view loss are active; pose updates stop at ``pose_opt_end``.
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import TrainConfig
from .diffcore import LrSchedule, ParamStore, adam_step, load_checkpoint, lr_at, save_checkpoint, store_from_dict, store_to_dict, zero_grads
from .featplanes import smooth_loss_grad, tv_loss_grad
from .gauss4d import GaussianSet, densify_prune, logit, normalize_quat_vjp
from .losses import (
    gen_view_loss_grad,
    gradient_l1_grad,
    input_view_loss_grad,
    l1_loss_grad,
    pose_loss_grad,
    total_loss,
    zero_perceptual,
)
from .splat import CameraView, render_vjp
from .stdf import Distortion, DistortionField, FieldConfig, SceneBounds, apply_distortion_vjp

log = logging.getLogger(__name__)

GAUSS_FIELDS = GaussianSet.FIELDS
PERCEPTUAL = {"gradient_l1": gradient_l1_grad, "none": zero_perceptual}
LOG_COLUMNS = ("iter", "L_input", "L_gen", "L_pose", "L_TV", "L_smooth", "total", "lr_mu", "lr_planes", "lr_mlp")


class TrainingDiverged(FloatingPointError):
    pass


class Model:
    """Parameter store plus the layout needed to interpret it.

    Store entries: ``gauss.<field>`` for the canonical Gaussians,
    ``cam.q`` / ``cam.t`` (one row per generated camera) and, when a field
    is present, ``planes.*``, ``mlp.*``, ``head.*``.
    """

    def __init__(self, store: ParamStore, bounds: SceneBounds, field_config: FieldConfig | None,
                 gen_cams: list[CameraView]):
        self.store = store
        self.bounds = bounds
        self.field_config = field_config
        self.gen_cams = gen_cams
        self.field = DistortionField.bind(store, bounds, field_config) if field_config and "mlp.w0" in store else None

    @classmethod
    def initialize(cls, dataset, cfg: TrainConfig, with_field: bool | None = None) -> Model:
        rng = np.random.default_rng(cfg.seed)
        store = ParamStore()
        pts = np.asarray(dataset.init_points, dtype=np.float64)
        n = len(pts)
        frames = dataset.spec.frames
        mu = np.concatenate([pts, np.full((n, 1), (frames - 1) / 2)], axis=1)
        mu[:, :3] += rng.normal(0.0, 1e-3, size=(n, 3))
        base = np.log(0.08 * dataset.spec.box)
        log_scales = np.concatenate([np.full((n, 3), base), np.full((n, 1), np.log(float(frames)))], axis=1)
        ident = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
        store.add("gauss.mu", mu)
        store.add("gauss.log_scales", log_scales)
        store.add("gauss.q_l", ident)
        store.add("gauss.q_r", ident.copy())
        store.add("gauss.opacity_logit", np.full(n, float(logit(0.7))))
        store.add("gauss.color", dataset.init_colors)
        gen = dataset.cameras["generated"]
        store.add("cam.q", np.array([c.q_init for c in gen]))
        store.add("cam.t", np.array([c.t_init for c in gen]))
        use_field = cfg.use_field if with_field is None else with_field
        if use_field:
            DistortionField(dataset.bounds, cfg.field_config, store=store, rng=rng)
        return cls(store, dataset.bounds, cfg.field_config if use_field else None, list(gen))

    def gaussians(self) -> GaussianSet:
        return GaussianSet(*(self.store.get(f"gauss.{f}") for f in GAUSS_FIELDS))

    def gen_view(self, s: int, t: int) -> CameraView:
        cam = self.gen_cams[s]
        q = self.store.get("cam.q")[s]
        return CameraView(cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy, q / np.linalg.norm(q),
                          self.store.get("cam.t")[s].copy(), "generated", t, s, cam.q_init, cam.t_init, cam.name)

    def gen_poses(self):
        return [(self.store.get("cam.q")[s], self.store.get("cam.t")[s], c.q_init, c.t_init)
                for s, c in enumerate(self.gen_cams)]

    def header(self) -> dict:
        return {
            "bounds": self.bounds.to_dict(),
            "field": None if self.field_config is None else self.field_config.to_dict(),
            "gen_cams": [{"name": c.name, "width": c.width, "height": c.height, "fx": c.fx, "fy": c.fy,
                          "cx": c.cx, "cy": c.cy, "q_init": c.q_init.tolist(), "t_init": c.t_init.tolist()}
                         for c in self.gen_cams],
        }

    def save(self, path, step: int = 0, extra: dict | None = None) -> None:
        save_checkpoint(path, self.store, self.header() | (extra or {}), step)

    @classmethod
    def load(cls, path) -> tuple[Model, dict, int]:
        store, header, step = load_checkpoint(path)
        return cls.from_store(store, header), header, step

    @classmethod
    def from_store(cls, store, header) -> Model:
        bounds = SceneBounds.from_dict(header["bounds"])
        fc = None if header.get("field") is None else FieldConfig.from_dict(header["field"])
        cams = [CameraView(c["width"], c["height"], c["fx"], c["fy"], c["cx"], c["cy"], np.asarray(c["q_init"]),
                           np.asarray(c["t_init"]), "generated", 0, 0, np.asarray(c["q_init"]),
                           np.asarray(c["t_init"]), c["name"]) for c in header["gen_cams"]]
        return cls(store, bounds, fc, cams)

    def discard_field(self) -> Model:
        """A model over a store without any field parameters (shares Gaussian arrays)."""
        store = ParamStore()
        for name in self.store.names():
            if name.startswith(("gauss.", "cam.")):
                e = self.store.entry(name)
                store._entries[name] = e
        return Model(store, self.bounds, None, self.gen_cams)


def render_model_vjp(model: Model, view: CameraView, t_index: int, s_index: int | None = None,
                     use_field: bool = False, cutoff=None, attr=None):
    """Render ``view`` at frame ``t_index``; pullback accumulates into ``model.store``.

    ``pullback(g_color, train_field, train_pose, g_attr=None)`` also returns
    the per-Gaussian gradient of the spatial mean (for densification).
    """
    gs = model.gaussians()
    if use_field:
        out, back_query = model.field.query_vjp(gs.mu[:, :3], t_index, s_index)
        d = Distortion(out["mu"], out["ql"], out["qr"], out["s"])
        used, back_apply = apply_distortion_vjp(gs, d)
    else:
        used = gs
    from .gauss4d import slice_vjp

    sl, back_slice = slice_vjp(used, float(t_index))
    img, back_render = render_vjp(view, sl, attr=attr, cutoff=cutoff)

    def pullback(g_color, train_field=True, train_pose=False, g_attr=None):
        gr = back_render(g_color, None, g_attr)
        gg = back_slice(gr["mean3"], gr["cov3"], gr["temporal_weight"], gr["opacity"], gr["color"])
        if use_field:
            canon, gd = back_apply(gg)
            if train_field:
                pgrads, g_cent = back_query({"mu": gd.d_mu, "ql": gd.d_ql, "qr": gd.d_qr, "s": gd.d_s})
                for name, g in pgrads.items():
                    model.store.accumulate(name, g)
                canon["mu"] = canon["mu"].copy()
                canon["mu"][:, :3] += g_cent
        else:
            canon = gg
        for f in GAUSS_FIELDS:
            model.store.accumulate(f"gauss.{f}", canon[f])
        if train_pose and s_index is not None:
            q_raw = model.store.get("cam.q")[s_index]
            _, back_q = normalize_quat_vjp(q_raw)
            model.store.grad("cam.q")[s_index] += back_q(gr["q_cam"])
            model.store.grad("cam.t")[s_index] += gr["t_cam"]
        return canon["mu"][:, :3]

    return img, pullback


@dataclass
class Phase:
    warmup: bool
    train_field: bool
    train_pose: bool


def phase_at(cfg: TrainConfig, it: int, has_field: bool) -> Phase:
    warm = it < cfg.schedule.warmup_iters
    return Phase(
        warmup=warm,
        train_field=has_field and not warm,
        train_pose=cfg.pose_opt and not warm and it < cfg.schedule.pose_opt_end,
    )


def compute_losses(model: Model, cfg: TrainConfig, input_item, gen_item, phase: Phase, backward: bool = True):
    """All five loss components for one iteration; grads accumulate into the store.

    ``input_item``/``gen_item`` are ``(view, target)`` pairs (``gen_item``
    may be ``None``). Returns a dict of components plus ``"mu_grad"``
    (per-Gaussian spatial-mean gradient norms).
    """
    w = cfg.weights
    comps = {}
    view, target = input_item
    img, back = render_model_vjp(model, view, view.t_index, cutoff=cfg.cutoff_sigma)
    val, g = input_view_loss_grad(img.color, target, w)
    comps["input"] = val
    mu_grad = np.zeros((len(model.gaussians().mu), 3))
    if backward:
        mu_grad += back(g)
    comps["gen"] = 0.0
    comps["pose"] = 0.0
    if gen_item is not None and not phase.warmup:
        gview, gtarget = gen_item
        use_field = model.field is not None
        img, back = render_model_vjp(model, gview, gview.t_index, gview.s_index, use_field=use_field,
                                     cutoff=cfg.cutoff_sigma)
        val, g = gen_view_loss_grad(img.color, gtarget, w, PERCEPTUAL[cfg.perceptual])
        comps["gen"] = val
        if backward:
            mu_grad += back(g, train_field=phase.train_field, train_pose=phase.train_pose)
        if phase.train_pose:
            pval, pgrads = pose_loss_grad(model.gen_poses(), w)
            comps["pose"] = pval
            if backward:
                for s, (gq, gt) in enumerate(pgrads):
                    model.store.grad("cam.q")[s] += gq
                    model.store.grad("cam.t")[s] += gt
    comps["tv"] = 0.0
    comps["smooth"] = 0.0
    if model.field is not None:
        tv, tv_grads = tv_loss_grad(model.field.planes)
        comps["tv"] = w.tv_weight * tv
        if not phase.warmup:
            sm, sm_grads = smooth_loss_grad(model.field.planes, w.lambda_s)
            comps["smooth"] = sm
        if backward and phase.train_field:
            for key, gv in tv_grads.items():
                model.store.accumulate(model.field.planes.param_name(key), w.tv_weight * gv)
            for key, gv in sm_grads.items():
                model.store.accumulate(model.field.planes.param_name(key), gv)
    comps["total"] = total_loss(comps)
    comps["mu_grad"] = np.linalg.norm(mu_grad, axis=1)
    return comps


class EpochSampler:
    """Uniform sampling without replacement; reshuffles after each pass."""

    def __init__(self, items, rng):
        self.items = list(items)
        self.rng = rng
        self.order: list[int] = []

    def __call__(self):
        if not self.order:
            self.order = list(self.rng.permutation(len(self.items)))
        return self.items[self.order.pop()]


def learning_rates(model: Model, cfg: TrainConfig, it: int, phase: Phase) -> dict[str, float]:
    lrs = cfg.lrs
    total = cfg.schedule.total_iters
    ext = model.bounds.extent
    rates = {
        "gauss.mu": lr_at(LrSchedule(lrs.mu * ext, lrs.mu_final * ext, total), it),
        "gauss.log_scales": lrs.log_scales,
        "gauss.q_l": lrs.quat,
        "gauss.q_r": lrs.quat,
        "gauss.opacity_logit": lrs.opacity,
        "gauss.color": lrs.color,
    }
    if phase.train_pose:
        rates["cam.q"] = lrs.cam_q
        rates["cam.t"] = lrs.cam_t * ext
    if phase.train_field:
        plane_lr = lr_at(LrSchedule(lrs.planes, lrs.planes_final, total), it)
        mlp_lr = lr_at(LrSchedule(lrs.mlp, lrs.mlp_final, total), it)
        for name in model.field.param_names():
            rates[name] = plane_lr if name.startswith("planes.") else mlp_lr
    return rates


def _post_step(model: Model) -> None:
    for name in ("gauss.q_l", "gauss.q_r", "cam.q"):
        q = model.store.get(name)
        q /= np.linalg.norm(q, axis=1, keepdims=True)
    c = model.store.get("gauss.color")
    np.clip(c, 0.0, 1.0, out=c)


def _densify(model: Model, cfg: TrainConfig, stats, counts, n_initial, rng) -> None:
    mean_grad = np.where(counts > 0, stats / np.maximum(counts, 1), 0.0)
    opts = cfg.densify_options(n_initial)
    new, src, is_clone = densify_prune(model.gaussians(), mean_grad, opts, rng)
    for f in GAUSS_FIELDS:
        name = f"gauss.{f}"
        e = model.store.entry(name)
        m = e.m[src].copy()
        v = e.v[src].copy()
        m[is_clone] = 0.0
        v[is_clone] = 0.0
        model.store.replace(name, getattr(new, f), m, v)


@dataclass
class TrainResult:
    model: Model
    log_lines: list[str] = field(default_factory=list)
    final: dict = field(default_factory=dict)

    def write_log(self, path) -> None:
        Path(path).write_text("\n".join(["\t".join(LOG_COLUMNS)] + self.log_lines) + "\n")


def train(dataset, cfg: TrainConfig, model: Model | None = None, progress=None) -> TrainResult:
    """Run ``cfg.schedule.total_iters`` iterations; deterministic in ``cfg.seed``."""
    model = model or Model.initialize(dataset, cfg)
    rng = np.random.default_rng(cfg.seed + 1)
    input_keys = dataset.keys("input")
    gen_keys = dataset.keys("generated")
    pick_input = EpochSampler(input_keys, np.random.default_rng([cfg.seed, 11]))
    pick_gen = EpochSampler(gen_keys, np.random.default_rng([cfg.seed, 12])) if gen_keys else None
    n_initial = len(model.gaussians().mu)
    stats = np.zeros(n_initial)
    counts = np.zeros(n_initial)
    lines = []
    sch = cfg.schedule
    for it in range(sch.total_iters):
        phase = phase_at(cfg, it, model.field is not None)
        s, t = pick_input()
        item = (dataset.view("input", s, t), dataset.images[("input", s, t)])
        gitem = None
        if pick_gen is not None:
            gs_, gt_ = pick_gen()
            gitem = (model.gen_view(gs_, gt_), dataset.images[("generated", gs_, gt_)])
        zero_grads(model.store)
        comps = compute_losses(model, cfg, item, gitem, phase)
        if not math.isfinite(comps["total"]):
            parts = ", ".join(f"{k}={comps[k]!r}" for k in ("input", "gen", "pose", "tv", "smooth"))
            raise TrainingDiverged(f"non-finite loss at iteration {it}: {parts}")
        rates = learning_rates(model, cfg, it, phase)
        adam_step(model.store, rates, cfg.adam.beta1, cfg.adam.beta2, cfg.adam.eps)
        _post_step(model)
        lines.append("\t".join(
            [str(it)] + [repr(float(comps[k])) for k in ("input", "gen", "pose", "tv", "smooth", "total")]
            + [repr(rates["gauss.mu"]), repr(rates.get("planes.xy.1", 0.0)), repr(rates.get("mlp.w0", 0.0))]
        ))
        if cfg.densify and it >= sch.warmup_iters and it < sch.densify_end:
            vis = comps["mu_grad"] > 0
            stats += comps["mu_grad"]
            counts += vis
            if (it + 1) % sch.densify_interval == 0:
                _densify(model, cfg, stats, counts, n_initial, rng)
                n = len(model.gaussians().mu)
                stats = np.zeros(n)
                counts = np.zeros(n)
        if progress is not None:
            progress(it, comps)
    return TrainResult(model, lines, {k: v for k, v in comps.items() if k != "mu_grad"})


# -- test-view pose alignment -----------------------------------------------------


@dataclass
class AlignResult:
    q: np.ndarray
    t: np.ndarray
    loss: float
    initial_loss: float
    history: list[float]
    diverged: bool = False


def align_test_pose(model: Model, view: CameraView, target: np.ndarray, iters: int = 500, lr: float = 2e-3,
                    lr_t: float | None = None, cutoff=None, patience: int = 10) -> AlignResult:
    """Refine one view's extrinsics by Adam on the L1 photometric loss; scene frozen.

    Returns the best pose seen. Stops early if the loss rises on
    ``patience`` consecutive evaluations.
    """
    lr_t = lr * model.bounds.extent if lr_t is None else lr_t
    store = ParamStore()
    store.add("q", view.q_cam)
    store.add("t", view.t_cam)
    sl = _canonical_slices(model, view.t_index)
    history = []
    best = (math.inf, view.q_cam.copy(), view.t_cam.copy())
    rising = 0
    diverged = False
    for it in range(iters + 1):
        q = store.get("q")
        v = view.with_pose(q, store.get("t"))
        img, back = render_vjp(v, sl, cutoff=cutoff)
        loss, g = l1_loss_grad(img.color, target)
        history.append(loss)
        if loss < best[0]:
            best = (loss, v.q_cam.copy(), v.t_cam.copy())
        if it > 0 and loss > history[-2]:
            rising += 1
            if rising >= patience:
                log.warning("pose alignment diverging after %d steps; returning best pose", it)
                diverged = True
                break
        else:
            rising = 0
        if it == iters:
            break
        gr = back(g)
        _, back_q = normalize_quat_vjp(q)
        zero_grads(store)
        store.grad("q")[...] = back_q(gr["q_cam"])
        store.grad("t")[...] = gr["t_cam"]
        adam_step(store, {"q": lr, "t": lr_t})
        q /= np.linalg.norm(q)
    if iters == 0:
        return AlignResult(view.q_cam.copy(), view.t_cam.copy(), history[0], history[0], history)
    return AlignResult(best[1], best[2], best[0], history[0], history, diverged)


def _canonical_slices(model: Model, t_index: int):
    from .gauss4d import slice_vjp

    return slice_vjp(model.gaussians(), float(t_index))[0]


def render_canonical(model: Model, view: CameraView, t_index: int | None = None, attr=None, cutoff=None):
    t = view.t_index if t_index is None else t_index
    return render_vjp(view, _canonical_slices(model, t), attr=attr, cutoff=cutoff)[0]


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
