"""Synthetic dynamic scenes with known, injected view-dependent distortions.

Ground truth is a set of moving 3D Gaussians (quadratic trajectories).
Input and evaluation cameras see clean renders. Generated cameras see the
same scene with every Gaussian center displaced by a warp ``D(x; t, s)``
that is smooth along the pose index ``s`` and changes abruptly from frame
to frame.

Dataset layout::

    manifest.json            file list with sha256 digests + the SynthSpec
    scene.json               cameras, ground truth, warp parameters, init cloud
    views/{kind}/{s}/{t}.pfm float images (kind: input, generated, eval)
    views/{kind}/{s}/{t}.ppm 8-bit previews
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .gauss4d import Sliced3D
from .splat import CameraView, read_pfm, render, write_pfm, write_ppm
from .stdf import SceneBounds

KINDS = ("input", "generated", "eval")


@dataclass(frozen=True)
class SynthSpec:
    n_gaussians: int = 60
    frames: int = 12
    n_input_cams: int = 3
    n_gen_cams: int = 6
    n_eval_cams: int = 6
    width: int = 64
    height: int = 64
    fov_deg: float = 50.0
    cam_distance: float = 3.0
    # input views see the scene from nearly one direction, so the held-out views
    # depend on what the generated views contribute
    input_span: float = 5.0
    gen_span: float = 60.0
    input_elev: float = 0.0
    gen_elev: float = 30.0
    eval_elev: float = 30.0
    box: float = 1.0
    motion_scale: float = 0.08
    scale_range: tuple[float, float] = (0.04, 0.08)
    amplitude_px: float = 2.0
    spatial_freq: float = 0.5
    s_phase_step: float = 0.1
    region: str = "all"
    pose_jitter_deg: float = 1.0
    pose_jitter_frac: float = 0.01
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scale_range", tuple(self.scale_range))
        if self.region not in ("all", "half"):
            raise ValueError("region must be 'all' or 'half'")
        if min(self.n_gaussians, self.frames, self.n_input_cams, self.n_gen_cams, self.width, self.height) < 1:
            raise ValueError("counts and image size must be positive")
        if self.amplitude_px < 0:
            raise ValueError("amplitude must be non-negative")


@dataclass
class Trajectories:
    """Quadratic-in-time 3D Gaussians: ``p(tau) = p0 + v tau + a tau^2``."""

    p0: np.ndarray
    vel: np.ndarray
    acc: np.ndarray
    cov3: np.ndarray
    color: np.ndarray
    opacity: np.ndarray
    frames: int

    def tau(self, t_index) -> float:
        return t_index / max(self.frames - 1, 1) - 0.5

    def positions(self, t_index) -> np.ndarray:
        tau = self.tau(t_index)
        return self.p0 + self.vel * tau + self.acc * tau * tau

    def sliced(self, t_index, offset=None) -> Sliced3D:
        p = self.positions(t_index)
        if offset is not None:
            p = p + offset
        n = len(p)
        return Sliced3D(p, self.cov3.copy(), np.ones(n), self.opacity.copy(), self.color.copy())

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("p0", "vel", "acc", "cov3", "color", "opacity")} | {
            "frames": self.frames
        }

    @classmethod
    def from_dict(cls, d) -> Trajectories:
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("p0", "vel", "acc", "cov3", "color", "opacity")),
                   frames=int(d["frames"]))


@dataclass
class Warp:
    """Injected displacement ``D(x; t, s)``; one sinusoid per world axis."""

    amplitude: float
    directions: np.ndarray  # (3, 3) wave vectors (rows), cycles per world unit
    frame_phase: np.ndarray  # (frames, 3), random per frame
    s_phase_step: float
    region: str = "all"

    def __call__(self, x: np.ndarray, t_index: int, s_index: int) -> np.ndarray:
        x = np.atleast_2d(x)
        arg = 2 * np.pi * (x @ self.directions.T) + self.frame_phase[t_index] + self.s_phase_step * s_index
        d = self.amplitude * np.sin(arg)
        if self.region == "half":
            d = d * (x[:, 0:1] > 0)
        return d

    def to_dict(self) -> dict:
        return {"amplitude": self.amplitude, "directions": self.directions.tolist(),
                "frame_phase": self.frame_phase.tolist(), "s_phase_step": self.s_phase_step,
                "region": self.region}

    @classmethod
    def from_dict(cls, d) -> Warp:
        return cls(float(d["amplitude"]), np.asarray(d["directions"]), np.asarray(d["frame_phase"]),
                   float(d["s_phase_step"]), d.get("region", "all"))


@dataclass
class Dataset:
    spec: SynthSpec
    bounds: SceneBounds
    cameras: dict[str, list[CameraView]]
    images: dict[tuple[str, int, int], np.ndarray]
    truth: Trajectories
    warp: Warp
    init_points: np.ndarray
    init_colors: np.ndarray
    true_gen_poses: list = field(default_factory=list)
    root: Path | None = None

    def view(self, kind: str, s: int, t: int) -> CameraView:
        cam = self.cameras[kind][s]
        return CameraView(
            cam.width, cam.height, cam.fx, cam.fy, cam.cx, cam.cy, cam.q_cam, cam.t_cam, kind, t,
            s if kind == "generated" else None, cam.q_init, cam.t_init, cam.name,
        )

    def keys(self, kind: str) -> list[tuple[int, int]]:
        return [(s, t) for s in range(len(self.cameras[kind])) for t in range(self.spec.frames)]


# -- cameras --------------------------------------------------------------------


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)):
    """World-to-camera (unit quaternion wxyz, translation); camera looks along +z, image y down."""
    c = np.asarray(center, dtype=np.float64)
    f = np.asarray(target, dtype=np.float64) - c
    f /= np.linalg.norm(f)
    r = np.cross(f, up)
    r /= np.linalg.norm(r)
    d = np.cross(f, r)
    rot = np.stack([r, d, f])
    x, y, z, w = Rotation.from_matrix(rot).as_quat()
    q = np.array([w, x, y, z])
    return q / np.linalg.norm(q), -rot @ c


def _sphere(az_deg, el_deg, dist):
    az, el = math.radians(az_deg), math.radians(el_deg)
    return dist * np.array([math.cos(el) * math.sin(az), -math.cos(el) * math.cos(az), math.sin(el)])


def _camera(spec: SynthSpec, az, el, kind, name) -> CameraView:
    f = 0.5 * spec.width / math.tan(math.radians(spec.fov_deg) / 2)
    q, t = look_at(_sphere(az, el, spec.cam_distance))
    return CameraView(spec.width, spec.height, f, f, (spec.width - 1) / 2, (spec.height - 1) / 2, q, t,
                      kind="eval" if kind == "eval" else kind, name=name)


def camera_rig(spec: SynthSpec) -> dict[str, list[CameraView]]:
    """A narrow input arc, a wide generated arc above it, held-out eval views between the generated ones."""
    span = spec.gen_span
    az_in = np.linspace(-spec.input_span, spec.input_span, spec.n_input_cams) if spec.n_input_cams > 1 else np.zeros(1)
    az_gen = np.linspace(-span, span, spec.n_gen_cams) if spec.n_gen_cams > 1 else np.zeros(1)
    az_eval = np.linspace(-0.8 * span, 0.8 * span, spec.n_eval_cams) if spec.n_eval_cams > 1 else np.zeros(1)
    rig = {
        "input": [_camera(spec, a, spec.input_elev, "input", f"in{k}") for k, a in enumerate(az_in)],
        "generated": [_camera(spec, a, spec.gen_elev, "generated", f"gen{k}") for k, a in enumerate(az_gen)],
        "eval": [_camera(spec, a, spec.eval_elev, "eval", f"ev{k}") for k, a in enumerate(az_eval)],
    }
    return rig


def jitter_pose(q, t, center_dist, deg, frac, extent, rng):
    """Rotate by up to ``deg`` degrees about a random axis and shift by up to ``frac*extent``."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = math.radians(deg) * rng.uniform(0.5, 1.0)
    dq = Rotation.from_rotvec(axis * ang)
    w, x, y, z = q
    r = (dq * Rotation.from_quat([x, y, z, w])).as_quat()
    q2 = np.array([r[3], r[0], r[1], r[2]])
    shift = rng.normal(size=3)
    shift *= frac * extent * rng.uniform(0.5, 1.0) / np.linalg.norm(shift)
    return q2 / np.linalg.norm(q2), np.asarray(t) + shift


# -- scene -------------------------------------------------------------------------


def random_scene(spec: SynthSpec, rng) -> Trajectories:
    n = spec.n_gaussians
    lim = 0.7 * spec.box
    p0 = rng.uniform(-lim, lim, size=(n, 3))
    vel = rng.normal(0.0, spec.motion_scale, size=(n, 3))
    acc = rng.normal(0.0, spec.motion_scale / 4, size=(n, 3))
    scales = rng.uniform(*spec.scale_range, size=(n, 3)) * spec.box
    rots = Rotation.random(n, random_state=rng.integers(2**31)).as_matrix()
    cov3 = np.einsum("nij,nj,nkj->nik", rots, scales**2, rots)
    color = rng.uniform(0.1, 0.95, size=(n, 3))
    opacity = np.full(n, 0.9)
    return Trajectories(p0, vel, acc, cov3, color, opacity, spec.frames)


def _mean_px_displacement(truth, warp, cams, frames):
    tot, cnt = 0.0, 0
    for s, cam in enumerate(cams):
        rot = Rotation.from_quat(np.r_[cam.q_cam[1:], cam.q_cam[0]]).as_matrix()
        for t in range(frames):
            p = truth.positions(t)
            for pts, store in ((p, "a"), (p + warp(p, t, s), "b")):
                pc = pts @ rot.T + cam.t_cam
                uv = np.stack([cam.fx * pc[:, 0] / pc[:, 2], cam.fy * pc[:, 1] / pc[:, 2]], axis=1)
                if store == "a":
                    uv0 = uv
            tot += float(np.sum(np.linalg.norm(uv - uv0, axis=1)))
            cnt += len(p)
    return tot / max(cnt, 1)


def make_warp(spec: SynthSpec, truth, gen_cams, rng) -> Warp:
    dirs = rng.normal(size=(3, 3))
    dirs *= spec.spatial_freq / np.linalg.norm(dirs, axis=1, keepdims=True)
    phase = rng.uniform(0, 2 * np.pi, size=(spec.frames, 3))
    warp = Warp(1.0, dirs, phase, spec.s_phase_step, spec.region)
    if spec.amplitude_px == 0:
        warp.amplitude = 0.0
        return warp
    # projection is nearly linear at this scale: calibrate with a small probe, then refine once
    warp.amplitude = 1e-3
    probe = _mean_px_displacement(truth, warp, gen_cams, spec.frames)
    warp.amplitude = 1e-3 * spec.amplitude_px / probe
    got = _mean_px_displacement(truth, warp, gen_cams, spec.frames)
    warp.amplitude *= spec.amplitude_px / got
    return warp


def build(spec: SynthSpec) -> Dataset:
    """Generate a dataset in memory (deterministic in ``spec.seed``)."""
    rng = np.random.default_rng(spec.seed)
    truth = random_scene(spec, rng)
    rig = camera_rig(spec)
    warp = make_warp(spec, truth, rig["generated"], rng)
    bounds = SceneBounds((-spec.box,) * 3, (spec.box,) * 3, spec.frames, spec.n_gen_cams)
    images = {}
    for kind in KINDS:
        for s, cam in enumerate(rig[kind]):
            for t in range(spec.frames):
                offset = None
                if kind == "generated":
                    offset = warp(truth.positions(t), t, s)
                images[(kind, s, t)] = render(cam, truth.sliced(t, offset)).color
    # coarse poses for generated cameras; the renders above used the true ones
    true_gen = [(c.q_cam.copy(), c.t_cam.copy()) for c in rig["generated"]]
    extent = 2 * spec.box
    for k, cam in enumerate(rig["generated"]):
        if spec.pose_jitter_deg > 0 or spec.pose_jitter_frac > 0:
            q, t = jitter_pose(cam.q_cam, cam.t_cam, spec.cam_distance, spec.pose_jitter_deg,
                               spec.pose_jitter_frac, extent, rng)
            rig["generated"][k] = cam.with_pose(q, t)
            rig["generated"][k].q_init = rig["generated"][k].q_cam.copy()
            rig["generated"][k].t_init = rig["generated"][k].t_cam.copy()
    # sparse "structure from motion" stand-in: noisy centers at the middle frame
    mid = truth.positions((spec.frames - 1) / 2)
    init_points = mid + rng.normal(0.0, 0.03 * spec.box, size=mid.shape)
    init_colors = np.clip(truth.color + rng.normal(0.0, 0.1, size=truth.color.shape), 0.0, 1.0)
    return Dataset(spec, bounds, rig, images, truth, warp, init_points, init_colors, true_gen)


# -- files -----------------------------------------------------------------------


def _cam_to_dict(c: CameraView) -> dict:
    return {"name": c.name, "width": c.width, "height": c.height, "fx": c.fx, "fy": c.fy, "cx": c.cx,
            "cy": c.cy, "q": c.q_cam.tolist(), "t": c.t_cam.tolist(), "q_init": c.q_init.tolist(),
            "t_init": c.t_init.tolist()}


def _cam_from_dict(d, kind) -> CameraView:
    return CameraView(d["width"], d["height"], d["fx"], d["fy"], d["cx"], d["cy"], np.asarray(d["q"]),
                      np.asarray(d["t"]), kind, 0, None, np.asarray(d["q_init"]), np.asarray(d["t_init"]), d["name"])


def sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_dataset(ds: Dataset, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    files = {}
    for (kind, s, t), img in sorted(ds.images.items()):
        d = root / "views" / kind / str(s)
        d.mkdir(parents=True, exist_ok=True)
        write_pfm(d / f"{t}.pfm", img)
        write_ppm(d / f"{t}.ppm", img)
        files[f"views/{kind}/{s}/{t}.pfm"] = None
    scene = {
        "bounds": ds.bounds.to_dict(),
        "cameras": {k: [_cam_to_dict(c) for c in v] for k, v in ds.cameras.items()},
        "true_gen_poses": [{"q": q.tolist(), "t": t.tolist()} for q, t in ds.true_gen_poses],
        "truth": ds.truth.to_dict(),
        "warp": ds.warp.to_dict(),
        "init": {"points": ds.init_points.tolist(), "colors": ds.init_colors.tolist()},
    }
    (root / "scene.json").write_text(json.dumps(scene, indent=1, sort_keys=True))
    files["scene.json"] = None
    manifest = {
        "format": "stdf4d-dataset",
        "version": 1,
        "spec": asdict(ds.spec),
        "files": {rel: sha256(root / rel) for rel in sorted(files)},
    }
    (root / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    ds.root = root
    return root


class ManifestError(ValueError):
    pass


def load_dataset(root, verify: bool = True) -> Dataset:
    root = Path(root)
    manifest = json.loads((root / "manifest.json").read_text())
    if verify:
        bad = [rel for rel, digest in manifest["files"].items()
               if not (root / rel).exists() or sha256(root / rel) != digest]
        if bad:
            raise ManifestError(f"files missing or modified since synthesis: {bad[:5]}")
    spec = SynthSpec(**manifest["spec"])
    scene = json.loads((root / "scene.json").read_text())
    cams = {k: [_cam_from_dict(d, k) for d in v] for k, v in scene["cameras"].items()}
    images = {}
    for rel in manifest["files"]:
        if rel.startswith("views/") and rel.endswith(".pfm"):
            _, kind, s, t = rel[:-4].split("/")
            images[(kind, int(s), int(t))] = read_pfm(root / rel)
    return Dataset(
        spec, SceneBounds.from_dict(scene["bounds"]), cams, images, Trajectories.from_dict(scene["truth"]),
        Warp.from_dict(scene["warp"]), np.asarray(scene["init"]["points"]), np.asarray(scene["init"]["colors"]),
        [(np.asarray(p["q"]), np.asarray(p["t"])) for p in scene["true_gen_poses"]], root,
    )


def synth(spec: SynthSpec, out) -> Dataset:
    """Build and write a dataset; returns it reloaded from disk (float32-rounded images)."""
    ds = build(spec)
    write_dataset(ds, out)
    return load_dataset(out)
