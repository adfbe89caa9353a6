"""Exact (non-tiled) pinhole splatting of sliced 3D Gaussians.

Pixel ``(row i, col j)`` samples the image plane at ``(u, v) = (j, i)``.
Primitives are blended front to back after a stable depth sort (ties keep
input order). Pixels are processed in fixed-size chunks so results and
gradients do not depend on how many workers evaluate the chunks.
"""

from __future__ import annotations

import logging
import os
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .gauss4d import Sliced3D

log = logging.getLogger(__name__)

NEAR = 1e-4
BLUR = 0.3
ALPHA_MAX = 0.999
MAX_COND = 1e12
CHUNK = 256


def worker_count() -> int:
    return max(1, int(os.environ.get("STDF4D_WORKERS", "1")))


@dataclass
class CameraView:
    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    q_cam: np.ndarray
    t_cam: np.ndarray
    kind: str = "input"
    t_index: int = 0
    s_index: Optional[int] = None
    q_init: np.ndarray = None
    t_init: np.ndarray = None
    name: str = ""

    def __post_init__(self):
        self.q_cam = np.asarray(self.q_cam, dtype=np.float64)
        self.t_cam = np.asarray(self.t_cam, dtype=np.float64)
        if abs(np.linalg.norm(self.q_cam) - 1.0) > 1e-9:
            raise ValueError("camera quaternion must be unit")
        if self.kind not in ("input", "generated", "eval"):
            raise ValueError(f"unknown view kind {self.kind!r}")
        if self.kind != "generated" and self.s_index is not None:
            raise ValueError("only generated views carry a pose index")
        if self.q_init is None:
            self.q_init = self.q_cam.copy()
        if self.t_init is None:
            self.t_init = self.t_cam.copy()

    def with_pose(self, q, t) -> CameraView:
        q = np.asarray(q, dtype=np.float64)
        return CameraView(
            self.width, self.height, self.fx, self.fy, self.cx, self.cy,
            q / np.linalg.norm(q), np.asarray(t, dtype=np.float64), self.kind,
            self.t_index, self.s_index, self.q_init, self.t_init, self.name,
        )


@dataclass
class RenderTarget:
    color: np.ndarray
    alpha: np.ndarray
    attribute: Optional[np.ndarray] = None
    skipped: list = field(default_factory=list)


def quat_to_matrix_vjp(q):
    """Rotation matrix of ``q/|q|`` (w, x, y, z) plus pullback to the raw ``q``."""
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    w, x, y, z = q / n
    r = np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )

    def pullback(g):
        gw = 2 * (-z * g[0, 1] + y * g[0, 2] + z * g[1, 0] - x * g[1, 2] - y * g[2, 0] + x * g[2, 1])
        gx = 2 * (y * g[0, 1] + z * g[0, 2] + y * g[1, 0] - 2 * x * g[1, 1] - w * g[1, 2]
                  + z * g[2, 0] + w * g[2, 1] - 2 * x * g[2, 2])
        gy = 2 * (-2 * y * g[0, 0] + x * g[0, 1] + w * g[0, 2] + x * g[1, 0] + z * g[1, 2]
                  - w * g[2, 0] + z * g[2, 1] - 2 * y * g[2, 2])
        gz = 2 * (-2 * z * g[0, 0] - w * g[0, 1] + x * g[0, 2] + w * g[1, 0] - 2 * z * g[1, 1]
                  + y * g[1, 2] + x * g[2, 0] + y * g[2, 1])
        gn = np.array([gw, gx, gy, gz])
        qn = np.array([w, x, y, z])
        return (gn - qn * np.dot(qn, gn)) / n

    return r, pullback


def pose_matrices(view: CameraView):
    """World-to-camera ``(R, t)``: ``p_cam = R @ p_world + t``."""
    r, _ = quat_to_matrix_vjp(view.q_cam)
    return r, view.t_cam.copy()


@dataclass
class Projected:
    mean2: np.ndarray  # (N, 2)
    cov2: np.ndarray  # (N, 2, 2)
    depth: np.ndarray  # (N,)
    visible: np.ndarray  # (N,) bool


def _project_vjp(view: CameraView, mean3, cov3):
    rot, back_rot = quat_to_matrix_vjp(view.q_cam)
    p = mean3 @ rot.T + view.t_cam
    x, y, z = p[:, 0], p[:, 1], p[:, 2]
    visible = z > NEAR
    zs = np.where(visible, z, 1.0)
    fx, fy = view.fx, view.fy
    n = len(mean3)
    jac = np.zeros((n, 2, 3))
    jac[:, 0, 0] = fx / zs
    jac[:, 0, 2] = -fx * x / (zs * zs)
    jac[:, 1, 1] = fy / zs
    jac[:, 1, 2] = -fy * y / (zs * zs)
    tm = jac @ rot  # (N, 2, 3)
    cov2 = tm @ cov3 @ np.swapaxes(tm, 1, 2)
    cov2[:, 0, 0] += BLUR
    cov2[:, 1, 1] += BLUR
    mean2 = np.stack([fx * x / zs + view.cx, fy * y / zs + view.cy], axis=1)
    out = Projected(mean2, cov2, z, visible)

    def pullback(g_mean2, g_cov2):
        g_mean2 = np.where(visible[:, None], g_mean2, 0.0)
        g_cov2 = np.where(visible[:, None, None], g_cov2, 0.0)
        g_tm = g_cov2 @ tm @ np.swapaxes(cov3, 1, 2) + np.swapaxes(g_cov2, 1, 2) @ tm @ cov3
        g_cov3 = np.swapaxes(tm, 1, 2) @ g_cov2 @ tm
        g_jac = g_tm @ rot.T
        g_rot = np.einsum("nij,nik->jk", jac, g_tm)
        z2 = zs * zs
        z3 = z2 * zs
        gx = g_mean2[:, 0] * fx / zs - g_jac[:, 0, 2] * fx / z2
        gy = g_mean2[:, 1] * fy / zs - g_jac[:, 1, 2] * fy / z2
        gz = (
            -g_mean2[:, 0] * fx * x / z2
            - g_mean2[:, 1] * fy * y / z2
            - g_jac[:, 0, 0] * fx / z2
            - g_jac[:, 1, 1] * fy / z2
            + g_jac[:, 0, 2] * 2 * fx * x / z3
            + g_jac[:, 1, 2] * 2 * fy * y / z3
        )
        gp = np.stack([gx, gy, gz], axis=1)
        gp[~visible] = 0.0
        g_rot += gp.T @ mean3
        g_mean3 = gp @ rot
        g_t = gp.sum(axis=0)
        g_q = back_rot(g_rot)
        return g_mean3, g_cov3, g_q, g_t

    return out, pullback


def project_gaussian(view: CameraView, sl: Sliced3D) -> Projected:
    """Pinhole projection of means and EWA projection of covariances."""
    return _project_vjp(view, sl.mean3, sl.cov3)[0]


def _pixel_grid(view: CameraView):
    jj, ii = np.meshgrid(np.arange(view.width, dtype=np.float64), np.arange(view.height, dtype=np.float64))
    return jj.reshape(-1), ii.reshape(-1)


def _conic(cov2):
    a, b, c = cov2[:, 0, 0], cov2[:, 0, 1], cov2[:, 1, 1]
    det = a * c - b * b
    return np.stack([c / det, -b / det, a / det], axis=1), det


class _Chunk:
    """Forward state of one pixel chunk, kept for the backward pass."""

    __slots__ = ("sl", "sel", "dx", "dy", "gauss", "a_raw", "active", "alpha", "trans", "weights", "last")

    def __init__(self, sl, sel, mean2, conic, op, tw, px, py, cutoff):
        self.sl = sl
        self.sel = sel
        dx = px[None, :] - mean2[:, 0:1]
        dy = py[None, :] - mean2[:, 1:2]
        qf = conic[:, 0:1] * dx * dx + 2.0 * conic[:, 1:2] * dx * dy + conic[:, 2:3] * dy * dy
        gauss = np.exp(-0.5 * qf)
        if cutoff is not None:
            gauss = np.where(qf <= cutoff * cutoff, gauss, 0.0)
        a_raw = (op * tw)[:, None] * gauss
        self.active = a_raw < ALPHA_MAX
        alpha = np.where(self.active, a_raw, ALPHA_MAX)
        one_minus = 1.0 - alpha
        cp = np.cumprod(one_minus, axis=0)
        trans = np.empty_like(alpha)
        trans[0] = 1.0
        trans[1:] = cp[:-1]
        self.dx, self.dy, self.gauss, self.a_raw = dx, dy, gauss, a_raw
        self.alpha, self.trans = alpha, trans
        self.weights = alpha * trans
        self.last = cp[-1]


def render(view: CameraView, slices: Sliced3D, attr=None, cutoff: float | None = None, workers=None) -> RenderTarget:
    return render_vjp(view, slices, attr, cutoff, workers)[0]


def render_vjp(view: CameraView, slices: Sliced3D, attr=None, cutoff: float | None = None, workers=None):
    """Render and return a pullback.

    The pullback takes ``(g_color, g_alpha=None, g_attr=None)`` image
    gradients and returns a dict with ``mean3, cov3, temporal_weight,
    opacity, color, attr, q_cam, t_cam``.
    """
    h, w = view.height, view.width
    n = len(slices)
    workers = worker_count() if workers is None else workers
    has_attr = attr is not None
    if n == 0:
        tgt = RenderTarget(np.zeros((h, w, 3)), np.zeros((h, w)), np.zeros((h, w)) if has_attr else None)

        def empty_pullback(g_color=None, g_alpha=None, g_attr=None):
            return {
                "mean3": np.zeros((0, 3)), "cov3": np.zeros((0, 3, 3)), "temporal_weight": np.zeros(0),
                "opacity": np.zeros(0), "color": np.zeros((0, 3)), "attr": np.zeros(0),
                "q_cam": np.zeros(4), "t_cam": np.zeros(3),
            }

        return tgt, empty_pullback

    proj, back_proj = _project_vjp(view, slices.mean3, slices.cov3)
    conic, det = _conic(proj.cov2)
    tr = proj.cov2[:, 0, 0] + proj.cov2[:, 1, 1]
    disc = np.sqrt(np.maximum(tr * tr / 4 - det, 0.0))
    lmax, lmin = tr / 2 + disc, tr / 2 - disc
    ok = proj.visible & (lmin > 0) & (lmax < MAX_COND * np.maximum(lmin, 1e-300))
    skipped = [int(i) for i in np.flatnonzero(proj.visible & ~ok)]
    if skipped:
        log.warning("skipping %d primitives with ill-conditioned screen covariance", len(skipped))
    idx = np.flatnonzero(ok)
    order = idx[np.argsort(proj.depth[idx], kind="stable")]
    attr_arr = np.zeros(n) if attr is None else np.asarray(attr, dtype=np.float64)

    mean2 = proj.mean2[order]
    con = conic[order]
    op = slices.opacity[order]
    tw = slices.temporal_weight[order]
    cols = slices.color[order]
    at = attr_arr[order]

    px, py = _pixel_grid(view)
    npix = h * w
    bounds = [(s, min(s + CHUNK, npix)) for s in range(0, npix, CHUNK)]
    if cutoff is not None:
        # screen-space box of the cutoff ellipse; outside it alpha is exactly zero
        cov_s = proj.cov2[order]
        rx = cutoff * np.sqrt(cov_s[:, 0, 0])
        ry = cutoff * np.sqrt(cov_s[:, 1, 1])
        lo_x, hi_x = mean2[:, 0] - rx, mean2[:, 0] + rx
        lo_y, hi_y = mean2[:, 1] - ry, mean2[:, 1] + ry
    color = np.zeros((npix, 3))
    alpha = np.zeros(npix)
    attr_img = np.zeros(npix)
    chunks: list = [None] * len(bounds)

    def fwd(k):
        s, e = bounds[k]
        if cutoff is None:
            sel = np.arange(len(order))
        else:
            cx, cy = px[s:e], py[s:e]
            sel = np.flatnonzero((hi_x >= cx.min()) & (lo_x <= cx.max()) & (hi_y >= cy.min()) & (lo_y <= cy.max()))
        if len(sel) == 0:
            return
        ch = _Chunk((s, e), sel, mean2[sel], con[sel], op[sel], tw[sel], px[s:e], py[s:e], cutoff)
        chunks[k] = ch
        color[s:e] = ch.weights.T @ cols[sel]
        alpha[s:e] = 1.0 - ch.last
        if has_attr:
            attr_img[s:e] = ch.weights.T @ at[sel]

    _run(fwd, len(bounds), workers)
    tgt = RenderTarget(
        color.reshape(h, w, 3), alpha.reshape(h, w), attr_img.reshape(h, w) if has_attr else None, skipped
    )

    def pullback(g_color=None, g_alpha=None, g_attr=None):
        m = len(order)
        gc = np.zeros((npix, 3)) if g_color is None else np.asarray(g_color, dtype=np.float64).reshape(npix, 3)
        ga = None if g_alpha is None else np.asarray(g_alpha, dtype=np.float64).reshape(npix)
        gat = None if g_attr is None else np.asarray(g_attr, dtype=np.float64).reshape(npix)
        nb = len(bounds)
        part = {
            "op": np.zeros((nb, m)), "tw": np.zeros((nb, m)), "mean2": np.zeros((nb, m, 2)),
            "conic": np.zeros((nb, m, 3)), "color": np.zeros((nb, m, 3)), "attr": np.zeros((nb, m)),
        }

        def bwd(k):
            ch = chunks[k]
            if ch is None:
                return
            s, e = ch.sl
            sel = ch.sel
            cl, ck, opk, twk = cols[sel], con[sel], op[sel], tw[sel]
            gck = gc[s:e]
            v = cl @ gck.T
            if ga is not None:
                v += ga[None, s:e]
            if gat is not None:
                v += at[sel, None] * gat[None, s:e]
            contrib = v * ch.weights
            suffix = np.cumsum(contrib[::-1], axis=0)[::-1] - contrib
            d_alpha = v * ch.trans - suffix / (1.0 - ch.alpha)
            d_raw = np.where(ch.active, d_alpha, 0.0)
            dg = np.sum(d_raw * ch.gauss, axis=1)
            part["op"][k, sel] = dg * twk
            part["tw"][k, sel] = dg * opk
            d_q = -0.5 * d_raw * (opk * twk)[:, None] * ch.gauss
            dx, dy = ch.dx, ch.dy
            qx, qy = d_q * dx, d_q * dy
            part["conic"][k, sel, 0] = np.sum(qx * dx, axis=1)
            part["conic"][k, sel, 1] = np.sum(qx * dy, axis=1)
            part["conic"][k, sel, 2] = np.sum(qy * dy, axis=1)
            part["mean2"][k, sel, 0] = -2.0 * (ck[:, 0] * np.sum(qx, axis=1) + ck[:, 1] * np.sum(qy, axis=1))
            part["mean2"][k, sel, 1] = -2.0 * (ck[:, 1] * np.sum(qx, axis=1) + ck[:, 2] * np.sum(qy, axis=1))
            part["color"][k, sel] = ch.weights @ gck
            if gat is not None:
                part["attr"][k, sel] = ch.weights @ gat[s:e]

        _run(bwd, nb, workers)
        # fixed-order reduction over chunks
        red = {key: np.zeros(val.shape[1:]) for key, val in part.items()}
        for k in range(nb):
            for key in red:
                red[key] += part[key][k]

        g_mean2 = np.zeros((n, 2))
        g_cov2 = np.zeros((n, 2, 2))
        g_op = np.zeros(n)
        g_tw = np.zeros(n)
        g_col = np.zeros((n, 3))
        g_att = np.zeros(n)
        g_mean2[order] = red["mean2"]
        g_op[order] = red["op"]
        g_tw[order] = red["tw"]
        g_col[order] = red["color"]
        g_att[order] = red["attr"]
        # conic = inverse(cov2); q = d^T conic d with the off-diagonal counted twice
        gcon = np.zeros((n, 2, 2))
        gcon[order, 0, 0] = red["conic"][:, 0]
        gcon[order, 0, 1] = red["conic"][:, 1]
        gcon[order, 1, 0] = red["conic"][:, 1]
        gcon[order, 1, 1] = red["conic"][:, 2]
        cm = np.zeros((n, 2, 2))
        cm[:, 0, 0], cm[:, 0, 1], cm[:, 1, 0], cm[:, 1, 1] = conic[:, 0], conic[:, 1], conic[:, 1], conic[:, 2]
        g_cov2[order] = -(cm @ gcon @ cm)[order]
        g_mean3, g_cov3, g_q, g_t = back_proj(g_mean2, g_cov2)
        return {
            "mean3": g_mean3, "cov3": g_cov3, "temporal_weight": g_tw, "opacity": g_op,
            "color": g_col, "attr": g_att, "q_cam": g_q, "t_cam": g_t,
        }

    return tgt, pullback


def _run(fn, n, workers):
    if workers <= 1 or n <= 1:
        for k in range(n):
            fn(k)
        return
    with ThreadPoolExecutor(max_workers=workers) as ex:
        list(ex.map(fn, range(n)))


# -- image files --------------------------------------------------------------


def write_ppm(path, img: np.ndarray) -> None:
    """Binary P6, 8-bit; values clamped to [0, 1] and rounded to 0..255."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 2:
        img = np.repeat(img[:, :, None], 3, axis=2)
    h, w, _ = img.shape
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = open(path, "rb").read()
    # header is exactly four tokens followed by a single whitespace byte
    m = re.match(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s", raw)
    if m is None:
        raise ValueError("not a binary PPM")
    w, h, maxval = (int(v) for v in m.groups())
    data = np.frombuffer(raw[m.end(): m.end() + w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return data.astype(np.float64) / maxval


def write_pfm(path, img: np.ndarray) -> None:
    """Little-endian PFM ("PF" colour or "Pf" grey, scale -1.0, bottom row first)."""
    img = np.asarray(img)
    color = img.ndim == 3
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"{'PF' if color else 'Pf'}\n{w} {h}\n-1.0\n".encode("ascii"))
        f.write(np.ascontiguousarray(img[::-1], dtype="<f4").tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        chans = 3 if kind == b"PF" else 1
        data = np.frombuffer(f.read(), dtype=dtype)
    img = data.reshape(h, w, chans) if chans == 3 else data.reshape(h, w)
    return img[::-1].astype(np.float64)
