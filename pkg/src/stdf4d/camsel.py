"""Overlap-constrained greedy camera-subset selection.

Starting from the top-left camera of the layout, repeatedly move to the
unselected neighbor (overlap >= ``o_min`` with the current camera) that
adds the most uncovered points, with a small bonus for overlap:
``score = gain * (1 + mu * overlap)``. Stops at the target coverage, when
no neighbor qualifies, or when the best gain is zero.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class VisibilityData:
    """Camera ids, 2D layout positions ``(x, y)`` and the visible point ids per camera."""

    ids: tuple[int, ...]
    layout: tuple[tuple[float, float], ...]
    visible: tuple[frozenset, ...]

    def __post_init__(self):
        if not (len(self.ids) == len(self.layout) == len(self.visible)):
            raise ValueError("ids, layout and visible must have equal length")
        if len(set(self.ids)) != len(self.ids):
            raise ValueError("camera ids must be unique")

    @classmethod
    def from_sets(cls, visible, layout=None, ids=None) -> VisibilityData:
        n = len(visible)
        ids = tuple(range(n)) if ids is None else tuple(int(i) for i in ids)
        layout = tuple((float(i), 0.0) for i in range(n)) if layout is None else tuple(
            (float(x), float(y)) for x, y in layout)
        return cls(ids, layout, tuple(frozenset(int(p) for p in v) for v in visible))

    @property
    def universe(self) -> frozenset:
        return frozenset().union(*self.visible) if self.visible else frozenset()

    def to_dict(self) -> dict:
        return {"cameras": [{"id": i, "x": xy[0], "y": xy[1], "points": sorted(v)}
                            for i, xy, v in zip(self.ids, self.layout, self.visible)]}

    @classmethod
    def from_dict(cls, d) -> VisibilityData:
        cams = d["cameras"]
        return cls.from_sets([c["points"] for c in cams], [(c["x"], c["y"]) for c in cams], [c["id"] for c in cams])

    @classmethod
    def load(cls, path) -> VisibilityData:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SelectionParams:
    o_min: float = 0.1
    tau: float = 0.95
    mu: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.o_min <= 1.0:
            raise ValueError("o_min must lie in [0, 1]")
        if not 0.0 < self.tau <= 1.0:
            raise ValueError("tau must lie in (0, 1]")
        if self.mu < 0:
            raise ValueError("mu must be non-negative")


@dataclass
class Selection:
    order: list[int]
    coverage: float
    steps: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"selected": self.order, "coverage": self.coverage, "steps": self.steps}

    def table(self) -> str:
        lines = [f"{'step':>4}  {'camera':>6}  {'score':>10}  {'gain':>5}  {'coverage':>8}"]
        for k, st in enumerate(self.steps):
            score = "-" if st["score"] is None else f"{st['score']:.4f}"
            lines.append(f"{k:>4}  {st['camera']:>6}  {score:>10}  {st['gain']:>5}  {st['coverage']:>8.4f}")
        return "\n".join(lines)


def jaccard(a: frozenset, b: frozenset) -> float:
    union = len(a | b)
    if union == 0:
        log.warning("both visible sets empty; overlap taken as 0")
        return 0.0
    return len(a & b) / union


def overlap_matrix(v: VisibilityData) -> np.ndarray:
    n = len(v.ids)
    m = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            m[i, j] = m[j, i] = jaccard(v.visible[i], v.visible[j])
    return m


def top_left(v: VisibilityData) -> int:
    """Index of the camera with the smallest (y, x); ties go to the lowest id."""
    return min(range(len(v.ids)), key=lambda k: (v.layout[k][1], v.layout[k][0], v.ids[k]))


def select_cameras(v: VisibilityData, p: SelectionParams = SelectionParams()) -> Selection:
    if not v.ids:
        return Selection([], 0.0)
    ov = overlap_matrix(v)
    universe = v.universe
    total = len(universe)
    cur = top_left(v)
    chosen = [cur]
    covered = set(v.visible[cur])

    def cov():
        return len(covered) / total if total else 1.0

    steps = [{"camera": v.ids[cur], "score": None, "gain": len(covered), "coverage": cov()}]
    while cov() < p.tau:
        best = None
        for k in range(len(v.ids)):
            if k in chosen or ov[cur, k] < p.o_min:
                continue
            gain = len(v.visible[k] - covered)
            score = float(gain * (1.0 + p.mu * ov[cur, k]))
            key = (score, -v.ids[k])
            if best is None or key > best[0]:
                best = (key, k, gain)
        if best is None or best[2] == 0:
            break
        (score, _), k, gain = best
        chosen.append(k)
        covered |= v.visible[k]
        cur = k
        steps.append({"camera": v.ids[k], "score": score, "gain": gain, "coverage": cov()})
    return Selection([v.ids[k] for k in chosen], cov(), steps)


def selection_oracle(v: VisibilityData, p: SelectionParams = SelectionParams()) -> Selection:
    """Straight transcription of the pseudocode with sorted lists; shares no code with the above."""
    ids = list(v.ids)
    if not ids:
        return Selection([], 0.0)
    sets = {ids[k]: sorted(v.visible[k]) for k in range(len(ids))}
    pos = {ids[k]: v.layout[k] for k in range(len(ids))}
    all_pts = sorted({x for s in sets.values() for x in s})

    def ov(a, b):
        inter = [x for x in sets[a] if x in sets[b]]
        uni = sorted(set(sets[a]) | set(sets[b]))
        return len(inter) / len(uni) if uni else 0.0

    start = sorted(ids, key=lambda c: (pos[c][1], pos[c][0], c))[0]
    selected = [start]
    covered = list(sets[start])

    def coverage():
        return len(covered) / len(all_pts) if all_pts else 1.0

    current = start
    while coverage() < p.tau:
        cands = [c for c in ids if c not in selected and ov(current, c) >= p.o_min]
        if not cands:
            break
        scored = []
        for c in sorted(cands):
            g = len([x for x in sets[c] if x not in covered])
            scored.append((g * (1 + p.mu * ov(current, c)), c, g))
        top = max(s[0] for s in scored)
        _, pick, g = [s for s in scored if s[0] == top][0]
        if g == 0:
            break
        selected.append(pick)
        covered = sorted(set(covered) | set(sets[pick]))
        current = pick
    return Selection(selected, coverage())


def visibility_from_cameras(cams, points) -> VisibilityData:
    """Point ids inside each camera's frustum; layout is the camera center as (x, -z), so higher cameras sort first."""
    from .splat import pose_matrices

    pts = np.asarray(points, dtype=np.float64)
    vis, layout = [], []
    for cam in cams:
        rot, t = pose_matrices(cam)
        pc = pts @ rot.T + t
        z = pc[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            u = cam.fx * pc[:, 0] / z + cam.cx
            w = cam.fy * pc[:, 1] / z + cam.cy
        ok = (z > 1e-4) & (u >= -0.5) & (u <= cam.width - 0.5) & (w >= -0.5) & (w <= cam.height - 0.5)
        vis.append(np.flatnonzero(ok))
        center = -rot.T @ t
        layout.append((float(center[0]), float(-center[2])))
    return VisibilityData.from_sets(vis, layout)
