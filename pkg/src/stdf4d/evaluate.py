"""Metric reports over a dataset split and distortion heatmaps."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .losses import psnr, ssim
from .splat import render, write_ppm
from .stdf import distortion_magnitude
from .synth import KINDS, Dataset
from .train import Model, _canonical_slices, align_test_pose


class MissingViewsError(KeyError):
    pass


@dataclass
class ViewScore:
    kind: str
    s: int
    t: int
    psnr: float
    ssim: float
    align_loss: float | None = None


@dataclass
class Report:
    split: str
    rows: list[ViewScore] = field(default_factory=list)

    @property
    def mean_psnr(self) -> float:
        return float(np.mean([r.psnr for r in self.rows])) if self.rows else math.nan

    @property
    def mean_ssim(self) -> float:
        return float(np.mean([r.ssim for r in self.rows])) if self.rows else math.nan

    def to_dict(self) -> dict:
        # inf is not valid JSON; keep it as a string sentinel
        def enc(x):
            return "inf" if x == math.inf else x

        return {
            "split": self.split,
            "mean_psnr": enc(self.mean_psnr),
            "mean_ssim": self.mean_ssim,
            "views": [{k: enc(v) for k, v in asdict(r).items()} for r in self.rows],
        }

    def write(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    def table(self) -> str:
        lines = [f"{'view':<18}{'PSNR':>10}{'SSIM':>10}"]
        for r in self.rows:
            lines.append(f"{r.kind + '/' + str(r.s) + '/' + str(r.t):<18}{r.psnr:>10.3f}{r.ssim:>10.4f}")
        lines.append(f"{'mean':<18}{self.mean_psnr:>10.3f}{self.mean_ssim:>10.4f}")
        return "\n".join(lines)


def score_images(pairs, split: str) -> Report:
    """Report over ``((s, t), rendered, target)`` triples."""
    rep = Report(split)
    for (s, t), img, target in pairs:
        rep.rows.append(ViewScore(split, s, t, psnr(img, target), ssim(img, target)))
    return rep


def evaluate(model: Model, dataset: Dataset, split: str = "eval", align_iters: int = 0, align_lr: float = 2e-3,
             views=None) -> Report:
    """Render every view of ``split`` from the canonical Gaussians and score it.

    With ``align_iters > 0`` each view's pose is first refined against its
    target image (scene frozen). ``views`` restricts to a list of (s, t).
    """
    if split not in KINDS:
        raise ValueError(f"split must be one of {KINDS}")
    keys = dataset.keys(split) if views is None else list(views)
    missing = [k for k in keys if (split, k[0], k[1]) not in dataset.images]
    if missing:
        raise MissingViewsError(f"missing {split} views: {missing}")
    rep = Report(split)
    cache = {}
    for s, t in keys:
        view = model.gen_view(s, t) if split == "generated" else dataset.view(split, s, t)
        target = dataset.images[(split, s, t)]
        aloss = None
        if align_iters > 0:
            res = align_test_pose(model, view, target, iters=align_iters, lr=align_lr)
            view = view.with_pose(res.q, res.t)
            aloss = res.loss
        if t not in cache:
            cache[t] = _canonical_slices(model, t)
        img = render(view, cache[t]).color
        rep.rows.append(ViewScore(split, s, t, psnr(img, target), ssim(img, target), aloss))
    return rep


class FieldMissingError(ValueError):
    pass


def heatmap_image(model: Model, dataset: Dataset, t_index: int, s_index: int) -> np.ndarray:
    """Per-primitive distortion magnitude, normalized over the frame, splatted from camera ``s_index``."""
    if model.field is None:
        raise FieldMissingError("checkpoint has no distortion field")
    gs = model.gaussians()
    mag = distortion_magnitude(model.field, gs, t_index, s_index)
    peak = float(mag.max()) if len(mag) else 0.0
    attr = mag / peak if peak > 0 else np.zeros_like(mag)
    view = model.gen_view(s_index, t_index)
    return render(view, _canonical_slices(model, t_index), attr=attr).attribute


def heatmap(model: Model, dataset: Dataset, t_index: int, s_index: int, out) -> np.ndarray:
    img = heatmap_image(model, dataset, t_index, s_index)
    write_ppm(out, img)
    return img
