"""End-to-end ablation runs on the synthetic harness."""

from __future__ import annotations

import json
import logging
import statistics
import time
from dataclasses import dataclass, replace
from pathlib import Path

from .config import TrainConfig, desk_defaults
from .evaluate import evaluate
from .synth import SynthSpec, build
from .train import train

log = logging.getLogger(__name__)

VARIANTS = ("full", "no_field", "no_smooth", "no_pose")


def variant_config(base: TrainConfig, name: str) -> TrainConfig:
    if name == "full":
        return base
    if name == "no_field":
        return base.variant(use_field=False)
    if name == "no_smooth":
        return base.variant(weights=replace(base.weights, lambda_s=0.0))
    if name == "no_pose":
        return base.variant(pose_opt=False)
    raise ValueError(f"unknown variant {name!r}; expected one of {VARIANTS}")


@dataclass
class RunResult:
    variant: str
    seed: int
    psnr: float
    ssim: float
    seconds: float


def run_one(variant: str, seed: int, iters: int = 4000, spec: SynthSpec | None = None,
            base: TrainConfig | None = None, checkpoint=None) -> RunResult:
    """Synthesize the seed's dataset, train one variant, score the held-out views.

    With ``checkpoint`` the trained model is also written there, and the
    loss log next to it with a ``.tsv`` suffix.
    """
    spec = replace(spec or SynthSpec(), seed=seed)
    base = base or desk_defaults(iters)
    cfg = variant_config(base, variant).variant(seed=seed)
    ds = build(spec)
    t0 = time.time()
    res = train(ds, cfg)
    rep = evaluate(res.model, ds, "eval")
    if checkpoint is not None:
        res.model.save(checkpoint, cfg.schedule.total_iters, {"config": cfg.to_dict(), "spec": spec.__dict__})
        res.write_log(Path(checkpoint).with_suffix(".tsv"))
    out = RunResult(variant, seed, rep.mean_psnr, rep.mean_ssim, time.time() - t0)
    log.info("%s seed=%d psnr=%.3f ssim=%.4f (%.0fs)", variant, seed, out.psnr, out.ssim, out.seconds)
    return out


def median_scores(results: list[RunResult]) -> dict[str, dict[str, float]]:
    out = {}
    for v in sorted({r.variant for r in results}):
        rs = [r for r in results if r.variant == v]
        out[v] = {"psnr": statistics.median(r.psnr for r in rs), "ssim": statistics.median(r.ssim for r in rs),
                  "n": len(rs)}
    return out


def run_ablation(variants=VARIANTS, seeds=(0, 1, 2), iters: int = 4000, spec: SynthSpec | None = None,
                 out=None, checkpoint_dir=None) -> list[RunResult]:
    """Every variant on every seed; ``checkpoint_dir`` keeps ``{variant}_{seed}.json`` models."""
    results = []
    for seed in seeds:
        for v in variants:
            ck = None if checkpoint_dir is None else Path(checkpoint_dir) / f"{v}_{seed}.json"
            results.append(run_one(v, seed, iters, spec, checkpoint=ck))
            if out is not None:
                dump(results, out)
    return results


def dump(results, path) -> None:
    data = {"runs": [r.__dict__ for r in results], "median": median_scores(results)}
    with open(path, "w") as f:
        json.dump(data, f, indent=2)
        f.write("\n")
