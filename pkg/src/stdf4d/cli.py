"""Command-line entry points: ``stdf4d <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path


from . import camsel
from .config import TrainConfig, desk_defaults, reference_defaults
from .diffcore import NonFiniteError


def _load_config(args) -> TrainConfig:
    if args.config:
        cfg = TrainConfig.load(args.config)
    elif args.iters is not None:
        cfg = desk_defaults(args.iters)
    else:
        cfg = reference_defaults()
    if args.seed is not None:
        cfg = cfg.variant(seed=args.seed)
    return cfg


def cmd_synth(args) -> int:
    from .synth import SynthSpec, synth

    spec = SynthSpec()
    if args.spec:
        spec = SynthSpec(**json.loads(Path(args.spec).read_text()))
    overrides = {k: getattr(args, k) for k in ("seed", "amplitude_px", "region") if getattr(args, k) is not None}
    spec = replace(spec, **overrides)
    synth(spec, args.out)
    print(f"wrote dataset to {args.out}")
    return 0


def cmd_select(args) -> int:
    vis = camsel.VisibilityData.load(args.visibility)
    params = camsel.SelectionParams(args.o_min, args.tau, args.mu)
    sel = camsel.select_cameras(vis, params)
    text = json.dumps(sel.to_dict(), indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    print(sel.table())
    print(f"selected {sel.order} coverage {sel.coverage:.4f}")
    return 0


def cmd_train(args) -> int:
    from .synth import load_dataset
    from .train import TrainingDiverged, train

    cfg = _load_config(args)
    if args.no_field:
        cfg = cfg.variant(use_field=False)
    ds = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.json")

    def progress(it, comps):
        if args.verbose and it % 100 == 0:
            print(f"{it:>6} total={comps['total']:.5f}", file=sys.stderr)

    try:
        res = train(ds, cfg, progress=progress)
    except (TrainingDiverged, NonFiniteError) as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 2
    res.model.save(out / "checkpoint.json", cfg.schedule.total_iters, {"config": cfg.to_dict()})
    res.write_log(out / "loss.tsv")
    print(f"wrote {out / 'checkpoint.json'} and {out / 'loss.tsv'}")
    return 0


def cmd_render(args) -> int:
    from .splat import write_pfm, write_ppm
    from .synth import load_dataset
    from .train import Model, render_canonical

    model, _, _ = Model.load(args.checkpoint)
    ds = load_dataset(args.data)
    view = model.gen_view(args.s, args.t) if args.kind == "generated" else ds.view(args.kind, args.s, args.t)
    img = render_canonical(model, view, args.t).color
    if args.out.endswith(".pfm"):
        write_pfm(args.out, img)
    else:
        write_ppm(args.out, img)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    from .evaluate import evaluate
    from .synth import ManifestError, load_dataset
    from .train import Model

    try:
        ds = load_dataset(args.data)
    except ManifestError as exc:
        print(f"refusing dataset: {exc}", file=sys.stderr)
        return 2
    model, _, _ = Model.load(args.checkpoint)
    rep = evaluate(model, ds, args.split, align_iters=args.align_iters, align_lr=args.align_lr)
    if args.out:
        rep.write(args.out)
    print(rep.table())
    return 0


def cmd_heatmap(args) -> int:
    from .evaluate import FieldMissingError, heatmap
    from .synth import load_dataset
    from .train import Model

    model, _, _ = Model.load(args.checkpoint)
    ds = load_dataset(args.data)
    try:
        heatmap(model, ds, args.t, args.s, args.out)
    except FieldMissingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradsuite import SUITE, run_suite

    names = args.ops.split(",") if args.ops else list(SUITE)
    worst = run_suite(names, seeds=range(args.seeds))
    failed = False
    for name in names:
        ok = worst[name] < args.tol
        failed |= not ok
        print(f"{name:<22} max rel err {worst[name]:.3e}  {'ok' if ok else 'FAIL'}")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="stdf4d", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset")
    s.add_argument("--out", required=True)
    s.add_argument("--spec", help="JSON file of SynthSpec fields")
    s.add_argument("--seed", type=int)
    s.add_argument("--amplitude-px", dest="amplitude_px", type=float)
    s.add_argument("--region", choices=("all", "half"))
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("select-cams", help="greedy camera subset selection")
    s.add_argument("visibility", help="visibility JSON")
    s.add_argument("--o-min", dest="o_min", type=float, default=0.1)
    s.add_argument("--tau", type=float, default=0.95)
    s.add_argument("--mu", type=float, default=0.05)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_select)

    s = sub.add_parser("train", help="train on a dataset directory")
    s.add_argument("--data", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--config", help="TrainConfig JSON (default: reference constants)")
    s.add_argument("--iters", type=int, help="desk-scale run: scale the schedule to this many iterations")
    s.add_argument("--seed", type=int)
    s.add_argument("--no-field", action="store_true")
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("render", help="render one view from a checkpoint")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--kind", default="eval", choices=("input", "generated", "eval"))
    s.add_argument("--s", type=int, default=0)
    s.add_argument("--t", type=int, default=0)
    s.add_argument("--out", required=True, help=".ppm or .pfm")
    s.set_defaults(fn=cmd_render)

    s = sub.add_parser("eval", help="PSNR/SSIM report over a split")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--split", default="eval", choices=("input", "generated", "eval"))
    s.add_argument("--align-iters", dest="align_iters", type=int, default=0)
    s.add_argument("--align-lr", dest="align_lr", type=float, default=2e-3)
    s.add_argument("--out", help="JSON report path")
    s.set_defaults(fn=cmd_eval)

    s = sub.add_parser("heatmap", help="distortion magnitude heatmap (PPM)")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--t", type=int, default=0)
    s.add_argument("--s", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_heatmap)

    s = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    s.add_argument("--ops", help="comma-separated subset")
    s.add_argument("--seeds", type=int, default=20)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(fn=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
