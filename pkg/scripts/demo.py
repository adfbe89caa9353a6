"""Synthesize a small scene, train briefly, evaluate, and write a distortion heatmap.

    python scripts/demo.py --out runs/demo --iters 600
"""

import argparse
from pathlib import Path

from stdf4d.cli import main as cli


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/demo")
    p.add_argument("--iters", type=int, default=600)
    args = p.parse_args()
    out = Path(args.out)
    data, run = str(out / "data"), out / "run"
    steps = [
        ["synth", "--out", data],
        ["-v", "train", "--data", data, "--out", str(run), "--iters", str(args.iters)],
        ["eval", "--checkpoint", str(run / "checkpoint.json"), "--data", data, "--out", str(out / "eval.json")],
        ["heatmap", "--checkpoint", str(run / "checkpoint.json"), "--data", data, "--t", "0", "--s", "0",
         "--out", str(out / "heatmap_t0_s0.ppm")],
        ["render", "--checkpoint", str(run / "checkpoint.json"), "--data", data, "--kind", "eval", "--t", "0",
         "--out", str(out / "eval_s0_t0.ppm")],
    ]
    for argv in steps:
        print("stdf4d", " ".join(argv))
        if cli(argv) != 0:
            raise SystemExit(1)


if __name__ == "__main__":
    main()
