"""With no injected distortion the field should neither help nor hurt.

Trains the full and field-free variants with amplitude 0 and reports the
PSNR difference per seed (expected |diff| < 0.3 dB).
"""

import argparse
import logging
import statistics

from stdf4d.experiments import run_one
from stdf4d.synth import SynthSpec


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--iters", type=int, default=4000)
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    logging.getLogger("stdf4d.gauss4d").setLevel(logging.ERROR)

    spec = SynthSpec(amplitude_px=0.0)
    diffs = []
    for seed in args.seeds:
        full = run_one("full", seed, args.iters, spec)
        bare = run_one("no_field", seed, args.iters, spec)
        diffs.append(full.psnr - bare.psnr)
        print(f"seed {seed}: full {full.psnr:.3f} dB, no_field {bare.psnr:.3f} dB, diff {diffs[-1]:+.3f}")
    print(f"mean diff {statistics.mean(diffs):+.3f} dB")


if __name__ == "__main__":
    main()
