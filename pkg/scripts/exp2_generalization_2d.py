"""2D run: train over many sizes, then evaluate ESS on lattices up to 64x64.

    python scripts/exp2_generalization_2d.py --config configs/exp2_full.yaml --out runs/exp2
"""

import argparse
from pathlib import Path

from phi4flow.cli import main

if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("--config", default="configs/exp2_full.yaml")
    p.add_argument("--out", default="runs/exp2")
    p.add_argument("--sizes", type=int, nargs="+", default=[6, 8, 12, 16, 24, 32, 40, 48, 64])
    p.add_argument("--n-samples", type=int, default=16384)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    out = Path(args.out)
    for argv in (
        ["train", args.config, "--out", out / "train", "--seed", args.seed],
        ["evaluate", "--ckpt", out / "train" / "last.lfckpt", "--sizes", *args.sizes, "--n-samples",
         args.n_samples, "--out", out / "flow"],
        ["kernels", "--ckpt", out / "train" / "last.lfckpt", "--N", 64, "--out", out / "kernels.csv"],
    ):
        if main([str(a) for a in argv]):
            raise SystemExit(1)
