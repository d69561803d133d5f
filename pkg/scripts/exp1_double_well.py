"""1D double well: train, evaluate ESS and observables across sizes, compare to Metropolis.

    python scripts/exp1_double_well.py --config configs/exp1_desk.yaml --out runs/exp1
"""

import argparse
from pathlib import Path

from phi4flow.cli import main


def run(*args):
    code = main([str(a) for a in args])
    if code:
        raise SystemExit(code)


if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("--config", default="configs/exp1_desk.yaml")
    p.add_argument("--out", default="runs/exp1")
    p.add_argument("--sizes", type=int, nargs="+", default=[4, 8, 16, 20, 32, 64, 128, 256, 512])
    p.add_argument("--oracle-sizes", type=int, nargs="+", default=[8, 16])
    p.add_argument("--n-samples", type=int, default=16384)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    out = Path(args.out)

    run("train", args.config, "--out", out / "train", "--seed", args.seed)
    ckpt = out / "train" / "last.lfckpt"
    run("evaluate", "--ckpt", ckpt, "--sizes", *args.sizes, "--n-samples", args.n_samples, "--out", out / "flow")
    for N in args.oracle_sizes:
        run("oracle", args.config, "--N", N, "--n-samples", 100000, "--out", out / f"mcmc_{N}.lfsamp")
    run("evaluate", "--config", args.config, "--no-ess", "--samples",
        *[out / f"mcmc_{N}.lfsamp" for N in args.oracle_sizes], "--out", out / "mcmc")
    run("sample", "--ckpt", ckpt, "--N", 16, "--n-samples", args.n_samples, "--out", out / "flow_16.lfsamp")
    run("hist", out / "flow_16.lfsamp", args.config, "--out", out / "hist_16")
    run("kernels", "--ckpt", ckpt, "--N", 128, "--out", out / "kernels.csv")
    print(f"CSVs written under {out}")
