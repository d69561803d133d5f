"""Curriculum pretraining on growing lattices vs training on the target size only.

Trains both configs, then prints the update wall time each needs to reach the
baseline's final ESS on the target size, and the per-step time by lattice size.

    python scripts/exp3_curriculum.py                  # desk scale (D=2, L=6, target 16x16)
    python scripts/exp3_curriculum.py --scale full    # L=12, target 64x64
"""

import argparse
import logging
from pathlib import Path

from phi4flow import io
from phi4flow.experiments import compare_curriculum, train_cached

CONFIGS = {
    "desk": ("configs/exp3_curriculum_desk.yaml", "configs/exp3_baseline_desk.yaml"),
    "full": ("configs/exp3_curriculum_full.yaml", "configs/exp3_baseline_full.yaml"),
}

if __name__ == "__main__":
    p = argparse.ArgumentParser()
    p.add_argument("--scale", choices=sorted(CONFIGS), default="desk")
    p.add_argument("--out", default="runs/exp3")
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    logging.basicConfig(level=logging.INFO, format="%(asctime)s %(message)s")
    out = Path(args.out)
    cur_cfg, base_cfg = (io.train_config_from_doc(io.load_config(f), seed=args.seed) for f in CONFIGS[args.scale])
    target = base_cfg.schedule.sizes[-1]
    _, cur = train_cached(cur_cfg, out)
    _, base = train_cached(base_cfg, out)
    cmp = compare_curriculum(cur, base, target)
    prov = {"config_sha256": io.config_hash(io.train_config_to_doc(cur_cfg)), "seed": args.seed}
    rows = [(name, r.step, r.N, r.loss, r.step_wall_seconds, r.ess128 if r.N == target else r.ess_other.get(target))
            for name, rep in (("curriculum", cur), ("baseline", base)) for r in rep.records]
    io.write_csv(out / "exp3_report.csv", ["run", "step", "N", "loss", "step_wall_seconds", "ess_target"], rows, prov)
    io.write_csv(out / "exp3_step_time.csv", ["N", "median_step_seconds"], cmp.step_time_by_N.items(), prov)
    print(f"target ESS {cmp.target_ess:.3f}")
    print(f"curriculum: {cmp.curriculum_seconds} s, baseline: {cmp.baseline_seconds:.1f} s, speed-up {cmp.speedup}")
