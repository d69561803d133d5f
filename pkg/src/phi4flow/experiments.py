"""Desk-scale experiment drivers shared by scripts/ and the acceptance tests.

Trained parameters are cached as checkpoints keyed by the config hash, so a
second run with the same settings skips training.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from phi4flow import io
from phi4flow.integrator import IntegratorConfig
from phi4flow.lattice import ActionParams
from phi4flow.operator_flow import ArchConfig
from phi4flow.training import LatticeSchedule, TrainConfig, TrainReport, StepRecord, train

log = logging.getLogger(__name__)

DESK_ARCH = ArchConfig(embed_hidden=(16, 16), kernel_hidden=(16, 16), transformer_hidden=(16, 16),
                       time_hidden=(16, 16))


def desk_exp1_config(seed: int = 0) -> TrainConfig:
    """1D double well, uniform over N in {4, 8, 16}."""
    return TrainConfig(
        action=ActionParams(-4.0, 1.0), D=1, L=4.0, schedule=LatticeSchedule.uniform([4, 8, 16]),
        total_steps=3000, batch_size=64, learning_rate=3e-3, integrator=IntegratorConfig(16), arch=DESK_ARCH,
        seed=seed, eval_every=100, eval_samples=128,
    )


def desk_exp3_configs(total_steps: int = 300, pre_steps: int = 40, seed: int = 0):
    """(curriculum, baseline) on the 2D L=6 lattice targeting N=16, with equal step counts."""
    stages = [(n, pre_steps) for n in (6, 8, 10, 12, 14)]
    stages.append((16, total_steps - sum(s for _, s in stages)))
    common = dict(action=ActionParams(-4.0, 6.975), D=2, L=6.0, total_steps=total_steps, batch_size=16,
                  learning_rate=3e-3, integrator=IntegratorConfig(8), arch=DESK_ARCH, seed=seed, eval_every=10,
                  eval_samples=128)
    curriculum = TrainConfig(schedule=LatticeSchedule.curriculum(stages), eval_sizes=(16,), **common)
    baseline = TrainConfig(schedule=LatticeSchedule.uniform([16]), **common)
    return curriculum, baseline


def _report_to_json(report: TrainReport) -> dict:
    return {
        "compile_seconds": {str(k): v for k, v in report.compile_seconds.items()},
        "records": [
            {"step": r.step, "N": r.N, "loss": r.loss, "wall": r.step_wall_seconds, "ess128": r.ess128,
             "ess_other": {str(k): v for k, v in r.ess_other.items()}}
            for r in report.records
        ],
    }


def _report_from_json(doc: dict) -> TrainReport:
    recs = [StepRecord(r["step"], r["N"], r["loss"], r["wall"], r["ess128"],
                       {int(k): v for k, v in r["ess_other"].items()}) for r in doc["records"]]
    return TrainReport(recs, {int(k): v for k, v in doc["compile_seconds"].items()})


def train_cached(cfg: TrainConfig, cache_dir=None):
    """Train, or load parameters and report from ``cache_dir`` if this exact config was trained before."""
    doc = io.train_config_to_doc(cfg)
    if cache_dir is None:
        return train(cfg)
    cache = Path(cache_dir)
    cache.mkdir(parents=True, exist_ok=True)
    stem = cache / io.config_hash(doc)[:16]
    ckpt, rep = stem.with_suffix(".lfckpt"), stem.with_suffix(".report.json")
    if ckpt.exists() and rep.exists():
        log.info("using cached run %s", stem)
        return io.load_checkpoint(ckpt).params, _report_from_json(json.loads(rep.read_text()))
    params, report = train(cfg)
    io.save_checkpoint(ckpt, io.Checkpoint(params, doc, cfg.total_steps, {"seed": cfg.seed}))
    rep.write_text(json.dumps(_report_to_json(report)))
    return params, report


def ess_trace(report: TrainReport, N: int):
    """(cumulative update seconds, ESS on N) at every evaluation point."""
    wall = np.cumsum(report.wall_times())
    out = []
    for i, r in enumerate(report.records):
        if r.ess128 is None:
            continue
        e = r.ess128 if r.N == N else r.ess_other.get(N)
        if e is not None:
            out.append((wall[i], e))
    return np.array(out)


def smoothed(values, width: int = 5) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    values = np.asarray(values, dtype=np.float64)
    c = np.cumsum(np.insert(values, 0, 0.0))
    idx = np.arange(1, values.size + 1)
    lo = np.maximum(idx - width, 0)
    return (c[idx] - c[lo]) / (idx - lo)


@dataclass
class CurriculumComparison:
    target_ess: float
    curriculum_seconds: float | None  # None if the target was never reached
    baseline_seconds: float
    step_time_by_N: dict

    @property
    def speedup(self) -> float | None:
        if self.curriculum_seconds is None:
            return None
        return self.baseline_seconds / self.curriculum_seconds


def compare_curriculum(cur_report: TrainReport, base_report: TrainReport, N: int = 16,
                       width: int = 5) -> CurriculumComparison:
    """Update wall time for each run to first reach the baseline's final (smoothed) ESS on N."""
    base = ess_trace(base_report, N)
    cur = ess_trace(cur_report, N)
    target = float(np.mean(base[-width:, 1]))

    def first_reach(trace):
        s = smoothed(trace[:, 1], width)
        hit = np.nonzero(s >= target)[0]
        return float(trace[hit[0], 0]) if hit.size else None

    base_t = first_reach(base)
    times = {}
    for r in cur_report.records + base_report.records:
        times.setdefault(r.N, []).append(r.step_wall_seconds)
    # the first update of every stage pays for cache warm-up, leave it out
    by_n = {n: float(np.median(ts[1:] if len(ts) > 1 else ts)) for n, ts in sorted(times.items())}
    return CurriculumComparison(target, first_reach(cur), base_t if base_t is not None else float(base[-1, 0]), by_n)
