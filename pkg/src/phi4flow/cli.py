"""Command-line drivers: train, sample, oracle, evaluate, kernels, hist.

Set ``PHI4FLOW_THREADS`` to cap the number of compute threads.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

log = logging.getLogger("phi4flow")


def _apply_thread_env() -> None:
    n = os.environ.get("PHI4FLOW_THREADS")
    if n:
        os.environ["XLA_FLAGS"] = (
            os.environ.get("XLA_FLAGS", "")
            + f" --xla_cpu_multi_thread_eigen=false intra_op_parallelism_threads={int(n)}"
        )
        os.environ.setdefault("NUMBA_NUM_THREADS", str(int(n)))
        os.environ.setdefault("OMP_NUM_THREADS", str(int(n)))


def _lock(out_dir: Path):
    from filelock import FileLock, Timeout

    out_dir.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out_dir / ".phi4flow.lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise SystemExit(f"error: another process is writing to {out_dir}")
    return lock


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_train(args) -> int:
    from phi4flow import io
    from phi4flow.training import TrainingDiverged, train

    try:
        doc = io.load_config(args.config)
        cfg = io.train_config_from_doc(doc, seed=args.seed)
    except io.ConfigError as exc:
        print(f"error: {args.config}: {exc}", file=sys.stderr)
        return 2
    out = Path(args.out)
    lock = _lock(out)
    try:
        resolved = io.train_config_to_doc(cfg)
        (out / "resolved_config.json").write_text(json.dumps(resolved, indent=2, sort_keys=True))
        prov = {"config_sha256": io.config_hash(resolved), "seed": cfg.seed, "checkpoint_sha256": None}

        def on_checkpoint(params, step):
            ck = io.Checkpoint(params, resolved, step, {"seed": cfg.seed, "step": step})
            digest = io.save_checkpoint(out / f"ckpt_{step:07d}.lfckpt", ck)
            io.save_checkpoint(out / "last.lfckpt", ck)
            prov["checkpoint_sha256"] = digest

        rows = []

        def on_record(rec):
            rows.append((rec.step, rec.N, rec.loss, rec.step_wall_seconds, rec.ess128))

        try:
            _, report = train(cfg, on_checkpoint=on_checkpoint, on_record=on_record)
        except TrainingDiverged as exc:
            print(f"error: {exc}; last good parameters saved to {out / 'last.lfckpt'}", file=sys.stderr)
            io.write_csv(out / "train_report.csv", ["step", "N", "loss", "step_wall_seconds", "ess128"], rows, prov)
            return 3
        io.write_csv(out / "train_report.csv", ["step", "N", "loss", "step_wall_seconds", "ess128"], rows, prov)
        if cfg.eval_sizes:
            extra = [(r.step, M, e) for r in report.records for M, e in r.ess_other.items()]
            io.write_csv(out / "ess_all_sizes.csv", ["step", "N", "ess128"], extra, prov)
        io.write_csv(out / "compile_seconds.csv", ["N", "seconds"], sorted(report.compile_seconds.items()), prov)
    finally:
        lock.release()
    return 0


def _checkpoint_config(path):
    from phi4flow import io

    ck = io.load_checkpoint(path)
    return ck, io.train_config_from_doc(ck.config), io.file_sha256(path)


def cmd_sample(args) -> int:
    from phi4flow import io
    from phi4flow.integrator import IntegratorConfig
    from phi4flow.sampling import sample_model

    ck, cfg, _ = _checkpoint_config(args.ckpt)
    lattice = cfg.lattice(args.N)
    integ = IntegratorConfig(args.num_steps) if args.num_steps else cfg.integrator
    batch = sample_model(ck.params, lattice, args.n_samples, args.seed, integ, cfg.m0_squared)
    io.save_samples(args.out, batch)
    return 0


def cmd_oracle(args) -> int:
    from phi4flow import io
    from phi4flow.lattice import ActionParams, LatticeSpec
    from phi4flow.mcmc import McmcConfig, metropolis_sample

    try:
        doc = io.load_config(args.config)
    except io.ConfigError as exc:
        print(f"error: {args.config}: {exc}", file=sys.stderr)
        return 2
    mc = dict(doc.get("mcmc", {}))
    if args.seed is not None:
        mc["seed"] = args.seed
    lattice = LatticeSpec(doc["lattice"]["D"], args.N, doc["lattice"]["L"])
    action = ActionParams(doc["action"]["m2"], doc["action"]["g"])
    res = metropolis_sample(lattice, action, McmcConfig(n_records=args.n_samples, **mc))
    io.save_samples(args.out, res.batch)
    print(f"acceptance={res.acceptance:.4f} flip_acceptance={res.flip_acceptance:.4f} width={res.proposal_width:.4g}")
    return 0


def cmd_evaluate(args) -> int:
    from phi4flow import io
    from phi4flow.lattice import ActionParams
    from phi4flow.observables import observable_report
    from phi4flow.sampling import log_weights, sample_model

    cfg, ck, ck_hash, action = None, None, None, None
    if args.ckpt:
        ck, cfg, ck_hash = _checkpoint_config(args.ckpt)
        action = cfg.action
    if args.config:
        doc = io.load_config(args.config)
        action = ActionParams(doc["action"]["m2"], doc["action"]["g"])
    if action is None:
        print("error: need --ckpt or --config for the action parameters", file=sys.stderr)
        return 2
    trained = set(cfg.schedule.trained_sizes()) if cfg is not None else None

    batches = []
    for path in args.samples or []:
        batches.append(io.load_samples(path))
    if args.sizes:
        if ck is None:
            print("error: --sizes needs --ckpt", file=sys.stderr)
            return 2
        for N in args.sizes:
            batches.append(sample_model(ck.params, cfg.lattice(N), args.n_samples, args.seed, cfg.integrator,
                                        cfg.m0_squared))
    rows, g_rows = [], []
    for b in batches:
        if b.logq is None and not args.no_ess:
            print(f"error: samples on N={b.lattice.N} carry no log q; ESS needs them (use --no-ess)", file=sys.stderr)
            return 2
        lw = None if args.no_ess else log_weights(b, action)
        rep = observable_report(b, lw)
        flag = None if trained is None else b.lattice.N in trained
        rows.append((b.lattice.N, None if args.no_ess else rep.ess, rep.mean_M, rep.stderr_M, rep.mean_absM,
                     rep.stderr_absM, rep.raw["M"][0], rep.raw["absM"][0], flag, rep.n_samples))
        g_rows += [(b.lattice.N, r, G, err, count) for r, G, err, count in rep.G]
    prov = {"checkpoint_sha256": ck_hash, "config_sha256": io.config_hash(ck.config) if ck else None,
            "seed": args.seed}
    prefix = Path(args.out)
    prefix.parent.mkdir(parents=True, exist_ok=True)
    io.write_csv(f"{prefix}_observables.csv",
                 ["N", "ess", "M_mean", "M_stderr", "absM_mean", "absM_stderr", "M_raw", "absM_raw", "trained",
                  "n_samples"], rows, prov)
    io.write_csv(f"{prefix}_correlation.csv", ["N", "r", "G", "G_stderr", "count"], g_rows, prov)
    return 0


def cmd_kernels(args) -> int:
    import numpy as np

    from phi4flow import io
    from phi4flow.observables import distance_bins
    from phi4flow.operator_flow import kernel_eval

    ck, cfg, ck_hash = _checkpoint_config(args.ckpt)
    lattice = cfg.lattice(args.N)
    K = np.asarray(kernel_eval(ck.params, lattice)).reshape(ck.params.arch.channels, -1)
    radii, labels = distance_bins(lattice)
    rows = []
    for ch in range(K.shape[0]):
        for b, r in enumerate(radii):
            rows.append((ch, r, K[ch, int(np.argmax(labels == b))]))
    io.write_csv(args.out, ["channel", "r", "value"], rows,
                 {"checkpoint_sha256": ck_hash, "config_sha256": io.config_hash(ck.config), "seed": None})
    return 0


def cmd_hist(args) -> int:
    import numpy as np

    from phi4flow import io
    from phi4flow.lattice import ActionParams
    from phi4flow.observables import flattened_histogram, single_site_partition
    from phi4flow.sampling import log_weights

    doc = io.load_config(args.config)
    action = ActionParams(doc["action"]["m2"], doc["action"]["g"])
    batch = io.load_samples(args.samples)
    edges = np.linspace(args.lo, args.hi, args.bins + 1)
    raw, _, _ = flattened_histogram(batch.phi, action.m2, action.g, edges)
    weighted = raw
    if batch.logq is not None:
        weighted, _, _ = flattened_histogram(batch.phi, action.m2, action.g, edges, log_weights(batch, action))
    prov = {"samples_sha256": io.file_sha256(args.samples), "config_sha256": io.config_hash(doc), "seed": None}
    io.write_csv(f"{args.out}_hist.csv", ["lo", "hi", "density_reweighted", "density_raw"],
                 zip(edges[:-1], edges[1:], weighted, raw), prov)
    fine = np.linspace(args.lo, args.hi, 601)
    fine_curve = np.exp(-action.m2 * fine**2 - action.g * fine**4) / single_site_partition(action.m2, action.g)
    io.write_csv(f"{args.out}_curve.csv", ["phi", "density"], zip(fine, fine_curve), prov)
    return 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phi4flow", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a flow from a YAML config")
    t.add_argument("config")
    t.add_argument("--out", required=True, help="output directory")
    t.add_argument("--seed", type=int, default=None, help="override the config seed")
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="draw flow samples into a sample file")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--N", type=int, required=True)
    s.add_argument("--n-samples", type=int, default=16384)
    s.add_argument("--num-steps", type=int, default=None, help="override integrator step count")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    o = sub.add_parser("oracle", help="Metropolis samples for validation")
    o.add_argument("config")
    o.add_argument("--N", type=int, required=True)
    o.add_argument("--n-samples", type=int, default=16384)
    o.add_argument("--seed", type=int, default=None)
    o.add_argument("--out", required=True)
    o.set_defaults(func=cmd_oracle)

    e = sub.add_parser("evaluate", help="ESS, magnetization and correlation CSVs")
    e.add_argument("--ckpt")
    e.add_argument("--config")
    e.add_argument("--samples", nargs="*")
    e.add_argument("--sizes", type=int, nargs="*", help="sample these lattice sizes from --ckpt")
    e.add_argument("--n-samples", type=int, default=16384)
    e.add_argument("--ess128", action="store_true", help="quick mode: 128 samples per size")
    e.add_argument("--no-ess", action="store_true", help="unweighted observables, no log q needed")
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", required=True, help="output prefix")
    e.set_defaults(func=cmd_evaluate)

    k = sub.add_parser("kernels", help="learnt radial kernels against distance")
    k.add_argument("--ckpt", required=True)
    k.add_argument("--N", type=int, required=True)
    k.add_argument("--out", required=True)
    k.set_defaults(func=cmd_kernels)

    h = sub.add_parser("hist", help="pooled-site histogram and single-site density curve")
    h.add_argument("samples")
    h.add_argument("config")
    h.add_argument("--bins", type=int, default=60)
    h.add_argument("--lo", type=float, default=-3.0)
    h.add_argument("--hi", type=float, default=3.0)
    h.add_argument("--out", required=True, help="output prefix")
    h.set_defaults(func=cmd_hist)
    return p


def main(argv=None) -> int:
    _apply_thread_env()
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    if getattr(args, "ess128", False):
        args.n_samples = 128
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
