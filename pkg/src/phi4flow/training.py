"""Reverse-KL training over one or several lattice resolutions."""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from functools import partial
from typing import Callable

import jax
import jax.numpy as jnp
import numpy as np
import optax

from phi4flow.free_theory import FreeTheorySpec, as_key, free_logdensity, normals_to_field, standard_normals
from phi4flow.integrator import IntegratorConfig, integrate
from phi4flow.lattice import ActionParams, ContractError, LatticeSpec, _action
from phi4flow.observables import ess
from phi4flow.operator_flow import ArchConfig, ModelParams, init_params

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class LatticeSchedule:
    """Either a uniform draw over ``sizes`` each step, or consecutive curriculum stages."""

    kind: str
    sizes: tuple[int, ...]
    steps: tuple[int, ...] | None = None

    def __post_init__(self):
        object.__setattr__(self, "sizes", tuple(int(n) for n in self.sizes))
        if self.steps is not None:
            object.__setattr__(self, "steps", tuple(int(s) for s in self.steps))
        if self.kind not in ("uniform", "curriculum"):
            raise ContractError(f"unknown schedule kind {self.kind!r}")
        if not self.sizes or min(self.sizes) < 2:
            raise ContractError("every lattice size in the schedule must be >= 2")
        if self.kind == "curriculum":
            if self.steps is None or len(self.steps) != len(self.sizes) or min(self.steps) < 1:
                raise ContractError("curriculum needs one positive step count per stage")

    @classmethod
    def uniform(cls, sizes) -> LatticeSchedule:
        return cls("uniform", tuple(sizes))

    @classmethod
    def curriculum(cls, stages) -> LatticeSchedule:
        sizes, steps = zip(*stages)
        return cls("curriculum", sizes, steps)

    def size_at(self, step: int, seed: int) -> int:
        if self.kind == "uniform":
            # stateless per-step draw: resuming at any step reproduces the sequence
            return int(np.random.default_rng([seed, step, 0x5EED]).choice(self.sizes))
        bounds = np.cumsum(self.steps)
        stage = int(np.searchsorted(bounds, step, side="right"))
        return self.sizes[min(stage, len(self.sizes) - 1)]

    def trained_sizes(self) -> tuple[int, ...]:
        return tuple(sorted(set(self.sizes)))


@dataclass(frozen=True)
class TrainConfig:
    action: ActionParams
    D: int
    L: float
    schedule: LatticeSchedule
    total_steps: int
    batch_size: int = 64
    base_m0_squared: float | None = None
    learning_rate: float = 1e-3
    b1: float = 0.9
    b2: float = 0.999
    eps: float = 1e-8
    integrator: IntegratorConfig = IntegratorConfig()
    arch: ArchConfig = ArchConfig()
    seed: int = 0
    eval_every: int = 100
    eval_samples: int = 128
    # extra lattice sizes on which ESS is tracked at every evaluation
    eval_sizes: tuple[int, ...] = ()
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.total_steps < 1 or self.batch_size < 1 or self.eval_every < 1:
            raise ContractError("total_steps, batch_size and eval_every must be positive")
        if self.schedule.kind == "curriculum" and sum(self.schedule.steps) != self.total_steps:
            raise ContractError(
                f"curriculum stages sum to {sum(self.schedule.steps)} steps, total_steps is {self.total_steps}"
            )
        object.__setattr__(self, "eval_sizes", tuple(int(n) for n in self.eval_sizes))

    @property
    def m0_squared(self) -> float:
        return abs(self.action.m2) if self.base_m0_squared is None else float(self.base_m0_squared)

    def lattice(self, N: int) -> LatticeSpec:
        return LatticeSpec(self.D, N, self.L)

    def base(self, N: int) -> FreeTheorySpec:
        return FreeTheorySpec(self.lattice(N), self.m0_squared)


@dataclass
class StepRecord:
    step: int
    N: int
    loss: float
    step_wall_seconds: float
    ess128: float | None = None
    ess_other: dict = field(default_factory=dict)


@dataclass
class TrainReport:
    records: list[StepRecord] = field(default_factory=list)
    compile_seconds: dict = field(default_factory=dict)

    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])

    def wall_times(self) -> np.ndarray:
        return np.array([r.step_wall_seconds for r in self.records])


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, last_good: ModelParams):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.last_good = last_good


# ---------------------------------------------------------------------------
# loss and gradient
# ---------------------------------------------------------------------------


def _loss_fn(params, key, lattice: LatticeSpec, base: FreeTheorySpec, action: ActionParams, batch_size: int,
             integ: IntegratorConfig):
    z = standard_normals(key, batch_size, lattice.volume)
    x0 = normals_to_field(z, base)
    logq0 = free_logdensity(x0, base)
    x1, ell = integrate(params, x0.reshape(batch_size, -1), lattice, integ)
    logq1 = logq0 + ell
    S = _action(x1.reshape((batch_size,) + lattice.shape), lattice.D, lattice.a, float(action.m2), float(action.g))
    return jnp.mean(logq1 + S)


_loss_jit = jax.jit(_loss_fn, static_argnames=("lattice", "base", "action", "batch_size", "integ"))
_grad_jit = jax.jit(jax.value_and_grad(_loss_fn), static_argnames=("lattice", "base", "action", "batch_size", "integ"))


def _loss_args(lattice: LatticeSpec, cfg: TrainConfig, batch_size: int | None):
    if lattice.D != cfg.D or lattice.L != cfg.L:
        raise ContractError(f"lattice {lattice} inconsistent with config (D={cfg.D}, L={cfg.L})")
    return dict(lattice=lattice, base=cfg.base(lattice.N), action=cfg.action,
                batch_size=batch_size or cfg.batch_size, integ=cfg.integrator)


def loss_reverse_kl(params: ModelParams, lattice: LatticeSpec, cfg: TrainConfig, rng, batch_size: int | None = None):
    """Batch estimate of E_q[log q + S], the reverse KL up to the constant -log Z."""
    return float(_loss_jit(params, as_key(rng), **_loss_args(lattice, cfg, batch_size)))


def loss_samples(params: ModelParams, lattice: LatticeSpec, cfg: TrainConfig, rng, batch_size: int):
    """Per-sample ``log q + S`` values, for error bars on the loss."""
    from phi4flow.sampling import sample_model  # local: sampling imports training

    batch = sample_model(params, lattice, batch_size, rng, cfg.integrator, cfg.m0_squared)
    S = np.asarray(_action(jnp.asarray(batch.phi), lattice.D, lattice.a, float(cfg.action.m2), float(cfg.action.g)))
    return batch.logq + S


def grad_params(params: ModelParams, lattice: LatticeSpec, cfg: TrainConfig, rng, batch_size: int | None = None):
    """Exact gradient of the discretized loss (backprop through every RK stage)."""
    _, grads = _grad_jit(params, as_key(rng), **_loss_args(lattice, cfg, batch_size))
    return grads


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def make_optimizer(cfg: TrainConfig):
    return optax.adam(cfg.learning_rate, b1=cfg.b1, b2=cfg.b2, eps=cfg.eps)


def _make_update(cfg: TrainConfig, opt, N: int):
    kw = _loss_args(cfg.lattice(N), cfg, None)

    @jax.jit
    def update(params, opt_state, key):
        loss, grads = jax.value_and_grad(partial(_loss_fn, **kw))(params, key)
        updates, opt_state = opt.update(grads, opt_state, params)
        return optax.apply_updates(params, updates), opt_state, loss

    return update


def estimate_ess(params: ModelParams, cfg: TrainConfig, N: int, n_samples: int, rng) -> float:
    from phi4flow.sampling import sample_model, log_weights

    lattice = cfg.lattice(N)
    batch = sample_model(params, lattice, n_samples, rng, cfg.integrator, cfg.m0_squared)
    return ess(log_weights(batch, cfg.action))


def train(cfg: TrainConfig, init: ModelParams | None = None, *,
          on_checkpoint: Callable[[ModelParams, int], None] | None = None,
          on_record: Callable[[StepRecord], None] | None = None,
          start_step: int = 0) -> tuple[ModelParams, TrainReport]:
    """Run the lattice schedule with Adam; one lattice size per step.

    Jit compilation for every scheduled size happens up front and is reported
    separately, so ``step_wall_seconds`` only measures the update itself.
    """
    key = jax.random.PRNGKey(cfg.seed)
    init_key, step_key, eval_key = jax.random.split(key, 3)
    params = init if init is not None else init_params(cfg.arch, init_key)
    if params.arch != cfg.arch:
        raise ContractError("initial parameters were built for a different architecture")
    opt = make_optimizer(cfg)
    opt_state = opt.init(params)
    report = TrainReport()

    updates = {}
    for N in cfg.schedule.trained_sizes():
        t0 = time.perf_counter()
        updates[N] = _make_update(cfg, opt, N).lower(params, opt_state, step_key).compile()
        report.compile_seconds[N] = time.perf_counter() - t0

    last_good = params
    for step in range(start_step, cfg.total_steps):
        N = cfg.schedule.size_at(step, cfg.seed)
        t0 = time.perf_counter()
        new_params, new_state, loss = updates[N](params, opt_state, jax.random.fold_in(step_key, step))
        loss = float(jax.block_until_ready(loss))
        wall = time.perf_counter() - t0
        if not np.isfinite(loss) or not all(np.all(np.isfinite(x)) for x in jax.tree_util.tree_leaves(new_params)):
            if on_checkpoint is not None:
                on_checkpoint(last_good, step)
            raise TrainingDiverged(step, last_good)
        params, opt_state = new_params, new_state
        last_good = params
        rec = StepRecord(step, N, loss, wall)
        done = step + 1
        if done % cfg.eval_every == 0 or done == cfg.total_steps:
            k = jax.random.fold_in(eval_key, step)
            rec.ess128 = estimate_ess(params, cfg, N, cfg.eval_samples, k)
            for M in cfg.eval_sizes:
                rec.ess_other[M] = estimate_ess(params, cfg, M, cfg.eval_samples, jax.random.fold_in(k, M))
            log.info("step %d N=%d loss=%.5f ess=%.3f", done, N, loss, rec.ess128)
        report.records.append(rec)
        if on_record is not None:
            on_record(rec)
        if on_checkpoint is not None and cfg.checkpoint_every and done % cfg.checkpoint_every == 0:
            on_checkpoint(params, done)
    if on_checkpoint is not None:
        on_checkpoint(params, cfg.total_steps)
    return params, report
