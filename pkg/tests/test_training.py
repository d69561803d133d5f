import jax
import jax.numpy as jnp
import numpy as np
import pytest

from phi4flow.free_theory import FreeTheorySpec, sample_free
from phi4flow.integrator import IntegratorConfig
from phi4flow.lattice import ActionParams, ContractError, action_eval
from phi4flow.operator_flow import ArchConfig, ModelParams, init_params
from phi4flow.training import (
    LatticeSchedule,
    TrainConfig,
    TrainingDiverged,
    grad_params,
    loss_reverse_kl,
    loss_samples,
    train,
)

TINY = ArchConfig(channels=1, time_dim=1, embed_hidden=(2,), kernel_hidden=(2,), transformer_hidden=(2,),
                  time_hidden=(2,))
SMALL = ArchConfig(channels=4, time_dim=4, embed_hidden=(8,), kernel_hidden=(8,), transformer_hidden=(8,),
                   time_hidden=(8,))
ACTION = ActionParams(-4.0, 1.0)


def config(**kw):
    base = dict(action=ACTION, D=1, L=4.0, schedule=LatticeSchedule.uniform([4, 8]), total_steps=10, batch_size=16,
                integrator=IntegratorConfig(8), arch=SMALL, eval_every=10**6)
    base.update(kw)
    return TrainConfig(**base)


def randomized(arch, seed):
    p = init_params(arch, seed, zero_output=False)
    key = jax.random.PRNGKey(seed + 100)
    leaves, tree = jax.tree_util.tree_flatten(p)
    keys = jax.random.split(key, len(leaves))
    leaves = [x + 0.3 * jax.random.normal(k, x.shape) if x.ndim == 1 else x for x, k in zip(leaves, keys)]
    return jax.tree_util.tree_unflatten(tree, leaves)


def test_identity_flow_loss():
    cfg = config()
    lat = cfg.lattice(8)
    p = init_params(SMALL, 0)
    base = FreeTheorySpec(lat, 4.0)
    x0 = sample_free(base, 16, 11)
    expected = np.mean(x0.logq + np.asarray(action_eval(x0.phi, lat, ACTION)))
    assert loss_reverse_kl(p, lat, cfg, 11) == pytest.approx(expected, rel=1e-12)


def test_loss_seed_statistics():
    cfg = config()
    lat = cfg.lattice(8)
    p = randomized(SMALL, 1)
    a = loss_samples(p, lat, cfg, 0, 1024)
    b = loss_samples(p, lat, cfg, 1, 1024)
    se = np.sqrt(a.var(ddof=1) / a.size + b.var(ddof=1) / b.size)
    assert abs(a.mean() - b.mean()) < 4 * se
    assert not np.array_equal(a, b)


def _fd_check(params, cfg, lat, key, h=1e-5, rtol=1e-4):
    grads = grad_params(params, lat, cfg, key)
    leaves, tree = jax.tree_util.tree_flatten(params)
    gleaves = jax.tree_util.tree_leaves(grads)
    worst = 0.0
    for li, (x, g) in enumerate(zip(leaves, gleaves)):
        x = np.asarray(x)
        for idx in np.ndindex(x.shape):
            def at(v):
                bumped = x.copy()
                bumped[idx] = v
                ls = list(leaves)
                ls[li] = jnp.asarray(bumped)
                return loss_reverse_kl(jax.tree_util.tree_unflatten(tree, ls), lat, cfg, key)
            fd = (at(x[idx] + h) - at(x[idx] - h)) / (2 * h)
            an = float(np.asarray(g)[idx])
            err = abs(an - fd) / max(abs(fd), 1e-6)
            worst = max(worst, err)
            assert err < rtol, (li, idx, an, fd)
    return worst


def test_gradient_matches_finite_differences():
    cfg = config(batch_size=4, arch=TINY)
    params = randomized(TINY, 4)
    assert params.num_parameters() <= 60
    _fd_check(params, cfg, cfg.lattice(4), 3)


def test_gradient_at_identity_flow():
    """Zero-output transformer: only the last transformer layer gets a signal, and it matches FD."""
    cfg = config(batch_size=4, arch=TINY)
    params = init_params(TINY, 5)
    grads = grad_params(params, cfg.lattice(4), cfg, 2)
    assert all(np.all(np.isfinite(np.asarray(g))) for g in jax.tree_util.tree_leaves(grads))
    assert np.any(np.asarray(grads.weights["transformer"][-1][1]) != 0)
    _fd_check(params, cfg, cfg.lattice(4), 2)


def test_gradient_deterministic():
    cfg = config(batch_size=4, arch=TINY)
    params = randomized(TINY, 4)
    a = jax.tree_util.tree_leaves(grad_params(params, cfg.lattice(4), cfg, 7))
    b = jax.tree_util.tree_leaves(grad_params(params, cfg.lattice(4), cfg, 7))
    assert all(np.array_equal(x, y) for x, y in zip(a, b))


def test_curriculum_bookkeeping():
    sched = LatticeSchedule.curriculum([(6, 3), (8, 2), (16, 5)])
    sizes = [sched.size_at(s, 0) for s in range(10)]
    assert sizes == [6, 6, 6, 8, 8, 16, 16, 16, 16, 16]
    cfg = config(schedule=sched, total_steps=10)
    _, report = train(cfg)
    assert [r.N for r in report.records] == sizes
    with pytest.raises(ContractError):
        config(schedule=sched, total_steps=11)


def test_uniform_schedule_reproducible_and_covering():
    sched = LatticeSchedule.uniform([4, 8, 16])
    a = [sched.size_at(s, 3) for s in range(300)]
    assert a == [sched.size_at(s, 3) for s in range(300)]
    counts = np.bincount(a)
    assert all(60 < counts[n] < 140 for n in (4, 8, 16))
    with pytest.raises(ContractError):
        LatticeSchedule.uniform([1, 4])


def test_training_is_reproducible():
    cfg = config(total_steps=6)
    p1, r1 = train(cfg)
    p2, r2 = train(cfg)
    assert all(np.array_equal(x, y) for x, y in zip(jax.tree_util.tree_leaves(p1), jax.tree_util.tree_leaves(p2)))
    assert np.array_equal(r1.losses(), r2.losses())


@pytest.mark.slow
def test_smoke_training_lowers_loss():
    drops = []
    for seed in range(3):
        cfg = config(total_steps=200, batch_size=32, seed=seed, learning_rate=3e-3)
        params, report = train(cfg)
        init = init_params(cfg.arch, jax.random.split(jax.random.PRNGKey(seed), 3)[0])
        start = np.mean([loss_reverse_kl(init, cfg.lattice(N), cfg, 99, 512) for N in (4, 8)])
        end = np.mean([loss_reverse_kl(params, cfg.lattice(N), cfg, 99, 512) for N in (4, 8)])
        drops.append(start - end)
    assert np.median(drops) > 0


def test_report_contents_and_evaluation():
    cfg = config(total_steps=4, eval_every=2, eval_sizes=(16,), eval_samples=32)
    seen = []
    _, report = train(cfg, on_record=seen.append)
    assert len(seen) == 4 and set(report.compile_seconds) == {4, 8}
    assert all(r.step_wall_seconds > 0 for r in report.records)
    assert [r.ess128 is not None for r in report.records] == [False, True, False, True]
    assert 0 < report.records[-1].ess_other[16] <= 1


def test_divergence_keeps_last_good():
    cfg = config(total_steps=3)
    p = init_params(SMALL, 0)
    W, b = p.weights["transformer"][-1]
    w = dict(p.weights)
    w["transformer"] = w["transformer"][:-1] + [(W, b.at[0].set(jnp.nan))]
    bad = ModelParams(SMALL, w)
    saved = []
    with pytest.raises(TrainingDiverged) as err:
        train(cfg, bad, on_checkpoint=lambda params, step: saved.append(step))
    assert err.value.step == 0 and saved == [0]


def test_step_time_grows_with_lattice_size():
    cfg = config(D=2, L=6.0, schedule=LatticeSchedule.curriculum([(4, 6), (16, 6)]), total_steps=12, batch_size=8)
    _, report = train(cfg)
    t = report.wall_times()
    assert np.median(t[7:]) > np.median(t[1:6])
