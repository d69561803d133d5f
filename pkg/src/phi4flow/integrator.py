"""Fixed-step integration of the augmented ODE (field, log-density)."""

from __future__ import annotations

from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np

from phi4flow.free_theory import FreeTheorySpec, free_logdensity
from phi4flow.lattice import ContractError, LatticeSpec, SampleBatch
from phi4flow.operator_flow import ModelParams, _field_and_div


class FlowDivergenceError(FloatingPointError):
    def __init__(self, sample_index: int):
        super().__init__(f"non-finite state while integrating sample {sample_index}")
        self.sample_index = sample_index


@dataclass(frozen=True)
class IntegratorConfig:
    num_steps: int = 64
    scheme: str = "rk4"

    def __post_init__(self):
        if int(self.num_steps) < 1:
            raise ContractError("num_steps must be >= 1")
        if self.scheme not in ("rk4", "euler"):
            raise ContractError(f"unknown scheme {self.scheme!r}")


def _rhs(params, lattice, t, phi):
    V, div = _field_and_div(params, phi, t, lattice)
    return V, -div


def integrate(params: ModelParams, phi, lattice: LatticeSpec, cfg: IntegratorConfig, t0=0.0, t1=1.0):
    """Integrate d(phi)/dt = V, d(ell)/dt = -div V from t0 to t1 (ell starts at 0).

    ``phi`` is (B, V) flattened. The divergence is evaluated at every stage and
    combined with the same Butcher weights as the field. Returns (phi(t1), ell(t1)).
    """
    h = (t1 - t0) / cfg.num_steps
    f = partial(_rhs, params, lattice)

    def rk4(carry, i):
        x, ell = carry
        t = t0 + i * h
        k1, l1 = f(t, x)
        k2, l2 = f(t + 0.5 * h, x + 0.5 * h * k1)
        k3, l3 = f(t + 0.5 * h, x + 0.5 * h * k2)
        k4, l4 = f(t + h, x + h * k3)
        x = x + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        ell = ell + (h / 6.0) * (l1 + 2.0 * l2 + 2.0 * l3 + l4)
        return (x, ell), None

    def euler(carry, i):
        x, ell = carry
        k, l = f(t0 + i * h, x)
        return (x + h * k, ell + h * l), None

    step = rk4 if cfg.scheme == "rk4" else euler
    ell0 = jnp.zeros(phi.shape[0], dtype=phi.dtype)
    (phi, ell), _ = jax.lax.scan(step, (phi, ell0), jnp.arange(cfg.num_steps))
    return phi, ell


@partial(jax.jit, static_argnames=("lattice", "cfg"))
def _forward(params, phi, logq0, lattice, cfg):
    x1, ell = integrate(params, phi, lattice, cfg, 0.0, 1.0)
    return x1, logq0 + ell


@partial(jax.jit, static_argnames=("lattice", "cfg", "base"))
def _backward(params, phi, lattice, cfg, base):
    x0, ell = integrate(params, phi, lattice, cfg, 1.0, 0.0)
    # ell(0) = integral_0^1 div dt along the trajectory
    logq0 = free_logdensity(x0.reshape((-1,) + lattice.shape), base)
    return x0, logq0 - ell


def _check_finite(phi, logq):
    bad = ~(np.all(np.isfinite(phi), axis=1) & np.isfinite(logq))
    if np.any(bad):
        raise FlowDivergenceError(int(np.argmax(bad)))


def push_forward(params: ModelParams, batch: SampleBatch, cfg: IntegratorConfig = IntegratorConfig()) -> SampleBatch:
    """Transport base samples (carrying log q0) from t=0 to t=1."""
    if batch.logq is None:
        raise ContractError("push_forward needs base log-densities on the batch")
    lat = batch.lattice
    flat = jnp.asarray(batch.phi).reshape(len(batch), lat.volume)
    x1, logq = _forward(params, flat, jnp.asarray(batch.logq), lat, cfg)
    x1, logq = np.asarray(x1), np.asarray(logq)
    _check_finite(x1, logq)
    return SampleBatch(lat, x1.reshape((len(batch),) + lat.shape), logq)


def pull_back(params: ModelParams, batch: SampleBatch, cfg: IntegratorConfig, base: FreeTheorySpec,
              return_base: bool = False):
    """Model log-density of given configurations by integrating back to the base.

    With ``return_base`` also returns the base-space fields x0 as a SampleBatch.
    """
    lat = batch.lattice
    if base.lattice != lat:
        raise ContractError("base theory lives on a different lattice")
    flat = jnp.asarray(batch.phi).reshape(len(batch), lat.volume)
    x0, logq = _backward(params, flat, lat, cfg, base)
    x0, logq = np.asarray(x0), np.asarray(logq)
    _check_finite(x0, logq)
    out = SampleBatch(lat, np.asarray(batch.phi), logq)
    if return_base:
        return out, SampleBatch(lat, x0.reshape((len(batch),) + lat.shape), np.asarray(free_logdensity(x0.reshape((-1,) + lat.shape), base)))
    return out
