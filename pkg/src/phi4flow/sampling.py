"""Drawing configurations from a trained flow."""

from __future__ import annotations

from functools import partial

import jax
import numpy as np

from phi4flow.free_theory import FreeTheorySpec, as_key, free_logdensity, normals_to_field, standard_normals
from phi4flow.integrator import IntegratorConfig, _check_finite, integrate
from phi4flow.lattice import ActionParams, LatticeSpec, SampleBatch, action_eval
from phi4flow.operator_flow import ModelParams


@partial(jax.jit, static_argnames=("lattice", "base", "count", "integ"))
def _sample_chunk(params, key, lattice, base, count, start, integ):
    z = standard_normals(key, count, lattice.volume, start)
    x0 = normals_to_field(z, base)
    logq0 = free_logdensity(x0, base)
    x1, ell = integrate(params, x0.reshape(count, -1), lattice, integ)
    return x1, logq0 + ell


def sample_model(params: ModelParams, lattice: LatticeSpec, n_samples: int, rng,
                 integ: IntegratorConfig = IntegratorConfig(), m0_squared: float = 4.0,
                 chunk: int = 1024) -> SampleBatch:
    """Free-theory draws pushed through the flow, with model log-densities.

    Output does not depend on ``chunk``: every sample index owns its random substream.
    """
    key = as_key(rng)
    base = FreeTheorySpec(lattice, m0_squared)
    phis, logqs = [], []
    for start in range(0, n_samples, chunk):
        count = min(chunk, n_samples - start)
        x1, logq = _sample_chunk(params, key, lattice, base, count, start, integ)
        phis.append(np.asarray(x1))
        logqs.append(np.asarray(logq))
    phi, logq = np.concatenate(phis), np.concatenate(logqs)
    _check_finite(phi, logq)
    return SampleBatch(lattice, phi.reshape((n_samples,) + lattice.shape), logq)


def log_weights(batch: SampleBatch, action: ActionParams) -> np.ndarray:
    """Unnormalized log importance weights ``-S - log q``."""
    if batch.logq is None:
        raise ValueError("batch has no model log-densities")
    return -np.asarray(action_eval(batch.phi, batch.lattice, action)) - np.asarray(batch.logq)
