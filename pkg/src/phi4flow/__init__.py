"""Operator-valued continuous normalizing flows for lattice phi^4 sampling."""

import jax

# action, divergence and gradient tests all assume binary64
jax.config.update("jax_enable_x64", True)

from phi4flow.lattice import ActionParams, LatticeSpec, action_eval, action_grad, periodic_distance  # noqa: E402
from phi4flow.free_theory import FreeTheorySpec, SampleBatch, free_logdensity, sample_free  # noqa: E402
from phi4flow.operator_flow import ArchConfig, init_params, velocity, velocity_and_divergence  # noqa: E402
from phi4flow.integrator import IntegratorConfig, pull_back, push_forward  # noqa: E402

__version__ = "0.1.0"

__all__ = [
    "ActionParams",
    "ArchConfig",
    "FreeTheorySpec",
    "IntegratorConfig",
    "LatticeSpec",
    "SampleBatch",
    "action_eval",
    "action_grad",
    "free_logdensity",
    "init_params",
    "periodic_distance",
    "pull_back",
    "push_forward",
    "sample_free",
    "velocity",
    "velocity_and_divergence",
]
