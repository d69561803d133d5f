"""Periodic hypercubic lattices and the discretized phi^4 action.

Fields are arrays whose trailing ``D`` axes have length ``N`` (row-major, axis 0
slowest); any leading axes are treated as batch axes.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from functools import partial

import jax
import jax.numpy as jnp
import numpy as np


class ContractError(ValueError):
    """Input violates a documented precondition (shape, symmetry, range)."""


@dataclass(frozen=True)
class LatticeSpec:
    D: int
    N: int
    L: float

    def __post_init__(self):
        if int(self.D) < 1:
            raise ContractError(f"dimension must be >= 1, got {self.D}")
        if int(self.N) < 2:
            raise ContractError(f"sites per edge must be >= 2, got {self.N}")
        if not self.L > 0:
            raise ContractError(f"edge length must be positive, got {self.L}")
        object.__setattr__(self, "D", int(self.D))
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "L", float(self.L))

    @property
    def a(self) -> float:
        return self.L / self.N

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.N,) * self.D

    @property
    def volume(self) -> int:
        return self.N**self.D

    def sites(self):
        """All site tuples in row-major order."""
        return itertools.product(range(self.N), repeat=self.D)

    def check_field(self, phi) -> None:
        shape = tuple(np.shape(phi))
        if shape[len(shape) - self.D :] != self.shape or len(shape) < self.D:
            raise ContractError(f"field shape {shape} does not end in lattice shape {self.shape}")


@dataclass(frozen=True)
class ActionParams:
    m2: float
    g: float

    def __post_init__(self):
        if self.g < 0:
            raise ContractError(f"coupling g must be non-negative, got {self.g}")


def _site_axes(D: int) -> tuple[int, ...]:
    return tuple(range(-D, 0))


@partial(jax.custom_vjp, nondiff_argnums=(1, 2, 3, 4))
def _action(phi, D, a, m2, g):
    axes = _site_axes(D)
    kinetic = 0.0
    for mu in axes:
        kinetic = kinetic + jnp.sum((jnp.roll(phi, -1, axis=mu) - phi) ** 2, axis=axes)
    phi2 = phi * phi
    potential = jnp.sum(m2 * phi2 + g * phi2 * phi2, axis=axes)
    return a**D * (kinetic / a**2 + potential)


def _grad(phi, D, a, m2, g):
    axes = _site_axes(D)
    neighbours = 0.0
    for mu in axes:
        neighbours = neighbours + jnp.roll(phi, 1, axis=mu) + jnp.roll(phi, -1, axis=mu)
    laplacian_term = (2.0 / a**2) * (2 * D * phi - neighbours)
    return a**D * (laplacian_term + 2.0 * m2 * phi + 4.0 * g * phi**3)


def _action_fwd(phi, D, a, m2, g):
    return _action(phi, D, a, m2, g), phi


def _action_bwd(D, a, m2, g, phi, cotangent):
    ct = jnp.reshape(cotangent, jnp.shape(cotangent) + (1,) * D)
    return (ct * _grad(phi, D, a, m2, g),)


_action.defvjp(_action_fwd, _action_bwd)


def action_eval(phi, lattice: LatticeSpec, params: ActionParams):
    """Discretized action ``S[phi]``; one value per leading batch index.

    Each nearest-neighbour bond is counted once (forward differences only).
    Reverse-mode derivatives use the closed-form gradient of :func:`action_grad`.
    """
    lattice.check_field(phi)
    return _action(jnp.asarray(phi), lattice.D, lattice.a, float(params.m2), float(params.g))


def action_grad(phi, lattice: LatticeSpec, params: ActionParams):
    """dS/dphi_x at every site, same shape as ``phi``."""
    lattice.check_field(phi)
    return _grad(jnp.asarray(phi), lattice.D, lattice.a, float(params.m2), float(params.g))


def periodic_distance(offset, lattice: LatticeSpec) -> float:
    """Physical length of a lattice offset under periodic wrapping."""
    offset = np.asarray(offset, dtype=np.int64).reshape(-1)
    if offset.size != lattice.D or np.any(offset < 0) or np.any(offset >= lattice.N):
        raise ContractError(f"offset {offset.tolist()} not in {{0..{lattice.N - 1}}}^{lattice.D}")
    wrapped = np.minimum(offset, lattice.N - offset)
    return float(lattice.a * np.sqrt(np.sum(wrapped.astype(np.float64) ** 2)))


def distance_grid(lattice: LatticeSpec) -> np.ndarray:
    """Periodic distance of every offset, array of shape ``lattice.shape``."""
    k = np.arange(lattice.N)
    wrapped = np.minimum(k, lattice.N - k).astype(np.float64)
    grids = np.meshgrid(*([wrapped] * lattice.D), indexing="ij")
    return lattice.a * np.sqrt(sum(g**2 for g in grids))


@dataclass
class SampleBatch:
    """Field configurations on one lattice, optionally with model log-densities."""

    lattice: LatticeSpec
    phi: np.ndarray
    logq: np.ndarray | None = None

    def __post_init__(self):
        self.lattice.check_field(self.phi)
        if np.ndim(self.phi) != self.lattice.D + 1:
            raise ContractError("batch fields must have exactly one leading sample axis")
        if self.logq is not None and np.shape(self.logq) != (np.shape(self.phi)[0],):
            raise ContractError(f"logq shape {np.shape(self.logq)} does not match {np.shape(self.phi)[0]} samples")

    def __len__(self) -> int:
        return int(np.shape(self.phi)[0])
