"""Exact sampling and log-density of the g=0 lattice theory.

The free action is diagonal in momentum space, ``S0 = sum_p lambda_p |phi~_p|^2``
with the unitary DFT ``phi~_p = N^{-D/2} sum_x phi_x exp(-2 pi i <k, x>/N)``.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property

import jax
import jax.numpy as jnp
import numpy as np

from phi4flow.lattice import ContractError, LatticeSpec, SampleBatch

__all__ = [
    "FreeTheorySpec",
    "SampleBatch",
    "SpectralField",
    "dft",
    "free_logdensity",
    "idft",
    "mode_eigenvalue",
    "sample_free",
]


class SymmetryViolation(ContractError):
    """Spectral coefficients do not describe a real field."""


@dataclass
class SpectralField:
    lattice: LatticeSpec
    coeffs: np.ndarray  # complex, shape lattice.shape (or batch + shape)


def _axes(lattice: LatticeSpec) -> tuple[int, ...]:
    return tuple(range(-lattice.D, 0))


def dft(phi, lattice: LatticeSpec) -> SpectralField:
    lattice.check_field(phi)
    return SpectralField(lattice, np.fft.fftn(np.asarray(phi, dtype=np.float64), axes=_axes(lattice), norm="ortho"))


def conjugate_partner(coeffs: np.ndarray, lattice: LatticeSpec) -> np.ndarray:
    """Array holding ``coeffs[-k mod N]`` at position ``k``."""
    out = coeffs
    for ax in _axes(lattice):
        out = np.roll(np.flip(out, axis=ax), 1, axis=ax)
    return out


def idft(spec: SpectralField, atol: float = 1e-10) -> np.ndarray:
    """Real field whose DFT is ``spec``; raises if the coefficients are not hermitian."""
    lattice = spec.lattice
    coeffs = np.asarray(spec.coeffs, dtype=np.complex128)
    lattice.check_field(coeffs)
    partner = conjugate_partner(coeffs, lattice)
    scale = max(1.0, float(np.max(np.abs(coeffs), initial=0.0)))
    violation = float(np.max(np.abs(coeffs - np.conj(partner)), initial=0.0))
    if violation > atol * scale:
        raise SymmetryViolation(f"coefficients violate hermitian symmetry by {violation:.3g}")
    return np.fft.ifftn(coeffs, axes=_axes(lattice), norm="ortho").real


def mode_eigenvalue(k, spec: FreeTheorySpec) -> float:
    """Free action of the unit-norm Fourier mode with integer frequency ``k``."""
    lat = spec.lattice
    k = np.asarray(k, dtype=np.int64).reshape(-1)
    if k.size != lat.D or np.any(k < 0) or np.any(k >= lat.N):
        raise ContractError(f"frequency index {k.tolist()} out of range")
    return _eigenvalue(k, lat, spec.m0_squared)


def _eigenvalue(k, lat: LatticeSpec, m0_squared: float):
    a = lat.a
    kinetic = np.sum(2.0 - 2.0 * np.cos(2.0 * np.pi * np.asarray(k) / lat.N), axis=0)
    return a**lat.D * (m0_squared + kinetic / a**2)


@dataclass(frozen=True)
class FreeTheorySpec:
    lattice: LatticeSpec
    m0_squared: float

    def __post_init__(self):
        if not np.all(self.eigenvalues > 0):
            raise ContractError(
                f"free theory with m0^2={self.m0_squared} has non-positive mode eigenvalues; base density not normalizable"
            )

    @cached_property
    def eigenvalues(self) -> np.ndarray:
        """lambda_p for every frequency index, shape ``lattice.shape``."""
        lat = self.lattice
        ks = np.indices(lat.shape)
        return np.asarray(_eigenvalue(ks, lat, self.m0_squared), dtype=np.float64)

    @cached_property
    def log_partition(self) -> float:
        return 0.5 * self.lattice.volume * np.log(np.pi) - 0.5 * float(np.sum(np.log(self.eigenvalues)))

    @cached_property
    def _mode_layout(self):
        # Self-conjugate modes take one real normal; each conjugate pair takes two
        # (real and imaginary part of the representative), so N^D normals in total.
        lat = self.lattice
        idx = np.arange(lat.volume).reshape(lat.shape)
        partner = conjugate_partner(idx, lat).reshape(-1)
        idx = idx.reshape(-1)
        self_conj = idx[idx == partner]
        reps = idx[idx < partner]
        lam = self.eigenvalues.reshape(-1)
        return {
            "self": self_conj,
            "rep": reps,
            "partner": partner[reps],
            "sigma_self": np.sqrt(1.0 / (2.0 * lam[self_conj])),
            "sigma_pair": np.sqrt(1.0 / (4.0 * lam[reps])),
        }


def free_logdensity(phi, spec: FreeTheorySpec):
    """log q0(phi) = -S0[phi] - log Z0, vectorized over leading axes."""
    lat = spec.lattice
    lat.check_field(phi)
    axes = _axes(lat)
    coeffs = jnp.fft.fftn(jnp.asarray(phi), axes=axes, norm="ortho")
    s0 = jnp.sum(jnp.asarray(spec.eigenvalues) * jnp.abs(coeffs) ** 2, axis=axes)
    return -s0 - spec.log_partition


def normals_to_field(z, spec: FreeTheorySpec):
    """Map standard normals of shape (B, N^D) to real fields distributed as the free theory."""
    lat = spec.lattice
    lay = spec._mode_layout
    n_self, n_rep = len(lay["self"]), len(lay["rep"])
    batch = z.shape[0]
    re = jnp.zeros((batch, lat.volume))
    im = jnp.zeros((batch, lat.volume))
    re = re.at[:, lay["self"]].set(z[:, :n_self] * lay["sigma_self"])
    pair_re = z[:, n_self : n_self + n_rep] * lay["sigma_pair"]
    pair_im = z[:, n_self + n_rep :] * lay["sigma_pair"]
    re = re.at[:, lay["rep"]].set(pair_re).at[:, lay["partner"]].set(pair_re)
    im = im.at[:, lay["rep"]].set(pair_im).at[:, lay["partner"]].set(-pair_im)
    coeffs = (re + 1j * im).reshape((batch,) + lat.shape)
    return jnp.fft.ifftn(coeffs, axes=_axes(lat), norm="ortho").real


def as_key(rng):
    if isinstance(rng, (int, np.integer)):
        return jax.random.PRNGKey(int(rng))
    return rng


def standard_normals(key, count: int, dim: int, start: int = 0):
    """One independent substream per sample index, so any split of the batch reproduces it."""
    keys = jax.vmap(lambda i: jax.random.fold_in(key, i))(start + jnp.arange(count))
    return jax.vmap(lambda k: jax.random.normal(k, (dim,), dtype=jnp.float64))(keys)


def sample_free(spec: FreeTheorySpec, count: int, rng) -> SampleBatch:
    """Draw ``count`` exact samples of the free theory together with log q0."""
    if count < 1:
        raise ContractError("count must be positive")
    z = standard_normals(as_key(rng), count, spec.lattice.volume)
    phi = normals_to_field(z, spec)
    return SampleBatch(spec.lattice, np.asarray(phi), np.asarray(free_logdensity(phi, spec)))
