"""Importance weights, effective sample size and reweighted lattice observables."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import integrate

from phi4flow.lattice import ContractError, LatticeSpec, SampleBatch, distance_grid


class DegenerateWeights(ValueError):
    pass


@dataclass
class WeightedEnsemble:
    batch: SampleBatch
    log_weights: np.ndarray

    def __post_init__(self):
        self.log_weights = np.asarray(self.log_weights, dtype=np.float64)
        if self.log_weights.shape != (len(self.batch),):
            raise ContractError("one log-weight per sample required")
        if not np.all(np.isfinite(self.log_weights)):
            raise ContractError("log-weights must be finite")

    def normalized_weights(self) -> np.ndarray:
        return normalized_weights(self.log_weights)


@dataclass
class ObservableReport:
    lattice: LatticeSpec
    n_samples: int
    ess: float
    mean_M: float
    stderr_M: float
    mean_absM: float
    stderr_absM: float
    G: list = field(default_factory=list)  # (r, G(r), stderr, count)
    raw: dict = field(default_factory=dict)  # unweighted estimates


def normalized_weights(log_weights) -> np.ndarray:
    lw = np.asarray(log_weights, dtype=np.float64)
    top = np.max(lw)
    if not np.isfinite(top):
        raise DegenerateWeights("all importance weights vanish")
    w = np.exp(lw - top)
    return w / np.sum(w)


def ess(log_weights) -> float:
    """(sum w)^2 / (n sum w^2), computed from log-weights; shift invariant."""
    lw = np.asarray(log_weights, dtype=np.float64).reshape(-1)
    if lw.size == 0 or not np.any(np.isfinite(lw)):
        raise DegenerateWeights("ESS needs at least one finite log-weight")
    w = np.exp(lw - np.max(lw))
    return float(np.sum(w) ** 2 / (lw.size * np.sum(w * w)))


def _site_axes(lattice: LatticeSpec):
    return tuple(range(-lattice.D, 0))


def magnetization(phi, lattice: LatticeSpec):
    lattice.check_field(phi)
    return np.mean(np.asarray(phi), axis=_site_axes(lattice))


def abs_magnetization(phi, lattice: LatticeSpec):
    return np.abs(magnetization(phi, lattice))


def reweighted_mean(log_weights, values) -> tuple[float, float]:
    """Self-normalized importance estimate and its delta-method standard error."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ContractError("empty ensemble")
    lw = np.asarray(log_weights, dtype=np.float64)
    if not np.any(np.isfinite(lw)):
        raise DegenerateWeights("zero total weight")
    w = normalized_weights(lw)
    mean = float(np.sum(w * values))
    return mean, float(np.sqrt(np.sum(w**2 * (values - mean) ** 2)))


def correlator_per_sample(phi, lattice: LatticeSpec) -> np.ndarray:
    """``c[s, delta] = N^-D sum_x phi_s(x) phi_s(x + delta)`` for every offset."""
    phi = np.asarray(phi, dtype=np.float64)
    axes = _site_axes(lattice)
    f = np.fft.fftn(phi, axes=axes)
    return np.fft.ifftn(np.abs(f) ** 2, axes=axes).real / lattice.volume


def distance_bins(lattice: LatticeSpec, tol: float = 1e-9):
    """Sorted distinct periodic distances and, per offset, the index of its bin."""
    r = distance_grid(lattice).reshape(-1)
    order = np.argsort(r, kind="stable")
    labels = np.empty(r.size, dtype=np.int64)
    radii = []
    for i in order:
        if not radii or r[i] - radii[-1] > tol:
            radii.append(r[i])
        labels[i] = len(radii) - 1
    return np.array(radii), labels


def binned_correlator(phi, lattice: LatticeSpec):
    """Per-sample G(r): returns (radii, values of shape (n, bins), offsets per bin)."""
    lattice.check_field(phi)
    phi = np.asarray(phi, dtype=np.float64)
    if phi.ndim == lattice.D:
        phi = phi[None]
    n = phi.shape[0]
    radii, labels = distance_bins(lattice)
    per_offset = correlator_per_sample(phi, lattice).reshape(n, -1)
    multiplicity = np.bincount(labels, minlength=len(radii))
    per_bin = np.zeros((n, len(radii)))
    for b in range(len(radii)):
        per_bin[:, b] = per_offset[:, labels == b].mean(axis=1)
    return radii, per_bin, multiplicity


def two_point(phi, lattice: LatticeSpec, log_weights=None):
    """Binned two-point function as rows ``(r, G(r), stderr, count)`` sorted by r.

    ``count`` is the number of site pairs per sample falling in the bin, so the
    counts add up to N^(2D). Without log-weights every sample weighs the same.
    """
    radii, per_bin, multiplicity = binned_correlator(phi, lattice)
    lw = np.zeros(per_bin.shape[0]) if log_weights is None else np.asarray(log_weights)
    rows = []
    for b in range(len(radii)):
        mean, err = reweighted_mean(lw, per_bin[:, b])
        rows.append((float(radii[b]), mean, err, int(multiplicity[b] * lattice.volume)))
    return rows


def flattened_histogram(phi, action_m2: float, action_g: float, edges, log_weights=None):
    """Pooled-site density histogram plus the normalized single-site Boltzmann curve.

    Returns ``(density, curve_at_centers, Z1)``; the curve is
    ``exp(-m2 x^2 - g x^4) / Z1`` with ``Z1`` from adaptive quadrature. Values
    outside ``edges`` are dropped before normalizing.
    """
    edges = np.asarray(edges, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    n = phi.shape[0]
    per_sample = phi.reshape(n, -1)
    if log_weights is None:
        w = np.full(per_sample.shape, 1.0)
    else:
        w = np.repeat(normalized_weights(log_weights)[:, None], per_sample.shape[1], axis=1)
    counts, _ = np.histogram(per_sample.reshape(-1), bins=edges, weights=w.reshape(-1))
    total = np.sum(counts)
    if total <= 0:
        raise DegenerateWeights("no samples inside histogram range")
    density = counts / (total * np.diff(edges))
    Z1 = single_site_partition(action_m2, action_g)
    centers = 0.5 * (edges[1:] + edges[:-1])
    curve = np.exp(-action_m2 * centers**2 - action_g * centers**4) / Z1
    return density, curve, Z1


def single_site_partition(m2: float, g: float) -> float:
    if g <= 0 and m2 <= 0:
        raise ContractError("single-site density not normalizable")
    f = lambda x: np.exp(-m2 * x * x - g * x**4)  # noqa: E731
    val, _ = integrate.quad(f, -np.inf, np.inf, epsabs=1e-13, epsrel=1e-12, limit=200)
    return float(val)


def single_site_density_bins(m2: float, g: float, edges) -> np.ndarray:
    """Probability mass of each bin under the normalized single-site curve."""
    Z1 = single_site_partition(m2, g)
    f = lambda x: np.exp(-m2 * x * x - g * x**4) / Z1  # noqa: E731
    return np.array([integrate.quad(f, lo, hi, epsabs=1e-13)[0] for lo, hi in zip(edges[:-1], edges[1:])])


def observable_report(batch: SampleBatch, log_w=None) -> ObservableReport:
    lattice = batch.lattice
    n = len(batch)
    lw = np.zeros(n) if log_w is None else np.asarray(log_w)
    M = magnetization(batch.phi, lattice)
    absM = np.abs(M)
    mean_M, err_M = reweighted_mean(lw, M)
    mean_A, err_A = reweighted_mean(lw, absM)
    flat = np.zeros(n)
    raw_M, raw_M_err = reweighted_mean(flat, M)
    raw_A, raw_A_err = reweighted_mean(flat, absM)
    return ObservableReport(
        lattice=lattice,
        n_samples=n,
        ess=ess(lw),
        mean_M=mean_M,
        stderr_M=err_M,
        mean_absM=mean_A,
        stderr_absM=err_A,
        G=two_point(batch.phi, lattice, lw),
        raw={"M": (raw_M, raw_M_err), "absM": (raw_A, raw_A_err)},
    )


def batch_means(values, n_batches: int = 32) -> tuple[float, float]:
    """Mean and batch-means standard error for autocorrelated chain output."""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0] - values.shape[0] % n_batches
    if n < n_batches:
        raise ContractError("not enough records for batch means")
    blocks = values[:n].reshape((n_batches, -1) + values.shape[1:]).mean(axis=1)
    return float(np.mean(values)), float(np.std(blocks, ddof=1, axis=0) / np.sqrt(n_batches))
