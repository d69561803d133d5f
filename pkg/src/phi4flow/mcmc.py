"""Single-site Metropolis sampler for the lattice action, used as a validation oracle."""

from __future__ import annotations

from dataclasses import dataclass

import numba
import numpy as np

from phi4flow.lattice import ActionParams, ContractError, LatticeSpec, SampleBatch


@dataclass(frozen=True)
class McmcConfig:
    n_records: int
    proposal_width: float | None = None  # None: tune on a pilot run
    burn_in: int = 1000
    thin: int = 1
    seed: int = 0
    target_acceptance: tuple[float, float] = (0.4, 0.6)

    def __post_init__(self):
        if self.thin < 1 or self.n_records < 1 or self.burn_in < 0:
            raise ContractError("need thin >= 1, n_records >= 1, burn_in >= 0")
        if self.proposal_width is not None and not self.proposal_width > 0:
            raise ContractError("proposal width must be positive")


@dataclass
class McmcResult:
    batch: SampleBatch
    acceptance: float
    flip_acceptance: float
    proposal_width: float


def neighbour_table(lattice: LatticeSpec) -> np.ndarray:
    """(V, 2D) linear indices of the forward and backward neighbour along each axis."""
    idx = np.arange(lattice.volume).reshape(lattice.shape)
    cols = []
    for ax in range(lattice.D):
        cols.append(np.roll(idx, -1, axis=ax).reshape(-1))
        cols.append(np.roll(idx, 1, axis=ax).reshape(-1))
    return np.stack(cols, axis=1).astype(np.int64)


@numba.njit(cache=True)
def _delta_action(phi, x, new, nbr, aD, inv_a2, m2, g):
    old = phi[x]
    kin = 0.0
    for j in range(nbr.shape[1]):
        n = phi[nbr[x, j]]
        kin += (n - new) ** 2 - (n - old) ** 2
    pot = m2 * (new * new - old * old) + g * (new**4 - old**4)
    return aD * (inv_a2 * kin + pot)


@numba.njit(cache=True)
def _total_action(phi, nbr, aD, inv_a2, m2, g):
    kin = 0.0
    pot = 0.0
    for x in range(phi.shape[0]):
        for j in range(0, nbr.shape[1], 2):
            kin += (phi[nbr[x, j]] - phi[x]) ** 2
        pot += m2 * phi[x] ** 2 + g * phi[x] ** 4
    return aD * (inv_a2 * kin + pot)


@numba.njit(cache=True)
def _run_chain(phi, nbr, aD, inv_a2, m2, g, width, burn_in, thin, n_records, seed):
    np.random.seed(seed)
    V = phi.shape[0]
    records = np.empty((n_records, V))
    accepted = 0
    proposed = 0
    flips = 0
    flips_accepted = 0
    total_sweeps = burn_in + thin * n_records
    rec = 0
    for sweep in range(total_sweeps):
        for x in range(V):
            new = phi[x] + width * (2.0 * np.random.random() - 1.0)
            dS = _delta_action(phi, x, new, nbr, aD, inv_a2, m2, g)
            proposed += 1
            if dS <= 0.0 or np.random.random() < np.exp(-dS):
                phi[x] = new
                accepted += 1
        # global sign flip, proposed with probability 1/2 so the chain has no forced parity
        if np.random.random() < 0.5:
            flips += 1
            dS = _total_action(-phi, nbr, aD, inv_a2, m2, g) - _total_action(phi, nbr, aD, inv_a2, m2, g)
            if dS <= 0.0 or np.random.random() < np.exp(-dS):
                phi[:] = -phi
                flips_accepted += 1
        if sweep >= burn_in and (sweep - burn_in + 1) % thin == 0:
            records[rec] = phi
            rec += 1
    return records, accepted / max(proposed, 1), flips_accepted / max(flips, 1)


def _constants(lattice: LatticeSpec, params: ActionParams):
    a = lattice.a
    return a**lattice.D, 1.0 / a**2, float(params.m2), float(params.g)


def local_delta_action(phi, site, new_value: float, lattice: LatticeSpec, params: ActionParams) -> float:
    """Change of the action when only ``phi[site]`` is set to ``new_value``."""
    flat = np.ascontiguousarray(np.asarray(phi, dtype=np.float64).reshape(-1))
    x = int(np.ravel_multi_index(tuple(site), lattice.shape))
    return float(_delta_action(flat, x, float(new_value), neighbour_table(lattice), *_constants(lattice, params)))


def tune_width(lattice: LatticeSpec, params: ActionParams, seed: int = 0, target=(0.4, 0.6),
               pilot_sweeps: int = 200, max_rounds: int = 60) -> tuple[float, float]:
    """Rescale the proposal half-width on short pilot chains until acceptance lands in ``target``."""
    nbr = neighbour_table(lattice)
    consts = _constants(lattice, params)
    phi = np.zeros(lattice.volume)
    width = 1.0
    acc = 0.0
    for i in range(max_rounds):
        recs, acc, _ = _run_chain(phi, nbr, *consts, width, pilot_sweeps, 1, 1, seed + 7919 * (i + 1))
        phi = recs[-1].copy()
        if target[0] <= acc <= target[1]:
            return width, acc
        width *= np.clip(acc / 0.5, 0.25, 4.0) if acc > 0 else 0.25
    raise RuntimeError(f"proposal tuning did not converge (last acceptance {acc:.3f})")


def metropolis_sample(lattice: LatticeSpec, params: ActionParams, cfg: McmcConfig) -> McmcResult:
    width = cfg.proposal_width
    if width is None:
        width, _ = tune_width(lattice, params, cfg.seed, cfg.target_acceptance)
    nbr = neighbour_table(lattice)
    phi = np.zeros(lattice.volume)
    records, acc, flip_acc = _run_chain(phi, nbr, *_constants(lattice, params), float(width), cfg.burn_in, cfg.thin,
                                        cfg.n_records, cfg.seed)
    batch = SampleBatch(lattice, records.reshape((cfg.n_records,) + lattice.shape))
    return McmcResult(batch, float(acc), float(flip_acc), float(width))
