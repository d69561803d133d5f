import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from phi4flow.lattice import (
    ActionParams,
    ContractError,
    LatticeSpec,
    action_eval,
    action_grad,
    distance_grid,
    periodic_distance,
)


def brute_force_action(phi, lat, params):
    """Double loop over sites and forward bonds."""
    a = lat.a
    kin = pot = 0.0
    for x in itertools.product(range(lat.N), repeat=lat.D):
        for mu in range(lat.D):
            y = list(x)
            y[mu] = (y[mu] + 1) % lat.N
            kin += (phi[tuple(y)] - phi[x]) ** 2
        pot += params.m2 * phi[x] ** 2 + params.g * phi[x] ** 4
    return a**lat.D * (kin / a**2 + pot)


def test_zero_field_has_zero_action():
    lat = LatticeSpec(2, 5, 3.0)
    assert float(action_eval(np.zeros(lat.shape), lat, ActionParams(-4, 1))) == 0.0


def test_constant_field_closed_form():
    lat = LatticeSpec(1, 4, 4.0)
    v = 1.3
    S = float(action_eval(np.full(4, v), lat, ActionParams(-4.0, 1.0)))
    assert S == pytest.approx(4 * (-4 * v**2 + v**4), rel=1e-14)


def test_action_matches_brute_force(rng):
    lat = LatticeSpec(2, 3, 1.7)
    params = ActionParams(-2.5, 0.8)
    phi = rng.normal(size=lat.shape)
    assert float(action_eval(phi, lat, params)) == pytest.approx(brute_force_action(phi, lat, params), rel=1e-12)


def test_action_batched(rng):
    lat = LatticeSpec(1, 6, 2.0)
    params = ActionParams(1.0, 0.5)
    phi = rng.normal(size=(4, 6))
    S = np.asarray(action_eval(phi, lat, params))
    assert S.shape == (4,)
    for i in range(4):
        assert S[i] == pytest.approx(brute_force_action(phi[i], lat, params), rel=1e-12)


def test_length_mismatch_is_contract_error():
    lat = LatticeSpec(1, 4, 4.0)
    with pytest.raises(ContractError):
        action_eval(np.zeros(5), lat, ActionParams(0, 0))


def test_negative_coupling_rejected():
    with pytest.raises(ContractError):
        ActionParams(1.0, -0.1)


def test_gradient_closed_forms():
    lat = LatticeSpec(2, 4, 3.0)
    params = ActionParams(-4.0, 1.0)
    assert np.all(np.asarray(action_grad(np.zeros(lat.shape), lat, params)) == 0)
    v = 0.7
    grad = np.asarray(action_grad(np.full(lat.shape, v), lat, params))
    np.testing.assert_allclose(grad, lat.a**2 * (2 * params.m2 * v + 4 * params.g * v**3), rtol=1e-13)


@pytest.mark.parametrize("D,N", [(1, 5), (2, 3), (1, 2)])
def test_gradient_matches_finite_differences(rng, D, N):
    lat = LatticeSpec(D, N, 2.3)
    params = ActionParams(-4.0, 1.0)
    phi = rng.normal(size=lat.shape)
    grad = np.asarray(action_grad(phi, lat, params))
    h = 1e-6
    for x in lat.sites():
        e = np.zeros(lat.shape)
        e[x] = h
        fd = (float(action_eval(phi + e, lat, params)) - float(action_eval(phi - e, lat, params))) / (2 * h)
        assert fd == pytest.approx(grad[x], rel=1e-6, abs=1e-8)


def test_reverse_mode_uses_closed_form_gradient(rng):
    import jax

    lat = LatticeSpec(2, 4, 3.0)
    params = ActionParams(-1.0, 2.0)
    phi = rng.normal(size=(3,) + lat.shape)
    g = jax.grad(lambda p: action_eval(p, lat, params).sum())(phi)
    np.testing.assert_allclose(np.asarray(g), np.asarray(action_grad(phi, lat, params)), rtol=1e-13)


def _isometries(lat, rng):
    """Random translation, axis permutation and reflection of a field."""
    shift = tuple(rng.integers(0, lat.N, size=lat.D))
    perm = tuple(rng.permutation(lat.D))
    flips = [ax for ax in range(lat.D) if rng.random() < 0.5]

    def apply(phi):
        out = np.roll(phi, shift, axis=tuple(range(lat.D)))
        out = np.transpose(out, perm)
        for ax in flips:
            out = np.flip(out, axis=ax)
        return out

    return apply


@given(seed=st.integers(0, 2**32 - 1), D=st.sampled_from([1, 2, 3]), N=st.integers(2, 6))
def test_action_invariant_under_isometries_and_sign(seed, D, N):
    rng = np.random.default_rng(seed)
    lat = LatticeSpec(D, N, 1.0 + rng.random() * 5)
    params = ActionParams(rng.normal() * 3, rng.random() * 2)
    phi = rng.normal(size=lat.shape)
    S = float(action_eval(phi, lat, params))
    g = _isometries(lat, rng)
    assert float(action_eval(g(phi), lat, params)) == pytest.approx(S, rel=1e-12, abs=1e-12)
    assert float(action_eval(-phi, lat, params)) == pytest.approx(S, rel=1e-12, abs=1e-12)


@given(D=st.sampled_from([1, 2]), v=st.floats(-2, 2), L=st.floats(0.5, 8))
def test_constant_field_refinement_scaling(D, v, L):
    # a constant field has no gradient term; the potential sum is a^D N^D = L^D times per-site value
    params = ActionParams(-4.0, 1.0)
    for N in (4, 8):
        lat = LatticeSpec(D, N, L)
        S = float(action_eval(np.full(lat.shape, v), lat, params))
        assert S == pytest.approx(L**D * (params.m2 * v**2 + params.g * v**4), rel=1e-12, abs=1e-12)


def test_periodic_distance_examples():
    assert periodic_distance((0, 0, 0), LatticeSpec(3, 4, 2.0)) == 0.0
    assert periodic_distance((7,), LatticeSpec(1, 8, 4.0)) == pytest.approx(0.5)
    assert periodic_distance((2, 3), LatticeSpec(2, 4, 4.0)) == pytest.approx(np.sqrt(5.0))
    with pytest.raises(ContractError):
        periodic_distance((4,), LatticeSpec(1, 4, 4.0))


def test_distance_grid_agrees_with_periodic_distance():
    lat = LatticeSpec(2, 5, 3.0)
    grid = distance_grid(lat)
    for x in lat.sites():
        assert grid[x] == pytest.approx(periodic_distance(x, lat), rel=1e-15)


def test_lattice_spec_validation():
    lat = LatticeSpec(2, 8, 4.0)
    assert lat.a * lat.N == pytest.approx(lat.L, rel=1e-15)
    assert lat.volume == 64
    with pytest.raises(ContractError):
        LatticeSpec(1, 1, 4.0)
    with pytest.raises(ContractError):
        LatticeSpec(0, 4, 4.0)
