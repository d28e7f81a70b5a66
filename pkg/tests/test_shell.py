from __future__ import annotations

import math
from itertools import product

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.polynomial import Polynomial

from koiterfsi.geometry import SphereGeometry, ZonalField
from koiterfsi.shell import (
    ClampedZonalGrid,
    ElasticParams,
    FlatStripGrid,
    KoiterShell,
    SymmetricSurfaceTensor,
    chart_strains,
    coercivity_constant,
    elasticity_contract,
    koiter_form,
    koiter_gradient,
    linearized_strains,
)

UNIT = ElasticParams(1.0, 1.0, 1.0)
SPHERE = SphereGeometry()


def four_index_contract(params, a, b):
    """Direct sum of C_abcd A_ab B_cd with C = c1 g g + 2 mu (g g + g g)."""
    delta = np.eye(2)
    total = 0.0
    for i, j, k, l in product(range(2), repeat=4):
        c = params.c1 * delta[i, j] * delta[k, l] + 2 * params.mu * (
            delta[i, k] * delta[j, l] + delta[i, l] * delta[j, k]
        )
        total += c * a[i, j] * b[k, l]
    return total


def clamped_profile(coeffs, scale=0.1):
    mu_gamma = math.cos(SPHERE.theta_gamma)
    poly = scale * Polynomial([mu_gamma, -1.0]) ** 2 * Polynomial(coeffs)
    return ZonalField.from_polynomial(poly, mu_cut=mu_gamma)


def test_contract_identity_against_four_index_sum():
    ident = SymmetricSurfaceTensor.identity()
    value = float(elasticity_contract(UNIT, ident, ident))
    assert value == pytest.approx(40 / 3, rel=1e-14)
    assert value == pytest.approx(four_index_contract(UNIT, np.eye(2), np.eye(2)), rel=1e-14)


def test_contract_traceless_with_identity_vanishes():
    a = SymmetricSurfaceTensor(np.array(1.3), np.array(0.4), np.array(-1.3))
    assert float(elasticity_contract(UNIT, a, SymmetricSurfaceTensor.identity())) == 0.0


@settings(max_examples=50, deadline=None)
@given(
    st.lists(st.floats(-5, 5), min_size=6, max_size=6),
    st.floats(0.0, 3.0),
    st.floats(0.1, 3.0),
)
def test_contract_symmetric_and_matches_four_index(values, lam, mu):
    params = ElasticParams(lam, mu, 1.0)
    a = SymmetricSurfaceTensor(*map(np.array, values[:3]))
    b = SymmetricSurfaceTensor(*map(np.array, values[3:]))
    ab = float(elasticity_contract(params, a, b))
    assert ab == pytest.approx(float(elasticity_contract(params, b, a)), abs=1e-14 * (1 + abs(ab)))
    assert ab == pytest.approx(four_index_contract(params, a.as_matrix(), b.as_matrix()), abs=1e-12)


def test_strains_of_zero_vanish():
    grid = ClampedZonalGrid(SPHERE, 60)
    sigma, xi = linearized_strains(grid, np.zeros(grid.n_unknowns))
    for tensor in (sigma, xi):
        assert not np.any(tensor.as_matrix())


def test_flat_strains_reduce_to_hessian():
    grid = FlatStripGrid(64)
    eta = grid.sample(np.sin)
    sigma, xi = linearized_strains(grid, eta)
    assert not np.any(sigma.as_matrix())
    np.testing.assert_allclose(xi.xx, -np.sin(grid.x), atol=1e-5)
    assert not np.any(xi.yy)


def test_sphere_constant_field_strains():
    sigma, xi = chart_strains(SPHERE, lambda th, ph: np.full_like(th, 0.3), np.array([0.7, 1.9]), np.array([0.2, 2.0]))
    ident = np.broadcast_to(np.eye(2), (2, 2, 2))
    np.testing.assert_allclose(sigma.as_matrix(), 0.3 * ident, atol=1e-12)
    np.testing.assert_allclose(xi.as_matrix(), -0.3 * ident, atol=1e-8)


def test_zonal_strains_match_chart_differences():
    eta = clamped_profile([1.0, 0.3])
    grid = ClampedZonalGrid(SPHERE, 180)
    sigma, xi = linearized_strains(grid, grid.sample(eta))
    sel = slice(10, -10, 17)
    theta = grid.theta[sel]
    ref_sigma, ref_xi = chart_strains(SPHERE, lambda th, ph: eta(th), theta, np.zeros_like(theta))
    np.testing.assert_allclose(sigma.xx[sel], ref_sigma.xx, atol=1e-12)
    np.testing.assert_allclose(xi.xx[sel], ref_xi.xx, atol=1e-6)
    np.testing.assert_allclose(xi.yy[sel], ref_xi.yy, atol=1e-6)


def test_zonal_bending_strain_converges_at_fourth_order():
    eta = clamped_profile([1.0, -0.5, 0.2])
    errors = []
    for n in (60, 120):
        grid = ClampedZonalGrid(SPHERE, n)
        _, xi = linearized_strains(grid, grid.sample(eta))
        # one ulp inside M so the clamp node sees the one-sided limit
        th = np.maximum(grid.theta, np.nextafter(SPHERE.theta_gamma, 4.0))
        exact_tt = eta.d2(th) - eta(th)
        errors.append(np.max(np.abs(xi.xx - exact_tt)))
    assert errors[0] / errors[1] > 10


def test_koiter_form_zero_and_symmetry():
    grid = ClampedZonalGrid(SPHERE, 60)
    rng = np.random.default_rng(0)
    b = rng.normal(size=grid.n_unknowns)
    assert koiter_form(UNIT, grid, np.zeros_like(b), b) == 0.0
    for _ in range(10):
        eta, b = rng.normal(size=(2, grid.n_unknowns))
        kab = koiter_form(UNIT, grid, eta, b)
        assert kab == pytest.approx(koiter_form(UNIT, grid, b, eta), abs=1e-12 * (1 + abs(kab)))
        assert koiter_form(UNIT, grid, eta, eta) >= 0


def test_flat_strip_energy_closed_form():
    grid = FlatStripGrid(256)
    eta = grid.sample(np.sin)
    assert koiter_form(UNIT, grid, eta, eta) == pytest.approx(8 * math.pi / 9, rel=1e-6)


@pytest.mark.parametrize("k", [1, 2, 3])
def test_flat_strip_gradient_is_scaled_bilaplacian(k):
    grid = FlatStripGrid(256)
    eta = grid.sample(lambda x: np.sin(k * x))
    grad = koiter_gradient(UNIT, grid, eta)
    assert UNIT.bending_constant == pytest.approx(16 / 9)
    np.testing.assert_allclose(grad, 16 / 9 * k**4 * np.sin(k * grid.x), atol=5e-3 * k**4)


def test_gradient_of_zero_vanishes():
    grid = ClampedZonalGrid(SPHERE, 60)
    assert not np.any(koiter_gradient(UNIT, grid, np.zeros(grid.n_unknowns)))


def test_gradient_adjoint_identity():
    grid = ClampedZonalGrid(SPHERE, 90)
    shell = KoiterShell(UNIT, grid)
    rng = np.random.default_rng(1)
    for _ in range(20):
        eta, b = rng.normal(size=(2, grid.n_unknowns))
        lhs = shell.mass_inner(shell.gradient(eta), b)
        rhs = 2 * shell.energy(eta, b)
        assert lhs == pytest.approx(rhs, rel=1e-10, abs=1e-10)


def test_gradient_is_linear():
    grid = ClampedZonalGrid(SPHERE, 60)
    shell = KoiterShell(UNIT, grid)
    rng = np.random.default_rng(2)
    a, b = rng.normal(size=(2, grid.n_unknowns))
    combo = shell.gradient(2.0 * a - 3.0 * b)
    np.testing.assert_allclose(combo, 2.0 * shell.gradient(a) - 3.0 * shell.gradient(b), rtol=1e-12, atol=1e-9)


def test_membrane_energy_vanishes_on_flat_strip():
    shell = KoiterShell(UNIT, FlatStripGrid(32))
    assert not np.any(shell.membrane_stiffness)


def test_coercivity_positive_and_grid_stable():
    values = [coercivity_constant(UNIT, ClampedZonalGrid(SPHERE, n)) for n in (60, 120, 240)]
    assert all(v > 0 for v in values)
    assert abs(values[1] - values[2]) / values[2] < 0.15
    assert abs(values[0] - values[1]) / values[1] < 0.15


def test_coercivity_monotone_in_thickness():
    grid = ClampedZonalGrid(SPHERE, 60)
    thin = coercivity_constant(ElasticParams(1.0, 1.0, 0.5), grid)
    thick = coercivity_constant(ElasticParams(1.0, 1.0, 1.0), grid)
    assert thick >= thin


def test_energy_bounded_below_by_coercivity():
    grid = ClampedZonalGrid(SPHERE, 60)
    shell = KoiterShell(UNIT, grid)
    c0 = shell.coercivity_constant()
    rng = np.random.default_rng(3)
    for _ in range(100):
        eta = rng.normal(size=grid.n_unknowns) * rng.uniform(0.01, 1.0)
        norm2 = float(eta @ grid.h2_gram @ eta)
        assert shell.energy(eta) >= c0 * norm2 * (1 - 1e-10)


def test_clamped_profile_energy_converges():
    eta = clamped_profile([1.0, 0.4])
    energies = []
    for n in (60, 120, 240):
        grid = ClampedZonalGrid(SPHERE, n)
        energies.append(koiter_form(UNIT, grid, grid.sample(eta), grid.sample(eta)))
    assert abs(energies[2] - energies[1]) < 0.2 * abs(energies[1] - energies[0]) + 1e-12
