from __future__ import annotations

import math

import numpy as np
import pytest
from numpy.polynomial import Polynomial

from koiterfsi.errors import IncompatibleFlux
from koiterfsi.geometry import ZonalField
from koiterfsi.stokes import (
    AxisymmetricBoundaryData,
    AxisymmetricStokesSolver,
    StreamSolution,
    angular_profile,
    axisymmetric_to_cartesian,
    finite_difference_divergence,
    finite_difference_laplacian,
    gradient_divergence,
    gradient_inner,
    lamb_fields,
    meridian_to_cartesian,
    separable_derivatives,
    solve_stokes,
    solve_stokes_3d,
    stream_gradient,
    stream_velocity,
)


def stokes_series_data(coeffs_low, coeffs_high, radius=1.0):
    """Trace of the exact Stokes flow sum_l (a_l r^(l+1) + b_l r^(l+3)) F_l(cos theta)."""

    def radial(l):
        return Polynomial.basis(l + 1) * coeffs_low[l - 1] + Polynomial.basis(l + 3) * coeffs_high[l - 1]

    degrees = range(1, len(coeffs_low) + 1)
    # g_r = psi_theta / (a^2 sin) = -sum R_l(a) F_l'(mu) / a^2
    gr_poly = sum((-radial(l)(radius) / radius**2) * angular_profile(l).deriv() for l in degrees)
    # g_theta = -psi_r / (a sin) = -sum R_l'(a) sin(theta) P_l'(mu) / a
    pt_poly = sum((-radial(l).deriv()(radius) / radius) * (angular_profile(l) // Polynomial([1, 0, -1])) for l in degrees)
    dp = pt_poly.deriv()
    d2p = dp.deriv()

    def gt(th):
        return np.sin(th) * pt_poly(np.cos(th))

    def gt1(th):
        s, c = np.sin(th), np.cos(th)
        return c * pt_poly(c) - s**2 * dp(c)

    def gt2(th):
        s, c = np.sin(th), np.cos(th)
        return -s * pt_poly(c) - 3 * s * c * dp(c) + s**3 * d2p(c)

    data = AxisymmetricBoundaryData(
        ZonalField.from_polynomial(gr_poly, radius), ZonalField(gt, gt1, gt2, radius), radius
    )

    def exact(r, th):
        return sum(separable_derivatives(radial(l), angular_profile(l), r, th) for l in degrees)

    return data, exact


def sample_points():
    r = np.linspace(0.1, 0.95, 6)
    th = np.linspace(0.2, 2.9, 7)
    R, T = np.meshgrid(r, th)
    return R.ravel(), T.ravel()


def test_stream_gradient_matches_cartesian_differences():
    d_fn = lambda r, th: (separable_derivatives(Polynomial([0, 0, 1, 0.5]), angular_profile(2), r, th)
                          + separable_derivatives(Polynomial([0, 0, 0.3]), angular_profile(1), r, th))

    def velocity(x):
        r = np.linalg.norm(x, axis=-1)
        th = np.arccos(x[..., 2] / r)
        ph = np.arctan2(x[..., 1], x[..., 0])
        u_r, u_t = stream_velocity(r, th, d_fn(r, th))
        return axisymmetric_to_cartesian(u_r, u_t, th, ph)

    r, th = np.array([0.4, 0.7, 0.9]), np.array([0.5, 1.4, 2.6])
    x = meridian_to_cartesian(r, th)
    grad = stream_gradient(r, th, d_fn(r, th))
    h = 1e-6
    cart = np.stack([(velocity(x + h * e) - velocity(x - h * e)) / (2 * h) for e in np.eye(3)], axis=-1)
    # rotate into (e_r, e_theta) in the meridian plane phi = 0
    e_r = np.stack([np.sin(th), 0 * th, np.cos(th)], -1)
    e_t = np.stack([np.cos(th), 0 * th, -np.sin(th)], -1)
    e_p = np.stack([0 * th, 1 + 0 * th, 0 * th], -1)
    comp = lambda a, b: np.einsum("ni,nij,nj->n", a, cart, b)  # noqa: E731
    np.testing.assert_allclose(grad[0], comp(e_r, e_r), atol=1e-7)
    np.testing.assert_allclose(grad[1], comp(e_r, e_t), atol=1e-7)
    np.testing.assert_allclose(grad[2], comp(e_t, e_r), atol=1e-7)
    np.testing.assert_allclose(grad[3], comp(e_t, e_t), atol=1e-7)
    np.testing.assert_allclose(grad[4], comp(e_p, e_p), atol=1e-7)
    assert np.max(np.abs(gradient_divergence(grad))) < 1e-12


def test_rigid_rotation_reproduced():
    omega = np.array([0.2, -0.7, 1.1])
    solution = solve_stokes(lambda q: np.cross(omega, q))
    x = np.random.default_rng(0).uniform(-0.5, 0.5, (30, 3))
    np.testing.assert_allclose(solution.velocity(x), np.cross(omega, x), atol=1e-12)


def test_normal_data_is_incompatible():
    with pytest.raises(IncompatibleFlux) as info:
        solve_stokes(lambda q: q / np.linalg.norm(q, axis=-1, keepdims=True), radius=1.0)
    assert info.value.defect == pytest.approx(4 * math.pi, rel=1e-10)
    radius = 1.5
    data = AxisymmetricBoundaryData.normal(ZonalField.constant(1.0, radius), radius)
    with pytest.raises(IncompatibleFlux) as info:
        AxisymmetricStokesSolver(radius, 3, 2).solve(data)
    assert info.value.defect == pytest.approx(4 * math.pi * radius**2, rel=1e-10)


def test_polynomial_stokes_flow_is_exact():
    data, exact = stokes_series_data([0.5, -0.3, 0.2], [1.0, 0.4, -0.1])
    solution = AxisymmetricStokesSolver(1.0, 4, 2).solve(data)
    r, th = sample_points()
    np.testing.assert_allclose(solution.velocity(r, th), stream_velocity(r, th, exact(r, th)), atol=1e-11)


def test_manufactured_solution_converges_in_degree():
    low = [0.3**l for l in range(1, 16)]
    high = [(-0.3) ** l for l in range(1, 16)]
    data, exact = stokes_series_data(low, high)
    r, th = sample_points()
    ref_r, ref_t = stream_velocity(r, th, exact(r, th))
    errors = []
    for degree in (3, 6, 9):
        solution = AxisymmetricStokesSolver(1.0, degree, 3).solve(data)
        u_r, u_t = solution.velocity(r, th)
        errors.append(max(np.max(np.abs(u_r - ref_r)), np.max(np.abs(u_t - ref_t))))
        # boundary mismatch is exact by construction
        b_r, b_t = solution.velocity(np.ones(5), th[:5])
        assert np.max(np.abs(b_r - data.radial(th[:5]))) < 1e-12
        assert np.max(np.abs(b_t - data.polar(th[:5]))) < 1e-12
    assert errors[1] < 0.2 * errors[0]
    assert errors[2] < 0.2 * errors[1]


def test_solver_is_linear():
    d1, _ = stokes_series_data([0.3, 0.1], [0.2, 0.0])
    d2 = AxisymmetricBoundaryData.normal(ZonalField.from_polynomial(Polynomial([0.0, 1.0])))
    solver = AxisymmetricStokesSolver(1.0, 6, 3)
    s1, s2, s12 = solver.solve(d1), solver.solve(d2), solver.solve(d1 + d2)
    r, th = sample_points()
    np.testing.assert_allclose(s12.derivatives(r, th), s1.derivatives(r, th) + s2.derivatives(r, th), atol=1e-10)


def test_divergence_vanishes_at_quadrature_nodes():
    data, _ = stokes_series_data([0.5, -0.3, 0.2], [1.0, 0.4, -0.1])
    solver = AxisymmetricStokesSolver(1.0, 5, 3)
    solution = solver.solve(data)
    q = solver.quadrature
    assert np.max(np.abs(gradient_divergence(solution.gradient(q.r, q.theta)))) < 1e-8


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_solution_minimizes_dirichlet_energy(seed):
    rng = np.random.default_rng(seed)
    data, _ = stokes_series_data(rng.normal(size=4), rng.normal(size=4))
    solver = AxisymmetricStokesSolver(1.0, 5, 3)
    solution = solver.solve(data)
    best = solver.dirichlet_energy(solution)
    for _ in range(5):
        coeffs = solution.coefficients + 0.1 * rng.normal(size=len(solution.coefficients))
        competitor = StreamSolution(solution.lift, solution.modes, coeffs, 1.0)
        assert best <= solver.dirichlet_energy(competitor)
    lift_only = StreamSolution(solution.lift, solution.modes, 0 * solution.coefficients, 1.0)
    assert best <= solver.dirichlet_energy(lift_only)


def clamped_zero_flux_profile(theta_gamma=math.pi / 6):
    mu_g = math.cos(theta_gamma)
    square = Polynomial([mu_g, -1.0]) ** 2
    i0 = square.integ()
    i1 = (square * Polynomial([0.0, 1.0])).integ()
    c0 = -(i1(mu_g) - i1(-1.0)) / (i0(mu_g) - i0(-1.0))
    return ZonalField.from_polynomial(square * Polynomial([c0, 1.0]), mu_cut=mu_g)


def test_lift_trace_exact_for_clamped_profile():
    field = clamped_zero_flux_profile()
    data = AxisymmetricBoundaryData.normal(field)
    assert abs(data.flux()) < 1e-12
    solution = AxisymmetricStokesSolver(1.0, 6, 3).solve(data)
    th = np.linspace(0.05, 3.1, 40)
    u_r, u_t = solution.velocity(np.ones_like(th), th)
    np.testing.assert_allclose(u_r, field(th), atol=1e-12)
    np.testing.assert_allclose(u_t, 0.0, atol=1e-12)


def test_lamb_fields_solve_stokes():
    rng = np.random.default_rng(5)
    x = rng.uniform(-0.4, 0.4, (10, 3))
    for field in lamb_fields(3):
        assert np.max(np.abs(finite_difference_divergence(field, x))) < 1e-8
        if field.kind != "pressure":
            # velocity families with constant pressure are harmonic
            assert np.max(np.abs(finite_difference_laplacian(field, x))) < 1e-4
        else:
            lap = finite_difference_laplacian(field, x)
            np.testing.assert_allclose(lap, field.potential.gradient(x), atol=1e-4)


def test_lamb_linearity():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(2, 3))
    q = lambda w: (lambda p: np.cross(w, p))  # noqa: E731
    sa, sb = solve_stokes_3d(q(a)), solve_stokes_3d(q(b))
    sab = solve_stokes_3d(q(a + b))
    x = rng.uniform(-0.5, 0.5, (10, 3))
    np.testing.assert_allclose(sab.velocity(x), sa.velocity(x) + sb.velocity(x), atol=1e-10)


def test_gradient_inner_is_frobenius():
    g = np.arange(5.0)[:, None] * np.ones((5, 2))
    np.testing.assert_allclose(gradient_inner(g, g), [30.0, 30.0])
