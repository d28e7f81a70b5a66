from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from numpy.polynomial import Polynomial
from scipy import integrate

from koiterfsi.coupling import (
    CouplingSettings,
    CouplingSolver,
    DisplacementHistory,
    FluidShellData,
    Model,
    StopReason,
    VelocityFrames,
    default_scenario,
    lift_initial_data,
    mollify_displacement,
    mollify_velocity,
    regularized_initial_displacement,
    spatial_multipliers,
    time_kernel,
)
from koiterfsi.errors import GapInversion, MarginViolated
from koiterfsi.geometry import SphereGeometry, ZonalField
from koiterfsi.operators import antipodal_bump

SPHERE = SphereGeometry()
SMALL = Model(SPHERE, n_grid=60, n_interior=4, n_boundary=4)
MU_GAMMA = math.cos(SPHERE.theta_gamma)


def clamped_field(coeffs) -> ZonalField:
    return ZonalField.from_polynomial(Polynomial([MU_GAMMA, -1.0]) ** 2 * Polynomial(coeffs), mu_cut=MU_GAMMA)


PROFILE = clamped_field([0.07, 0.05, 0.06])


def profile_values(model: Model = SMALL) -> np.ndarray:
    return model.grid.sample(PROFILE)


def history_from(amplitude, model: Model = SMALL, dt: float = 1e-3, horizon: float = 1.0) -> DisplacementHistory:
    times = np.arange(round(horizon / dt) + 1) * dt
    prof = profile_values(model)
    values = amplitude(times)[:, None] * prof
    return DisplacementHistory(0.0, dt, values, amplitude(np.array(0.0)) * prof)


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@pytest.mark.parametrize("eps", [0.2, 0.05])
def test_time_kernel_has_unit_mass_and_one_sided_support(eps):
    value, rate = time_kernel(eps)
    mass = integrate.quad(value, 0.5 * eps, eps)[0]
    assert mass == pytest.approx(1.0, abs=1e-12)
    assert integrate.quad(rate, 0.5 * eps, eps)[0] == pytest.approx(0.0, abs=1e-9)
    outside = np.array([0.0, 0.25 * eps, 0.5 * eps, eps, 2 * eps])
    assert np.all(value(outside) == 0.0)


def test_spatial_multipliers_match_quadrature():
    width = 0.3

    def bump(x):
        return math.exp(-1.0 / (1.0 - (x / width) ** 2)) if abs(x) < width else 0.0

    mass = integrate.quad(bump, -width, width)[0]
    m = spatial_multipliers(8, width)
    for k in (0, 1, 5, 8):
        expected = integrate.quad(lambda x: bump(x) * math.cos(k * x), -width, width)[0] / mass
        assert m[k] == pytest.approx(expected, abs=1e-10)


# ---------------------------------------------------------------------------
# displacement regularization
# ---------------------------------------------------------------------------


def test_regularized_constant_history_is_smoothed_profile_plus_shift():
    eps = 0.05
    reg = regularized_initial_displacement(SMALL, profile_values(), eps)
    full = SMALL.grid.full(profile_values())
    assert np.max(np.abs(reg - math.sqrt(eps) - full)) < 5e-3
    assert np.min(reg - full) > 0.0


@settings(max_examples=20, deadline=None)
@given(
    st.lists(st.floats(-0.3, 0.3), min_size=3, max_size=3),
    st.sampled_from([0.2, 0.05, 0.02]),
)
def test_regularized_initial_displacement_dominates_eta0(coeffs, eps):
    field = clamped_field(coeffs)
    eta0 = SMALL.grid.sample(field)
    reg = regularized_initial_displacement(SMALL, eta0, eps)
    assert np.all(reg >= SMALL.grid.full(eta0))


def test_regularized_rate_matches_finite_difference():
    reg = mollify_displacement(SMALL, history_from(lambda t: np.sin(3.0 * t)), 0.05)
    h = 1e-4
    for t in (0.2, 0.5371):
        fd = (reg(t + h)[0] - reg(t - h)[0]) / (2 * h)
        assert np.max(np.abs(fd - reg(t)[1])) < 1e-6


def test_regularization_error_decreases_with_eps():
    history = history_from(lambda t: 1.0 + np.sin(2.0 * t))
    exact = SMALL.grid.full(history(np.array(0.6)))
    errors = []
    for eps in (0.2, 0.1, 0.05, 0.025):
        value = mollify_displacement(SMALL, history, eps)(0.6)[0] - math.sqrt(eps)
        errors.append(np.max(np.abs(value - exact)))
    assert all(b < a for a, b in zip(errors, errors[1:]))


def test_regularization_sees_only_the_past():
    # changing the history after t - eps/2 leaves R delta(t) untouched
    a = history_from(lambda t: np.sin(3.0 * t))
    b_values = a.values.copy()
    b_values[480:] += 1.0
    b = DisplacementHistory(a.t0, a.dt, b_values, a.before)
    t = 0.5
    ra, rb = mollify_displacement(SMALL, a, 0.05)(t), mollify_displacement(SMALL, b, 0.05)(t)
    assert np.array_equal(ra[0], rb[0]) and np.array_equal(ra[1], rb[1])


# ---------------------------------------------------------------------------
# velocity regularization
# ---------------------------------------------------------------------------


def frames_of(fx, fz, h: float = 0.04, dt: float = 0.04, nt: int = 17, extent: float = 1.0) -> VelocityFrames:
    template = VelocityFrames.zeros(np.arange(nt) * dt, h, extent)
    tt, xx, zz = np.meshgrid(template.times, template.x, template.z, indexing="ij")
    return template.with_values(np.stack([fx(tt, xx, zz), fz(tt, xx, zz)]))


def test_velocity_mollifier_preserves_uniform_axial_flow():
    frames = frames_of(lambda t, x, z: 0 * x, lambda t, x, z: 1.0 + 0 * x)
    smooth = mollify_velocity(frames, 0.16)
    # interior in time and height, all the way to the axis thanks to the even mirror
    core = smooth.values[1, 4:-4, :15, 10:-10]
    assert np.max(np.abs(core - 1.0)) < 1e-12
    assert np.max(np.abs(smooth.values[0])) < 1e-14


def test_velocity_mollifier_is_linear():
    rng = np.random.default_rng(3)
    a = frames_of(lambda t, x, z: x * z, lambda t, x, z: np.cos(z) + t)
    b = a.with_values(rng.normal(size=a.values.shape))
    left = mollify_velocity(a.with_values(2.0 * a.values - 3.0 * b.values), 0.12)
    right = 2.0 * mollify_velocity(a, 0.12).values - 3.0 * mollify_velocity(b, 0.12).values
    assert np.max(np.abs(left.values - right)) < 1e-12


def test_velocity_mollifier_error_is_second_order():
    def fz(t, x, z):
        return z**2 + t**2

    frames = frames_of(lambda t, x, z: x, fz)
    i, j, k = 8, 12, 25  # t = 0.32, x = 0.5, z = 0.02
    exact = frames.values[:, i, j, k]
    errors = [np.abs(mollify_velocity(frames, eps).values[:, i, j, k] - exact) for eps in (0.32, 0.16)]
    assert errors[0][0] < 1e-12 and errors[1][0] < 1e-12  # linear and odd in x: reproduced
    assert 3.0 < errors[0][1] / errors[1][1] < 5.0


def test_velocity_frames_evaluate_linear_fields_exactly():
    frames = frames_of(lambda t, x, z: x * (1 + t), lambda t, x, z: 0.5 * z)
    rho, theta = np.array([0.3, 0.7, 0.9]), np.array([0.4, 1.6, 2.9])
    v_rho, v_theta = frames(0.1, rho, theta)
    vx, vz = rho * np.sin(theta) * 1.1, 0.5 * rho * np.cos(theta)
    assert np.allclose(v_rho, vx * np.sin(theta) + vz * np.cos(theta), atol=1e-12)
    assert np.allclose(v_theta, vx * np.cos(theta) - vz * np.sin(theta), atol=1e-12)


def test_frames_l2_norm_of_unit_field():
    frames = frames_of(lambda t, x, z: 1.0 + 0 * x, lambda t, x, z: 0 * x, nt=3)
    # cylinder of radius 1 and height 2, times the time span 0.08
    assert frames.l2_norm() == pytest.approx(math.sqrt(2.0 * math.pi * 0.08), rel=1e-12)


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------


def test_lift_of_rest_is_rest():
    lifted = lift_initial_data(SMALL, FluidShellData.at_rest(SMALL), 0.05)
    rho, theta = np.linspace(0.1, 1.2, 7), np.linspace(0.1, 3.0, 7)
    u_r, u_t = lifted.velocity(rho, theta)
    assert not np.any(u_r) and not np.any(u_t) and not np.any(lifted.rate)


def test_lift_rate_and_gap_velocity():
    eps = 0.05
    eta0 = profile_values()
    eta1 = 0.3 * antipodal_bump(SPHERE)(SMALL.grid.unknown_theta)

    def u0(rho, theta):
        return 0.2 * np.cos(theta) + 0 * rho, -0.2 * np.sin(theta) + 0 * rho

    lifted = lift_initial_data(SMALL, FluidShellData(eta0, eta1, u0), eps)
    cut = SMALL.grid.i_gamma + 1
    expected_rate = eta1 * ((1.0 + eta0) / (1.0 + lifted.regularized[cut:])) ** 2
    assert np.allclose(lifted.rate, expected_rate, rtol=1e-14)

    theta = SMALL.grid.unknown_theta[-5:]
    boundary = 1.0 + eta0[-5:]
    inside = lifted.velocity(0.5 * boundary, theta)
    assert np.allclose(inside[0], 0.2 * np.cos(theta)) and np.allclose(inside[1], -0.2 * np.sin(theta))
    gap_rho = 0.5 * (boundary + 1.0 + lifted.regularized[-5:])
    lift = lifted.velocity(gap_rho, theta)
    assert np.allclose(lift[0], boundary**2 * eta1[-5:] / gap_rho**2, rtol=1e-10)
    assert not np.any(lift[1])


def shell_rate_case():
    eta0 = profile_values()
    theta = SMALL.grid.unknown_theta
    bump = antipodal_bump(SPHERE)(theta)
    raw = np.cos(theta) - np.cos(SPHERE.theta_gamma)
    weights = SMALL.grid.quadrature_weights[1:] * (1.0 + eta0) ** 2
    # mean-free against gamma(eta0) with the Simpson weights
    eta1 = 0.3 * (raw - bump * np.sum(weights * raw) / np.sum(weights * bump))
    return eta0, eta1


def test_lifted_rate_stays_compatible():
    eta0, eta1 = shell_rate_case()
    lifted = lift_initial_data(SMALL, FluidShellData(eta0, eta1), 0.05)
    cut = SMALL.grid.i_gamma + 1
    weights = SMALL.grid.quadrature_weights[1:]
    assert abs(np.sum(weights * lifted.rate * (1.0 + lifted.regularized[cut:]) ** 2)) < 1e-8


def test_lifted_data_converge_as_eps_shrinks():
    eta0, eta1 = shell_rate_case()
    data = FluidShellData(eta0, eta1)
    weights = SMALL.grid.quadrature_weights[1:]
    theta = SMALL.grid.unknown_theta
    rate_gaps, velocity_gaps = [], []
    for eps in (0.2, 0.1, 0.05):
        lifted = lift_initial_data(SMALL, data, eps)
        rate_gaps.append(np.sqrt(np.sum(weights * (lifted.rate - eta1) ** 2)))
        # u0 is zero on Omega_eta0, so |u0^eps - u0|^2 is the layer field integrated over the gap
        top = 1.0 + lifted.regularized[SMALL.grid.i_gamma + 1 :]
        bottom = 1.0 + eta0
        layer = bottom**4 * eta1**2 * (1.0 / bottom - 1.0 / top)
        velocity_gaps.append(np.sqrt(np.sum(weights * layer)))
        rho = 0.5 * (top + bottom)
        assert np.allclose(lifted.velocity(rho, theta)[0], bottom**2 * eta1 / rho**2)
    assert rate_gaps[2] < rate_gaps[1] < rate_gaps[0]
    assert velocity_gaps[2] < velocity_gaps[1] < velocity_gaps[0]


def test_lift_raises_on_gap_inversion():
    spike = 3.0 * antipodal_bump(SPHERE, width=0.08)(SMALL.grid.unknown_theta)
    with pytest.raises(GapInversion):
        lift_initial_data(SMALL, FluidShellData(spike, np.zeros_like(spike)), 0.05)


# ---------------------------------------------------------------------------
# decoupled and coupled solves
# ---------------------------------------------------------------------------


def test_zero_data_gives_zero_solution():
    solver = CouplingSolver(SMALL, FluidShellData.at_rest(SMALL), CouplingSettings(window=0.05))
    result = solver.fixed_point_solve(solver.initial_history(), 0.05)
    assert result.iterations == 1 and result.log == [0.0]
    assert not np.any(result.solution.run.coefficients)
    assert not np.any(result.solution.frames.values)


def test_margin_violation_is_reported():
    solver = CouplingSolver(SMALL, FluidShellData.at_rest(SMALL))
    delta = np.full((101, SMALL.n_unknowns), 0.9)  # longer than eps, so R delta sees it
    with pytest.raises(MarginViolated):
        solver.solve_decoupled(solver.initial_history(), delta, None)


@pytest.fixture(scope="module")
def coupled_short():
    solver = CouplingSolver(SMALL, default_scenario(SMALL), CouplingSettings(window=0.05))
    return solver, solver.fixed_point_solve(solver.initial_history(), 0.1)


def test_fixed_point_converges_with_contraction(coupled_short):
    _, result = coupled_short
    assert result.log[-1] < 1e-6
    assert all(r < 1.0 for r in result.ratios)


def test_fixed_point_is_self_consistent(coupled_short):
    solver, result = coupled_short
    assert solver.self_map_residual(solver.initial_history(), result) < 1e-6


def test_fixed_point_energy_balance(coupled_short):
    run = coupled_short[1].solution.run
    balance = run.total_energy + np.concatenate([[0.0], np.cumsum(run.dissipation - run.work)])
    assert np.max(np.abs(balance - balance[0])) < 1e-13


def test_galerkin_solutions_form_a_cauchy_sequence():
    finals = []
    for n in (2, 4, 6):
        model = Model(SPHERE, n_grid=60, n_interior=n, n_boundary=n)
        solver = CouplingSolver(model, default_scenario(model))
        delta = np.zeros((151, model.n_unknowns))
        finals.append(solver.solve_decoupled(solver.initial_history(), delta, None).displacement[-1])
    gaps = [np.max(np.abs(b - a)) for a, b in zip(finals, finals[1:])]
    assert gaps[1] < gaps[0]


def test_continuation_reaches_horizon_with_continuous_junctions():
    solver = CouplingSolver(SMALL, default_scenario(SMALL), CouplingSettings(window=0.05))
    trajectory = solver.advance_until_collision(0.15)
    assert trajectory.stop_reason is StopReason.HORIZON
    assert trajectory.t_star == 0.15
    assert len(trajectory.junctions) == 2
    for jump in trajectory.junctions:
        assert jump["displacement"] < 1e-6 and jump["rate"] < 1e-6 and jump["velocity"] < 1e-6
    assert np.allclose(np.diff(trajectory.times), 1e-3)
    # the discrete energy law is exact inside windows; junctions add only their own jump
    balance = trajectory.total_energy + trajectory.cumulative_dissipation - trajectory.cumulative_work
    allowance = sum(jump["energy"] for jump in trajectory.junctions)
    assert allowance < 1e-10
    assert np.max(np.abs(balance - balance[0])) <= allowance + 1e-13
