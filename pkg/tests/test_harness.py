from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np
import pytest
from click.testing import CliRunner
from hypothesis import given, settings, strategies as st
from numpy.polynomial import Polynomial

from fields import clamped_field
from koiterfsi.coupling import CouplingSettings, CouplingSolver, FluidShellData, Model, default_scenario
from koiterfsi.errors import ConfigError, InequalityViolated
from koiterfsi.geometry import SphereGeometry, ZonalField
from koiterfsi.harness.cli import main
from koiterfsi.harness.config import DEFAULTS, ForcingSpec, RunConfig, compatible_rate_profile, parse_config
from koiterfsi.harness.diagnostics import (
    RadialDomainFamily,
    boundary_flux,
    domain_integral,
    korn_defect,
    korn_report,
    reynolds_defect,
)
from koiterfsi.harness.ledger import COLUMNS, EnergyLedger, energy_ledger, gronwall_check
from koiterfsi.operators import StreamField, extend_boundary, mean_correct
from koiterfsi.stokes import angular_profile, separable_derivatives

ROOT = Path(__file__).resolve().parents[1]
DEFAULT_CFG = ROOT / "configs" / "default.cfg"
SPHERE = SphereGeometry()
SMALL = Model(SPHERE, n_grid=60, n_interior=4, n_boundary=4)
QUICK = ["shell.grid=60", "galerkin.n_modes_surface=4", "galerkin.n_modes_interior=4", "run.horizon=0.06", "run.restart_window=0.03"]


# ---------------------------------------------------------------------------
# ledger
# ---------------------------------------------------------------------------


def test_ledger_of_zero_run_is_zero():
    solver = CouplingSolver(SMALL, FluidShellData.at_rest(SMALL), CouplingSettings(window=0.05))
    ledger = energy_ledger(solver.advance_until_collision(0.05))
    rows = np.array(ledger.rows())
    assert rows.shape == (51, len(COLUMNS))
    assert not np.any(rows[:, 1:])
    report = gronwall_check(ledger)
    assert report.holds and np.all(report.margin == 0.0)


@settings(max_examples=30, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 1), st.floats(0, 1), st.floats(0, 1)), min_size=2, max_size=12))
def test_ledger_residual_is_integrated_identity(levels):
    ledger = EnergyLedger()
    dissipation = work = 0.0
    for i, (a, b, c) in enumerate(levels):
        ledger.append(0.1 * i, a, b, c, dissipation, work)
        dissipation += c
        work += a - b
    total = ledger.total
    expected = total + ledger.column("D_visc_cum") - total[0] - ledger.column("W_ext_cum")
    assert np.allclose(ledger.residuals, expected, atol=1e-15)
    assert np.all(np.diff(ledger.column("D_visc_cum")) >= 0.0)


def test_ledger_rejects_decreasing_dissipation_and_time():
    ledger = EnergyLedger()
    ledger.append(0.0, 1.0, 0.0, 0.0, 0.5, 0.0)
    with pytest.raises(ValueError):
        ledger.append(0.1, 1.0, 0.0, 0.0, 0.4, 0.0)
    with pytest.raises(ValueError):
        ledger.append(0.0, 1.0, 0.0, 0.0, 0.6, 0.0)
    with pytest.raises(ValueError):
        ledger.append(0.2, math.nan, 0.0, 0.0, 0.6, 0.0)


def test_gronwall_reports_worst_time():
    ledger = EnergyLedger()
    ledger.append(0.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    ledger.append(0.5, 1.2, 0.0, 0.0, 0.0, 0.0)
    ledger.append(1.0, 1.0, 0.0, 0.0, 0.0, 0.0)
    with pytest.raises(InequalityViolated) as info:
        gronwall_check(ledger)
    assert info.value.worst_time == 0.5
    assert info.value.slack == pytest.approx(-0.2 + 1e-3)
    assert gronwall_check(ledger, horizon=0.25).holds


@pytest.fixture(scope="module")
def free_decay():
    """Shell released with a compatible rate, no loads."""
    eta1 = 0.2 * compatible_rate_profile(SMALL, np.zeros(SMALL.n_unknowns))
    data = FluidShellData(np.zeros(SMALL.n_unknowns), eta1)
    return CouplingSolver(SMALL, data, CouplingSettings(window=0.05)).advance_until_collision(0.1)


def test_unforced_energy_is_non_increasing(free_decay):
    ledger = energy_ledger(free_decay)
    total = ledger.total + ledger.column("D_visc_cum")
    assert ledger.total[0] > 1e-3
    assert np.all(np.diff(total) <= 1e-10)
    assert np.all(np.diff(ledger.total) <= 1e-10)
    assert gronwall_check(ledger).holds


def test_balance_residual_order_without_energy_correction():
    data = FluidShellData.at_rest(SMALL, surface_force=lambda t, theta: 2.0 * math.sin(2 * math.pi * t) * np.exp(-((theta - math.pi) ** 2)))
    residuals, corrected = [], []
    for dt in (4e-3, 2e-3):
        for correct, sink in ((False, residuals), (True, corrected)):
            settings_ = CouplingSettings(dt=dt, window=0.2, energy_correction=correct)
            result = CouplingSolver(SMALL, data, settings_).fixed_point_solve(CouplingSolver(SMALL, data, settings_).initial_history(), 0.2)
            ledger = energy_ledger(result.solution.run)
            sink.append(np.max(np.abs(ledger.residuals)) / ledger.scale())
    assert residuals[0] / residuals[1] >= 3.0
    assert max(corrected) < 1e-12


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def test_expanding_ball_volume_rate():
    family = RadialDomainFamily.expanding_ball(1.0, 0.1)
    one = lambda t, r, th: np.ones_like(r)  # noqa: E731
    assert domain_integral(family, one, 1.0) == pytest.approx(4.0 * math.pi * 1.1**3 / 3.0, rel=1e-13)
    assert boundary_flux(family, one, 1.0) == pytest.approx(4.0 * math.pi * 1.1**2 * 0.1, rel=1e-13)
    residual, scale = reynolds_defect(family, one, None, np.array([0.0, 0.5, 1.0]), 1e-3)
    assert np.max(np.abs(residual) / scale) < 1e-3


def test_static_domain_reduces_to_time_derivative():
    family = RadialDomainFamily(SPHERE, lambda t, th: np.zeros_like(th), lambda t, th: np.zeros_like(th))
    xi = lambda t, r, th: np.sin(3 * t) * r**2  # noqa: E731
    xi_t = lambda t, r, th: 3 * np.cos(3 * t) * r**2  # noqa: E731
    errors = [abs(reynolds_defect(family, xi, xi_t, np.array([0.4]), dt)[0][0]) for dt in (0.02, 0.01)]
    assert 3.5 < errors[0] / errors[1] < 4.5


def test_oscillating_hanzawa_family_is_second_order():
    family = RadialDomainFamily.oscillating(SPHERE, clamped_field([0.4, 0.2]).scaled(0.5), lambda t: 0.2 * math.sin(t), lambda t: 0.2 * math.cos(t))
    xi = lambda t, r, th: r**2 * np.cos(th) + t  # noqa: E731
    xi_t = lambda t, r, th: np.ones_like(r)  # noqa: E731
    errors = [np.max(np.abs(reynolds_defect(family, xi, xi_t, np.array([0.3, 1.0]), dt)[0])) for dt in (0.02, 0.01)]
    assert 3.5 < errors[0] / errors[1] < 4.5


def test_korn_defect_of_zero_field():
    zero = StreamField.single(lambda r, th: np.zeros((6,) + np.shape(r)))
    assert korn_defect(SPHERE, zero, ZonalField.constant(0.0)) == 0.0


def test_korn_defect_matches_boundary_term_for_normal_trace():
    # the integral of (grad u)^T : grad u equals the boundary flux of (u . grad) u, not zero
    rng = np.random.default_rng(100)
    eta = clamped_field(rng.normal(size=4))
    eta = eta.scaled(0.3 / eta.sup_norm())
    b = mean_correct(SPHERE, clamped_field(rng.normal(size=4)), eta)
    report = korn_report(SPHERE, extend_boundary(SPHERE, b, eta), eta, n_theta=192, n_rho=96)
    assert report.defect == pytest.approx(report.boundary_ratio, abs=2e-3)
    assert abs(report.boundary_ratio) > 1e-3


def test_korn_on_undeformed_sphere_equals_closed_form():
    # on the unit sphere the boundary term is -2 int b^2 dA
    b = mean_correct(SPHERE, clamped_field([1.0, 0.5]), ZonalField.constant(0.0))
    ext = extend_boundary(SPHERE, b, ZonalField.constant(0.0))
    report = korn_report(SPHERE, ext, ZonalField.constant(0.0), n_theta=192, n_rho=96)
    th = np.linspace(0.0, math.pi, 4001)
    closed = -2.0 * 2.0 * math.pi * np.trapezoid(b(th) ** 2 * np.sin(th), th)
    assert report.boundary == pytest.approx(closed, rel=1e-4)
    assert report.transposed == pytest.approx(closed, rel=2e-2)


def test_korn_negative_control_with_tangential_trace():
    swirl = StreamField.single(lambda r, th: separable_derivatives(Polynomial([0, 0, 0, 0, 1.0]), angular_profile(1), r, th))
    report = korn_report(SPHERE, swirl, ZonalField.constant(0.0), n_theta=96, n_rho=48)
    assert abs(report.defect) > 0.05
    assert report.defect == pytest.approx(report.boundary_ratio, abs=5e-3)


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_shipped_configs_parse():
    for name in ("default.cfg", "collision.cfg"):
        config = RunConfig.load(ROOT / "configs" / name)
        assert set(config.values) == set(DEFAULTS)


def test_default_config_is_default_scenario():
    config = RunConfig.load(DEFAULT_CFG)
    model = config.model()
    data, reference = config.data(model), default_scenario(model)
    theta = model.grid.unknown_theta
    for t in (0.1, 0.37):
        assert np.allclose(data.surface_force(t, theta), reference.surface_force(t, theta), atol=1e-15)
    assert config.settings() == CouplingSettings()


@pytest.mark.parametrize(
    "text, key",
    [
        ("coupling.epsilon = 0.1\nbogus.key = 1", "bogus.key"),
        ("coupling.relax = 1.5", "coupling.relax"),
        ("galerkin.dt = fast", "galerkin.dt"),
        ("forcing.g = pulse(1, 2)", "forcing.g"),
        ("forcing.f = table(x.csv)", "forcing.f"),
    ],
)
def test_malformed_configs_name_the_key(text, key):
    with pytest.raises(ConfigError) as info:
        RunConfig.from_text(text)
    assert info.value.key == key


def test_config_comments_and_overrides():
    values = parse_config("# comment\ncoupling.epsilon = 0.1  # trailing\n\n")
    assert values["coupling.epsilon"] == 0.1
    config = RunConfig.from_text("coupling.epsilon = 0.1", ["coupling.epsilon=0.2", "run.horizon = 0.5"])
    assert config["coupling.epsilon"] == 0.2 and config.horizon == 0.5


def test_forcing_presets():
    assert ForcingSpec.parse("forcing.g", "none").kind == "none"
    steady = ForcingSpec.parse("forcing.g", "pulse(-2, 0, 3.0, 0.5)").time_factor()
    assert steady(0.0) == steady(0.7) == -2.0
    wave = ForcingSpec.parse("forcing.g", "pulse(1, 1, 3.0, 0.5)").time_factor()
    assert wave(0.25) == pytest.approx(1.0)


def test_tabulated_surface_load(tmp_path):
    model = SMALL
    rows = ["t,node,value"]
    for t in (0.0, 1.0):
        rows += [f"{t},{j},{t * j}" for j in range(model.n_unknowns)]
    (tmp_path / "loads.csv").write_text("\n".join(rows) + "\n")
    (tmp_path / "run.cfg").write_text("shell.grid = 60\nforcing.g = table(loads.csv)\n")
    config = RunConfig.load(tmp_path / "run.cfg")
    g = config.data(model).surface_force
    assert np.allclose(g(0.5, model.grid.unknown_theta), 0.5 * np.arange(model.n_unknowns))


# ---------------------------------------------------------------------------
# command line
# ---------------------------------------------------------------------------


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args])


def test_cli_run_writes_artifacts(tmp_path):
    overrides = [x for o in QUICK for x in ("--override", o)]
    result = invoke("run", "--config", DEFAULT_CFG, *overrides, "--output-dir", tmp_path)
    assert result.exit_code == 0, result.output
    assert {p.name for p in tmp_path.iterdir()} == {"energy.csv", "shell_snapshots.csv", "summary.json"}
    header = (tmp_path / "energy.csv").read_text().splitlines()[0]
    assert header == ",".join(COLUMNS)
    assert (tmp_path / "shell_snapshots.csv").read_text().splitlines()[0] == "t,theta,eta,eta_t"
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["stop_reason"] == "HORIZON" and summary["t_star"] == pytest.approx(0.06)
    assert summary["fp_iterations"] and all(n <= 25 for n in summary["fp_iterations"])
    assert summary["gronwall"]["holds"] and summary["junctions_continuous"]


def test_cli_runs_are_byte_identical(tmp_path):
    overrides = [x for o in QUICK for x in ("--override", o)]
    for name in ("a", "b"):
        assert invoke("run", "--config", DEFAULT_CFG, *overrides, "--output-dir", tmp_path / name).exit_code == 0
    for artifact in ("energy.csv", "shell_snapshots.csv", "summary.json"):
        assert (tmp_path / "a" / artifact).read_bytes() == (tmp_path / "b" / artifact).read_bytes()


def test_cli_energy_values_have_twelve_significant_digits(tmp_path):
    overrides = [x for o in QUICK for x in ("--override", o)]
    invoke("run", "--config", DEFAULT_CFG, *overrides, "--output-dir", tmp_path)
    row = (tmp_path / "energy.csv").read_text().splitlines()[-1].split(",")
    mantissa = row[1].split("e")[0].replace(".", "").replace("-", "").lstrip("0")
    assert len(mantissa) <= 12
    assert float(row[1]) == pytest.approx(float(format(float(row[1]), ".12g")))


def test_cli_config_error_exit_code(tmp_path):
    bad = tmp_path / "bad.cfg"
    bad.write_text("coupling.epsilon = 0.05\nshell.thickness = 2\n")
    result = invoke("run", "--config", bad, "--output-dir", tmp_path / "out")
    assert result.exit_code == 1
    assert "shell.thickness" in result.output


def test_cli_diverged_exit_code(tmp_path):
    overrides = [x for o in QUICK + ["coupling.fp_max_iters=1", "run.restart_window=0.06"] for x in ("--override", o)]
    result = invoke("run", "--config", DEFAULT_CFG, *overrides, "--output-dir", tmp_path)
    assert result.exit_code == 2
    assert json.loads((tmp_path / "summary.json").read_text())["stop_reason"] == "DIVERGED"


def test_cli_study_epsilon(tmp_path):
    overrides = [x for o in QUICK for x in ("--override", o)]
    out = tmp_path / "study.json"
    result = invoke("study-epsilon", "--config", DEFAULT_CFG, "--values", "0.2,0.1", *overrides, "--output", out)
    assert result.exit_code == 0, result.output
    table = json.loads(out.read_text())
    assert table["values"] == [0.2, 0.1] and len(table["distances"]) == 2
