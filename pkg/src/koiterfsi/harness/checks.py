"""Operator property checks run by ``koiterfsi check-operators``.

Each check recomputes an identity of the geometric and Galerkin operators
on random or analytic inputs and compares it with a tolerance.  Checks
marked ``known_failure`` measure a quantity whose stated target is not
attainable; they are reported but do not affect the exit status.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable

import numpy as np
from numpy.polynomial import Polynomial

from ..galerkin import MemoryODE, integrate
from ..geometry import SphereGeometry, ZonalField, gamma_factor, icosphere
from ..operators import ScalarTestField, extend_boundary, ibp_defect, mean_correct, sample_deformed_interior
from .diagnostics import RadialDomainFamily, korn_report, reynolds_defect


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str
    known_failure: bool = False

    def line(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        note = " (known, see ledger)" if self.known_failure and not self.passed else ""
        return f"{status} {self.name}: {self.detail}{note}"


def random_clamped(rng: np.random.Generator, geometry: SphereGeometry, sup: float) -> ZonalField:
    mu_gamma = math.cos(geometry.theta_gamma)
    poly = Polynomial([mu_gamma, -1.0]) ** 2 * Polynomial(rng.normal(size=4))
    field = ZonalField.from_polynomial(poly, geometry.radius, mu_cut=mu_gamma)
    return field.scaled(sup / field.sup_norm())


def compatible_pair(rng: np.random.Generator, geometry: SphereGeometry, eta_sup: float) -> tuple[ZonalField, ZonalField]:
    eta = random_clamped(rng, geometry, eta_sup * geometry.reach)
    b = mean_correct(geometry, random_clamped(rng, geometry, 1.0), eta)
    return eta, b


def check_gamma(geometry: SphereGeometry) -> CheckResult:
    """``gamma`` for constant displacements against triangulated area ratios."""
    verts, faces = icosphere(6)
    worst = 0.0
    for c in (-0.5, 0.2, 0.4):
        a, b, d = (verts[faces[:, k]] for k in range(3))
        area = 0.5 * np.linalg.norm(np.cross(b - a, d - a), axis=1).sum()
        scaled = verts * (1.0 + c)
        a, b, d = (scaled[faces[:, k]] for k in range(3))
        ratio = 0.5 * np.linalg.norm(np.cross(b - a, d - a), axis=1).sum() / area
        worst = max(worst, abs(float(gamma_factor(SphereGeometry(), np.array(c))) - ratio))
    return CheckResult("gamma identity", worst < 1e-6, f"max deviation {worst:.2e}")


def check_divergence(geometry: SphereGeometry, cases: int = 20, seed: int = 0) -> CheckResult:
    """Finite-difference divergence of extensions ``F_eta b`` on random admissible data."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(cases):
        eta, b = compatible_pair(rng, geometry, 0.5 * rng.random())
        ext = extend_boundary(geometry, b, eta)
        x = sample_deformed_interior(geometry, eta, rng, 40, margin=0.01)
        worst = max(worst, float(np.max(np.abs(ext.divergence(x)))))
    return CheckResult("divergence-free extension", worst < 1e-6, f"max |div| {worst:.2e} over {cases} cases")


SMOOTH_PSI = ScalarTestField(
    lambda y: y[..., 2] + np.sum(y**2, axis=-1),
    lambda y: np.array([0.0, 0.0, 1.0]) + 2.0 * y,
)


def check_ibp(geometry: SphereGeometry, cases: int = 5, seed: int = 100) -> CheckResult:
    rng = np.random.default_rng(seed)
    ratios = []
    for _ in range(cases):
        eta, b = compatible_pair(rng, geometry, 0.3)
        ext = extend_boundary(geometry, b, eta)
        coarse, fine = (abs(ibp_defect(geometry, ext, SMOOTH_PSI, eta, n_theta=n, n_rho=n // 2)) for n in (96, 192))
        ratios.append(coarse / fine)
    return CheckResult("integration by parts", min(ratios) >= 3.0, f"min shrink factor {min(ratios):.2f}")


def check_korn(geometry: SphereGeometry, cases: int = 5, seed: int = 100) -> CheckResult:
    rng = np.random.default_rng(seed)
    ratios, limits = [], []
    for _ in range(cases):
        eta, b = compatible_pair(rng, geometry, 0.3)
        ext = extend_boundary(geometry, b, eta)
        coarse, fine = (korn_report(geometry, ext, eta, n_theta=n, n_rho=n // 2) for n in (96, 192))
        ratios.append(abs(coarse.defect) / max(abs(fine.defect), 1e-300))
        limits.append(fine.boundary_ratio)
    detail = f"min shrink factor {min(ratios):.2f}; defects approach the boundary term {np.round(limits, 4).tolist()}"
    return CheckResult("Korn defect", min(ratios) >= 3.0, detail, known_failure=True)


def check_reynolds() -> CheckResult:
    family = RadialDomainFamily.expanding_ball(1.0, 0.1)
    res, scale = reynolds_defect(family, lambda t, r, th: np.ones_like(r), None, np.linspace(0.0, 1.0, 5), 1e-3)
    worst = float(np.max(np.abs(res) / scale))
    return CheckResult("Reynolds transport", worst < 1e-3, f"max relative residual {worst:.2e}")


def check_memory_ode() -> CheckResult:
    def solve(dt: float) -> float:
        one = lambda t: np.ones((1, 1))  # noqa: E731
        system = MemoryODE(one, lambda t: np.zeros((1, 1)), kernel=lambda t, s: np.ones((1, 1)))
        return float(integrate(system, [1.0], dt, 1.0).coefficients[-1, 0])

    values = [solve(dt) for dt in (4e-3, 2e-3, 1e-3)]
    error = abs(values[-1] - math.cosh(1.0))
    order = math.log2(abs(values[0] - values[1]) / abs(values[1] - values[2]))
    return CheckResult("integro-ODE", error < 1e-4 and order >= 1.9, f"error {error:.2e}, order {order:.2f}")


def operator_checks(geometry: SphereGeometry) -> list[Callable[[], CheckResult]]:
    return [
        lambda: check_gamma(geometry),
        lambda: check_divergence(geometry),
        lambda: check_ibp(geometry),
        lambda: check_korn(geometry),
        check_reynolds,
        check_memory_ode,
    ]
