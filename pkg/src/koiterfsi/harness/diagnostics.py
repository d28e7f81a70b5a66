"""Identity diagnostics: Reynolds transport, the Korn defect and matrix structure."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import linalg

from ..geometry import SphereGeometry, ZonalField
from ..operators import BoundaryExtension, StreamField, _breaks, meridian_cells
from ..stokes import gradient_inner, gradient_transpose_inner

# ``xi(t, rho, theta)`` on the physical domain
ScalarHistory = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


# ---------------------------------------------------------------------------
# Reynolds transport
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RadialDomainFamily:
    """Axisymmetric domains ``rho < R + eta(t, theta)`` with radially moving boundary.

    ``displacement`` and ``rate`` give ``eta`` and ``d_t eta`` as functions
    of ``(t, theta)``; ``theta_breaks`` lists colatitudes where they are not
    smooth.
    """

    geometry: SphereGeometry
    displacement: Callable[[float, np.ndarray], np.ndarray]
    rate: Callable[[float, np.ndarray], np.ndarray]
    theta_breaks: tuple[float, ...] = ()

    @classmethod
    def expanding_ball(cls, radius: float = 1.0, speed: float = 0.1) -> "RadialDomainFamily":
        """Ball of radius ``radius + speed t``."""
        return cls(
            SphereGeometry(radius),
            lambda t, theta: np.full(np.shape(theta), speed * t),
            lambda t, theta: np.full(np.shape(theta), speed),
        )

    @classmethod
    def oscillating(
        cls,
        geometry: SphereGeometry,
        profile: ZonalField,
        amplitude: Callable[[float], float] = math.sin,
        amplitude_rate: Callable[[float], float] = math.cos,
    ) -> "RadialDomainFamily":
        """Hanzawa family with boundary displacement ``amplitude(t) profile(theta)``."""
        return cls(
            geometry,
            lambda t, theta: amplitude(t) * profile(theta),
            lambda t, theta: amplitude_rate(t) * profile(theta),
            _breaks(geometry, profile),
        )


@dataclass(frozen=True)
class _MeridianRule:
    theta: np.ndarray
    weights: np.ndarray


def _theta_rule(breaks: Sequence[float], n: int) -> _MeridianRule:
    edges = [0.0, *sorted(b for b in breaks if 0.0 < b < math.pi), math.pi]
    x, w = leggauss(n)
    nodes, weights = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        nodes.append(0.5 * (b - a) * x + 0.5 * (b + a))
        weights.append(0.5 * (b - a) * w)
    return _MeridianRule(np.concatenate(nodes), np.concatenate(weights))


def domain_integral(family: RadialDomainFamily, xi: ScalarHistory, t: float, n_theta: int = 48, n_rho: int = 32) -> float:
    """``int_{Omega_t} xi dx`` by tensor Gauss rules in ``theta`` and ``rho``."""
    rule = _theta_rule(family.theta_breaks, n_theta)
    top = family.geometry.radius + family.displacement(t, rule.theta)
    x, w = leggauss(n_rho)
    s = 0.5 * (x + 1.0)
    rho = top[:, None] * s[None, :]
    theta = np.broadcast_to(rule.theta[:, None], rho.shape)
    weights = (0.5 * w)[None, :] * top[:, None] * rho**2 * (rule.weights * np.sin(rule.theta))[:, None]
    return 2.0 * math.pi * float(np.sum(weights * xi(t, rho, theta)))


def boundary_flux(family: RadialDomainFamily, xi: ScalarHistory, t: float, n_theta: int = 48) -> float:
    """``int_{dOmega_t} (v . nu) xi dA`` for the radially moving boundary.

    With ``x = rho(theta) e_r`` the oriented area element is
    ``(rho^2 e_r - rho rho' e_theta) sin(theta) dtheta dphi`` and the boundary
    velocity is ``d_t eta e_r``, so ``v . nu dA = d_t eta rho^2 sin(theta) dtheta dphi``.
    """
    rule = _theta_rule(family.theta_breaks, n_theta)
    top = family.geometry.radius + family.displacement(t, rule.theta)
    flux = family.rate(t, rule.theta) * top**2 * np.sin(rule.theta)
    return 2.0 * math.pi * float(np.sum(rule.weights * flux * xi(t, top, rule.theta)))


def reynolds_defect(
    family: RadialDomainFamily,
    xi: ScalarHistory,
    xi_rate: ScalarHistory | None,
    times: np.ndarray,
    dt: float,
    *,
    n_theta: int = 48,
    n_rho: int = 32,
) -> tuple[np.ndarray, np.ndarray]:
    """Residual of ``d/dt int xi = int d_t xi + int_boundary (v . nu) xi`` at each time.

    The left side is a centred difference with step ``dt``.  Returns the
    residuals and the magnitude of the right side, so callers can form
    relative residuals.
    """
    residual, scale = [], []
    for t in np.asarray(times, dtype=float):
        lhs = (domain_integral(family, xi, t + 0.5 * dt, n_theta, n_rho) - domain_integral(family, xi, t - 0.5 * dt, n_theta, n_rho)) / dt
        bulk = 0.0 if xi_rate is None else domain_integral(family, xi_rate, t, n_theta, n_rho)
        rhs = bulk + boundary_flux(family, xi, t, n_theta)
        residual.append(lhs - rhs)
        scale.append(abs(rhs))
    return np.array(residual), np.array(scale)


# ---------------------------------------------------------------------------
# Korn identity
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class KornReport:
    """``transposed = int (grad u)^T : grad u``, ``full = int |grad u|^2`` and the boundary term.

    For a divergence-free field ``int (grad u)^T : grad u`` equals the
    boundary integral of ``((u . grad) u) . nu``, recorded as ``boundary``.
    """

    transposed: float
    full: float
    boundary: float

    @property
    def defect(self) -> float:
        return self.transposed / self.full if self.full > 0 else 0.0

    @property
    def boundary_ratio(self) -> float:
        return self.boundary / self.full if self.full > 0 else 0.0


def _stream_of(u: StreamField | BoundaryExtension) -> StreamField:
    return u.field if isinstance(u, BoundaryExtension) else u


def korn_report(
    geometry: SphereGeometry,
    u: StreamField | BoundaryExtension,
    eta: ZonalField,
    *,
    n_theta: int = 48,
    n_rho: int = 24,
) -> KornReport:
    """Midpoint-rule integrals behind :func:`korn_defect` on the deformed ball."""
    stream = _stream_of(u)
    cells = meridian_cells(geometry, eta, n_theta, n_rho, interfaces=stream.interfaces, theta_breaks=_breaks(geometry, eta))
    grad = stream.gradient(cells.rho, cells.theta)
    transposed = float(np.sum(cells.weights * gradient_transpose_inner(grad, grad)))
    full = float(np.sum(cells.weights * gradient_inner(grad, grad)))

    rule = _theta_rule(_breaks(geometry, eta), n_theta)
    th = rule.theta
    top = geometry.radius + eta(th)
    slope = eta.d1(th)
    inner = 1.0 - 1e-9
    g = stream.gradient(top * inner, th)
    u_r, u_t = stream.velocity(top * inner, th)
    # (grad u) u in the (e_r, e_theta) frame
    a_r = g[0] * u_r + g[1] * u_t
    a_t = g[2] * u_r + g[3] * u_t
    normal_area = a_r * top**2 - a_t * top * slope
    boundary = 2.0 * math.pi * float(np.sum(rule.weights * normal_area * np.sin(th)))
    return KornReport(transposed, full, boundary)


def korn_defect(
    geometry: SphereGeometry,
    u: StreamField | BoundaryExtension,
    eta: ZonalField,
    *,
    n_theta: int = 48,
    n_rho: int = 24,
) -> float:
    """``int (grad u)^T : grad u / int |grad u|^2`` on ``Omega_eta``; zero for ``u = 0``."""
    return korn_report(geometry, u, eta, n_theta=n_theta, n_rho=n_rho).defect


# ---------------------------------------------------------------------------
# structural properties of the assembled system
# ---------------------------------------------------------------------------


@dataclass
class StructureMonitor:
    """Per-step record of the smallest mass eigenvalue and the convective asymmetry.

    Pass an instance as the ``monitor`` of a coupling solver; every assembled
    step appends one entry.  The asymmetry is ``max |N + N^T|`` divided by
    ``max(1, max |N|)``.
    """

    times: list[float] = field(default_factory=list)
    min_eigenvalues: list[float] = field(default_factory=list)
    asymmetry: list[float] = field(default_factory=list)

    def __call__(self, t: float, mass: np.ndarray, convective: np.ndarray) -> None:
        self.times.append(float(t))
        self.min_eigenvalues.append(float(linalg.eigvalsh(mass, subset_by_index=[0, 0])[0]))
        scale = max(1.0, float(np.max(np.abs(convective))))
        self.asymmetry.append(float(np.max(np.abs(convective + convective.T))) / scale)

    @property
    def steps(self) -> int:
        return len(self.times)

    def summary(self) -> dict[str, float | int]:
        return {
            "assembled_steps": self.steps,
            "min_mass_eigenvalue": min(self.min_eigenvalues, default=math.nan),
            "max_convective_asymmetry": max(self.asymmetry, default=0.0),
        }
