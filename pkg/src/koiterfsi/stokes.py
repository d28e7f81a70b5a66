"""Stokes extension of boundary data into a ball.

The default solver is axisymmetric and swirl-free.  Velocities are written
through a Stokes stream function ``psi(r, theta)``,

    u_r = psi_theta / (r**2 sin(theta)),   u_theta = -psi_r / (r sin(theta)),

so every field built this way is exactly divergence free.  The solution is
the sum of an explicit lift matching the boundary values and a Galerkin
correction that minimizes the Dirichlet energy over zero-trace stream
modes ``r**(l+1) (1 - r**2/a**2)**2 r**(2j) sin(theta)**2 P_l'(cos theta)``.

A small full three-dimensional solver built from Lamb's general solution
with harmonic polynomials handles non-axisymmetric data (rigid rotations,
operator tests).

Stream-function derivatives are passed around as arrays with a leading axis
of length six, ordered ``(psi, psi_r, psi_t, psi_rr, psi_rt, psi_tt)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable

import numpy as np
from numpy.polynomial import Polynomial
from numpy.polynomial.legendre import Legendre, leggauss
from scipy import linalg

from .errors import IncompatibleFlux, SolverBreakdown
from .geometry import ZonalField, fibonacci_sphere

PSI, D_R, D_T, D_RR, D_RT, D_TT = range(6)


# ---------------------------------------------------------------------------
# stream-function kinematics
# ---------------------------------------------------------------------------


def stream_velocity(r: np.ndarray, theta: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Radial and polar velocity components from stream-function derivatives."""
    s = np.sin(theta)
    return d[D_T] / (r**2 * s), -d[D_R] / (r * s)


def stream_gradient(r: np.ndarray, theta: np.ndarray, d: np.ndarray) -> np.ndarray:
    """Velocity gradient in the orthonormal frame ``(e_r, e_theta, e_phi)``.

    Returns the five non-zero components ``(G_rr, G_rt, G_tr, G_tt, G_pp)``
    with ``G_ij = e_i . (grad u) e_j`` in the convention ``(grad u)_ij = d_j u_i``.
    """
    s = np.sin(theta)
    c = np.cos(theta)
    u_r = d[D_T] / (r**2 * s)
    u_t = -d[D_R] / (r * s)
    dr_ur = d[D_RT] / (r**2 * s) - 2.0 * d[D_T] / (r**3 * s)
    dt_ur = d[D_TT] / (r**2 * s) - d[D_T] * c / (r**2 * s**2)
    dr_ut = -d[D_RR] / (r * s) + d[D_R] / (r**2 * s)
    dt_ut = -d[D_RT] / (r * s) + d[D_R] * c / (r * s**2)
    return np.stack(
        [
            dr_ur,
            (dt_ur - u_t) / r,
            dr_ut,
            (dt_ut + u_r) / r,
            (u_r + u_t * c / s) / r,
        ]
    )


def gradient_divergence(grad: np.ndarray) -> np.ndarray:
    return grad[0] + grad[3] + grad[4]


def gradient_inner(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pointwise Frobenius product of two gradients in component form."""
    return np.sum(a * b, axis=0)


def gradient_transpose_inner(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pointwise ``a^T : b``."""
    return a[0] * b[0] + a[1] * b[2] + a[2] * b[1] + a[3] * b[3] + a[4] * b[4]


def meridian_to_cartesian(r: np.ndarray, theta: np.ndarray, phi: np.ndarray | float = 0.0) -> np.ndarray:
    s = np.sin(theta)
    return np.stack([r * s * np.cos(phi), r * s * np.sin(phi), r * np.cos(theta)], axis=-1)


def axisymmetric_to_cartesian(
    u_r: np.ndarray, u_t: np.ndarray, theta: np.ndarray, phi: np.ndarray | float = 0.0
) -> np.ndarray:
    s, c = np.sin(theta), np.cos(theta)
    cp, sp = np.cos(phi), np.sin(phi)
    return np.stack(
        [(u_r * s + u_t * c) * cp, (u_r * s + u_t * c) * sp, u_r * c - u_t * s], axis=-1
    )


def cartesian_to_meridian(x: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    theta = np.arccos(np.clip(x[..., 2] / np.where(r > 0, r, 1.0), -1.0, 1.0))
    phi = np.arctan2(x[..., 1], x[..., 0])
    return r, theta, phi


# ---------------------------------------------------------------------------
# quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MeridianQuadrature:
    """Tensor Gauss rule on a ball of radius ``radius`` for axisymmetric integrands.

    The radial rule is composite with a break at ``breaks`` (fractions of
    the radius) so that piecewise-smooth lifts integrate accurately.
    Weights include ``2 pi r**2`` and the polar measure ``d(cos theta)``.
    """

    radius: float
    n_r: int = 16
    n_mu: int = 24
    breaks: tuple[float, ...] = (0.5,)

    @cached_property
    def _nodes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        edges = np.concatenate([[0.0], np.asarray(self.breaks), [1.0]]) * self.radius
        per = max(self.n_r // (len(edges) - 1), 2)
        x, w = leggauss(per)
        rs, wr = [], []
        for lo, hi in zip(edges[:-1], edges[1:]):
            rs.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
            wr.append(0.5 * (hi - lo) * w)
        r = np.concatenate(rs)
        wr = np.concatenate(wr)
        mu, wm = leggauss(self.n_mu)
        rr, mm = np.meshgrid(r, mu, indexing="ij")
        weight = 2.0 * math.pi * np.outer(wr * r**2, wm)
        return rr.ravel(), np.arccos(mm.ravel()), weight.ravel()

    @property
    def r(self) -> np.ndarray:
        return self._nodes[0]

    @property
    def theta(self) -> np.ndarray:
        return self._nodes[1]

    @property
    def weights(self) -> np.ndarray:
        return self._nodes[2]

    def integrate(self, values: np.ndarray) -> np.ndarray:
        return values @ self.weights


def ball_quadrature(radius: float, n_r: int = 10, n_mu: int = 12, n_phi: int = 16) -> tuple[np.ndarray, np.ndarray]:
    """Cartesian nodes and weights of a product rule on the ball (exact for low-degree polynomials)."""
    x, w = leggauss(n_r)
    r = 0.5 * radius * (x + 1.0)
    wr = 0.5 * radius * w * r**2
    mu, wm = leggauss(n_mu)
    phi = 2.0 * math.pi * np.arange(n_phi) / n_phi
    wp = np.full(n_phi, 2.0 * math.pi / n_phi)
    R, M, P = np.meshgrid(r, mu, phi, indexing="ij")
    W = wr[:, None, None] * wm[None, :, None] * wp[None, None, :]
    s = np.sqrt(1.0 - M**2)
    pts = np.stack([R * s * np.cos(P), R * s * np.sin(P), R * M], axis=-1)
    return pts.reshape(-1, 3), W.ravel()


# ---------------------------------------------------------------------------
# stream modes
# ---------------------------------------------------------------------------


def angular_profile(degree: int) -> Polynomial:
    """``(1 - mu**2) P_l'(mu)``, the polar factor of the degree-``l`` stream mode."""
    dp = Legendre.basis(degree).deriv().convert(kind=Polynomial)
    return Polynomial([1.0, 0.0, -1.0]) * dp


def polar_derivatives(poly: Polynomial, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Value and first two theta-derivatives of ``poly(cos theta)``."""
    mu = np.cos(theta)
    s = np.sin(theta)
    d1 = poly.deriv()
    d2 = d1.deriv()
    return poly(mu), -s * d1(mu), s**2 * d2(mu) - mu * d1(mu)


def separable_derivatives(
    radial: Polynomial, polar: Polynomial, r: np.ndarray, theta: np.ndarray
) -> np.ndarray:
    """Derivative stack of ``radial(r) * polar(cos theta)``."""
    f, f_t, f_tt = polar_derivatives(polar, theta)
    g = radial(r)
    g_r = radial.deriv()(r)
    g_rr = radial.deriv(2)(r)
    return np.stack([g * f, g_r * f, g * f_t, g_rr * f, g_r * f_t, g * f_tt])


@dataclass(frozen=True)
class StreamMode:
    """Separable zero-trace stream mode ``radial(r) * polar(cos theta)``."""

    degree: int
    radial_power: int
    radius: float

    @cached_property
    def radial(self) -> Polynomial:
        bubble = Polynomial([1.0, 0.0, -1.0 / self.radius**2]) ** 2
        return Polynomial.basis(self.degree + 1 + 2 * self.radial_power) * bubble / self.radius ** (
            self.degree + 1 + 2 * self.radial_power
        )

    @cached_property
    def polar(self) -> Polynomial:
        return angular_profile(self.degree)

    def derivatives(self, r: np.ndarray, theta: np.ndarray) -> np.ndarray:
        return separable_derivatives(self.radial, self.polar, r, theta)


def zero_trace_modes(radius: float, max_degree: int, n_radial: int) -> list[StreamMode]:
    return [StreamMode(l, j, radius) for l in range(1, max_degree + 1) for j in range(n_radial)]


# ---------------------------------------------------------------------------
# lifts of boundary data
# ---------------------------------------------------------------------------


def _smoothstep(t: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    t = np.clip(t, 0.0, 1.0)
    return (
        t**3 * (10.0 - 15.0 * t + 6.0 * t**2),
        30.0 * t**2 * (1.0 - t) ** 2,
        60.0 * t * (1.0 - t) * (1.0 - 2.0 * t),
    )


def radial_blends(s: np.ndarray) -> tuple[tuple[np.ndarray, ...], tuple[np.ndarray, ...]]:
    """Blending functions on ``s = r / a``.

    ``chi0`` rises smoothly from 0 (for ``s <= 1/2``) to 1 at ``s = 1`` with
    vanishing slope there; ``chi1 = (s - 1) chi0`` vanishes at ``s = 1`` with
    unit slope.  Each is returned with its first two ``s``-derivatives.
    """
    h, h1, h2 = _smoothstep(2.0 * s - 1.0)
    c0 = (h, 2.0 * h1, 4.0 * h2)
    c1 = ((s - 1.0) * c0[0], c0[0] + (s - 1.0) * c0[1], 2.0 * c0[1] + (s - 1.0) * c0[2])
    return c0, c1


def cumulative_polar_integral(
    integrand: Callable[[np.ndarray], np.ndarray],
    theta: np.ndarray,
    n_gauss: int = 48,
    breakpoints: tuple[float, ...] = (),
) -> np.ndarray:
    """``int_0^theta integrand(t) sin(t) dt`` evaluated at every entry of ``theta``.

    The interval is split at ``breakpoints`` so piecewise-smooth integrands
    keep Gauss accuracy.
    """
    theta = np.asarray(theta, dtype=float)
    x, w = leggauss(n_gauss)
    total = np.zeros_like(theta)
    edges = [0.0, *sorted(breakpoints)]
    for k, lo in enumerate(edges):
        hi = np.minimum(theta, edges[k + 1]) if k + 1 < len(edges) else theta
        span = np.maximum(hi - lo, 0.0)
        nodes = lo + 0.5 * span[..., None] * (x + 1.0)
        vals = integrand(nodes) * np.sin(nodes)
        total = total + 0.5 * span * np.sum(vals * w, axis=-1)
    return total


@dataclass(frozen=True)
class AxisymmetricBoundaryData:
    """Boundary velocity ``g = g_r e_r + g_theta e_theta`` on the sphere of radius ``radius``."""

    radial: ZonalField
    polar: ZonalField
    radius: float = 1.0

    @classmethod
    def normal(cls, profile: ZonalField, radius: float = 1.0) -> "AxisymmetricBoundaryData":
        return cls(profile, ZonalField.constant(0.0), radius)

    def flux(self) -> float:
        """``int g . nu dA``."""
        return 2.0 * math.pi * self.radius**2 * float(
            cumulative_polar_integral(self.radial.profile, np.array(math.pi), 96, self.radial.breakpoints)
        )

    def __add__(self, other: "AxisymmetricBoundaryData") -> "AxisymmetricBoundaryData":
        return AxisymmetricBoundaryData(
            _sum_fields(self.radial, other.radial), _sum_fields(self.polar, other.polar), self.radius
        )

    def scaled(self, factor: float) -> "AxisymmetricBoundaryData":
        return AxisymmetricBoundaryData(self.radial.scaled(factor), self.polar.scaled(factor), self.radius)


def _sum_fields(a: ZonalField, b: ZonalField) -> ZonalField:
    return ZonalField(
        lambda th: a.profile(th) + b.profile(th),
        lambda th: a.d1(th) + b.d1(th),
        lambda th: a.d2(th) + b.d2(th),
        a.radius,
        tuple(sorted(set(a.breakpoints) | set(b.breakpoints))),
    )


@dataclass(frozen=True)
class BoundaryLift:
    """Explicit stream function whose velocity trace on ``r = a`` equals the data.

    On the sphere the stream function must equal ``Phi(theta) = a**2 int_0^theta
    g_r sin`` and its radial slope must equal ``Theta(theta) = -a**2 sin(theta)
    g_theta``.  Both profiles are split into their projections on the polar
    modes of degree ``<= max_degree`` plus a remainder.  Projected parts use
    the regular radial factors ``s**(l+1) (A + B s**2)``, the remainder uses
    compactly supported blends, so the trace is matched exactly while
    polynomial data produce polynomial lifts.
    """

    data: AxisymmetricBoundaryData
    flux_profile: Callable[[np.ndarray], np.ndarray]
    flux_coefficients: np.ndarray
    slope_coefficients: np.ndarray

    @property
    def radius(self) -> float:
        return self.data.radius

    @property
    def max_degree(self) -> int:
        return len(self.flux_coefficients)

    def _profiles(self, theta: np.ndarray) -> tuple[tuple[np.ndarray, ...], tuple[np.ndarray, ...]]:
        a = self.radius
        s, c = np.sin(theta), np.cos(theta)
        gr = self.data.radial
        gr0, gr1 = gr.profile(theta), gr.d1(theta)
        phi = (self.flux_profile(theta), a**2 * s * gr0, a**2 * (c * gr0 + s * gr1))
        gt = self.data.polar
        g0, g1, g2 = gt.profile(theta), gt.d1(theta), gt.d2(theta)
        slope = (
            -(a**2) * s * g0,
            -(a**2) * (c * g0 + s * g1),
            -(a**2) * (-s * g0 + 2.0 * c * g1 + s * g2),
        )
        return phi, slope

    def derivatives(self, r: np.ndarray, theta: np.ndarray) -> np.ndarray:
        a = self.radius
        r, theta = np.broadcast_arrays(np.asarray(r, dtype=float), np.asarray(theta, dtype=float))
        phi, slope = self._profiles(theta)
        phi, slope = list(phi), list(slope)
        out = np.zeros((6,) + r.shape)
        for l in range(1, self.max_degree + 1):
            polar = polar_derivatives(angular_profile(l), theta)
            cf, cs = self.flux_coefficients[l - 1], self.slope_coefficients[l - 1]
            for k in range(3):
                phi[k] = phi[k] - cf * polar[k]
                slope[k] = slope[k] - cs * polar[k]
            radial = regular_flux_factor(l, a) * cf + regular_slope_factor(l, a) * cs
            out += separable_derivatives(radial, angular_profile(l), r, theta)
        (b0, b0r, b0rr), (b1, b1r, b1rr) = radial_blends(r / a)
        b0r, b0rr, b1r, b1rr = b0r / a, b0rr / a**2, b1r / a, b1rr / a**2
        out += np.stack(
            [
                phi[0] * b0 + slope[0] * b1,
                phi[0] * b0r + slope[0] * b1r,
                phi[1] * b0 + slope[1] * b1,
                phi[0] * b0rr + slope[0] * b1rr,
                phi[1] * b0r + slope[1] * b1r,
                phi[2] * b0 + slope[2] * b1,
            ]
        )
        return out


def regular_flux_factor(degree: int, radius: float) -> Polynomial:
    """``s**(l+1) ((l+3) - (l+1) s**2) / 2`` in ``r``: value 1 and slope 0 at ``s = 1``."""
    l = degree
    s = Polynomial([0.0, 1.0 / radius])
    return s ** (l + 1) * (0.5 * (l + 3) - 0.5 * (l + 1) * s**2)


def regular_slope_factor(degree: int, radius: float) -> Polynomial:
    """``a s**(l+1) (s**2 - 1) / 2`` in ``r``: value 0 and ``r``-slope 1 at ``r = a``."""
    s = Polynomial([0.0, 1.0 / radius])
    return radius * s ** (degree + 1) * (0.5 * s**2 - 0.5)


def polar_projection(values: Callable[[np.ndarray], np.ndarray], max_degree: int, n_gauss: int = 96) -> np.ndarray:
    """Coefficients of a profile vanishing at both poles in the basis ``(1 - mu**2) P_l'(mu)``.

    Uses the orthogonality ``int F_l F_m / (1 - mu**2) dmu = 2 l (l + 1) / (2 l + 1) delta_lm``.
    """
    mu, w = leggauss(n_gauss)
    f = values(np.arccos(mu)) / (1.0 - mu**2)
    coeffs = np.empty(max_degree)
    for l in range(1, max_degree + 1):
        norm = 2.0 * l * (l + 1) / (2 * l + 1)
        coeffs[l - 1] = np.sum(w * f * angular_profile(l)(mu)) / norm
    return coeffs


def boundary_lift(
    data: AxisymmetricBoundaryData, max_degree: int = 8, flux_tol: float = 1e-10
) -> BoundaryLift:
    """Build the explicit lift, raising :class:`IncompatibleFlux` for net-flux data."""
    flux = data.flux()
    scale = 4.0 * math.pi * data.radius**2 * max(1.0, data.radial.sup_norm(401))
    if abs(flux) > flux_tol * scale:
        raise IncompatibleFlux(f"boundary data carries net flux {flux:.3e}", flux)
    a = data.radius

    breaks = data.radial.breakpoints
    residual = a**2 * float(cumulative_polar_integral(data.radial.profile, np.array(math.pi), 96, breaks))

    def flux_profile(theta: np.ndarray) -> np.ndarray:
        # the tiny admissible residual flux is spread uniformly so psi vanishes on both axis halves
        cumulative = a**2 * cumulative_polar_integral(data.radial.profile, theta, 48, breaks)
        return cumulative - 0.5 * residual * (1.0 - np.cos(theta))

    def slope_profile(theta: np.ndarray) -> np.ndarray:
        return -(a**2) * np.sin(theta) * data.polar.profile(theta)

    return BoundaryLift(
        data,
        flux_profile,
        polar_projection(flux_profile, max_degree),
        polar_projection(slope_profile, max_degree),
    )


# ---------------------------------------------------------------------------
# axisymmetric solver
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StreamSolution:
    """Lift plus Galerkin correction; evaluates the stream function anywhere in the ball."""

    lift: BoundaryLift | None
    modes: tuple[StreamMode, ...]
    coefficients: np.ndarray
    radius: float

    def derivatives(self, r: np.ndarray, theta: np.ndarray) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        theta = np.asarray(theta, dtype=float)
        out = np.zeros((6,) + np.broadcast(r, theta).shape)
        if self.lift is not None:
            out += self.lift.derivatives(r, theta)
        for c, mode in zip(self.coefficients, self.modes):
            if c != 0.0:
                out += c * mode.derivatives(r, theta)
        return out

    def velocity(self, r: np.ndarray, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return stream_velocity(r, theta, self.derivatives(r, theta))

    def gradient(self, r: np.ndarray, theta: np.ndarray) -> np.ndarray:
        return stream_gradient(r, theta, self.derivatives(r, theta))

    def velocity_cartesian(self, x: np.ndarray) -> np.ndarray:
        r, theta, phi = cartesian_to_meridian(x)
        u_r, u_t = self.velocity(r, theta)
        return axisymmetric_to_cartesian(u_r, u_t, theta, phi)


class AxisymmetricStokesSolver:
    """Energy-minimizing divergence-free extension on the ball of radius ``radius``.

    The mode stiffness matrix is factorized once at construction; ``solve``
    only assembles a right-hand side.
    """

    def __init__(
        self,
        radius: float = 1.0,
        max_degree: int = 8,
        n_radial: int = 4,
        quadrature: MeridianQuadrature | None = None,
        flux_tol: float = 1e-10,
    ) -> None:
        self.radius = radius
        self.max_degree = max_degree
        self.modes = tuple(zero_trace_modes(radius, max_degree, n_radial))
        self.quadrature = quadrature or MeridianQuadrature(
            radius, n_r=max(16, 2 * (max_degree + 2 * n_radial + 6)), n_mu=max(24, 2 * max_degree + 8)
        )
        self.flux_tol = flux_tol
        q = self.quadrature
        self._mode_grads = np.stack([stream_gradient(q.r, q.theta, m.derivatives(q.r, q.theta)) for m in self.modes])
        weighted = self._mode_grads * q.weights
        stiffness = np.einsum("icn,jcn->ij", weighted, self._mode_grads)
        self.stiffness = 0.5 * (stiffness + stiffness.T)
        try:
            self._factor = linalg.cho_factor(self.stiffness)
        except linalg.LinAlgError as exc:
            raise SolverBreakdown("mode stiffness matrix is not positive definite") from exc

    def solve(self, data: AxisymmetricBoundaryData) -> StreamSolution:
        if not math.isclose(data.radius, self.radius):
            raise ValueError("boundary data radius does not match the solver")
        lift = boundary_lift(data, self.max_degree, self.flux_tol)
        q = self.quadrature
        lift_grad = stream_gradient(q.r, q.theta, lift.derivatives(q.r, q.theta))
        rhs = -np.einsum("icn,cn->i", self._mode_grads * q.weights, lift_grad)
        coeffs = linalg.cho_solve(self._factor, rhs)
        if not np.all(np.isfinite(coeffs)):
            raise SolverBreakdown("non-finite Stokes coefficients")
        return StreamSolution(lift, self.modes, coeffs, self.radius)

    def dirichlet_energy(self, solution: StreamSolution) -> float:
        q = self.quadrature
        grad = solution.gradient(q.r, q.theta)
        return float(q.integrate(gradient_inner(grad, grad)))


# ---------------------------------------------------------------------------
# three-dimensional low-order solver
# ---------------------------------------------------------------------------


def _monomials(degree: int) -> list[tuple[int, int, int]]:
    return [(i, j, degree - i - j) for i in range(degree + 1) for j in range(degree + 1 - i)]


@dataclass(frozen=True)
class HomogeneousPolynomial:
    """Cartesian homogeneous polynomial stored as ``{(i, j, k): coefficient}``."""

    terms: dict[tuple[int, int, int], float] = field(default_factory=dict)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        out = np.zeros(x.shape[:-1])
        for (i, j, k), c in self.terms.items():
            out = out + c * x[..., 0] ** i * x[..., 1] ** j * x[..., 2] ** k
        return out

    def partial(self, axis: int) -> "HomogeneousPolynomial":
        out: dict[tuple[int, int, int], float] = {}
        for exps, c in self.terms.items():
            if exps[axis] == 0:
                continue
            new = list(exps)
            new[axis] -= 1
            out[tuple(new)] = out.get(tuple(new), 0.0) + c * exps[axis]
        return HomogeneousPolynomial(out)

    def gradient(self, x: np.ndarray) -> np.ndarray:
        return np.stack([self.partial(a)(x) for a in range(3)], axis=-1)


def harmonic_basis(degree: int) -> list[HomogeneousPolynomial]:
    """Basis of homogeneous harmonic polynomials of the given degree (dimension ``2 degree + 1``)."""
    if degree == 0:
        return [HomogeneousPolynomial({(0, 0, 0): 1.0})]
    source = _monomials(degree)
    target = _monomials(degree - 2) if degree >= 2 else []
    index = {m: k for k, m in enumerate(target)}
    lap = np.zeros((len(target), len(source)))
    for col, (i, j, k) in enumerate(source):
        for axis, e in enumerate((i, j, k)):
            if e >= 2:
                new = [i, j, k]
                new[axis] -= 2
                lap[index[tuple(new)], col] += e * (e - 1)
    kernel = linalg.null_space(lap) if lap.size else np.eye(len(source))
    return [HomogeneousPolynomial({m: float(v) for m, v in zip(source, vec) if abs(v) > 1e-14}) for vec in kernel.T]


@dataclass(frozen=True)
class LambField:
    """One member of Lamb's interior solution family."""

    kind: str
    degree: int
    potential: HomogeneousPolynomial

    def __call__(self, x: np.ndarray) -> np.ndarray:
        n = self.degree
        if self.kind == "toroidal":
            return np.cross(self.potential.gradient(x), x)
        if self.kind == "potential":
            return self.potential.gradient(x)
        r2 = np.sum(x * x, axis=-1)[..., None]
        a = (n + 3) / (2 * (n + 1) * (2 * n + 3))
        b = n / ((n + 1) * (2 * n + 3))
        return a * r2 * self.potential.gradient(x) - b * x * self.potential(x)[..., None]


def lamb_fields(max_degree: int) -> list[LambField]:
    fields: list[LambField] = []
    for n in range(1, max_degree + 1):
        fields += [LambField("toroidal", n, h) for h in harmonic_basis(n)]
        fields += [LambField("pressure", n, h) for h in harmonic_basis(n)]
    for n in range(1, max_degree + 2):
        fields += [LambField("potential", n, h) for h in harmonic_basis(n)]
    return fields


@dataclass(frozen=True)
class LambSolution:
    fields: tuple[LambField, ...]
    coefficients: np.ndarray
    residual: float

    def velocity(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        out = np.zeros(x.shape)
        for c, f in zip(self.coefficients, self.fields):
            if abs(c) > 0.0:
                out += c * f(x)
        return out


def solve_stokes_3d(
    boundary_velocity: Callable[[np.ndarray], np.ndarray],
    radius: float = 1.0,
    max_degree: int = 3,
    n_boundary: int = 600,
    flux_tol: float = 1e-8,
) -> LambSolution:
    """Least-squares fit of Lamb's polynomial Stokes solutions to boundary data.

    Exact whenever the data is the trace of a polynomial Stokes flow of
    degree at most ``max_degree``.
    """
    nu = fibonacci_sphere(n_boundary)
    q = radius * nu
    g = np.asarray(boundary_velocity(q), dtype=float)
    flux = 4.0 * math.pi * radius**2 * float(np.mean(np.sum(g * nu, axis=-1)))
    if abs(flux) > flux_tol * 4.0 * math.pi * radius**2 * max(1.0, float(np.max(np.abs(g)))):
        raise IncompatibleFlux(f"boundary data carries net flux {flux:.3e}", flux)
    fields = lamb_fields(max_degree)
    design = np.stack([f(q).ravel() for f in fields], axis=1)
    coeffs, *_ = linalg.lstsq(design, g.ravel())
    if not np.all(np.isfinite(coeffs)):
        raise SolverBreakdown("least-squares fit failed")
    residual = float(np.sqrt(np.mean((design @ coeffs - g.ravel()) ** 2)))
    return LambSolution(tuple(fields), coeffs, residual)


def solve_stokes(
    data: AxisymmetricBoundaryData | Callable[[np.ndarray], np.ndarray],
    *,
    radius: float = 1.0,
    max_degree: int = 8,
    n_radial: int = 4,
    flux_tol: float = 1e-10,
) -> StreamSolution | LambSolution:
    """Divergence-free extension of boundary data.

    Axisymmetric data goes to the stream-function solver; a callable
    ``q -> g(q)`` goes to the three-dimensional polynomial solver.
    """
    if isinstance(data, AxisymmetricBoundaryData):
        return AxisymmetricStokesSolver(data.radius, max_degree, n_radial, flux_tol=flux_tol).solve(data)
    return solve_stokes_3d(data, radius, min(max_degree, 4), flux_tol=max(flux_tol, 1e-8))


def finite_difference_divergence(field: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central-difference divergence of a Cartesian vector field."""
    out = np.zeros(np.asarray(x).shape[:-1])
    for axis, e in enumerate(np.eye(3)):
        out += (field(x + h * e)[..., axis] - field(x - h * e)[..., axis]) / (2 * h)
    return out


def finite_difference_laplacian(field: Callable[[np.ndarray], np.ndarray], x: np.ndarray, h: float = 1e-3) -> np.ndarray:
    center = field(x)
    out = -6.0 * center
    for e in np.eye(3):
        out = out + field(x + h * e) + field(x - h * e)
    return out / h**2

