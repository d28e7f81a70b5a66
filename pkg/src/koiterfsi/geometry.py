"""Reference surface, tubular coordinates and the Hanzawa transform.

The reference domain is the ball of radius ``R``.  Its boundary sphere is
split into a clamped polar cap ``Gamma = {theta <= theta_gamma}`` and the free
part ``M``.  The shape operator is taken as minus the derivative of the outer
normal, so on the sphere ``h = -g / R``, the mean curvature is ``-1/R`` and
the Gauss curvature is ``1/R**2``.

Two evaluation paths are offered:

* fully three-dimensional evaluators (:func:`hanzawa_forward`,
  :func:`hanzawa_inverse`) working on arrays of Cartesian points and
  arbitrary surface fields;
* a zonal fast path (:func:`radial_map_derivatives`, :func:`radial_inverse`)
  used by the Galerkin solver, where an axisymmetric displacement turns the
  Hanzawa map into a map ``(r, theta) -> (rho(r, theta), theta)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Protocol

import numpy as np
from numpy.polynomial import Polynomial
from scipy import fft

from . import kernels
from .errors import (
    InadmissibleDisplacement,
    NoConvergence,
    OutsideDeformedDomain,
    OutsideDomain,
    OutsideTubular,
    RatioTooLarge,
)

ArrayLike = np.ndarray | float


# ---------------------------------------------------------------------------
# reference surface
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SphereGeometry:
    """Analytic sphere of radius ``radius`` with clamped cap ``theta <= theta_gamma``.

    Chart coordinates are the colatitude/longitude pair ``(theta, phi)``; a
    second chart rotated by pi covers the south pole.  All curvature data
    are exact.
    """

    radius: float = 1.0
    theta_gamma: float = math.pi / 6

    def __post_init__(self) -> None:
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if not 0 < self.theta_gamma < math.pi:
            raise ValueError("theta_gamma must lie in (0, pi)")

    @property
    def reach(self) -> float:
        return self.radius

    @property
    def mean_curvature(self) -> float:
        return -1.0 / self.radius

    @property
    def gauss_curvature(self) -> float:
        return 1.0 / self.radius**2

    @property
    def area(self) -> float:
        return 4.0 * math.pi * self.radius**2

    def normal(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        return q / np.linalg.norm(q, axis=-1, keepdims=True)

    def first_form(self, theta: ArrayLike) -> np.ndarray:
        """Metric ``g`` in chart coordinates ``(theta, phi)``."""
        theta = np.asarray(theta, dtype=float)
        g = np.zeros(theta.shape + (2, 2))
        g[..., 0, 0] = self.radius**2
        g[..., 1, 1] = (self.radius * np.sin(theta)) ** 2
        return g

    def second_form(self, theta: ArrayLike) -> np.ndarray:
        """Second fundamental form ``h = -g / R`` in chart coordinates."""
        return -self.first_form(theta) / self.radius

    def shape_frame(self) -> np.ndarray:
        """Shape operator in an orthonormal tangent frame (``-I / R``)."""
        return -np.eye(2) / self.radius

    def k_tensor(self, theta: ArrayLike) -> np.ndarray:
        """``k = h . h`` in chart coordinates (equals ``g / R**2``)."""
        g = self.first_form(theta)
        ginv = np.linalg.inv(g)
        h = self.second_form(theta)
        return h @ ginv @ h

    def mean_curvature_at(self, theta: ArrayLike) -> np.ndarray:
        g = self.first_form(theta)
        h = self.second_form(theta)
        return 0.5 * np.einsum("...ij,...ji->...", np.linalg.inv(g), h)

    def gauss_curvature_at(self, theta: ArrayLike) -> np.ndarray:
        return np.linalg.det(self.second_form(theta)) / np.linalg.det(self.first_form(theta))

    def chart(self, theta: ArrayLike, phi: ArrayLike) -> np.ndarray:
        """Embed chart coordinates as Cartesian points on the sphere."""
        theta = np.asarray(theta, dtype=float)
        phi = np.asarray(phi, dtype=float)
        st = np.sin(theta)
        return self.radius * np.stack([st * np.cos(phi), st * np.sin(phi), np.cos(theta)], axis=-1)

    def colatitude(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r = np.linalg.norm(x, axis=-1)
        with np.errstate(invalid="ignore", divide="ignore"):
            c = np.where(r > 0, x[..., 2] / np.where(r > 0, r, 1.0), 1.0)
        return np.arccos(np.clip(c, -1.0, 1.0))

    def in_free_region(self, q: np.ndarray) -> np.ndarray:
        """Indicator of ``M`` (the complement of the clamped cap)."""
        return self.colatitude(q) > self.theta_gamma

    def partition_of_unity(self, theta: ArrayLike, width: float = math.pi / 8) -> tuple[np.ndarray, np.ndarray]:
        """Smooth zonal partition ``(psi_north, psi_south)`` summing to one."""
        theta = np.asarray(theta, dtype=float)
        t = np.clip((theta - (math.pi / 2 - width)) / (2 * width), 0.0, 1.0)
        south = _smoothstep_c2(t)
        return 1.0 - south, south

    def frame(self, q: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Orthonormal frame ``(nu, e_theta, e_phi)`` at surface points."""
        theta = self.colatitude(q)
        phi = np.arctan2(q[..., 1], q[..., 0])
        ct, st, cp, sp = np.cos(theta), np.sin(theta), np.cos(phi), np.sin(phi)
        nu = np.stack([st * cp, st * sp, ct], axis=-1)
        e_theta = np.stack([ct * cp, ct * sp, -st], axis=-1)
        e_phi = np.stack([-sp, cp, np.zeros_like(sp)], axis=-1)
        return nu, e_theta, e_phi


def _smoothstep_c2(t: np.ndarray) -> np.ndarray:
    return t**3 * (10.0 - 15.0 * t + 6.0 * t**2)


# ---------------------------------------------------------------------------
# surface fields
# ---------------------------------------------------------------------------


class SurfaceField(Protocol):
    """Scalar field on the reference sphere evaluated at Cartesian points."""

    def value(self, q: np.ndarray) -> np.ndarray: ...

    def surface_gradient(self, q: np.ndarray) -> np.ndarray: ...


@dataclass(frozen=True)
class ZonalField:
    """Axisymmetric surface field given as a profile in the colatitude.

    ``profile``, ``d1`` and ``d2`` return the value and the first two
    theta-derivatives.  The profile is expected to be smooth as a function on
    the sphere, in particular ``d1`` vanishes at both poles.  ``breakpoints``
    lists colatitudes where higher derivatives may jump (quadratures split
    there).
    """

    profile: Callable[[np.ndarray], np.ndarray]
    d1: Callable[[np.ndarray], np.ndarray]
    d2: Callable[[np.ndarray], np.ndarray]
    radius: float = 1.0
    breakpoints: tuple[float, ...] = ()

    @classmethod
    def constant(cls, c: float, radius: float = 1.0) -> "ZonalField":
        return cls(
            lambda th: np.full_like(np.asarray(th, dtype=float), c),
            lambda th: np.zeros_like(np.asarray(th, dtype=float)),
            lambda th: np.zeros_like(np.asarray(th, dtype=float)),
            radius,
        )

    @classmethod
    def from_polynomial(
        cls, poly: Polynomial, radius: float = 1.0, mu_cut: float | None = None
    ) -> "ZonalField":
        """Field ``p(cos theta)``, set to zero where ``cos theta >= mu_cut``.

        With ``mu_cut = cos(theta_gamma)`` and ``p`` having a double root at
        ``mu_cut`` the result is a clamped field supported in ``M``.
        """
        dp = poly.deriv()
        d2p = dp.deriv()

        def mask(mu: np.ndarray) -> np.ndarray:
            return np.ones_like(mu) if mu_cut is None else (mu < mu_cut).astype(float)

        def value(th):
            mu = np.cos(th)
            return poly(mu) * mask(mu)

        def first(th):
            mu = np.cos(th)
            return -np.sin(th) * dp(mu) * mask(mu)

        def second(th):
            mu = np.cos(th)
            return (np.sin(th) ** 2 * d2p(mu) - mu * dp(mu)) * mask(mu)

        breaks = () if mu_cut is None else (math.acos(mu_cut),)
        return cls(value, first, second, radius, breaks)

    def __call__(self, theta: ArrayLike) -> np.ndarray:
        return self.profile(np.asarray(theta, dtype=float))

    def value(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        return self.profile(_colatitude(q))

    def surface_gradient(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        theta = _colatitude(q)
        phi = np.arctan2(q[..., 1], q[..., 0])
        e_theta = np.stack(
            [np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), -np.sin(theta)], axis=-1
        )
        return (self.d1(theta) / self.radius)[..., None] * e_theta

    def scaled(self, factor: float) -> "ZonalField":
        return ZonalField(
            lambda th: factor * self.profile(th),
            lambda th: factor * self.d1(th),
            lambda th: factor * self.d2(th),
            self.radius,
            self.breakpoints,
        )

    def __mul__(self, other: "ZonalField") -> "ZonalField":
        """Pointwise product, derivatives by the Leibniz rule."""
        return ZonalField(
            lambda th: self.profile(th) * other.profile(th),
            lambda th: self.d1(th) * other.profile(th) + self.profile(th) * other.d1(th),
            lambda th: self.d2(th) * other.profile(th)
            + 2.0 * self.d1(th) * other.d1(th)
            + self.profile(th) * other.d2(th),
            self.radius,
            tuple(sorted(set(self.breakpoints) | set(other.breakpoints))),
        )

    def shifted(self, c: float) -> "ZonalField":
        """The field ``c + self``."""
        return ZonalField(lambda th: c + self.profile(th), self.d1, self.d2, self.radius, self.breakpoints)

    def sup_norm(self, n: int = 2001) -> float:
        return float(np.max(np.abs(self.profile(np.linspace(0.0, math.pi, n)))))


def _colatitude(q: np.ndarray) -> np.ndarray:
    r = np.linalg.norm(q, axis=-1)
    return np.arccos(np.clip(q[..., 2] / np.where(r > 0, r, 1.0), -1.0, 1.0))


@dataclass(frozen=True)
class PolynomialSurfaceField:
    """Restriction of a Cartesian polynomial ``P(n)`` to the sphere, ``n = q / R``.

    ``coefficients`` maps exponent triples ``(a, b, c)`` to the coefficient of
    ``n_x**a n_y**b n_z**c``.  Useful for non-axisymmetric test displacements.
    """

    coefficients: dict[tuple[int, int, int], float]
    radius: float = 1.0

    @classmethod
    def random(cls, rng: np.random.Generator, degree: int = 3, radius: float = 1.0) -> "PolynomialSurfaceField":
        coeffs = {}
        for a in range(degree + 1):
            for b in range(degree + 1 - a):
                for c in range(degree + 1 - a - b):
                    coeffs[(a, b, c)] = float(rng.normal())
        return cls(coeffs, radius)

    def _poly_and_grad(self, n: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        val = np.zeros(n.shape[:-1])
        grad = np.zeros(n.shape)
        x, y, z = n[..., 0], n[..., 1], n[..., 2]
        for (a, b, c), coef in self.coefficients.items():
            val += coef * x**a * y**b * z**c
            if a:
                grad[..., 0] += coef * a * x ** (a - 1) * y**b * z**c
            if b:
                grad[..., 1] += coef * b * x**a * y ** (b - 1) * z**c
            if c:
                grad[..., 2] += coef * c * x**a * y**b * z ** (c - 1)
        return val, grad

    def value(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        n = q / np.linalg.norm(q, axis=-1, keepdims=True)
        return self._poly_and_grad(n)[0]

    def surface_gradient(self, q: np.ndarray) -> np.ndarray:
        q = np.asarray(q, dtype=float)
        n = q / np.linalg.norm(q, axis=-1, keepdims=True)
        _, grad = self._poly_and_grad(n)
        tangential = grad - np.sum(grad * n, axis=-1, keepdims=True) * n
        return tangential / self.radius

    def scaled_to(self, sup_target: float, n_samples: int = 4000) -> "PolynomialSurfaceField":
        """Rescale so that the sampled sup-norm equals ``sup_target``."""
        pts = fibonacci_sphere(n_samples)
        sup = float(np.max(np.abs(self._poly_and_grad(pts)[0])))
        factor = sup_target / sup
        return PolynomialSurfaceField({k: v * factor for k, v in self.coefficients.items()}, self.radius)


def fibonacci_sphere(n: int) -> np.ndarray:
    """Nearly uniform unit vectors (golden-spiral lattice)."""
    i = np.arange(n) + 0.5
    z = 1.0 - 2.0 * i / n
    phi = math.pi * (1.0 + 5**0.5) * i
    rho = np.sqrt(1.0 - z * z)
    return np.stack([rho * np.cos(phi), rho * np.sin(phi), z], axis=-1)


def field_values(eta: SurfaceField | float, q: np.ndarray) -> np.ndarray:
    if isinstance(eta, (int, float)):
        return np.full(np.asarray(q).shape[:-1], float(eta))
    return eta.value(q)


def field_gradient(eta: SurfaceField | float, q: np.ndarray) -> np.ndarray:
    if isinstance(eta, (int, float)):
        return np.zeros(np.asarray(q).shape)
    return eta.surface_gradient(q)


# ---------------------------------------------------------------------------
# tubular coordinates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TubularPoint:
    q: np.ndarray
    s: np.ndarray
    normal: np.ndarray

    def ambient(self) -> np.ndarray:
        return self.q + np.asarray(self.s)[..., None] * self.normal


def tubular_decompose(geom: SphereGeometry, x: np.ndarray) -> TubularPoint:
    """Split ``x`` into its nearest surface point and signed normal offset."""
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    s = r - geom.radius
    if np.any(np.abs(s) >= geom.reach) or np.any(r == 0):
        raise OutsideTubular("point at distance >= reach from the surface")
    nu = x / r[..., None]
    return TubularPoint(geom.radius * nu, s, nu)


# ---------------------------------------------------------------------------
# cutoff profile
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CutoffProfile:
    """C^4 profile on ``[-1, 0]``: zero plateau, smooth ramps, linear core, unit plateau.

    ``beta'`` rises from 0 to ``slope`` over ``ramp`` with a septic smoothstep,
    stays at ``slope`` and falls back symmetrically; the plateaus have width
    ``plateau``.  The slope is fixed by the unit total rise.
    """

    plateau: float
    ramp: float
    admissible_ratio: float = 0.0

    @property
    def core_length(self) -> float:
        return 1.0 - 2.0 * self.plateau

    @property
    def slope(self) -> float:
        return 1.0 / (self.core_length - self.ramp)

    @property
    def derivative_bound(self) -> float:
        return self.slope

    def _local(self, s: np.ndarray) -> np.ndarray:
        return np.asarray(s, dtype=float) + 1.0 - self.plateau

    def __call__(self, s: ArrayLike) -> np.ndarray:
        return kernels.cutoff_eval(np.asarray(s, dtype=float), self.plateau, self.ramp, 0)

    def derivative(self, s: ArrayLike) -> np.ndarray:
        return kernels.cutoff_eval(np.asarray(s, dtype=float), self.plateau, self.ramp, 1)

    def second_derivative(self, s: ArrayLike) -> np.ndarray:
        return kernels.cutoff_eval(np.asarray(s, dtype=float), self.plateau, self.ramp, 2)


DEFAULT_PLATEAU = 0.1


def make_cutoff(ratio: float) -> CutoffProfile:
    """Build a cutoff whose slope stays strictly below ``1 / ratio``.

    The target slope is ``2 / (1 + ratio)``.  The default plateaus of width
    0.1 are kept while the ramps remain reasonably wide; for large ratios the
    plateaus shrink so the linear core can become flatter.
    """
    if ratio < 0 or not math.isfinite(ratio):
        raise ValueError("ratio must be a finite non-negative number")
    if ratio >= 1.0:
        raise RatioTooLarge(f"ratio {ratio} >= 1 admits no cutoff with |beta'| < 1/ratio")
    inv_slope = 0.5 * (1.0 + ratio)
    core = 1.0 - 2.0 * DEFAULT_PLATEAU
    ramp_default = core - inv_slope
    ramp_shrunk = 0.5 * (1.0 - inv_slope)
    if ramp_default >= ramp_shrunk:
        profile = CutoffProfile(DEFAULT_PLATEAU, min(ramp_default, 0.5 * core), ratio)
    else:
        profile = CutoffProfile(0.25 * (1.0 - inv_slope), ramp_shrunk, ratio)
    return profile


# ---------------------------------------------------------------------------
# Hanzawa transform
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class HanzawaMap:
    """``Psi(x) = x + nu(q) eta(q) beta(s / kappa)`` inside the tube, identity elsewhere."""

    geometry: SphereGeometry
    displacement: SurfaceField | float
    cutoff: CutoffProfile = field(default_factory=lambda: make_cutoff(0.0))

    def displacement_at(self, q: np.ndarray) -> np.ndarray:
        return field_values(self.displacement, q)

    def check_admissible(self, n_samples: int = 4000) -> float:
        """Return the sampled ratio ``sup|eta| / kappa`` or raise if too large."""
        pts = self.geometry.radius * fibonacci_sphere(n_samples)
        ratio = float(np.max(np.abs(self.displacement_at(pts)))) / self.geometry.reach
        if ratio * self.cutoff.derivative_bound >= 1.0:
            raise InadmissibleDisplacement(
                f"ratio {ratio:.4f} incompatible with cutoff slope {self.cutoff.derivative_bound:.4f}"
            )
        return ratio


def hanzawa_forward(
    hmap: HanzawaMap, x: np.ndarray, *, tol: float = 1e-12
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Evaluate ``Psi``, its Jacobian and Jacobian determinant at points ``x``."""
    geom = hmap.geometry
    x = np.asarray(x, dtype=float)
    r = np.linalg.norm(x, axis=-1)
    if np.any(r > geom.radius * (1.0 + tol)):
        raise OutsideDomain("point outside the closed reference ball")
    kappa = geom.reach
    safe_r = np.where(r > 0, r, 1.0)
    n = x / safe_r[..., None]
    n = np.where((r > 0)[..., None], n, np.array([0.0, 0.0, 1.0]))
    q = geom.radius * n
    s = np.minimum(r - geom.radius, 0.0)
    b = hmap.cutoff(s / kappa)
    bp = hmap.cutoff.derivative(s / kappa) / kappa
    e = hmap.displacement_at(q)
    grad_e = field_gradient(hmap.displacement, q)

    y = x + (e * b)[..., None] * n
    eye = np.broadcast_to(np.eye(3), x.shape[:-1] + (3, 3))
    nn = n[..., :, None] * n[..., None, :]
    proj = eye - nn
    active = b > 0
    inv_r = np.where(active, 1.0 / safe_r, 0.0)
    jac = (
        eye
        + (b * e * inv_r)[..., None, None] * proj
        + (b * geom.radius * inv_r)[..., None, None] * (n[..., :, None] * grad_e[..., None, :])
        + (e * bp)[..., None, None] * nn
    )
    det = np.linalg.det(jac)
    return y, jac, det


def hanzawa_inverse(
    hmap: HanzawaMap,
    y: np.ndarray,
    *,
    tol: float = 1e-12,
    max_iter: int = 50,
) -> np.ndarray:
    """Invert the Hanzawa map by damped Newton iteration.

    The initial guess removes the displacement evaluated at the tubular
    projection of ``y``; a backtracking line search keeps the residual
    monotone.
    """
    geom = hmap.geometry
    y = np.asarray(y, dtype=float)
    shape = y.shape
    y = y.reshape(-1, 3)
    ry = np.linalg.norm(y, axis=-1)
    n_y = y / np.where(ry > 0, ry, 1.0)[:, None]
    n_y[ry == 0] = np.array([0.0, 0.0, 1.0])
    boundary_radius = geom.radius + hmap.displacement_at(geom.radius * n_y)
    if np.any(ry > boundary_radius + 1e3 * tol * geom.radius):
        raise OutsideDeformedDomain("point outside the closed deformed domain")

    near_surface = ry > geom.radius - geom.reach
    x = y.copy()
    if np.any(near_surface):
        tp = tubular_decompose(geom, y[near_surface])
        b = hmap.cutoff(tp.s / geom.reach)
        e = hmap.displacement_at(tp.q)
        x[near_surface] = y[near_surface] - (e * b)[:, None] * tp.normal

    def clip_inside(z: np.ndarray) -> np.ndarray:
        rz = np.linalg.norm(z, axis=-1)
        scale = np.where(rz > geom.radius, geom.radius / np.where(rz > 0, rz, 1.0), 1.0)
        return z * scale[:, None]

    x = clip_inside(x)
    scale = max(geom.radius, 1.0)
    for _ in range(max_iter):
        fx, jac, _ = hanzawa_forward(hmap, x)
        res = fx - y
        err = np.linalg.norm(res, axis=-1)
        if np.all(err <= tol * scale):
            return x.reshape(shape)
        step = np.linalg.solve(jac, res[..., None])[..., 0]
        lam = np.ones(len(x))
        todo = err > tol * scale
        for _ in range(30):
            trial = clip_inside(x - lam[:, None] * step)
            f_trial, _, _ = hanzawa_forward(hmap, trial)
            err_trial = np.linalg.norm(f_trial - y, axis=-1)
            bad = todo & (err_trial > err) & (lam > 1e-6)
            if not np.any(bad):
                break
            lam[bad] *= 0.5
        x = np.where(todo[:, None], clip_inside(x - lam[:, None] * step), x)
    fx, _, _ = hanzawa_forward(hmap, x)
    if np.any(np.linalg.norm(fx - y, axis=-1) > tol * scale):
        raise NoConvergence(f"Hanzawa inversion did not reach tol {tol} in {max_iter} iterations")
    return x.reshape(shape)


def boundary_map(hmap: HanzawaMap, q: np.ndarray) -> np.ndarray:
    """``Phi(q) = q + eta(q) nu(q)`` on the reference sphere."""
    q = np.asarray(q, dtype=float)
    nu = hmap.geometry.normal(q)
    return q + hmap.displacement_at(q)[..., None] * nu


def gamma_factor(geom: SphereGeometry, eta: SurfaceField | ArrayLike, q: np.ndarray | None = None) -> np.ndarray:
    """Area-element factor ``1 - 2 H eta + G eta**2``.

    ``eta`` may be a surface field (then ``q`` selects the evaluation points)
    or an array of displacement values.
    """
    if q is not None and hasattr(eta, "value"):
        values = eta.value(q)
    else:
        values = np.asarray(eta, dtype=float)
    return 1.0 - 2.0 * geom.mean_curvature * values + geom.gauss_curvature * values**2


def tau_margin(geom: SphereGeometry, eta_sup: float) -> float:
    """``(1 - |eta|_inf / kappa)^-1``, or ``math.inf`` once the reach is attained."""
    ratio = abs(float(eta_sup)) / geom.reach
    if ratio >= 1.0:
        return math.inf
    return 1.0 / (1.0 - ratio)


# ---------------------------------------------------------------------------
# zonal fast path
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RadialMapData:
    """Derivatives of ``rho(r, theta) = r + d(theta) beta((r - R) / kappa)``."""

    rho: np.ndarray
    rho_r: np.ndarray
    rho_t: np.ndarray
    rho_rr: np.ndarray
    rho_rt: np.ndarray
    rho_tt: np.ndarray

    @property
    def det(self) -> np.ndarray:
        return self.rho_r * self.rho**2

    def det_over_r2(self, r: np.ndarray) -> np.ndarray:
        return self.rho_r * (self.rho / r) ** 2


def radial_map_derivatives(
    geom: SphereGeometry,
    cutoff: CutoffProfile,
    r: np.ndarray,
    d: np.ndarray,
    d1: np.ndarray,
    d2: np.ndarray,
) -> RadialMapData:
    """Map data at reference nodes for a zonal displacement with derivatives ``d, d1, d2``."""
    kappa = geom.reach
    s = np.minimum((r - geom.radius) / kappa, 0.0)
    b = cutoff(s)
    bp = cutoff.derivative(s) / kappa
    bpp = cutoff.second_derivative(s) / kappa**2
    return RadialMapData(
        rho=r + d * b,
        rho_r=1.0 + d * bp,
        rho_t=d1 * b,
        rho_rr=d * bpp,
        rho_rt=d1 * bp,
        rho_tt=d2 * b,
    )


def radial_inverse(
    geom: SphereGeometry,
    cutoff: CutoffProfile,
    rho: np.ndarray,
    d: np.ndarray,
    *,
    tol: float = 1e-13,
    max_iter: int = 50,
) -> np.ndarray:
    """Solve ``r + d beta((r - R)/kappa) = rho`` for ``r`` (vectorized Newton)."""
    r = kernels.radial_inverse(
        np.ascontiguousarray(rho, dtype=float),
        np.ascontiguousarray(np.broadcast_to(d, np.shape(rho)), dtype=float),
        geom.radius,
        geom.reach,
        cutoff.plateau,
        cutoff.ramp,
        tol,
        max_iter,
    )
    if not np.all(np.isfinite(r)):
        raise NoConvergence("radial inversion failed")
    return r


# ---------------------------------------------------------------------------
# zonal surface grid and smooth interpolation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ZonalGrid:
    """Uniform colatitude grid on ``[0, pi]`` whose node ``i_gamma`` sits on ``theta_gamma``.

    The free part ``M`` consists of nodes ``i_gamma .. n``.  ``weights_m``
    are composite Simpson weights of ``dA`` restricted to ``M``.
    """

    geometry: SphereGeometry
    n: int

    def __post_init__(self) -> None:
        if self.n < 12:
            raise ValueError("surface grid needs at least 12 intervals")

    @property
    def h(self) -> float:
        return math.pi / self.n

    @property
    def theta(self) -> np.ndarray:
        return np.linspace(0.0, math.pi, self.n + 1)

    @property
    def i_gamma(self) -> int:
        return int(round(self.geometry.theta_gamma / self.h))

    @property
    def theta_gamma_effective(self) -> float:
        return self.i_gamma * self.h

    @property
    def theta_m(self) -> np.ndarray:
        return self.theta[self.i_gamma :]

    @property
    def m_slice(self) -> slice:
        return slice(self.i_gamma, None)

    def simpson(self, a: int, b: int) -> np.ndarray:
        """Composite Simpson weights on nodes ``a..b`` (3/8 rule closes odd counts)."""
        m = b - a
        if m == 1:
            return np.full(2, 0.5 * self.h)
        if m % 2 == 0:
            return _simpson_plain(m) * self.h
        w = np.zeros(m + 1)
        w[: m - 2] = _simpson_plain(m - 3)
        w[m - 3 :] += np.array([3.0, 9.0, 9.0, 3.0]) / 8.0
        return w * self.h

    @property
    def weights_m(self) -> np.ndarray:
        """Area weights on the nodes of ``M``."""
        R = self.geometry.radius
        w = self.simpson(self.i_gamma, self.n)
        return 2.0 * math.pi * R**2 * np.sin(self.theta_m) * w

    @property
    def weights_sphere(self) -> np.ndarray:
        R = self.geometry.radius
        w = self.simpson(0, self.n)
        return 2.0 * math.pi * R**2 * np.sin(self.theta) * w

    def extend_by_zero(self, values_m: np.ndarray) -> np.ndarray:
        values_m = np.asarray(values_m, dtype=float)
        out = np.zeros(values_m.shape[:-1] + (self.n + 1,))
        out[..., self.i_gamma :] = values_m
        return out


def _simpson_plain(m: int) -> np.ndarray:
    w = np.zeros(m + 1)
    if m == 0:
        return w
    w[0::2] = 2.0
    w[1::2] = 4.0
    w[0] = w[-1] = 1.0
    return w / 3.0


class CosineSeries:
    """Spectral interpolation of zonal samples on the uniform grid ``[0, pi]``.

    A smooth zonal function is an even, ``2 pi``-periodic function of theta,
    so a DCT-I of the grid samples gives a cosine series whose derivatives
    are exact.  ``evaluation_matrices`` returns dense matrices that map grid
    samples to values, first and second derivatives at arbitrary nodes.
    """

    def __init__(self, n: int) -> None:
        self.n = n
        self._analysis = fft.dct(np.eye(n + 1), type=1, axis=0) / n
        self._analysis[0] *= 0.5
        self._analysis[-1] *= 0.5

    def coefficients(self, samples: np.ndarray) -> np.ndarray:
        return samples @ self._analysis.T

    def evaluation_matrices(self, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        k = np.arange(self.n + 1)
        arg = np.outer(theta, k)
        c = np.cos(arg)
        s = np.sin(arg)
        e0 = c @ self._analysis
        e1 = (-s * k) @ self._analysis
        e2 = (-c * k**2) @ self._analysis
        return e0, e1, e2

    def filter_matrix(self, multipliers: np.ndarray) -> np.ndarray:
        """Matrix mapping grid samples to grid samples of the series with coefficients scaled by ``multipliers``."""
        k = np.arange(self.n + 1)
        theta = np.linspace(0.0, math.pi, self.n + 1)
        return (np.cos(np.outer(theta, k)) * multipliers) @ self._analysis


def icosphere(subdivisions: int, radius: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Vertices and triangles of a subdivided icosahedron projected to the sphere."""
    t = (1.0 + 5**0.5) / 2.0
    verts = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    v = [np.array(p, dtype=float) / np.linalg.norm(p) for p in verts]
    for _ in range(subdivisions):
        cache: dict[tuple[int, int], int] = {}
        new_faces = []

        def midpoint(i: int, j: int) -> int:
            key = (min(i, j), max(i, j))
            if key not in cache:
                m = v[i] + v[j]
                v.append(m / np.linalg.norm(m))
                cache[key] = len(v) - 1
            return cache[key]

        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return radius * np.array(v), np.array(faces, dtype=int)


def triangle_quadrature(vertices: np.ndarray, faces: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Midpoint quadrature on a triangulated sphere.

    Returns centroids projected to the sphere, the flat triangle areas and
    the flat triangle unit normals.
    """
    a, b, c = (vertices[faces[:, i]] for i in range(3))
    cross = np.cross(b - a, c - a)
    area = 0.5 * np.linalg.norm(cross, axis=-1)
    normal = cross / (2.0 * area[:, None])
    centroid = (a + b + c) / 3.0
    radius = np.linalg.norm(vertices[0])
    centroid = radius * centroid / np.linalg.norm(centroid, axis=-1, keepdims=True)
    return centroid, area, normal
