"""Operators acting between the reference ball and the deformed domain.

* :func:`pushforward` / :func:`inverse_pushforward` transport vector fields
  with the Piola rule ``T phi = (J phi / det J) o Psi^-1``, which keeps
  divergence-free fields divergence free.
* :func:`extend_boundary` lifts a compatible normal boundary datum ``b nu``
  to a divergence-free field on the enlarged ball ``B_alpha``: an explicit
  layer formula near the boundary and a Stokes solve inside.
* :func:`mean_correct` removes the ``gamma``-weighted mean of a boundary
  datum with a fixed bump, :func:`surface_trace` samples fields on the
  deformed boundary and :func:`ibp_defect` measures the integration-by-parts
  identity for normal-trace fields.

Axisymmetric fields are represented through Stokes stream functions
(:class:`StreamField`); for those the pushforward is a plain change of the
radial variable.  Arbitrary fields go through the three-dimensional Hanzawa
map (:class:`VolumeField`).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np
from scipy import integrate

from .errors import (
    DegenerateBump,
    IncompatibleFlux,
    IncompatibleMean,
    InadmissibleDisplacement,
    NonNormalTrace,
    OutsideDeformedDomain,
    StokesFailure,
)
from .geometry import (
    HanzawaMap,
    SphereGeometry,
    ZonalField,
    boundary_map,
    hanzawa_forward,
    hanzawa_inverse,
    radial_inverse,
    radial_map_derivatives,
    tubular_decompose,
)
from .kernels import stream_push
from .stokes import (
    D_R,
    D_RR,
    D_RT,
    D_T,
    D_TT,
    PSI,
    AxisymmetricBoundaryData,
    AxisymmetricStokesSolver,
    StreamSolution,
    axisymmetric_to_cartesian,
    cartesian_to_meridian,
    cumulative_polar_integral,
    gradient_divergence,
    stream_gradient,
    stream_velocity,
)

StreamFunction = Callable[[np.ndarray, np.ndarray], np.ndarray]


class Domain(enum.Enum):
    REFERENCE = "reference"
    DEFORMED = "deformed"
    ENLARGED = "enlarged"


# ---------------------------------------------------------------------------
# field containers
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VolumeField:
    """Vector field given by a Cartesian evaluator on a tagged domain.

    ``divergence`` uses the supplied exact evaluator when there is one and
    central differences otherwise.
    """

    values: Callable[[np.ndarray], np.ndarray]
    domain: Domain = Domain.REFERENCE
    exact_divergence: Callable[[np.ndarray], np.ndarray] | None = None

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.values(np.asarray(x, dtype=float))

    def divergence(self, x: np.ndarray, step: float = 2e-4) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.exact_divergence is not None:
            return self.exact_divergence(x)
        return _central_divergence(self.values, x, step)


def _central_divergence(values: Callable[[np.ndarray], np.ndarray], x: np.ndarray, step: float) -> np.ndarray:
    """Fourth-order five-point central differences, one axis at a time."""
    out = np.zeros(x.shape[:-1])
    for axis, e in enumerate(np.eye(3)):
        near = values(x + step * e)[..., axis] - values(x - step * e)[..., axis]
        far = values(x + 2.0 * step * e)[..., axis] - values(x - 2.0 * step * e)[..., axis]
        out += (8.0 * near - far) / (12.0 * step)
    return out


@dataclass(frozen=True)
class StreamField:
    """Axisymmetric swirl-free field built from piecewise stream functions.

    ``pieces[k]`` maps ``(rho, theta)`` to the derivative stack
    ``(psi, psi_r, psi_t, psi_rr, psi_rt, psi_tt)``; ``selector`` returns the
    index of the piece owning each point.  Fields glued from several
    pieces are continuous but their gradients may jump across interfaces,
    so the discrete divergence differentiates the owning piece only.
    """

    pieces: tuple[StreamFunction, ...]
    selector: Callable[[np.ndarray, np.ndarray], np.ndarray]
    domain: Domain = Domain.REFERENCE
    interfaces: tuple[float, ...] = ()

    @classmethod
    def single(cls, stream: StreamFunction, domain: Domain = Domain.REFERENCE) -> "StreamField":
        return cls((stream,), lambda r, th: np.zeros(np.shape(r), dtype=int), domain)

    @classmethod
    def from_solution(cls, solution: StreamSolution, domain: Domain = Domain.REFERENCE) -> "StreamField":
        return cls.single(solution.derivatives, domain)

    def derivatives(self, rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
        rho, theta = np.broadcast_arrays(np.asarray(rho, dtype=float), np.asarray(theta, dtype=float))
        if len(self.pieces) == 1:
            return self.pieces[0](rho, theta)
        owner = self.selector(rho, theta)
        out = np.zeros((6,) + rho.shape)
        for k, piece in enumerate(self.pieces):
            mask = owner == k
            if np.any(mask):
                out[:, mask] = piece(rho[mask], theta[mask])
        return out

    def velocity(self, rho: np.ndarray, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        return stream_velocity(rho, theta, self.derivatives(rho, theta))

    def gradient(self, rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
        return stream_gradient(rho, theta, self.derivatives(rho, theta))

    def divergence_meridian(self, rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """Divergence from the analytic velocity gradient (zero up to rounding)."""
        return gradient_divergence(self.gradient(rho, theta))

    def _cartesian_piece(self, k: int) -> Callable[[np.ndarray], np.ndarray]:
        def values(x: np.ndarray) -> np.ndarray:
            r, th, ph = cartesian_to_meridian(x)
            u_r, u_t = stream_velocity(r, th, self.pieces[k](r, th))
            return axisymmetric_to_cartesian(u_r, u_t, th, ph)

        return values

    def __call__(self, x: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        r, th, ph = cartesian_to_meridian(x)
        u_r, u_t = self.velocity(r, th)
        return axisymmetric_to_cartesian(u_r, u_t, th, ph)

    def divergence(self, x: np.ndarray, step: float = 2e-4) -> np.ndarray:
        """Central-difference divergence, differentiating the piece owning each centre."""
        x = np.asarray(x, dtype=float)
        r, th, _ = cartesian_to_meridian(x)
        owner = self.selector(r, th)
        out = np.zeros(x.shape[:-1])
        for k in range(len(self.pieces)):
            mask = owner == k
            if np.any(mask):
                out[mask] = _central_divergence(self._cartesian_piece(k), x[mask], step)
        return out

    def as_volume_field(self) -> VolumeField:
        return VolumeField(self.__call__, self.domain)


# ---------------------------------------------------------------------------
# pushforward
# ---------------------------------------------------------------------------


def _is_zonal_map(hmap: HanzawaMap) -> bool:
    return isinstance(hmap.displacement, (ZonalField, int, float))


def _zonal_displacement(hmap: HanzawaMap) -> ZonalField:
    disp = hmap.displacement
    if isinstance(disp, ZonalField):
        return disp
    return ZonalField.constant(float(disp), hmap.geometry.radius)


def _check_map(hmap: HanzawaMap) -> None:
    """Raise :class:`InadmissibleDisplacement` unless the cutoff keeps the map invertible."""
    hmap.check_admissible()


def pushed_stream(hmap: HanzawaMap, stream: StreamFunction) -> StreamFunction:
    """Stream function of the pushforward: ``psi~(rho, theta) = psi(r(rho, theta), theta)``."""
    geom, cutoff = hmap.geometry, hmap.cutoff
    disp = _zonal_displacement(hmap)

    def derivatives(rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
        d = disp(theta)
        r = radial_inverse(geom, cutoff, rho, d)
        m = radial_map_derivatives(geom, cutoff, r, d, disp.d1(theta), disp.d2(theta))
        ref = stream(r, theta)
        pushed = stream_push(
            *(np.ascontiguousarray(ref[k]) for k in (D_R, D_T, D_RR, D_RT, D_TT)),
            *(np.ascontiguousarray(np.broadcast_to(v, r.shape)) for v in (m.rho_r, m.rho_t, m.rho_rr, m.rho_rt, m.rho_tt)),
        )
        return np.stack([ref[PSI], *pushed])

    return derivatives


def pulled_stream(hmap: HanzawaMap, stream: StreamFunction) -> StreamFunction:
    """Stream function of the inverse pushforward: ``psi(r, theta) = psi~(rho(r, theta), theta)``."""
    geom, cutoff = hmap.geometry, hmap.cutoff
    disp = _zonal_displacement(hmap)

    def derivatives(r: np.ndarray, theta: np.ndarray) -> np.ndarray:
        m = radial_map_derivatives(geom, cutoff, r, disp(theta), disp.d1(theta), disp.d2(theta))
        p = stream(m.rho, theta)
        return np.stack(
            [
                p[PSI],
                p[D_R] * m.rho_r,
                p[D_R] * m.rho_t + p[D_T],
                p[D_RR] * m.rho_r**2 + p[D_R] * m.rho_rr,
                (p[D_RR] * m.rho_t + p[D_RT]) * m.rho_r + p[D_R] * m.rho_rt,
                p[D_RR] * m.rho_t**2 + 2.0 * p[D_RT] * m.rho_t + p[D_TT] + p[D_R] * m.rho_tt,
            ]
        )

    return derivatives


def pushforward(hmap: HanzawaMap, phi: VolumeField | StreamField) -> VolumeField | StreamField:
    """Piola transport ``T phi = (J phi / det J) o Psi^-1`` onto the deformed domain.

    Stream fields under a zonal displacement stay stream fields; everything
    else is evaluated pointwise through the inverse Hanzawa map.
    """
    _check_map(hmap)
    if isinstance(phi, StreamField):
        if not _is_zonal_map(hmap):
            raise TypeError("stream fields can only be pushed by zonal displacements")
        geom, cutoff = hmap.geometry, hmap.cutoff
        disp = _zonal_displacement(hmap)

        def selector(rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
            return phi.selector(radial_inverse(geom, cutoff, rho, disp(theta)), theta)

        return StreamField(
            tuple(pushed_stream(hmap, piece) for piece in phi.pieces), selector, Domain.DEFORMED, phi.interfaces
        )

    def values(y: np.ndarray) -> np.ndarray:
        x = hanzawa_inverse(hmap, y)
        _, jac, det = hanzawa_forward(hmap, x)
        return np.einsum("...ij,...j->...i", jac, phi(x)) / det[..., None]

    return VolumeField(values, Domain.DEFORMED)


def inverse_pushforward(hmap: HanzawaMap, v: VolumeField | StreamField) -> VolumeField | StreamField:
    """Inverse Piola transport ``T^-1 v = det J J^-1 (v o Psi)`` back to the reference ball."""
    _check_map(hmap)
    if isinstance(v, StreamField):
        if not _is_zonal_map(hmap):
            raise TypeError("stream fields can only be pulled back by zonal displacements")
        geom, cutoff = hmap.geometry, hmap.cutoff
        disp = _zonal_displacement(hmap)

        def selector(r: np.ndarray, theta: np.ndarray) -> np.ndarray:
            m = radial_map_derivatives(geom, cutoff, r, disp(theta), disp.d1(theta), disp.d2(theta))
            return v.selector(m.rho, theta)

        return StreamField(
            tuple(pulled_stream(hmap, piece) for piece in v.pieces), selector, Domain.REFERENCE, v.interfaces
        )

    def values(x: np.ndarray) -> np.ndarray:
        y, jac, det = hanzawa_forward(hmap, x)
        return det[..., None] * np.linalg.solve(jac, v(y)[..., None])[..., 0]

    return VolumeField(values, Domain.REFERENCE)


# ---------------------------------------------------------------------------
# boundary data, compatibility and mean correction
# ---------------------------------------------------------------------------


def _breaks(geometry: SphereGeometry, *fields: ZonalField) -> tuple[float, ...]:
    points = {geometry.theta_gamma}
    for f in fields:
        points.update(f.breakpoints)
    return tuple(sorted(points))


def weighted_mean(geometry: SphereGeometry, b: ZonalField, eta: ZonalField) -> float:
    """Compatibility functional ``a(b, eta) = int_M b gamma(eta) dA``.

    On the sphere ``gamma(eta) dA = (R + eta)**2 sin(theta) dtheta dphi``.
    """
    R = geometry.radius
    tg = geometry.theta_gamma

    def integrand(th: np.ndarray) -> np.ndarray:
        return np.where(th >= tg, (R + eta(th)) ** 2 * b(th), 0.0)

    return 2.0 * math.pi * float(cumulative_polar_integral(integrand, np.array(math.pi), 64, _breaks(geometry, b, eta)))


@dataclass(frozen=True)
class BoundaryDatum:
    """Scalar normal datum ``b`` on the sphere, supported in ``M``, paired with a displacement."""

    geometry: SphereGeometry
    b: ZonalField
    eta: ZonalField

    @cached_property
    def mean(self) -> float:
        return weighted_mean(self.geometry, self.b, self.eta)

    def __call__(self, theta: np.ndarray) -> np.ndarray:
        return self.b(theta)


def antipodal_bump(geometry: SphereGeometry, width: float = math.pi / 4) -> ZonalField:
    """Smooth bump ``exp(1 - 1/(1 - t**2))`` with ``t = (pi - theta)/width``, peak 1 at the south pole."""
    if width <= 0 or math.pi - width <= geometry.theta_gamma:
        raise ValueError("bump support must be a proper cap inside M")

    def parts(th: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        t = (math.pi - np.asarray(th, dtype=float)) / width
        inside = np.abs(t) < 1.0
        one_minus = np.where(inside, 1.0 - t**2, 1.0)
        g = np.where(inside, np.exp(1.0 - 1.0 / one_minus), 0.0)
        g1 = g * (-2.0 * t / one_minus**2)
        g2 = g * (4.0 * t**2 / one_minus**4 - 2.0 / one_minus**2 - 8.0 * t**2 / one_minus**3)
        return g, -g1 / width, g2 / width**2

    return ZonalField(
        lambda th: parts(th)[0],
        lambda th: parts(th)[1],
        lambda th: parts(th)[2],
        geometry.radius,
        (math.pi - width,),
    )


BUMP_THRESHOLD = 1e-12


def mean_correct(
    geometry: SphereGeometry, b: ZonalField, eta: ZonalField, bump: ZonalField | None = None
) -> ZonalField:
    """``M b = b - bump a(b, eta) / a(bump, eta)``, the datum with zero weighted mean."""
    bump = bump if bump is not None else antipodal_bump(geometry)
    bump_mean = weighted_mean(geometry, bump, eta)
    if bump_mean < BUMP_THRESHOLD * geometry.area:
        raise DegenerateBump(f"bump has weighted mean {bump_mean:.3e}")
    factor = weighted_mean(geometry, b, eta) / bump_mean
    if factor == 0.0:
        return b
    correction = bump.scaled(-factor)
    return ZonalField(
        lambda th: b(th) + correction(th),
        lambda th: b.d1(th) + correction.d1(th),
        lambda th: b.d2(th) + correction.d2(th),
        b.radius,
        tuple(sorted(set(b.breakpoints) | set(bump.breakpoints))),
    )


def grid_weighted_mean(values: np.ndarray, eta: np.ndarray, area_weights: np.ndarray, radius: float) -> float:
    """Discrete ``a(b, eta)`` from nodal values and reference area weights."""
    return float(np.sum(area_weights * (1.0 + eta / radius) ** 2 * values))


def mean_correct_values(
    values: np.ndarray, eta: np.ndarray, bump: np.ndarray, area_weights: np.ndarray, radius: float
) -> np.ndarray:
    """Nodal version of :func:`mean_correct` with a matching discrete mean."""
    bump_mean = grid_weighted_mean(bump, eta, area_weights, radius)
    if bump_mean < BUMP_THRESHOLD * float(np.sum(area_weights)):
        raise DegenerateBump(f"bump has weighted mean {bump_mean:.3e}")
    return values - bump * grid_weighted_mean(values, eta, area_weights, radius) / bump_mean


# ---------------------------------------------------------------------------
# boundary extension
# ---------------------------------------------------------------------------


def normal_divergence(geometry: SphereGeometry, x: np.ndarray, step: float = 1e-6) -> np.ndarray:
    """``-div(nu o q)`` at points of the tubular neighbourhood, by central differences."""
    x = np.asarray(x, dtype=float)

    def normal_field(z: np.ndarray) -> np.ndarray:
        return tubular_decompose(geometry, z).normal

    return -_central_divergence(normal_field, x, step)


def layer_factor(
    geometry: SphereGeometry, q: np.ndarray, eta: float, s: float, *, closed_form: bool = True
) -> float:
    """``exp(int_eta^s normal_divergence(q + tau nu) dtau)`` along one normal ray.

    The closed form on the sphere is ``((R + eta) / (R + s))**2``; the
    quadrature route integrates the numerically differentiated normal
    divergence adaptively.
    """
    R = geometry.radius
    if closed_form:
        return ((R + eta) / (R + s)) ** 2
    nu = geometry.normal(np.asarray(q, dtype=float))

    def integrand(tau: float) -> float:
        return float(normal_divergence(geometry, np.asarray(q) + tau * nu))

    value, _ = integrate.quad(integrand, eta, s, epsabs=1e-12, epsrel=1e-12)
    return math.exp(value)


def default_alpha(geometry: SphereGeometry, eta_sup: float, fraction: float = 0.5) -> float:
    """Layer depth between ``|eta|_inf`` and the reach."""
    if not 0.0 < fraction < 1.0:
        raise ValueError("alpha fraction must lie in (0, 1)")
    if eta_sup >= geometry.reach:
        raise InadmissibleDisplacement("displacement reaches the tubular neighbourhood")
    return eta_sup + fraction * (geometry.reach - eta_sup)


@dataclass(frozen=True)
class BoundaryExtension:
    """Divergence-free extension of ``b nu`` with its two pieces exposed."""

    field: StreamField
    alpha: float
    inner_radius: float
    interior: StreamSolution
    datum: BoundaryDatum

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return self.field(x)

    def divergence(self, x: np.ndarray, step: float = 2e-4) -> np.ndarray:
        return self.field.divergence(x, step)


def extend_boundary(
    geometry: SphereGeometry,
    b: ZonalField,
    eta: ZonalField,
    alpha: float | None = None,
    *,
    alpha_fraction: float = 0.5,
    mean_tol: float = 1e-10,
    max_degree: int = 10,
    n_radial: int = 4,
) -> BoundaryExtension:
    """Lift ``b nu`` to a divergence-free field on the ball of radius ``R + alpha``.

    For ``rho >= R - alpha`` the field is ``(R + eta)**2 b / rho**2 e_r``,
    the layer formula with the sphere's normal divergence ``-2/r``.  Its
    stream function ``int_0^theta (R + eta)**2 b sin`` does not depend on
    ``rho``.  Inside, the radial trace on ``rho = R - alpha`` is extended by
    the axisymmetric Stokes solver.
    """
    R = geometry.radius
    datum = BoundaryDatum(geometry, b, eta)
    eta_sup = eta.sup_norm()
    if alpha is None:
        alpha = default_alpha(geometry, eta_sup, alpha_fraction)
    if not eta_sup < alpha < geometry.reach:
        raise InadmissibleDisplacement(f"need |eta|_inf < alpha < kappa, got alpha={alpha}")
    scale = weighted_mean(geometry, _absolute(b), eta)
    if abs(datum.mean) > mean_tol * max(scale, 1e-300):
        raise IncompatibleMean(f"datum has weighted mean {datum.mean:.3e}", datum.mean)

    inner = R - alpha
    weighted = eta.shifted(R) * eta.shifted(R) * b
    breaks = _breaks(geometry, b, eta)

    def flux(theta: np.ndarray) -> np.ndarray:
        return cumulative_polar_integral(weighted.profile, theta, 48, breaks)

    def layer(rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
        s, c = np.sin(theta), np.cos(theta)
        w0, w1 = weighted(theta), weighted.d1(theta)
        zero = np.zeros_like(rho)
        return np.stack([flux(theta) + zero, zero, w0 * s + zero, zero, zero, w1 * s + w0 * c + zero])

    data = AxisymmetricBoundaryData.normal(
        ZonalField(
            lambda th: weighted(th) / inner**2,
            lambda th: weighted.d1(th) / inner**2,
            lambda th: weighted.d2(th) / inner**2,
            inner,
            weighted.breakpoints,
        ),
        inner,
    )
    try:
        interior = AxisymmetricStokesSolver(inner, max_degree, n_radial).solve(data)
    except IncompatibleFlux as exc:  # pragma: no cover - excluded by the mean check
        raise StokesFailure(str(exc)) from exc

    def selector(rho: np.ndarray, theta: np.ndarray) -> np.ndarray:
        return (np.asarray(rho) >= inner).astype(int)

    stream = StreamField((interior.derivatives, layer), selector, Domain.ENLARGED, (inner,))
    return BoundaryExtension(stream, alpha, inner, interior, datum)


def _absolute(b: ZonalField) -> ZonalField:
    return ZonalField(lambda th: np.abs(b(th)), b.d1, b.d2, b.radius, b.breakpoints)


# ---------------------------------------------------------------------------
# traces and integration by parts
# ---------------------------------------------------------------------------


def surface_trace(hmap: HanzawaMap, v: Callable[[np.ndarray], np.ndarray], q: np.ndarray) -> np.ndarray:
    """``(v o Psi)`` at reference boundary points ``q``, i.e. ``v`` sampled on the deformed boundary."""
    return v(boundary_map(hmap, q))


@dataclass(frozen=True)
class ScalarTestField:
    """Smooth scalar on physical space with its Cartesian gradient."""

    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]


@dataclass(frozen=True)
class MeridianCells:
    """Composite midpoint rule on the deformed ball, split at radial interfaces.

    ``weights`` already include the volume element ``rho**2 sin(theta)``
    and the azimuthal angle.
    """

    rho: np.ndarray
    theta: np.ndarray
    phi: np.ndarray
    weights: np.ndarray
    boundary_theta: np.ndarray
    boundary_phi: np.ndarray
    boundary_weights: np.ndarray


def _segments(lo: float, hi: float, breaks: Sequence[float], n: int) -> tuple[np.ndarray, np.ndarray]:
    edges = [lo, *[t for t in sorted(breaks) if lo < t < hi], hi]
    mids, widths = [], []
    for a, b in zip(edges[:-1], edges[1:]):
        m = max(1, round(n * (b - a) / (hi - lo)))
        h = (b - a) / m
        mids.append(a + h * (np.arange(m) + 0.5))
        widths.append(np.full(m, h))
    return np.concatenate(mids), np.concatenate(widths)


def meridian_cells(
    geometry: SphereGeometry,
    eta: ZonalField,
    n_theta: int,
    n_rho: int,
    *,
    interfaces: Sequence[float] = (),
    theta_breaks: Sequence[float] = (),
    n_phi: int = 1,
) -> MeridianCells:
    """Midpoint cells of the deformed ball ``rho <= R + eta(theta)``."""
    R = geometry.radius
    theta, dtheta = _segments(0.0, math.pi, theta_breaks, n_theta)
    phi = 2.0 * math.pi * (np.arange(n_phi) + 0.5) / n_phi
    dphi = 2.0 * math.pi / n_phi
    outer = R + eta(theta)
    cuts = sorted(t for t in interfaces if 0.0 < t < float(np.min(outer)))
    rho_parts, w_parts, th_parts = [], [], []
    for i, (th, dth, top) in enumerate(zip(theta, dtheta, outer)):
        edges = [0.0, *cuts, top]
        for a, b in zip(edges[:-1], edges[1:]):
            m = max(1, round(n_rho * (b - a) / top))
            h = (b - a) / m
            rho = a + h * (np.arange(m) + 0.5)
            rho_parts.append(rho)
            th_parts.append(np.full(m, th))
            w_parts.append(rho**2 * math.sin(th) * h * dth)
    rho = np.concatenate(rho_parts)
    th = np.concatenate(th_parts)
    w = np.concatenate(w_parts)
    grid_rho = np.repeat(rho[:, None], n_phi, 1).ravel()
    grid_th = np.repeat(th[:, None], n_phi, 1).ravel()
    grid_phi = np.tile(phi, len(rho))
    grid_w = np.repeat(w[:, None] * dphi, n_phi, 1).ravel()
    b_th = np.repeat(theta[:, None], n_phi, 1).ravel()
    b_phi = np.tile(phi, len(theta))
    b_w = np.repeat((outer**2 * np.sin(theta) * dtheta)[:, None] * dphi, n_phi, 1).ravel()
    return MeridianCells(grid_rho, grid_th, grid_phi, grid_w, b_th, b_phi, b_w)


def _spherical_frame(theta: np.ndarray, phi: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    e_r = np.stack([np.sin(theta) * np.cos(phi), np.sin(theta) * np.sin(phi), np.cos(theta)], -1)
    e_t = np.stack([np.cos(theta) * np.cos(phi), np.cos(theta) * np.sin(phi), -np.sin(theta)], -1)
    return e_r, e_t


def ibp_defect(
    geometry: SphereGeometry,
    phi: StreamField | BoundaryExtension,
    psi: ScalarTestField,
    eta: ZonalField,
    *,
    n_theta: int = 48,
    n_rho: int = 24,
    n_phi: int = 1,
    theta_breaks: Sequence[float] = (),
    trace_tol: float = 1e-8,
) -> float:
    """``int phi . grad psi + int (div phi) psi - int_dOmega b gamma(eta) tr psi`` on the deformed ball.

    The normal datum ``b`` is read off the trace of ``phi``; a tangential
    trace raises :class:`NonNormalTrace`.  All integrals use the composite
    midpoint rule, so the defect decays like the square of the cell size.
    """
    stream = phi.field if isinstance(phi, BoundaryExtension) else phi
    breaks = tuple(theta_breaks) or _breaks(geometry, eta)
    cells = meridian_cells(
        geometry, eta, n_theta, n_rho, interfaces=stream.interfaces, theta_breaks=breaks, n_phi=n_phi
    )
    R = geometry.radius

    u_r, u_t = stream.velocity(cells.rho, cells.theta)
    div = stream.divergence_meridian(cells.rho, cells.theta)
    e_r, e_t = _spherical_frame(cells.theta, cells.phi)
    y = cells.rho[:, None] * e_r
    grad_psi = psi.gradient(y)
    dot = u_r * np.einsum("ni,ni->n", e_r, grad_psi) + u_t * np.einsum("ni,ni->n", e_t, grad_psi)
    volume = float(np.sum(cells.weights * (dot + div * psi.value(y))))

    outer = R + eta(cells.boundary_theta)
    b_r, b_t = stream.velocity(outer, cells.boundary_theta)
    # the deformed boundary normal need not be radial; the trace must still equal b nu
    if np.max(np.abs(b_t)) > trace_tol * (1.0 + np.max(np.abs(b_r))):
        raise NonNormalTrace(f"tangential trace {np.max(np.abs(b_t)):.3e}")
    be_r, _ = _spherical_frame(cells.boundary_theta, cells.boundary_phi)
    surface = float(np.sum(cells.boundary_weights * b_r * psi.value(outer[:, None] * be_r)))
    return volume - surface


def sample_deformed_interior(
    geometry: SphereGeometry, eta: ZonalField, rng: np.random.Generator, n: int, margin: float = 0.05
) -> np.ndarray:
    """Random Cartesian points inside the deformed ball, at least ``margin`` from its boundary."""
    theta = np.arccos(rng.uniform(-1.0, 1.0, n))
    phi = rng.uniform(0.0, 2.0 * math.pi, n)
    top = geometry.radius + eta(theta) - margin
    rho = top * rng.uniform(0.05, 1.0, n) ** (1.0 / 3.0)
    e_r, _ = _spherical_frame(theta, phi)
    if np.any(top <= 0):
        raise OutsideDeformedDomain("margin exceeds the deformed radius")
    return rho[:, None] * e_r


__all__ = [
    "BoundaryDatum",
    "BoundaryExtension",
    "Domain",
    "MeridianCells",
    "ScalarTestField",
    "StreamField",
    "VolumeField",
    "antipodal_bump",
    "default_alpha",
    "extend_boundary",
    "grid_weighted_mean",
    "ibp_defect",
    "inverse_pushforward",
    "layer_factor",
    "mean_correct",
    "mean_correct_values",
    "meridian_cells",
    "normal_divergence",
    "pushed_stream",
    "pulled_stream",
    "pushforward",
    "sample_deformed_interior",
    "surface_trace",
    "weighted_mean",
]
