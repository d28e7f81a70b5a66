"""Divergence-free Galerkin basis on the moving domain and its time integration.

The reference basis lives on the ball: interior fields are zero-trace stream
modes and surface fields are clamped zero-mean profiles together with their
Stokes lifts.  At each time the basis is pushed to the deformed domain by the
zonal Hanzawa map.  Volume integrals use one fixed reference quadrature whose
nodes move with the map, weighted by the Jacobian determinant, so no remeshing
is ever needed and only the compiled push kernel runs per time level.

The semi-discrete system reads

    A(t) a'(t) = B(t) a(t) + int_0^t C(t, s) a(s) ds + D(t)

with ``A`` the combined fluid and shell mass, ``B = -(S + N + V)`` (transport,
skew convective and viscous parts), ``C(t, s) = -Y(t) Q Y(s)^T`` the elastic
memory and ``D`` the loads including the elastic force of the initial
displacement.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Protocol

import numpy as np
from numpy.polynomial import Legendre, Polynomial
from numpy.polynomial.legendre import leggauss
from scipy import linalg

from .errors import (
    InadmissibleDisplacement,
    IncompatibleInitialRate,
    LinearSolveFailure,
    NonSPDMass,
    RankDeficientBasis,
)
from .geometry import (
    CosineSeries,
    CutoffProfile,
    SphereGeometry,
    ZonalField,
    radial_inverse,
    radial_map_derivatives,
)
from .kernels import bilinear, stream_push
from .shell import ClampedZonalGrid
from .stokes import (
    D_R,
    D_RR,
    D_RT,
    D_T,
    D_TT,
    PSI,
    AxisymmetricBoundaryData,
    AxisymmetricStokesSolver,
    StreamMode,
    StreamSolution,
    stream_gradient,
    stream_velocity,
    zero_trace_modes,
)

GRAM_TOL = 1e-8

# ---------------------------------------------------------------------------
# reference basis
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ReferenceBasis:
    """Reference fields on the ball, enumerated as ``Y_1, X_1, Y_2, X_2, ...``.

    ``interior`` holds zero-trace stream modes with L2 normalizing ``scales``.
    ``profiles`` are the clamped surface functions (orthonormal in L2(M),
    zero mean) as polynomials in ``cos theta``; ``lifts`` are their Stokes
    extensions with trace ``profile * nu``.
    """

    geometry: SphereGeometry
    interior: tuple[StreamMode, ...]
    scales: tuple[float, ...]
    profiles: tuple[Polynomial, ...]
    lifts: tuple[StreamSolution, ...]

    @property
    def size(self) -> int:
        return len(self.interior) + len(self.profiles)

    @cached_property
    def layout(self) -> tuple[tuple[str, int], ...]:
        """``(kind, index)`` per basis slot; kind is ``"Y"`` or ``"X"``."""
        ys = [("Y", k) for k in range(len(self.profiles))]
        xs = [("X", k) for k in range(len(self.interior))]
        out: list[tuple[str, int]] = []
        for k in range(max(len(ys), len(xs))):
            out.extend(ys[k : k + 1])
            out.extend(xs[k : k + 1])
        return tuple(out)

    @property
    def surface_slots(self) -> np.ndarray:
        return np.array([i for i, (kind, _) in enumerate(self.layout) if kind == "Y"], dtype=int)

    @property
    def interior_slots(self) -> np.ndarray:
        return np.array([i for i, (kind, _) in enumerate(self.layout) if kind == "X"], dtype=int)

    def stream(self, slot: int, r: np.ndarray, theta: np.ndarray) -> np.ndarray:
        """Derivative stack of the reference stream function of basis ``slot``."""
        kind, k = self.layout[slot]
        if kind == "X":
            return self.scales[k] * self.interior[k].derivatives(r, theta)
        return self.lifts[k].derivatives(r, theta)

    def surface_values(self, slot: int, theta: np.ndarray) -> np.ndarray:
        """Reference surface function on ``M`` (zero for interior slots and on the clamp region)."""
        theta = np.asarray(theta, dtype=float)
        kind, k = self.layout[slot]
        if kind == "X":
            return np.zeros_like(theta)
        mu = np.cos(theta)
        return np.where(mu < math.cos(self.geometry.theta_gamma), self.profiles[k](mu), 0.0)

    def profile_field(self, k: int) -> ZonalField:
        return ZonalField.from_polynomial(
            self.profiles[k], self.geometry.radius, mu_cut=math.cos(self.geometry.theta_gamma)
        )


def clamped_polynomials(geometry: SphereGeometry, count: int) -> list[Polynomial]:
    """Orthonormal (in L2(M)) zero-mean profiles ``(mu_G - mu)^2 p(mu)`` on ``M``.

    Starts from ``count + 1`` clamped Legendre products and removes the mean
    with the first one, then orthonormalizes by Cholesky.
    """
    mu_g = math.cos(geometry.theta_gamma)
    area = 2.0 * math.pi * geometry.radius**2
    square = Polynomial([mu_g, -1.0]) ** 2
    to_unit = Polynomial([(1.0 - mu_g) / (1.0 + mu_g), 2.0 / (1.0 + mu_g)])  # [-1, mu_g] -> [-1, 1]
    raw = [square * Legendre.basis(k).convert(kind=Polynomial)(to_unit) for k in range(count + 1)]
    x, w = leggauss(2 * count + 12)
    mu = 0.5 * (mu_g + 1.0) * x + 0.5 * (mu_g - 1.0)
    w = 0.5 * (mu_g + 1.0) * w * area

    def inner(p: Polynomial, q: Polynomial) -> float:
        return float(np.sum(w * p(mu) * q(mu)))

    means = [inner(p, Polynomial([1.0])) for p in raw]
    centred = [raw[k + 1] - (means[k + 1] / means[0]) * raw[0] for k in range(count)]
    gram = np.array([[inner(p, q) for q in centred] for p in centred])
    if np.min(linalg.eigvalsh(gram)) <= GRAM_TOL * np.max(np.abs(gram)):
        raise RankDeficientBasis("clamped surface profiles are numerically dependent")
    inv_chol = linalg.inv(linalg.cholesky(gram, lower=True))
    return [sum((inv_chol[i, j] * centred[j] for j in range(i + 1)), Polynomial([0.0])) for i in range(count)]


def interior_mode_order(max_degree: int, n_radial: int, count: int, radius: float) -> list[StreamMode]:
    """The ``count`` zero-trace modes of lowest total polynomial degree."""
    modes = zero_trace_modes(radius, max_degree, n_radial)
    modes.sort(key=lambda m: (m.degree + 2 * m.radial_power, m.degree))
    if count > len(modes):
        raise ValueError(f"only {len(modes)} interior modes available")
    return modes[:count]


def build_reference_bases(
    geometry: SphereGeometry,
    n_interior: int = 8,
    n_boundary: int = 8,
    *,
    max_degree: int = 10,
    n_radial: int = 4,
) -> ReferenceBasis:
    """Construct interior modes and lifted surface functions; check independence of both families."""
    R = geometry.radius
    modes = interior_mode_order(max_degree, n_radial, n_interior, R)
    quad = _ball_rule(geometry, n_core=48, n_mu=2 * max_degree + 16)
    vel = []
    for m in modes:
        u_r, u_t = stream_velocity(quad.r, quad.theta, m.derivatives(quad.r, quad.theta))
        vel.append(np.stack([u_r, u_t]))
    vel = np.array(vel).reshape(len(modes), 2, -1)
    gram = np.einsum("icn,jcn,n->ij", vel, vel, quad.weights) if modes else np.zeros((0, 0))
    scales = tuple(1.0 / math.sqrt(gram[k, k]) for k in range(len(modes)))
    if modes:
        normed = gram * np.outer(scales, scales)
        if np.min(linalg.eigvalsh(normed)) <= GRAM_TOL:
            raise RankDeficientBasis("interior modes are numerically dependent")
    profiles = clamped_polynomials(geometry, n_boundary) if n_boundary else []
    solver = AxisymmetricStokesSolver(R, max_degree, n_radial)
    mu_g = math.cos(geometry.theta_gamma)
    lifts = tuple(
        solver.solve(AxisymmetricBoundaryData.normal(ZonalField.from_polynomial(p, R, mu_cut=mu_g), R))
        for p in profiles
    )
    return ReferenceBasis(geometry, tuple(modes), scales, tuple(profiles), lifts)


# ---------------------------------------------------------------------------
# reference quadrature
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BallRule:
    """Nodes ``(r, theta)`` and weights (with ``2 pi r^2``) of a composite rule on the ball."""

    r: np.ndarray
    theta: np.ndarray
    weights: np.ndarray


def _segments(edges: list[float], total: int, minimum: int = 8) -> tuple[np.ndarray, np.ndarray]:
    span = edges[-1] - edges[0]
    nodes, weights = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        n = max(minimum, math.ceil(total * (hi - lo) / span))
        x, w = leggauss(n)
        nodes.append(0.5 * (hi - lo) * x + 0.5 * (hi + lo))
        weights.append(0.5 * (hi - lo) * w)
    return np.concatenate(nodes), np.concatenate(weights)


def _ball_rule(
    geometry: SphereGeometry,
    n_core: int,
    n_mu: int,
    cutoff: CutoffProfile | None = None,
) -> BallRule:
    """Composite Gauss rule split at the cutoff knots and at ``theta_gamma``."""
    R, kappa = geometry.radius, geometry.reach
    breaks = {0.5 * R}
    if cutoff is not None:
        p, w = cutoff.plateau, cutoff.ramp
        for s in (-1.0 + p, -1.0 + p + w, -p - w, -p):
            r = R + kappa * s
            if 0.0 < r < R:
                breaks.add(r)
    r, wr = _segments([0.0, *sorted(breaks), R], n_core)
    mu_g = math.cos(geometry.theta_gamma)
    mu, wm = _segments([-1.0, mu_g, 1.0], n_mu)
    rr, mm = np.meshgrid(r, mu, indexing="ij")
    weights = 2.0 * math.pi * np.outer(wr * r**2, wm)
    return BallRule(rr.ravel(), np.arccos(mm.ravel()), weights.ravel())


# ---------------------------------------------------------------------------
# moving domain
# ---------------------------------------------------------------------------


class DisplacementSampler(Protocol):
    """Full-grid samples ``(R delta(t), d/dt R delta(t))`` on the zonal grid ``[0, pi]``."""

    def __call__(self, t: float) -> tuple[np.ndarray, np.ndarray]: ...


class TransportField(Protocol):
    """Convecting velocity ``(v_rho, v_theta)`` at physical meridian points."""

    def __call__(self, t: float, rho: np.ndarray, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]: ...


BodyForce = Callable[[float, np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]
SurfaceForce = Callable[[float, np.ndarray], np.ndarray]


def static_displacement(grid: ClampedZonalGrid, profile: ZonalField | float = 0.0) -> DisplacementSampler:
    """Time-independent domain: samples of ``profile`` with zero rate."""
    theta = grid.zonal.theta
    values = profile(theta) if isinstance(profile, ZonalField) else np.full_like(theta, float(profile))
    rate = np.zeros_like(theta)
    return lambda t: (values, rate)


def moving_displacement(
    grid: ClampedZonalGrid, value: Callable[[float, np.ndarray], np.ndarray], rate: Callable[[float, np.ndarray], np.ndarray]
) -> DisplacementSampler:
    """Domain from closed-form ``value(t, theta)`` and ``rate(t, theta)``."""
    theta = grid.zonal.theta
    return lambda t: (value(t, theta), rate(t, theta))


@dataclass
class PushedBasis:
    """Basis fields at one time on the deformed domain.

    Arrays are indexed ``[slot, component, node]``.  ``velocity`` holds
    ``(u_rho, u_theta)``; ``gradient`` the five frame components of the
    velocity gradient; ``weights`` the deformed volume weights; ``surface``
    the nodal surface values at the shell unknowns; ``node_rate`` the radial
    speed of the quadrature nodes.
    """

    time: float
    rho: np.ndarray
    theta: np.ndarray
    weights: np.ndarray
    velocity: np.ndarray
    gradient: np.ndarray
    surface: np.ndarray
    surface_weights: np.ndarray
    node_rate: np.ndarray
    displacement_sup: float

    @cached_property
    def fluid_mass(self) -> np.ndarray:
        return np.einsum("icn,jcn,n->ij", self.velocity, self.velocity, self.weights)

    @cached_property
    def shell_mass(self) -> np.ndarray:
        return np.einsum("iq,jq,q->ij", self.surface, self.surface, self.surface_weights)

    @cached_property
    def mass(self) -> np.ndarray:
        a = self.fluid_mass + self.shell_mass
        return 0.5 * (a + a.T)

    @cached_property
    def viscous(self) -> np.ndarray:
        v = np.einsum("icn,jcn,n->ij", self.gradient, self.gradient, self.weights)
        return 0.5 * (v + v.T)

    def convective_derivative(self, v_rho: np.ndarray, v_theta: np.ndarray) -> np.ndarray:
        """``(v . grad) W_k`` for every slot, frame components ``(rho, theta)``."""
        g = self.gradient
        return np.stack([g[:, 0] * v_rho + g[:, 1] * v_theta, g[:, 2] * v_rho + g[:, 3] * v_theta], axis=1)

    def convective(self, v_rho: np.ndarray, v_theta: np.ndarray) -> np.ndarray:
        """Skew form ``N_jk = 1/2 int (v.grad W_k).W_j - 1/2 int (v.grad W_j).W_k``."""
        adv = self.convective_derivative(v_rho, v_theta)
        half = 0.5 * np.einsum("kcn,jcn,n->jk", adv, self.velocity, self.weights)
        return half - half.T

    def project(self, values: np.ndarray) -> np.ndarray:
        """``int values . W_j`` over the fluid for a vector field given at the nodes."""
        return np.einsum("jcn,cn,n->j", self.velocity, values, self.weights)


class BasisPusher:
    """Precomputed reference data that pushes the basis to any admissible domain.

    Parameters
    ----------
    basis
        Reference basis.
    grid
        Shell grid; its unknown nodes carry the surface parts.
    cutoff
        Cutoff of the Hanzawa map, fixed for the whole run.
    n_core, n_mu
        Size of the reference quadrature (radial nodes over the core,
        polar nodes).
    """

    def __init__(
        self,
        basis: ReferenceBasis,
        grid: ClampedZonalGrid,
        cutoff: CutoffProfile,
        n_core: int = 20,
        n_mu: int = 32,
    ) -> None:
        self.basis = basis
        self.grid = grid
        self.cutoff = cutoff
        self.geometry = basis.geometry
        self.rule = _ball_rule(self.geometry, n_core, n_mu, cutoff)
        r, th = self.rule.r, self.rule.theta
        self.reference = np.stack([basis.stream(k, r, th) for k in range(basis.size)])  # (slot, 6, node)
        self.surface_reference = np.stack([basis.surface_values(k, grid.unknown_theta) for k in range(basis.size)])
        series = CosineSeries(grid.n)
        self._node_maps = series.evaluation_matrices(th)
        self._surface_map = series.evaluation_matrices(grid.unknown_theta)[0]
        R, kappa = self.geometry.radius, self.geometry.reach
        s = np.minimum((r - R) / kappa, 0.0)
        self._beta = cutoff(s)
        self.limit = cutoff.admissible_ratio * kappa

    def push(self, t: float, values: np.ndarray, rate: np.ndarray, rule: BallRule | None = None) -> PushedBasis:
        """Push the basis for full-grid samples of the displacement and its rate.

        ``rule`` replaces the built-in quadrature (reference data are then
        evaluated on the fly), which is how traces and auxiliary grids are
        sampled exactly.
        """
        sup = float(np.max(np.abs(values)))
        if not sup < self.limit:
            raise InadmissibleDisplacement(f"|R delta| = {sup:.4g} exceeds the cutoff bound {self.limit:.4g}")
        if rule is None:
            rule, ref, (e0, e1, e2), beta = self.rule, self.reference, self._node_maps, self._beta
        else:
            ref = np.stack([self.basis.stream(k, rule.r, rule.theta) for k in range(self.basis.size)])
            e0, e1, e2 = CosineSeries(self.grid.n).evaluation_matrices(rule.theta)
            beta = self.cutoff(np.minimum((rule.r - self.geometry.radius) / self.geometry.reach, 0.0))
        r, th = rule.r, rule.theta
        m = radial_map_derivatives(self.geometry, self.cutoff, r, e0 @ values, e1 @ values, e2 @ values)
        n_slots = self.basis.size

        def tile(a: np.ndarray) -> np.ndarray:
            return np.ascontiguousarray(np.broadcast_to(a, (n_slots, a.size)).ravel())

        pushed = stream_push(
            *(np.ascontiguousarray(ref[:, k].ravel()) for k in (D_R, D_T, D_RR, D_RT, D_TT)),
            *(tile(v) for v in (m.rho_r, m.rho_t, m.rho_rr, m.rho_rt, m.rho_tt)),
        )
        stack = np.stack([ref[:, PSI], *(p.reshape(n_slots, -1) for p in pushed)])  # (6, slot, node)
        u_r, u_t = stream_velocity(m.rho, th, stack)
        grad = stream_gradient(m.rho, th, stack)  # (5, slot, node)
        surf_values = self._surface_map @ values
        R = self.geometry.radius
        factor = (R / (R + surf_values)) ** 2
        return PushedBasis(
            time=t,
            rho=m.rho,
            theta=th,
            weights=rule.weights * m.det_over_r2(r),
            velocity=np.stack([u_r, u_t], axis=1),
            gradient=np.moveaxis(grad, 0, 1),
            surface=self.surface_reference * factor,
            surface_weights=self.grid.mass_weights,
            node_rate=(e0 @ rate) * beta,
            displacement_sup=sup,
        )

    def rate(self, before: PushedBasis, after: PushedBasis, middle: PushedBasis) -> np.ndarray:
        """Eulerian ``d/dt W_k`` at the middle time from a centred difference along node paths."""
        dt = after.time - before.time
        material = (after.velocity - before.velocity) / dt
        g = middle.gradient
        return material - np.stack([g[:, 0] * middle.node_rate, g[:, 2] * middle.node_rate], axis=1)

    @cached_property
    def velocity_tables(self) -> tuple[np.ndarray, tuple[float, float, float, float]]:
        """Reference velocities on a cell-centred ``(r, theta)`` grid for off-node lookups."""
        R = self.geometry.radius
        nr, nt = 96, 128
        dr, dth = R / nr, math.pi / nt
        r = (np.arange(nr) + 0.5) * dr
        th = (np.arange(nt) + 0.5) * dth
        rr, tt = np.meshgrid(r, th, indexing="ij")
        table = np.empty((self.basis.size, 2, nr, nt))
        for k in range(self.basis.size):
            d = self.basis.stream(k, rr.ravel(), tt.ravel())
            u_r, u_t = stream_velocity(rr.ravel(), tt.ravel(), d)
            table[k, 0] = u_r.reshape(nr, nt)
            table[k, 1] = u_t.reshape(nr, nt)
        return table, (0.5 * dr, dr, 0.5 * dth, dth)

    def velocity_at(
        self,
        values: np.ndarray,
        rho: np.ndarray,
        theta: np.ndarray,
        maps: tuple[np.ndarray, np.ndarray] | None = None,
    ) -> np.ndarray:
        """Pushed basis velocities ``(slot, 2, point)`` at physical points of the deformed domain.

        Uses tabulated reference velocities (bilinear interpolation); points
        outside the domain get zero.  Intended for sampling the flow on
        auxiliary grids, not for assembly.  ``maps`` are the cosine-series
        value and slope matrices at ``theta`` when the caller reuses them.
        """
        rho = np.asarray(rho, dtype=float).ravel()
        theta = np.asarray(theta, dtype=float).ravel()
        if maps is None:
            maps = CosineSeries(self.grid.n).evaluation_matrices(theta)[:2]
        d, d1 = maps[0] @ values, maps[1] @ values
        inside = rho < self.geometry.radius + d
        r = np.zeros_like(rho)
        if np.any(inside):
            r[inside] = radial_inverse(self.geometry, self.cutoff, rho[inside], d[inside])
        m = radial_map_derivatives(self.geometry, self.cutoff, r, d, d1, np.zeros_like(d))
        table, (r0, dr, t0, dth) = self.velocity_tables
        flat = table.reshape(-1, *table.shape[2:])
        ref = bilinear(flat, r0, dr, t0, dth, r, theta).reshape(self.basis.size, 2, -1)
        safe = np.where(inside, m.rho, 1.0)
        u_rho = (r**2 * ref[:, 0] + r * ref[:, 1] * m.rho_t / m.rho_r) / safe**2
        u_theta = r * ref[:, 1] / (m.rho_r * safe)
        return np.where(inside, np.stack([u_rho, u_theta], axis=1), 0.0)


# ---------------------------------------------------------------------------
# assembly
# ---------------------------------------------------------------------------


@dataclass
class SystemMatrices:
    """Coefficients of ``A a' = B a + int C a + D`` at one time (with ``B = -(S + N + V)``)."""

    time: float
    mass: np.ndarray
    transport: np.ndarray
    convective: np.ndarray
    viscous: np.ndarray
    load: np.ndarray
    surface: np.ndarray

    @property
    def drift(self) -> np.ndarray:
        return -(self.transport + self.convective + self.viscous)


def _check_spd(a: np.ndarray, what: str = "mass matrix") -> float:
    if not np.all(np.isfinite(a)):
        raise NonSPDMass(f"{what} has non-finite entries")
    low = float(linalg.eigvalsh(a, subset_by_index=[0, 0])[0])
    scale = float(np.max(np.abs(np.diag(a))))
    if not low > GRAM_TOL * max(scale, 1.0):
        raise NonSPDMass(f"{what} is not positive definite (min eigenvalue {low:.3e})")
    return low


@dataclass
class GalerkinProblem:
    """Everything the assembly needs besides the time grid.

    ``stiffness`` is the shell matrix ``Q`` with ``2 K(a, b) = a^T Q b`` on the
    shell unknowns; ``eta0`` the initial displacement there.
    """

    pusher: BasisPusher
    stiffness: np.ndarray
    displacement: DisplacementSampler
    eta0: np.ndarray
    transport: TransportField | None = None
    body_force: BodyForce | None = None
    surface_force: SurfaceForce | None = None
    _cache: dict[float, PushedBasis] = field(default_factory=dict, repr=False)

    def pushed(self, t: float) -> PushedBasis:
        hit = self._cache.get(t)
        if hit is None:
            hit = self.pusher.push(t, *self.displacement(t))
            if len(self._cache) > 8:
                self._cache.pop(next(iter(self._cache)))
            self._cache[t] = hit
        return hit

    def external_load(self, p: PushedBasis) -> np.ndarray:
        """``int f . W_j + int_M g Y_j``; its product with the coefficients is the power of the loads."""
        out = np.zeros(p.velocity.shape[0])
        if self.body_force is not None:
            f_r, f_t = self.body_force(p.time, p.rho, p.theta)
            out = out + p.project(np.stack([np.broadcast_to(f_r, p.rho.shape), np.broadcast_to(f_t, p.rho.shape)]))
        if self.surface_force is not None:
            g = self.surface_force(p.time, self.pusher.grid.unknown_theta)
            out = out + p.surface @ (p.surface_weights * g)
        return out

    def load(self, p: PushedBasis) -> np.ndarray:
        """External loads plus the elastic force of the initial displacement."""
        return self.external_load(p) - p.surface @ (self.stiffness @ self.eta0)

    def convective(self, p: PushedBasis) -> np.ndarray:
        n = p.velocity.shape[0]
        if self.transport is None:
            return np.zeros((n, n))
        v_r, v_t = self.transport(p.time, p.rho, p.theta)
        return p.convective(np.broadcast_to(v_r, p.rho.shape), np.broadcast_to(v_t, p.rho.shape))

    def assemble(self, t: float, dt: float) -> SystemMatrices:
        """Matrices at ``t``; time derivatives use the neighbours ``t +- dt/2``."""
        before, middle, after = self.pushed(t - 0.5 * dt), self.pushed(t), self.pushed(t + 0.5 * dt)
        _check_spd(middle.mass)
        rate = self.pusher.rate(before, after, middle)
        transport = np.einsum("kcn,jcn,n->jk", rate, middle.velocity, middle.weights)
        # surface part: d_t Y_k Y_j + 1/2 Y_k Y_j d_t(R delta) gamma, with gamma = (1 + R delta / R)^2
        R = self.pusher.geometry.radius
        values_grid, rate_grid = self.displacement(t)
        sm = self.pusher._surface_map
        d, d_rate = sm @ values_grid, sm @ rate_grid
        dy = -2.0 * middle.surface * d_rate / (R + d)
        gamma = (1.0 + d / R) ** 2
        w = middle.surface_weights
        transport = transport + np.einsum("kq,jq,q->jk", dy, middle.surface, w)
        transport = transport + 0.5 * np.einsum("kq,jq,q->jk", middle.surface, middle.surface, w * d_rate * gamma)
        return SystemMatrices(
            time=t,
            mass=middle.mass,
            transport=transport,
            convective=self.convective(middle),
            viscous=middle.viscous,
            load=self.load(middle),
            surface=middle.surface,
        )

    def memory_kernel(self, t: float, s: float) -> np.ndarray:
        """``C_jk(t, s) = -2 K(W_k(s), W_j(t))``."""
        return -self.pushed(t).surface @ self.stiffness @ self.pushed(s).surface.T


def assemble_system(problem: GalerkinProblem, t: float, dt: float) -> tuple[np.ndarray, np.ndarray, np.ndarray, Callable[[float], np.ndarray]]:
    """``(A(t), B(t), D(t), s -> C(t, s))`` of the semi-discrete system."""
    m = problem.assemble(t, dt)
    return m.mass, m.drift, m.load, lambda s: problem.memory_kernel(t, s)


# ---------------------------------------------------------------------------
# initial projection
# ---------------------------------------------------------------------------


def project_initial(
    problem: GalerkinProblem,
    velocity: Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]] | None,
    rate: np.ndarray | None,
    *,
    rate_tol: float = 1e-6,
    start: float = 0.0,
) -> np.ndarray:
    """Initial coefficients from the fluid velocity and the shell rate.

    The surface coefficients give the L2(M) best approximation of ``rate``
    (values at the shell unknowns); the interior coefficients then give the
    L2 best approximation of the remaining velocity.  The compatibility
    ``int rate gamma dA = 0`` is checked with the Simpson weights of the grid,
    relative to ``int |rate| gamma dA``.
    """
    p = problem.pushed(start)
    basis = problem.pusher.basis
    n = basis.size
    alpha = np.zeros(n)
    ys, xs = basis.surface_slots, basis.interior_slots
    w = p.surface_weights
    if rate is not None and np.any(rate):
        R = problem.pusher.geometry.radius
        d0 = problem.pusher._surface_map @ problem.displacement(start)[0]
        gamma = (1.0 + d0 / R) ** 2
        simpson = problem.pusher.grid.quadrature_weights[1:]
        defect = float(np.sum(simpson * rate * gamma))
        scale = float(np.sum(simpson * np.abs(rate) * gamma))
        if abs(defect) > rate_tol * max(scale, 1e-300):
            raise IncompatibleInitialRate(f"initial rate has weighted mean {defect:.3e}")
        y = p.surface[ys]
        alpha[ys] = linalg.solve(y @ (w[:, None] * y.T), y @ (w * rate), assume_a="pos")
    if velocity is not None and len(xs):
        u_r, u_t = velocity(p.rho, p.theta)
        target = np.stack([np.broadcast_to(u_r, p.rho.shape), np.broadcast_to(u_t, p.rho.shape)])
        remainder = target - np.einsum("k,kcn->cn", alpha, p.velocity)
        vx = p.velocity[xs]
        gram = np.einsum("icn,jcn,n->ij", vx, vx, p.weights)
        alpha[xs] = linalg.solve(gram, np.einsum("icn,cn,n->i", vx, remainder, p.weights), assume_a="pos")
    return alpha


# ---------------------------------------------------------------------------
# time integration
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MemoryODE:
    """Generic ``A(t) a' = B(t) a + int_0^t C(t, s) a(s) ds + D(t)`` given by callables."""

    mass: Callable[[float], np.ndarray]
    drift: Callable[[float], np.ndarray]
    kernel: Callable[[float, float], np.ndarray] | None = None
    load: Callable[[float], np.ndarray] | None = None


@dataclass
class Trajectory:
    times: np.ndarray
    coefficients: np.ndarray


def _solve(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        with np.errstate(all="ignore"):
            out = linalg.solve(lhs, rhs)
    except (linalg.LinAlgError, ValueError) as exc:
        raise LinearSolveFailure(str(exc)) from exc
    if not np.all(np.isfinite(out)):
        raise LinearSolveFailure("non-finite solution")
    return out


def integrate(system: MemoryODE, alpha0: np.ndarray, dt: float, horizon: float) -> Trajectory:
    """Implicit midpoint with a trapezoidal memory integral over the stored history.

    The memory at the midpoint ``t_m`` sums the trapezoidal rule on the
    history ``t_0 .. t_n`` and a trapezoid on ``[t_n, t_m]`` whose right value
    uses the midpoint state, which keeps the scheme implicit and second order.
    Kernel values are cached by time index pair.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    steps = int(round(horizon / dt))
    alpha0 = np.atleast_1d(np.asarray(alpha0, dtype=float))
    n = alpha0.size
    times = np.arange(steps + 1) * dt
    history = np.zeros((steps + 1, n))
    history[0] = alpha0
    cache: dict[tuple[int, int], np.ndarray] = {}

    def kernel(i: int, j: int) -> np.ndarray:
        # i indexes half steps for the evaluation time, j whole steps for the history
        key = (i, j)
        if key not in cache:
            cache[key] = np.atleast_2d(system.kernel(0.5 * i * dt, j * dt))
        return cache[key]

    for k in range(steps):
        tm = times[k] + 0.5 * dt
        a = history[k]
        mass = np.atleast_2d(system.mass(tm))
        drift = np.atleast_2d(system.drift(tm))
        lhs = mass / dt - 0.5 * drift
        rhs = mass @ a / dt + 0.5 * drift @ a
        if system.load is not None:
            rhs = rhs + np.atleast_1d(system.load(tm))
        if system.kernel is not None:
            if k > 0:
                weights = np.full(k + 1, dt)
                weights[[0, k]] = 0.5 * dt
                rhs = rhs + sum(w * kernel(2 * k + 1, j) @ history[j] for j, w in enumerate(weights))
            c_mid = np.atleast_2d(system.kernel(tm, tm))
            rhs = rhs + 0.25 * dt * kernel(2 * k + 1, k) @ a + 0.125 * dt * c_mid @ a
            lhs = lhs - 0.125 * dt * c_mid
        history[k + 1] = _solve(lhs, rhs)
    return Trajectory(times, history)


@dataclass
class CoupledRun:
    """Output of :func:`integrate_coupled`.

    Energies are evaluated at the time levels; ``dissipation`` and ``work``
    are per-step increments (viscous loss and power of the loads times the
    step); ``corrections`` records the scalar energy correction of each step.
    """

    times: np.ndarray
    coefficients: np.ndarray
    displacement: np.ndarray
    rate: np.ndarray
    fluid_kinetic: np.ndarray
    shell_kinetic: np.ndarray
    elastic: np.ndarray
    dissipation: np.ndarray
    work: np.ndarray
    corrections: np.ndarray

    @property
    def total_energy(self) -> np.ndarray:
        return self.fluid_kinetic + self.shell_kinetic + self.elastic


def integrate_coupled(
    problem: GalerkinProblem,
    alpha0: np.ndarray,
    dt: float,
    horizon: float,
    *,
    t0: float = 0.0,
    eta_start: np.ndarray | None = None,
    energy_correction: bool = True,
    correction_iters: int = 4,
    monitor: Callable[[float, np.ndarray, np.ndarray], None] | None = None,
) -> CoupledRun:
    """Energy-consistent implicit midpoint stepping of the Galerkin system.

    The elastic memory is carried by the displacement itself:
    ``eta_{n+1} = eta_n + dt Y(t_m)^T a_m``, and the elastic force is evaluated
    at the midpoint displacement, which makes the elastic energy balance exact.
    The symmetric part of the transport matrix is the centred difference of
    the mass matrix (the discrete Reynolds identity), its skew part comes
    from ``d_t W_k`` along the moving nodes.  Finally a scalar multiple of
    ``A m`` absorbs the ``O(dt^3)`` remainder ``(b - a)^T dA (b - a) / 8`` so
    the discrete energy law holds to round-off.

    ``monitor(t_mid, mass, convective)``, when given, sees the averaged mass
    matrix and the convective block of every step as they are assembled.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    steps = int(round(horizon / dt))
    q = problem.stiffness
    n = problem.pusher.basis.size
    n_u = q.shape[0]
    times = t0 + np.arange(steps + 1) * dt
    alpha = np.zeros((steps + 1, n))
    eta = np.zeros((steps + 1, n_u))
    rate = np.zeros((steps + 1, n_u))
    fluid_kin, shell_kin, elastic = (np.zeros(steps + 1) for _ in range(3))
    dissipation, work, corrections = (np.zeros(steps) for _ in range(3))
    alpha[0] = alpha0
    eta[0] = problem.eta0 if eta_start is None else eta_start

    def record(i: int, p: PushedBasis) -> None:
        a = alpha[i]
        rate[i] = p.surface.T @ a
        fluid_kin[i] = 0.5 * a @ p.fluid_mass @ a
        shell_kin[i] = 0.5 * float(np.sum(p.surface_weights * rate[i] ** 2))
        elastic[i] = 0.5 * eta[i] @ q @ eta[i]

    start = problem.pushed(times[0])
    _check_spd(start.mass)
    record(0, start)
    for k in range(steps):
        end = problem.pushed(times[k + 1])
        mid = problem.pushed(times[k] + 0.5 * dt)
        _check_spd(end.mass)
        a = alpha[k]
        mass_avg = 0.5 * (start.mass + end.mass)
        mass_jump = end.mass - start.mass
        transport = np.einsum("kcn,jcn,n->jk", problem.pusher.rate(start, end, mid), mid.velocity, mid.weights)
        operator = 0.5 * (transport - transport.T) + mass_jump / (2.0 * dt)
        convective = problem.convective(mid)
        if monitor is not None:
            monitor(times[k] + 0.5 * dt, mass_avg, convective)
        operator = operator + convective + mid.viscous
        y = mid.surface
        spring = 0.25 * dt * y @ q @ y.T
        force = problem.external_load(mid)
        base_rhs = -0.5 * operator @ a - spring @ a - y @ (q @ eta[k]) + force
        c = 0.0
        for _ in range(correction_iters if energy_correction else 1):
            lhs = (1.0 + 0.5 * c) * mass_avg / dt + 0.5 * operator + spring
            rhs = (1.0 - 0.5 * c) * mass_avg @ a / dt + base_rhs
            b = _solve(lhs, rhs)
            if not energy_correction:
                break
            m = 0.5 * (a + b)
            norm = m @ mass_avg @ m
            if norm <= 1e-300:
                break
            c_new = 0.125 * (b - a) @ mass_jump @ (b - a) / norm
            if abs(c_new - c) <= 1e-15 * (1.0 + abs(c)):
                c = c_new
                break
            c = c_new
        m = 0.5 * (a + b)
        alpha[k + 1] = b
        eta[k + 1] = eta[k] + dt * (y.T @ m)
        dissipation[k] = dt * m @ mid.viscous @ m
        work[k] = dt * force @ m
        corrections[k] = c
        record(k + 1, end)
        start = end
    return CoupledRun(times, alpha, eta, rate, fluid_kin, shell_kin, elastic, dissipation, work, corrections)
