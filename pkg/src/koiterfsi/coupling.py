"""Regularization, the decoupled sub-problem, the fixed-point coupling and continuation.

The decoupled problem takes a displacement trajectory ``delta`` and a
velocity ``v``, regularizes both, and solves the Galerkin system on the
domain ``Omega_{R delta}`` with ``R v`` as convecting field.  The coupled
problem is the fixed point ``(delta, v) = (eta, u)``, found by relaxed Picard
iteration on short windows; the windows are glued by continuing the
regularized history across each junction.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy import ndimage

from .errors import (
    Diverged,
    GapInversion,
    InadmissibleDisplacement,
    MarginViolated,
    MaxIterations,
    NonSPDMass,
    LinearSolveFailure,
)
from .galerkin import (
    BasisPusher,
    BodyForce,
    CoupledRun,
    GalerkinProblem,
    ReferenceBasis,
    SurfaceForce,
    build_reference_bases,
    integrate_coupled,
    project_initial,
)
from .geometry import CosineSeries, SphereGeometry, make_cutoff
from .kernels import bilinear
from .operators import antipodal_bump, mean_correct_values
from .shell import ClampedZonalGrid, ElasticParams, KoiterShell

VelocityField = Callable[[np.ndarray, np.ndarray], tuple[np.ndarray, np.ndarray]]


# ---------------------------------------------------------------------------
# model and data
# ---------------------------------------------------------------------------


class Model:
    """Discretization shared by all solves of one run.

    Parameters
    ----------
    geometry, params
        Sphere and shell parameters.
    n_grid
        Number of colatitude intervals of the shell grid.
    n_interior, n_boundary
        Galerkin modes of each family.
    cutoff_ratio
        Admissible ratio ``|R delta| / kappa`` of the Hanzawa cutoff, fixed
        for the whole run.
    """

    def __init__(
        self,
        geometry: SphereGeometry | None = None,
        params: ElasticParams | None = None,
        *,
        n_grid: int = 120,
        n_interior: int = 8,
        n_boundary: int = 8,
        cutoff_ratio: float = 0.975,
        n_core: int = 20,
        n_mu: int = 32,
        basis: ReferenceBasis | None = None,
    ) -> None:
        self.geometry = geometry or SphereGeometry()
        self.params = params or ElasticParams(1.0, 1.0, 0.1)
        self.grid = ClampedZonalGrid(self.geometry, n_grid)
        self.basis = basis or build_reference_bases(self.geometry, n_interior, n_boundary)
        self.cutoff = make_cutoff(cutoff_ratio)
        self.pusher = BasisPusher(self.basis, self.grid, self.cutoff, n_core, n_mu)
        self.shell = KoiterShell(self.params, self.grid)
        self.stiffness = self.shell.stiffness
        self.series = CosineSeries(n_grid)

    @property
    def limit(self) -> float:
        """Bound on ``|R delta|`` imposed by the cutoff."""
        return self.pusher.limit

    @property
    def n_unknowns(self) -> int:
        return self.grid.n_unknowns

    def interpolate(self, full_values: np.ndarray, theta: np.ndarray) -> np.ndarray:
        return self.series.evaluation_matrices(np.asarray(theta, dtype=float).ravel())[0] @ full_values


@dataclass(frozen=True)
class FluidShellData:
    """Loads and initial data; displacements are vectors on the shell unknowns.

    ``velocity0`` is the initial fluid velocity on ``Omega_{eta0}`` as a
    function of meridian coordinates ``(rho, theta)``; ``None`` means rest.
    Fluid density and viscosity are 1.
    """

    eta0: np.ndarray
    eta1: np.ndarray
    velocity0: VelocityField | None = None
    body_force: BodyForce | None = None
    surface_force: SurfaceForce | None = None

    @classmethod
    def at_rest(cls, model: Model, **loads) -> "FluidShellData":
        zero = np.zeros(model.n_unknowns)
        return cls(zero, zero.copy(), None, **loads)

    @property
    def is_trivial(self) -> bool:
        return (
            not np.any(self.eta0)
            and not np.any(self.eta1)
            and self.velocity0 is None
            and self.body_force is None
            and self.surface_force is None
        )


def oscillating_surface_load(geometry: SphereGeometry, amplitude: float = 0.05, frequency: float = 1.0) -> SurfaceForce:
    """``g = amplitude sin(2 pi frequency t) bump(theta)`` with the antipodal bump."""
    bump = antipodal_bump(geometry)
    return lambda t, theta: amplitude * math.sin(2.0 * math.pi * frequency * t) * bump(theta)


def steady_surface_load(geometry: SphereGeometry, amplitude: float) -> SurfaceForce:
    """Time-independent ``g = amplitude bump(theta)`` (negative values push inwards)."""
    bump = antipodal_bump(geometry)
    return lambda t, theta: amplitude * bump(theta)


def default_scenario(model: Model) -> FluidShellData:
    """Fluid and shell at rest, driven by a small oscillating load near the south pole."""
    return FluidShellData.at_rest(model, surface_force=oscillating_surface_load(model.geometry))


# ---------------------------------------------------------------------------
# displacement regularization
# ---------------------------------------------------------------------------


def time_kernel(eps: float) -> tuple[Callable[[np.ndarray], np.ndarray], Callable[[np.ndarray], np.ndarray]]:
    """One-sided unit-mass kernel ``140 u^3 (1 - u)^3 (2/eps)`` supported in ``[eps/2, eps]`` and its derivative."""
    half = 0.5 * eps

    def value(tau: np.ndarray) -> np.ndarray:
        u = np.clip((tau - half) / half, 0.0, 1.0)
        return 140.0 * u**3 * (1.0 - u) ** 3 / half

    def derivative(tau: np.ndarray) -> np.ndarray:
        u = np.clip((tau - half) / half, 0.0, 1.0)
        return 140.0 * (3.0 * u**2 * (1.0 - u) ** 3 - 3.0 * u**3 * (1.0 - u) ** 2) / half**2

    return value, derivative


def spatial_multipliers(n: int, width: float, n_quad: int = 256) -> np.ndarray:
    """Cosine coefficients of the unit-mass bump ``exp(-1/(1 - (x/width)^2))`` on ``[-width, width]``."""
    if width <= 0.0:
        return np.ones(n + 1)
    x, w = leggauss(n_quad)
    bump = np.exp(-1.0 / (1.0 - x**2)) * w
    bump /= bump.sum()
    k = np.arange(n + 1)
    return np.cos(np.outer(k, width * x)) @ bump


@dataclass(frozen=True)
class DisplacementHistory:
    """Piecewise-linear trajectory on ``t_i = t0 + i dt`` with value ``before`` for ``t <= t0``."""

    t0: float
    dt: float
    values: np.ndarray
    before: np.ndarray

    @property
    def end(self) -> float:
        return self.t0 + (len(self.values) - 1) * self.dt

    def __call__(self, s: np.ndarray) -> np.ndarray:
        s = np.asarray(s, dtype=float)
        pos = (s - self.t0) / self.dt
        last = len(self.values) - 1
        idx = np.clip(np.floor(pos).astype(int), 0, max(last - 1, 0))
        frac = np.clip(pos - idx, 0.0, 1.0)
        if last == 0:
            out = np.broadcast_to(self.values[0], s.shape + self.values.shape[1:]).copy()
        else:
            out = self.values[idx] * (1.0 - frac)[..., None] + self.values[idx + 1] * frac[..., None]
        return np.where((pos <= 0.0)[..., None], self.before, out)

    def breakpoints(self, lo: float, hi: float) -> np.ndarray:
        first = math.ceil((lo - self.t0) / self.dt)
        last = math.floor((hi - self.t0) / self.dt)
        inner = self.t0 + self.dt * np.arange(max(first, 0), max(last, -1) + 1)
        return np.unique(np.concatenate([[lo, hi], inner[(inner > lo) & (inner < hi)]]))


class RegularizedDisplacement:
    """``R delta`` and its time derivative, sampled on the full zonal grid.

    Time convolution with the one-sided kernel is exact for the piecewise
    linear history (Gauss rule per history interval); the spatial
    convolution acts on cosine coefficients.  The shift ``sqrt(eps)`` is
    added to the value only.
    """

    def __init__(self, model: Model, history: DisplacementHistory, eps: float) -> None:
        self.model = model
        self.history = history
        self.eps = eps
        self.shift = math.sqrt(eps)
        self.kernel, self.kernel_rate = time_kernel(eps)
        width = eps / model.geometry.radius
        self.smoothing = model.series.filter_matrix(spatial_multipliers(model.grid.n, width))
        self._cache: dict[float, tuple[np.ndarray, np.ndarray]] = {}

    def time_average(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        """Time-mollified history and its derivative at ``t`` (on the shell unknowns)."""
        lo, hi = t - self.eps, t - 0.5 * self.eps
        edges = self.history.breakpoints(lo, hi)
        x, w = leggauss(5)
        a, b = edges[:-1, None], edges[1:, None]
        s = (0.5 * (b - a) * x + 0.5 * (b + a)).ravel()
        ws = (0.5 * (b - a) * w).ravel()
        samples = self.history(s)
        tau = t - s
        return (ws * self.kernel(tau)) @ samples, (ws * self.kernel_rate(tau)) @ samples

    def __call__(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        hit = self._cache.get(t)
        if hit is None:
            value, rate = self.time_average(t)
            full = self.model.grid.full(np.stack([value, rate]))
            smooth = full @ self.smoothing.T
            hit = (smooth[0] + self.shift, smooth[1])
            self._cache[t] = hit
        return hit

    def on_unknowns(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        value, rate = self(t)
        cut = self.model.grid.i_gamma + 1
        return value[cut:], rate[cut:]


def mollify_displacement(model: Model, history: DisplacementHistory, eps: float) -> RegularizedDisplacement:
    return RegularizedDisplacement(model, history, eps)


def regularized_initial_displacement(model: Model, eta0: np.ndarray, eps: float) -> np.ndarray:
    """``R eta0`` on the full grid; the time average of a constant history is the constant."""
    history = DisplacementHistory(0.0, 1.0, eta0[None, :], eta0)
    return RegularizedDisplacement(model, history, eps)(0.0)[0]


# ---------------------------------------------------------------------------
# velocity regularization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class VelocityFrames:
    """Velocity samples in the half meridian plane ``x > 0``.

    ``values[c, i, j, k]`` is Cartesian component ``c`` (``x`` then ``z``)
    at time ``times[i]``, abscissa ``x[j]`` and height ``z[k]``.  ``x`` and
    ``z`` are uniform cell-centred grids with spacing ``h``.
    """

    times: np.ndarray
    h: float
    x: np.ndarray
    z: np.ndarray
    values: np.ndarray

    @classmethod
    def zeros(cls, times: np.ndarray, h: float, extent: float) -> "VelocityFrames":
        n = max(2, math.ceil(extent / h))
        x = (np.arange(n) + 0.5) * h
        z = (np.arange(-n, n) + 0.5) * h
        return cls(np.asarray(times, dtype=float), h, x, z, np.zeros((2, len(times), n, 2 * n)))

    def with_values(self, values: np.ndarray) -> "VelocityFrames":
        return replace(self, values=values)

    def l2_norm(self, values: np.ndarray | None = None) -> float:
        """Space-time L2 norm with the axisymmetric measure ``2 pi x dx dz dt`` (trapezoid in time)."""
        v = self.values if values is None else values
        density = np.sum(v**2, axis=0) * (2.0 * math.pi * self.x[None, :, None]) * self.h**2
        per_time = density.sum(axis=(1, 2))
        if len(self.times) < 2:
            return math.sqrt(float(per_time.sum()))
        return math.sqrt(float(np.trapezoid(per_time, self.times)))

    def concat(self, later: "VelocityFrames") -> "VelocityFrames":
        return replace(
            self,
            times=np.concatenate([self.times, later.times]),
            values=np.concatenate([self.values, later.values], axis=1),
        )

    def __call__(self, t: float, rho: np.ndarray, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Meridian components ``(v_rho, v_theta)`` at ``t`` (linear in time, bilinear in space)."""
        times = self.times
        if len(times) == 1 or t <= times[0]:
            i, frac = 0, 0.0
        elif t >= times[-1]:
            i, frac = len(times) - 2, 1.0
        else:
            i = int(np.searchsorted(times, t, side="right") - 1)
            frac = (t - times[i]) / (times[i + 1] - times[i])
        s, c = np.sin(theta), np.cos(theta)
        px, pz = rho * s, rho * c
        x0, z0 = self.x[0], self.z[0]
        lo = bilinear(self.values[:, i], x0, self.h, z0, self.h, px, pz)
        hi = bilinear(self.values[:, min(i + 1, len(times) - 1)], x0, self.h, z0, self.h, px, pz)
        vx, vz = (1.0 - frac) * lo + frac * hi
        return vx * s + vz * c, vx * c - vz * s


def _mirror(values: np.ndarray) -> np.ndarray:
    """Extend half-plane samples across the axis: ``v_x`` odd, ``v_z`` even in ``x``."""
    vx, vz = values
    return np.stack(
        [np.concatenate([-vx[:, ::-1], vx], axis=1), np.concatenate([vz[:, ::-1], vz], axis=1)]
    )


def spacetime_kernel(eps: float, dt: float, h: float) -> np.ndarray:
    """Radial bump of radius ``eps`` in ``(t, x, z)`` sampled on the frame grid, unit discrete mass."""
    nt = int(math.floor(eps / dt)) if dt > 0 else 0
    nx = int(math.floor(eps / h))
    t = np.arange(-nt, nt + 1) * dt / eps
    x = np.arange(-nx, nx + 1) * h / eps
    tt, xx, zz = np.meshgrid(t, x, x, indexing="ij")
    rr = tt**2 + xx**2 + zz**2
    kernel = np.where(rr < 1.0, np.exp(-1.0 / np.maximum(1.0 - rr, 1e-300)), 0.0)
    return kernel / kernel.sum()


def mollify_velocity(frames: VelocityFrames, eps: float) -> VelocityFrames:
    """Spacetime convolution in the meridian plane with zero extension outside the samples."""
    dt = float(frames.times[1] - frames.times[0]) if len(frames.times) > 1 else 0.0
    kernel = spacetime_kernel(eps, dt, frames.h)
    full = _mirror(frames.values)
    smooth = np.stack([ndimage.convolve(c, kernel, mode="constant", cval=0.0) for c in full])
    half = frames.values.shape[2]
    return frames.with_values(smooth[:, :, half:])


class VelocitySampler:
    """Samples ``u = sum a_k W_k`` of a Galerkin run on a frame grid."""

    def __init__(self, model: Model, template: VelocityFrames) -> None:
        self.model = model
        self.template = template
        xx, zz = np.meshgrid(template.x, template.z, indexing="ij")
        self.rho = np.hypot(xx, zz).ravel()
        self.theta = np.arctan2(xx, zz).ravel()
        self.maps = model.series.evaluation_matrices(self.theta)[:2]
        self.shape = xx.shape

    def frame(self, alpha: np.ndarray, displacement: np.ndarray) -> np.ndarray:
        w = self.model.pusher.velocity_at(displacement, self.rho, self.theta, self.maps)
        u_rho, u_theta = np.einsum("k,kcn->cn", alpha, w)
        s, c = np.sin(self.theta), np.cos(self.theta)
        return np.stack([u_rho * s + u_theta * c, u_rho * c - u_theta * s]).reshape(2, *self.shape)

    def sample(self, times: np.ndarray, run: CoupledRun, displacement: RegularizedDisplacement) -> VelocityFrames:
        frames = np.empty((2, len(times)) + self.shape)
        for i, t in enumerate(times):
            alpha = np.array([np.interp(t, run.times, run.coefficients[:, k]) for k in range(run.coefficients.shape[1])])
            frames[:, i] = self.frame(alpha, displacement(t)[0])
        return replace(self.template, times=np.asarray(times, dtype=float), values=frames)


# ---------------------------------------------------------------------------
# initial data
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LiftedData:
    """Initial data adapted to the regularized domain."""

    velocity: VelocityField
    rate: np.ndarray
    regularized: np.ndarray


def lift_initial_data(model: Model, data: FluidShellData, eps: float) -> LiftedData:
    """Extend ``u0`` into the gap between ``eta0`` and ``R eta0`` and transport ``eta1`` there.

    In the gap the velocity is the layer extension ``(R + eta0)^2 eta1 / rho^2 e_rho``
    of the shell rate; the new rate is its trace on the regularized surface,
    ``eta1 ((R + eta0) / (R + R eta0))^2``.
    """
    grid, R = model.grid, model.geometry.radius
    reg = regularized_initial_displacement(model, data.eta0, eps)
    eta0_full = grid.full(data.eta0)
    gap = reg - eta0_full
    if np.min(gap) < -1e-12:
        raise GapInversion(f"regularized displacement lies below eta0 by {-np.min(gap):.3e}")
    cut = grid.i_gamma + 1
    rate = data.eta1 * ((R + data.eta0) / (R + reg[cut:])) ** 2
    eta1_full = grid.full(data.eta1)
    inner = data.velocity0

    def velocity(rho: np.ndarray, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        rho = np.asarray(rho, dtype=float)
        theta = np.asarray(theta, dtype=float)
        e0 = model.series.evaluation_matrices(theta.ravel())[0]
        boundary = R + (e0 @ eta0_full).reshape(theta.shape)
        layer = (boundary**2 * (e0 @ eta1_full).reshape(theta.shape)) / rho**2
        if inner is None:
            u_r, u_t = np.zeros_like(rho), np.zeros_like(rho)
        else:
            u_r, u_t = (np.broadcast_to(v, rho.shape) for v in inner(rho, theta))
        in_gap = rho >= boundary
        return np.where(in_gap, layer, u_r), np.where(in_gap, 0.0, u_t)

    return LiftedData(velocity, rate, reg)


# ---------------------------------------------------------------------------
# decoupled solve
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class CouplingSettings:
    eps: float = 0.05
    dt: float = 1e-3
    relax: float = 0.7
    tol: float = 1e-6
    max_iter: int = 50
    margin: float = 0.95
    window: float = 0.25
    max_shrinks: int = 3
    velocity_spacing: float = 0.04
    convect: bool = True
    energy_correction: bool = True

    @property
    def frame_step(self) -> float:
        return max(0.25 * self.eps, self.dt)

    @property
    def frame_spacing(self) -> float:
        return max(0.5 * self.eps, self.velocity_spacing)


@dataclass
class History:
    """Accepted state up to the current junction (empty before the first window)."""

    times: np.ndarray
    displacement: np.ndarray
    frames: VelocityFrames | None
    alpha: np.ndarray | None = None

    @property
    def end(self) -> float:
        return float(self.times[-1])


@dataclass
class DecoupledSolution:
    run: CoupledRun
    regularized: RegularizedDisplacement
    frames: VelocityFrames

    @property
    def displacement(self) -> np.ndarray:
        return self.run.displacement


class CouplingSolver:
    """Decoupled solves, Picard coupling and continuation for one model and data set."""

    def __init__(
        self,
        model: Model,
        data: FluidShellData,
        settings: CouplingSettings | None = None,
        *,
        monitor: Callable[[float, np.ndarray, np.ndarray], None] | None = None,
    ) -> None:
        self.model = model
        self.data = data
        self.settings = settings or CouplingSettings()
        self.monitor = monitor
        s = self.settings
        extent = model.geometry.radius + model.limit
        self.template = VelocityFrames.zeros(np.zeros(1), s.frame_spacing, extent)
        self.sampler = VelocitySampler(model, self.template)

    # -- time grids -----------------------------------------------------

    def step_times(self, start: float, length: float) -> np.ndarray:
        steps = max(1, int(round(length / self.settings.dt)))
        return start + self.settings.dt * np.arange(steps + 1)

    def frame_times(self, start: float, length: float) -> np.ndarray:
        count = max(1, int(math.ceil(length / self.settings.frame_step)))
        return start + np.linspace(0.0, length, count + 1)

    # -- pieces ---------------------------------------------------------

    def initial_history(self) -> History:
        return History(np.zeros(1), self.data.eta0[None, :].copy(), None)

    def regularize(self, history: History, delta: np.ndarray) -> RegularizedDisplacement:
        values = np.concatenate([history.displacement[:-1], delta])
        hist = DisplacementHistory(0.0, self.settings.dt, values, self.data.eta0)
        return mollify_displacement(self.model, hist, self.settings.eps)

    def check_margin(self, reg: RegularizedDisplacement, times: np.ndarray) -> float:
        worst = 0.0
        dt = self.settings.dt
        for t in np.concatenate([times, times[:-1] + 0.5 * dt]):
            worst = max(worst, float(np.max(np.abs(reg(float(t))[0]))))
        if not worst < self.model.limit:
            raise MarginViolated(f"|R delta| reached {worst:.4f}, admissible bound {self.model.limit:.4f}")
        return worst

    def transport(self, history: History, v: VelocityFrames | None) -> VelocityFrames | None:
        if v is None or not self.settings.convect:
            return None
        frames = v if history.frames is None else history.frames.concat(v)
        return mollify_velocity(frames, self.settings.eps)

    def start_coefficients(self, problem: GalerkinProblem, history: History) -> np.ndarray:
        if history.alpha is None:
            lifted = lift_initial_data(self.model, self.data, self.settings.eps)
            velocity = lifted.velocity if (self.data.velocity0 is not None or np.any(self.data.eta1)) else None
            return project_initial(problem, velocity, lifted.rate)
        return restart_coefficients(self.model, problem, history.alpha, history.end)

    def solve_decoupled(self, history: History, delta: np.ndarray, v: VelocityFrames | None) -> DecoupledSolution:
        """One pass of regularize, push, assemble and integrate on the window carried by ``delta``."""
        start = history.end
        length = (len(delta) - 1) * self.settings.dt
        times = self.step_times(start, length)
        reg = self.regularize(history, delta)
        self.check_margin(reg, times)
        problem = GalerkinProblem(
            self.model.pusher,
            self.model.stiffness,
            reg,
            self.data.eta0,
            transport=self.transport(history, v),
            body_force=self.data.body_force,
            surface_force=self.data.surface_force,
        )
        alpha0 = self.start_coefficients(problem, history)
        run = integrate_coupled(
            problem,
            alpha0,
            self.settings.dt,
            length,
            t0=start,
            eta_start=history.displacement[-1],
            energy_correction=self.settings.energy_correction,
            monitor=self.monitor,
        )
        frames = self.sampler.sample(self.frame_times(start, length), run, reg)
        return DecoupledSolution(run, reg, frames)

    # -- fixed point ----------------------------------------------------

    def fixed_point_solve(self, history: History, length: float) -> "FixedPointResult":
        """Relaxed Picard iteration ``(delta, v) <- (delta, v) + relax ((eta, u) - (delta, v))``."""
        s = self.settings
        steps = max(1, int(round(length / s.dt)))
        delta = np.repeat(history.displacement[-1][None, :], steps + 1, axis=0)
        v: VelocityFrames | None = None
        log: list[float] = []
        for iteration in range(1, s.max_iter + 1):
            sol = self.solve_decoupled(history, delta, v)
            v_values = np.zeros_like(sol.frames.values) if v is None else v.values
            change_eta = float(np.max(np.abs(sol.displacement - delta)))
            change_u = sol.frames.l2_norm(sol.frames.values - v_values)
            residual = change_eta + change_u
            log.append(residual)
            if residual < s.tol:
                return FixedPointResult(sol, log, iteration)
            delta = delta + s.relax * (sol.displacement - delta)
            v = sol.frames.with_values(v_values + s.relax * (sol.frames.values - v_values))
        raise MaxIterations(f"no fixed point after {s.max_iter} iterations", log)

    def self_map_residual(self, history: History, result: "FixedPointResult") -> float:
        """Distance between a converged output and the decoupled solve fed with that output."""
        sol = result.solution
        again = self.solve_decoupled(history, sol.displacement, sol.frames)
        return float(np.max(np.abs(again.displacement - sol.displacement))) + again.frames.l2_norm(
            again.frames.values - sol.frames.values
        )

    # -- continuation ---------------------------------------------------

    def accept(self, history: History, sol: DecoupledSolution, upto: int | None = None) -> History:
        run = sol.run
        stop = len(run.times) if upto is None else upto + 1
        times = np.concatenate([history.times[:-1], run.times[:stop]])
        disp = np.concatenate([history.displacement[:-1], run.displacement[:stop]])
        keep = sol.frames.times <= run.times[stop - 1] + 1e-12
        window_frames = replace(sol.frames, times=sol.frames.times[keep][:-1], values=sol.frames.values[:, keep][:, :-1])
        frames = window_frames if history.frames is None else history.frames.concat(window_frames)
        return History(times, disp, frames, run.coefficients[stop - 1].copy())

    def advance_until_collision(self, horizon: float) -> "CoupledTrajectory":
        """Fixed-point windows from the initial data until ``horizon`` or ``|eta| >= margin kappa``.

        A window whose fixed point fails (no convergence, regularized
        displacement outside the admissible band, degenerate mass) is halved
        up to ``max_shrinks`` times before the run is declared diverged.
        """
        s = self.settings
        kappa = self.model.geometry.reach
        history = self.initial_history()
        pieces: list[CoupledRun] = []
        logs: list[list[float]] = []
        junctions: list[dict[str, float]] = []
        reason, t_star = StopReason.HORIZON, horizon
        while history.end < horizon - 0.5 * s.dt:
            length = min(s.window, horizon - history.end)
            result = None
            for _ in range(s.max_shrinks + 1):
                try:
                    result = self.fixed_point_solve(history, length)
                    break
                except (MaxIterations, MarginViolated, InadmissibleDisplacement, NonSPDMass, LinearSolveFailure):
                    length = 0.5 * length
                    if length < 4 * s.dt:
                        break
            if result is None:
                partial = (
                    CoupledTrajectory.glue(pieces, StopReason.DIVERGED, history.end, logs, junctions) if pieces else None
                )
                raise Diverged(f"fixed point failed near t = {history.end:.4f} even after shrinking", partial)
            run = result.solution.run
            if pieces:
                junctions.append(junction_jumps(self.model, pieces[-1], run))
            logs.append(result.log)
            sup = np.max(np.abs(run.displacement), axis=1)
            hit = np.nonzero(sup >= s.margin * kappa)[0]
            if len(hit):
                pieces.append(truncate_run(run, int(hit[0])))
                reason, t_star = StopReason.COLLISION, float(run.times[hit[0]])
                history = self.accept(history, result.solution, int(hit[0]))
                break
            pieces.append(run)
            history = self.accept(history, result.solution)
        return CoupledTrajectory.glue(pieces, reason, t_star, logs, junctions)


def restart_coefficients(model: Model, problem: GalerkinProblem, alpha: np.ndarray, start: float) -> np.ndarray:
    """Re-admissibilize a terminal state on the (continued) regularized domain.

    The terminal shell rate is mean-corrected against the current domain and
    the terminal velocity is projected back onto the basis.  For a state that
    already lies in the span both steps reproduce it up to round-off.
    """
    p = problem.pushed(start)
    rate = p.surface.T @ alpha
    cut = model.grid.i_gamma + 1
    reg = problem.displacement(start)[0][cut:]
    bump = antipodal_bump(model.geometry)(model.grid.unknown_theta)
    weights = model.grid.quadrature_weights[1:]
    rate = mean_correct_values(rate, reg, bump, weights, model.geometry.radius)
    velocity = np.einsum("k,kcn->cn", alpha, p.velocity)

    def field_at_nodes(rho: np.ndarray, theta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        # project_initial samples at the nodes of the same pushed basis
        return velocity[0], velocity[1]

    return project_initial(problem, field_at_nodes, rate, start=start)


# ---------------------------------------------------------------------------
# outputs
# ---------------------------------------------------------------------------


class StopReason(enum.Enum):
    HORIZON = "HORIZON"
    COLLISION = "COLLISION"
    DIVERGED = "DIVERGED"


@dataclass
class FixedPointResult:
    solution: DecoupledSolution
    log: list[float]
    iterations: int

    @property
    def ratios(self) -> list[float]:
        return [b / a for a, b in zip(self.log, self.log[1:]) if a > 0]


def truncate_run(run: CoupledRun, last: int) -> CoupledRun:
    stop = last + 1
    return CoupledRun(
        run.times[:stop],
        run.coefficients[:stop],
        run.displacement[:stop],
        run.rate[:stop],
        run.fluid_kinetic[:stop],
        run.shell_kinetic[:stop],
        run.elastic[:stop],
        run.dissipation[:last],
        run.work[:last],
        run.corrections[:last],
    )


def junction_jumps(model: Model, before: CoupledRun, after: CoupledRun) -> dict[str, float]:
    """Jumps of displacement, shell rate, coefficients and total energy across a window junction."""
    return {
        "time": float(after.times[0]),
        "displacement": float(np.max(np.abs(after.displacement[0] - before.displacement[-1]))),
        "rate": float(np.max(np.abs(after.rate[0] - before.rate[-1]))),
        "velocity": float(np.max(np.abs(after.coefficients[0] - before.coefficients[-1]))),
        "energy": float(abs(after.total_energy[0] - before.total_energy[-1])),
    }


@dataclass
class CoupledTrajectory:
    """Glued trajectory of all accepted windows."""

    times: np.ndarray
    coefficients: np.ndarray
    displacement: np.ndarray
    rate: np.ndarray
    fluid_kinetic: np.ndarray
    shell_kinetic: np.ndarray
    elastic: np.ndarray
    dissipation: np.ndarray
    work: np.ndarray
    stop_reason: StopReason
    t_star: float
    iteration_logs: list[list[float]] = field(default_factory=list)
    junctions: list[dict[str, float]] = field(default_factory=list)

    @classmethod
    def glue(
        cls,
        pieces: list[CoupledRun],
        reason: StopReason,
        t_star: float,
        logs: list[list[float]],
        junctions: list[dict[str, float]],
    ) -> "CoupledTrajectory":
        def level(name: str) -> np.ndarray:
            parts = [getattr(p, name) for p in pieces]
            return np.concatenate([parts[0]] + [q[1:] for q in parts[1:]])

        def steps(name: str) -> np.ndarray:
            return np.concatenate([getattr(p, name) for p in pieces])

        return cls(
            level("times"),
            level("coefficients"),
            level("displacement"),
            level("rate"),
            level("fluid_kinetic"),
            level("shell_kinetic"),
            level("elastic"),
            steps("dissipation"),
            steps("work"),
            reason,
            t_star,
            logs,
            junctions,
        )

    @property
    def total_energy(self) -> np.ndarray:
        return self.fluid_kinetic + self.shell_kinetic + self.elastic

    @property
    def cumulative_dissipation(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.dissipation)])

    @property
    def cumulative_work(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.work)])

    def min_area_factor(self, geometry: SphereGeometry) -> float:
        """Smallest ``gamma(eta) = (1 + eta/R)^2`` over all accepted steps."""
        return float(np.min((1.0 + self.displacement / geometry.radius) ** 2))


def forcing_power(model: Model, data: FluidShellData, times: np.ndarray) -> np.ndarray:
    """``1/2 (|f|^2 + |g|^2)`` at ``times``; the body force is integrated over the reference ball."""
    out = np.zeros(len(times))
    theta = model.grid.unknown_theta
    area = model.grid.quadrature_weights[1:]
    rule = model.pusher.rule
    for i, t in enumerate(times):
        if data.surface_force is not None:
            out[i] += 0.5 * float(np.sum(area * np.asarray(data.surface_force(float(t), theta)) ** 2))
        if data.body_force is not None:
            f_r, f_t = data.body_force(float(t), rule.r, rule.theta)
            out[i] += 0.5 * float(np.sum(rule.weights * (np.asarray(f_r) ** 2 + np.asarray(f_t) ** 2)))
    return out


# ---------------------------------------------------------------------------
# functional entry points
# ---------------------------------------------------------------------------


def solve_decoupled(
    model: Model,
    data: FluidShellData,
    delta: np.ndarray,
    v: VelocityFrames | None = None,
    settings: CouplingSettings | None = None,
) -> DecoupledSolution:
    """Decoupled problem on ``[0, (len(delta) - 1) dt]`` for a given displacement and velocity."""
    solver = CouplingSolver(model, data, settings)
    return solver.solve_decoupled(solver.initial_history(), delta, v)


def fixed_point_solve(
    model: Model, data: FluidShellData, horizon: float, settings: CouplingSettings | None = None
) -> FixedPointResult:
    solver = CouplingSolver(model, data, settings)
    return solver.fixed_point_solve(solver.initial_history(), horizon)


def advance_until_collision(
    model: Model, data: FluidShellData, horizon: float, settings: CouplingSettings | None = None
) -> CoupledTrajectory:
    return CouplingSolver(model, data, settings).advance_until_collision(horizon)
