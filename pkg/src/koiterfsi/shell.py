"""Linearized Koiter energy for transverse shell displacements.

The displacement is discretized on a one-dimensional grid.  Two grids are
provided:

* :class:`ClampedZonalGrid` -- axisymmetric displacements on the free part of
  the sphere, clamped (value and slope zero) at ``theta_gamma`` and regular at
  the south pole;
* :class:`FlatStripGrid` -- a periodic flat strip of unit width, used to
  check the bending part against closed-form values.

Each grid exposes linear maps from the unknown nodal values to the strain
components at quadrature nodes.  The energy, its gradient and the
coercivity estimate are then assembled generically by :class:`KoiterShell`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable

import numpy as np
from scipy import linalg

from .errors import EigenSolverFailure, SingularMassMatrix
from .geometry import SphereGeometry, ZonalGrid


@dataclass(frozen=True)
class ElasticParams:
    """Lame constants and half-thickness; the areal density is fixed to one."""

    lam: float = 1.0
    mu: float = 1.0
    eps0: float = 1.0

    def __post_init__(self) -> None:
        if self.mu <= 0 or self.lam < 0 or self.eps0 <= 0:
            raise ValueError("need mu > 0, lambda >= 0 and eps0 > 0")

    @property
    def c1(self) -> float:
        return 4.0 * self.lam * self.mu / (self.lam + 2.0 * self.mu)

    @property
    def bending_constant(self) -> float:
        """``eps0**3 (c1 + 4 mu) / 3``, the coefficient of the flat bilaplacian."""
        return self.eps0**3 * 8.0 * self.mu * (self.lam + self.mu) / (3.0 * (self.lam + 2.0 * self.mu))


@dataclass(frozen=True)
class SymmetricSurfaceTensor:
    """Symmetric 2x2 tensor field stored by its three independent components.

    Components refer to an orthonormal tangent frame, so index placement
    does not matter.
    """

    xx: np.ndarray
    xy: np.ndarray
    yy: np.ndarray

    @classmethod
    def from_matrix(cls, m: np.ndarray) -> "SymmetricSurfaceTensor":
        m = np.asarray(m, dtype=float)
        return cls(m[..., 0, 0], 0.5 * (m[..., 0, 1] + m[..., 1, 0]), m[..., 1, 1])

    @classmethod
    def identity(cls, shape: tuple[int, ...] = ()) -> "SymmetricSurfaceTensor":
        return cls(np.ones(shape), np.zeros(shape), np.ones(shape))

    def as_matrix(self) -> np.ndarray:
        xx, xy, yy = np.broadcast_arrays(self.xx, self.xy, self.yy)
        return np.stack([np.stack([xx, xy], -1), np.stack([xy, yy], -1)], -2)

    @property
    def trace(self) -> np.ndarray:
        return self.xx + self.yy

    def double_dot(self, other: "SymmetricSurfaceTensor") -> np.ndarray:
        return self.xx * other.xx + 2.0 * self.xy * other.xy + self.yy * other.yy


def elasticity_contract(
    params: ElasticParams, a: SymmetricSurfaceTensor, b: SymmetricSurfaceTensor
) -> np.ndarray:
    """``<C, a (x) b> = c1 tr(a) tr(b) + 4 mu a:b`` pointwise."""
    return params.c1 * a.trace * b.trace + 4.0 * params.mu * a.double_dot(b)


# ---------------------------------------------------------------------------
# grids
# ---------------------------------------------------------------------------

FIRST = np.array([1.0, -8.0, 0.0, 8.0, -1.0]) / 12.0
SECOND = np.array([-1.0, 16.0, -30.0, 16.0, -1.0]) / 12.0


@dataclass(frozen=True)
class StrainMaps:
    """Matrices mapping unknowns to strain components at quadrature nodes."""

    membrane: tuple[np.ndarray, np.ndarray, np.ndarray]
    bending: tuple[np.ndarray, np.ndarray, np.ndarray]

    def apply(self, eta: np.ndarray) -> tuple[SymmetricSurfaceTensor, SymmetricSurfaceTensor]:
        sigma = SymmetricSurfaceTensor(*(m @ eta for m in self.membrane))
        xi = SymmetricSurfaceTensor(*(m @ eta for m in self.bending))
        return sigma, xi


class ClampedZonalGrid:
    """Axisymmetric clamped displacements on ``M``.

    Unknowns are the nodal values at grid nodes ``i_gamma + 1 .. n`` (the
    last node is the south pole).  Ghost values left of the clamp come from
    the quintic through the first four unknowns with zero value and slope at
    the clamp; the pole uses even reflection.  Derivatives use fourth-order
    five-point stencils.
    """

    def __init__(self, geometry: SphereGeometry, n: int = 120) -> None:
        self.geometry = geometry
        self.zonal = ZonalGrid(geometry, n)
        self.n = n
        self.i_gamma = self.zonal.i_gamma
        self.n_unknowns = n - self.i_gamma
        if self.n_unknowns < 6:
            raise SingularMassMatrix("free region needs at least six grid nodes")
        self.h = self.zonal.h
        self.theta = self.zonal.theta_m
        self.unknown_theta = self.theta[1:]

    @cached_property
    def _extension(self) -> np.ndarray:
        """Map unknowns to values on nodes ``i_gamma - 2 .. n + 2``."""
        m = self.n_unknowns
        ext = np.zeros((m + 5, m))
        # ghosts at offsets -2, -1 from the quintic p(0) = p'(0) = 0 fitted to offsets 1..4
        offsets = np.arange(1, 5, dtype=float)
        vander = offsets[:, None] ** np.arange(2, 6)
        ghost = np.array([[-2.0], [-1.0]]) ** np.arange(2, 6) @ np.linalg.inv(vander)
        ext[0, :4] = ghost[0]
        ext[1, :4] = ghost[1]
        # clamp node stays zero (row 2); unknowns follow
        ext[3 : 3 + m] = np.eye(m)
        # reflection through the pole (last unknown)
        ext[m + 3, m - 2] = 1.0
        ext[m + 4, m - 3] = 1.0
        return ext

    def _stencil(self, weights: np.ndarray) -> np.ndarray:
        m = self.n_unknowns
        op = np.zeros((m + 1, m + 5))
        for k in range(m + 1):
            op[k, k : k + 5] = weights
        return op @ self._extension

    @cached_property
    def value_matrix(self) -> np.ndarray:
        return self._extension[2 : self.n_unknowns + 3]

    @cached_property
    def d1_matrix(self) -> np.ndarray:
        return self._stencil(FIRST) / self.h

    @cached_property
    def d2_matrix(self) -> np.ndarray:
        return self._stencil(SECOND) / self.h**2

    @cached_property
    def cot_d1_matrix(self) -> np.ndarray:
        """``cot(theta) d/dtheta``, replaced by its limit ``d2/dtheta2`` at the pole."""
        theta = self.theta
        cot = np.zeros_like(theta)
        cot[:-1] = 1.0 / np.tan(theta[:-1])
        out = cot[:, None] * self.d1_matrix
        out[-1] = self.d2_matrix[-1]
        return out

    @cached_property
    def quadrature_weights(self) -> np.ndarray:
        return self.zonal.weights_m

    @cached_property
    def mass_weights(self) -> np.ndarray:
        """Exact areas of the bands around each unknown node (lumped mass)."""
        R = self.geometry.radius
        lo = np.maximum(self.unknown_theta - 0.5 * self.h, self.zonal.theta_gamma_effective)
        hi = np.minimum(self.unknown_theta + 0.5 * self.h, math.pi)
        return 2.0 * math.pi * R**2 * (np.cos(lo) - np.cos(hi))

    @cached_property
    def strain_maps(self) -> StrainMaps:
        R = self.geometry.radius
        value = self.value_matrix
        zero = np.zeros_like(value)
        membrane_diag = value / R
        bend_tt = (self.d2_matrix - value) / R**2
        bend_pp = (self.cot_d1_matrix - value) / R**2
        return StrainMaps((membrane_diag, zero, membrane_diag), (bend_tt, zero, bend_pp))

    @cached_property
    def h2_gram(self) -> np.ndarray:
        """Gram matrix of ``|eta|^2 + |grad eta|^2 + |Hess eta|^2`` (metric weighted)."""
        R = self.geometry.radius
        w = self.quadrature_weights
        parts = [self.value_matrix, self.d1_matrix / R, self.d2_matrix / R**2, self.cot_d1_matrix / R**2]
        return sum(p.T @ (w[:, None] * p) for p in parts)

    def sample(self, profile: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        """Unknown vector of a zonal profile given as a function of theta."""
        return np.asarray(profile(self.unknown_theta), dtype=float)

    def full(self, unknowns: np.ndarray) -> np.ndarray:
        """Values on all grid nodes of the sphere (zero on the clamped cap)."""
        out = np.zeros(np.shape(unknowns)[:-1] + (self.n + 1,))
        out[..., self.i_gamma + 1 :] = unknowns
        return out


class FlatStripGrid:
    """Periodic flat strip ``[0, length) x [0, 1)`` with displacements depending on x only."""

    def __init__(self, n: int = 128, length: float = 2.0 * math.pi) -> None:
        self.n = n
        self.n_unknowns = n
        self.length = length
        self.h = length / n
        self.x = np.arange(n) * self.h

    def _periodic(self, weights: np.ndarray) -> np.ndarray:
        op = np.zeros((self.n, self.n))
        for k in range(self.n):
            for j, w in zip(range(-2, 3), weights):
                op[k, (k + j) % self.n] += w
        return op

    @cached_property
    def value_matrix(self) -> np.ndarray:
        return np.eye(self.n)

    @cached_property
    def d1_matrix(self) -> np.ndarray:
        return self._periodic(FIRST) / self.h

    @cached_property
    def d2_matrix(self) -> np.ndarray:
        return self._periodic(SECOND) / self.h**2

    @cached_property
    def quadrature_weights(self) -> np.ndarray:
        return np.full(self.n, self.h)

    @property
    def mass_weights(self) -> np.ndarray:
        return self.quadrature_weights

    @cached_property
    def strain_maps(self) -> StrainMaps:
        zero = np.zeros((self.n, self.n))
        return StrainMaps((zero, zero, zero), (self.d2_matrix, zero, zero))

    @cached_property
    def h2_gram(self) -> np.ndarray:
        w = self.quadrature_weights
        parts = [self.value_matrix, self.d1_matrix, self.d2_matrix]
        return sum(p.T @ (w[:, None] * p) for p in parts)

    def sample(self, profile: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
        return np.asarray(profile(self.x), dtype=float)


ShellGrid = ClampedZonalGrid | FlatStripGrid


# ---------------------------------------------------------------------------
# energy
# ---------------------------------------------------------------------------


def _contract_gram(
    params: ElasticParams, maps: tuple[np.ndarray, np.ndarray, np.ndarray], w: np.ndarray
) -> np.ndarray:
    xx, xy, yy = maps
    trace = xx + yy
    weighted = lambda m: w[:, None] * m  # noqa: E731
    return params.c1 * trace.T @ weighted(trace) + 4.0 * params.mu * (
        xx.T @ weighted(xx) + 2.0 * xy.T @ weighted(xy) + yy.T @ weighted(yy)
    )


class KoiterShell:
    """Discrete Koiter energy on a shell grid.

    ``stiffness`` is the symmetric matrix with ``eta^T Q b = 2 K(eta, b)``.
    """

    def __init__(self, params: ElasticParams, grid: ShellGrid) -> None:
        self.params = params
        self.grid = grid

    @cached_property
    def stiffness(self) -> np.ndarray:
        p = self.params
        maps = self.grid.strain_maps
        w = self.grid.quadrature_weights
        q = p.eps0 * _contract_gram(p, maps.membrane, w) + (p.eps0**3 / 3.0) * _contract_gram(p, maps.bending, w)
        return 0.5 * (q + q.T)

    @cached_property
    def membrane_stiffness(self) -> np.ndarray:
        return self.params.eps0 * _contract_gram(self.params, self.grid.strain_maps.membrane, self.grid.quadrature_weights)

    @cached_property
    def _mass_inverse(self) -> np.ndarray:
        w = self.grid.mass_weights
        if np.any(w <= 0) or not np.all(np.isfinite(w)):
            raise SingularMassMatrix("non-positive lumped mass weight")
        return 1.0 / w

    def energy(self, eta: np.ndarray, b: np.ndarray | None = None) -> float:
        b = eta if b is None else b
        return 0.5 * float(eta @ self.stiffness @ b)

    def gradient(self, eta: np.ndarray) -> np.ndarray:
        return self._mass_inverse * (self.stiffness @ eta)

    def mass_inner(self, a: np.ndarray, b: np.ndarray) -> float:
        return float(np.sum(self.grid.mass_weights * a * b))

    def coercivity_constant(self) -> float:
        """Smallest generalized eigenvalue of ``K(eta, eta)`` against the H^2 norm."""
        try:
            values = linalg.eigh(
                0.5 * self.stiffness, self.grid.h2_gram, eigvals_only=True, subset_by_index=[0, 0]
            )
        except (linalg.LinAlgError, ValueError) as exc:
            raise EigenSolverFailure(str(exc)) from exc
        return float(values[0])


def linearized_strains(
    grid: ShellGrid, eta: np.ndarray
) -> tuple[SymmetricSurfaceTensor, SymmetricSurfaceTensor]:
    """Membrane strain ``-h eta`` and bending strain ``Hess(eta) - k eta`` at quadrature nodes."""
    return grid.strain_maps.apply(np.asarray(eta, dtype=float))


def koiter_form(params: ElasticParams, grid: ShellGrid, eta: np.ndarray, b: np.ndarray) -> float:
    return KoiterShell(params, grid).energy(np.asarray(eta, dtype=float), np.asarray(b, dtype=float))


def koiter_gradient(params: ElasticParams, grid: ShellGrid, eta: np.ndarray) -> np.ndarray:
    return KoiterShell(params, grid).gradient(np.asarray(eta, dtype=float))


def coercivity_constant(params: ElasticParams, grid: ShellGrid) -> float:
    return KoiterShell(params, grid).coercivity_constant()


@dataclass
class ShellState:
    """Displacement and rate at the unknown nodes of a clamped grid."""

    grid: ClampedZonalGrid
    eta: np.ndarray
    rate: np.ndarray

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.eta))) if self.eta.size else 0.0


def chart_strains(
    geometry: SphereGeometry,
    field: Callable[[np.ndarray, np.ndarray], np.ndarray],
    theta: np.ndarray,
    phi: np.ndarray,
    step: float = 1e-3,
) -> tuple[SymmetricSurfaceTensor, SymmetricSurfaceTensor]:
    """Strains of an arbitrary field ``eta(theta, phi)`` on the sphere by chart differences.

    The covariant Hessian uses the Christoffel symbols of the round metric
    (``Gamma^theta_phiphi = -sin cos``, ``Gamma^phi_thetaphi = cot``).  Output is
    in the orthonormal frame ``(e_theta, e_phi)``.  No boundary conditions are
    imposed, so this is meant for pointwise checks.
    """
    R = geometry.radius
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)

    def d(f_plus2, f_plus1, f_minus1, f_minus2):
        return (-f_plus2 + 8 * f_plus1 - 8 * f_minus1 + f_minus2) / (12 * step)

    f = field(theta, phi)
    ft = d(*(field(theta + k * step, phi) for k in (2, 1, -1, -2)))
    fp = d(*(field(theta, phi + k * step) for k in (2, 1, -1, -2)))
    ftt = (
        -field(theta + 2 * step, phi) + 16 * field(theta + step, phi) - 30 * f
        + 16 * field(theta - step, phi) - field(theta - 2 * step, phi)
    ) / (12 * step**2)
    fpp = (
        -field(theta, phi + 2 * step) + 16 * field(theta, phi + step) - 30 * f
        + 16 * field(theta, phi - step) - field(theta, phi - 2 * step)
    ) / (12 * step**2)
    ftp = (
        field(theta + step, phi + step) - field(theta + step, phi - step)
        - field(theta - step, phi + step) + field(theta - step, phi - step)
    ) / (4 * step**2)
    s, c = np.sin(theta), np.cos(theta)
    hess_tt = ftt
    hess_tp = ftp - (c / s) * fp
    hess_pp = fpp + s * c * ft
    k_factor = f / R**2
    xi = SymmetricSurfaceTensor(
        hess_tt / R**2 - k_factor,
        hess_tp / (R**2 * s),
        hess_pp / (R**2 * s**2) - k_factor,
    )
    sigma_diag = f / R
    sigma = SymmetricSurfaceTensor(sigma_diag, np.zeros_like(f), sigma_diag)
    return sigma, xi
