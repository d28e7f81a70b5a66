"""Reusable zonal test fields."""

from __future__ import annotations

import math

import numpy as np
from numpy.polynomial import Polynomial

from koiterfsi.geometry import SphereGeometry, ZonalField


def clamped_field(coeffs, scale: float = 1.0, geometry: SphereGeometry | None = None) -> ZonalField:
    """``scale (mu_gamma - mu)**2 p(mu)`` on ``M``, zero on the clamped cap."""
    geometry = geometry or SphereGeometry()
    mu_gamma = math.cos(geometry.theta_gamma)
    poly = scale * Polynomial([mu_gamma, -1.0]) ** 2 * Polynomial(coeffs)
    return ZonalField.from_polynomial(poly, geometry.radius, mu_cut=mu_gamma)


def random_clamped_field(rng: np.random.Generator, sup: float, degree: int = 3,
                         geometry: SphereGeometry | None = None) -> ZonalField:
    """Random clamped profile rescaled to the given sup norm."""
    field = clamped_field(rng.normal(size=degree + 1), 1.0, geometry)
    return field.scaled(sup / field.sup_norm())
