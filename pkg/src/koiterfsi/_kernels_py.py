"""Pure numpy implementations of the hot kernels.

These mirror ``_kernels.pyx`` one to one and are used when the compiled
extension is not available.
"""

from __future__ import annotations

import numpy as np


def cutoff_eval(s: np.ndarray, plateau: float, ramp: float, order: int) -> np.ndarray:
    """Evaluate the cutoff profile (``order`` 0), or its first or second derivative."""
    s = np.asarray(s, dtype=float)
    length = 1.0 - 2.0 * plateau
    slope = 1.0 / (length - ramp)
    x = s + 1.0 - plateau
    mirrored = x > 0.5 * length
    y = np.where(mirrored, length - x, x)
    y = np.clip(y, 0.0, None)
    t = np.clip(y / ramp, 0.0, 1.0)
    in_ramp = y < ramp
    if order == 0:
        ramp_val = slope * ramp * t**5 * (7.0 + t * (-14.0 + t * (10.0 - 2.5 * t)))
        core_val = slope * ramp * 0.5 + slope * (y - ramp)
        half = np.where(in_ramp, ramp_val, core_val)
        out = np.where(mirrored, 1.0 - half, half)
        out = np.where(x <= 0.0, 0.0, out)
        return np.where(x >= length, 1.0, out)
    if order == 1:
        val = np.where(in_ramp, slope * t**4 * (35.0 + t * (-84.0 + t * (70.0 - 20.0 * t))), slope)
        return np.where((x <= 0.0) | (x >= length), 0.0, val)
    if order == 2:
        val = np.where(in_ramp, slope * 140.0 * (t * (1.0 - t)) ** 3 / ramp, 0.0)
        val = np.where(mirrored, -val, val)
        return np.where((x <= 0.0) | (x >= length), 0.0, val)
    raise ValueError("order must be 0, 1 or 2")


def radial_inverse(
    rho: np.ndarray,
    d: np.ndarray,
    radius: float,
    reach: float,
    plateau: float,
    ramp: float,
    tol: float,
    max_iter: int,
) -> np.ndarray:
    """Solve ``r + d * beta(min((r - R)/kappa, 0)) = rho`` pointwise by Newton."""
    rho = np.asarray(rho, dtype=float)
    d = np.asarray(d, dtype=float)
    r = rho - d * cutoff_eval(np.minimum((rho - radius) / reach, 0.0), plateau, ramp, 0)
    for _ in range(max_iter):
        s = np.minimum((r - radius) / reach, 0.0)
        f = r + d * cutoff_eval(s, plateau, ramp, 0) - rho
        fp = 1.0 + d * cutoff_eval(s, plateau, ramp, 1) / reach
        step = f / fp
        r = r - step
        if np.all(np.abs(step) <= tol * max(radius, 1.0)):
            break
    else:
        return np.full_like(r, np.nan)
    return r


def stream_push(
    psi_r: np.ndarray,
    psi_t: np.ndarray,
    psi_rr: np.ndarray,
    psi_rt: np.ndarray,
    psi_tt: np.ndarray,
    rho_r: np.ndarray,
    rho_t: np.ndarray,
    rho_rr: np.ndarray,
    rho_rt: np.ndarray,
    rho_tt: np.ndarray,
) -> tuple[np.ndarray, ...]:
    """Derivatives of ``psi(r(rho, theta), theta)`` in the physical variables.

    Inputs are the reference stream-function derivatives and the derivatives
    of the forward radial map at the same reference nodes.  Returns
    ``(p_rho, p_theta, p_rhorho, p_rhotheta, p_thetatheta)``.
    """
    r_p = 1.0 / rho_r
    r_t = -rho_t * r_p
    r_pp = -rho_rr * r_p**3
    r_pt = -(rho_rr * r_t + rho_rt) * r_p**2
    r_tt = -(rho_rr * r_t**2 + 2.0 * rho_rt * r_t + rho_tt) * r_p
    p_p = psi_r * r_p
    p_t = psi_r * r_t + psi_t
    p_pp = psi_rr * r_p**2 + psi_r * r_pp
    p_pt = (psi_rr * r_t + psi_rt) * r_p + psi_r * r_pt
    p_tt = psi_rr * r_t**2 + 2.0 * psi_rt * r_t + psi_tt + psi_r * r_tt
    return p_p, p_t, p_pp, p_pt, p_tt


def bilinear(
    grid: np.ndarray, x0: float, dx: float, y0: float, dy: float, xs: np.ndarray, ys: np.ndarray
) -> np.ndarray:
    """Bilinear interpolation of ``grid[..., i, j]`` at points ``(xs, ys)``, clamped to the grid."""
    nx, ny = grid.shape[-2:]
    fx = np.clip((np.asarray(xs, dtype=float) - x0) / dx, 0.0, nx - 1.0)
    fy = np.clip((np.asarray(ys, dtype=float) - y0) / dy, 0.0, ny - 1.0)
    i = np.minimum(fx.astype(int), nx - 2)
    j = np.minimum(fy.astype(int), ny - 2)
    wx = fx - i
    wy = fy - j
    return (
        grid[..., i, j] * (1 - wx) * (1 - wy)
        + grid[..., i + 1, j] * wx * (1 - wy)
        + grid[..., i, j + 1] * (1 - wx) * wy
        + grid[..., i + 1, j + 1] * wx * wy
    )
