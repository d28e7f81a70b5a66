# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled versions of the hot kernels (see ``_kernels_py`` for the reference)."""

import numpy as np

from libc.math cimport NAN, fabs


cdef inline double _cutoff(double s, double plateau, double ramp, int order) nogil:
    cdef double length = 1.0 - 2.0 * plateau
    cdef double slope = 1.0 / (length - ramp)
    cdef double x = s + 1.0 - plateau
    cdef double y, t, half
    cdef bint mirrored
    if x <= 0.0:
        return 0.0
    if x >= length:
        return 1.0 if order == 0 else 0.0
    mirrored = x > 0.5 * length
    y = length - x if mirrored else x
    if y < 0.0:
        y = 0.0
    t = y / ramp
    if t > 1.0:
        t = 1.0
    if order == 0:
        if y < ramp:
            half = slope * ramp * t * t * t * t * t * (7.0 + t * (-14.0 + t * (10.0 - 2.5 * t)))
        else:
            half = slope * ramp * 0.5 + slope * (y - ramp)
        return 1.0 - half if mirrored else half
    if order == 1:
        if y < ramp:
            return slope * t * t * t * t * (35.0 + t * (-84.0 + t * (70.0 - 20.0 * t)))
        return slope
    if y < ramp:
        half = slope * 140.0 * (t * (1.0 - t)) * (t * (1.0 - t)) * (t * (1.0 - t)) / ramp
        return -half if mirrored else half
    return 0.0


def cutoff_eval(s, double plateau, double ramp, int order):
    if order < 0 or order > 2:
        raise ValueError("order must be 0, 1 or 2")
    arr = np.ascontiguousarray(s, dtype=np.float64)
    out = np.empty_like(arr)
    cdef const double[::1] src = arr.reshape(-1)
    cdef double[::1] dst = out.reshape(-1)
    cdef Py_ssize_t i, n = src.shape[0]
    with nogil:
        for i in range(n):
            dst[i] = _cutoff(src[i], plateau, ramp, order)
    return out


def radial_inverse(rho, d, double radius, double reach, double plateau, double ramp,
                   double tol, int max_iter):
    rho_arr = np.ascontiguousarray(rho, dtype=np.float64)
    d_arr = np.ascontiguousarray(d, dtype=np.float64)
    out = np.empty_like(rho_arr)
    cdef const double[::1] p = rho_arr.reshape(-1)
    cdef const double[::1] dd = d_arr.reshape(-1)
    cdef double[::1] res = out.reshape(-1)
    cdef Py_ssize_t i, n = p.shape[0]
    cdef int k
    cdef double r, s, f, fp, step
    cdef double scale = radius if radius > 1.0 else 1.0
    cdef bint ok
    with nogil:
        for i in range(n):
            s = (p[i] - radius) / reach
            if s > 0.0:
                s = 0.0
            r = p[i] - dd[i] * _cutoff(s, plateau, ramp, 0)
            ok = False
            for k in range(max_iter):
                s = (r - radius) / reach
                if s > 0.0:
                    s = 0.0
                f = r + dd[i] * _cutoff(s, plateau, ramp, 0) - p[i]
                fp = 1.0 + dd[i] * _cutoff(s, plateau, ramp, 1) / reach
                step = f / fp
                r -= step
                if fabs(step) <= tol * scale:
                    ok = True
                    break
            res[i] = r if ok else NAN
    return out


def stream_push(psi_r, psi_t, psi_rr, psi_rt, psi_tt, rho_r, rho_t, rho_rr, rho_rt, rho_tt):
    shape = np.broadcast_shapes(*(np.shape(a) for a in (
        psi_r, psi_t, psi_rr, psi_rt, psi_tt, rho_r, rho_t, rho_rr, rho_rt, rho_tt)))
    ins = [np.ascontiguousarray(np.broadcast_to(a, shape), dtype=np.float64).reshape(-1)
           for a in (psi_r, psi_t, psi_rr, psi_rt, psi_tt, rho_r, rho_t, rho_rr, rho_rt, rho_tt)]
    cdef const double[::1] a_r = ins[0], a_t = ins[1], a_rr = ins[2], a_rt = ins[3], a_tt = ins[4]
    cdef const double[::1] m_r = ins[5], m_t = ins[6], m_rr = ins[7], m_rt = ins[8], m_tt = ins[9]
    n_total = ins[0].shape[0]
    outs = [np.empty(n_total) for _ in range(5)]
    cdef double[::1] o_p = outs[0], o_t = outs[1], o_pp = outs[2], o_pt = outs[3], o_tt = outs[4]
    cdef Py_ssize_t i, n = n_total
    cdef double r_p, r_t, r_pp, r_pt, r_tt
    with nogil:
        for i in range(n):
            r_p = 1.0 / m_r[i]
            r_t = -m_t[i] * r_p
            r_pp = -m_rr[i] * r_p * r_p * r_p
            r_pt = -(m_rr[i] * r_t + m_rt[i]) * r_p * r_p
            r_tt = -(m_rr[i] * r_t * r_t + 2.0 * m_rt[i] * r_t + m_tt[i]) * r_p
            o_p[i] = a_r[i] * r_p
            o_t[i] = a_r[i] * r_t + a_t[i]
            o_pp[i] = a_rr[i] * r_p * r_p + a_r[i] * r_pp
            o_pt[i] = (a_rr[i] * r_t + a_rt[i]) * r_p + a_r[i] * r_pt
            o_tt[i] = a_rr[i] * r_t * r_t + 2.0 * a_rt[i] * r_t + a_tt[i] + a_r[i] * r_tt
    return tuple(o.reshape(shape) for o in outs)


def bilinear(grid, double x0, double dx, double y0, double dy, xs, ys):
    g = np.ascontiguousarray(grid, dtype=np.float64)
    *lead, nx, ny = g.shape
    lead = tuple(lead)
    g2 = g.reshape(-1, nx, ny)
    xa = np.ascontiguousarray(xs, dtype=np.float64)
    ya = np.ascontiguousarray(np.broadcast_to(ys, xa.shape), dtype=np.float64)
    pts_shape = xa.shape
    out = np.empty((g2.shape[0], xa.size))
    cdef const double[:, :, ::1] gv = g2
    cdef const double[::1] xv = xa.reshape(-1)
    cdef const double[::1] yv = ya.reshape(-1)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t c, k, i, j, nc = g2.shape[0], npts = xa.size
    cdef Py_ssize_t nxx = nx, nyy = ny
    cdef double fx, fy, wx, wy
    with nogil:
        for k in range(npts):
            fx = (xv[k] - x0) / dx
            fy = (yv[k] - y0) / dy
            if fx < 0.0:
                fx = 0.0
            if fx > nxx - 1.0:
                fx = nxx - 1.0
            if fy < 0.0:
                fy = 0.0
            if fy > nyy - 1.0:
                fy = nyy - 1.0
            i = <Py_ssize_t>fx
            j = <Py_ssize_t>fy
            if i > nxx - 2:
                i = nxx - 2
            if j > nyy - 2:
                j = nyy - 2
            wx = fx - i
            wy = fy - j
            for c in range(nc):
                ov[c, k] = (gv[c, i, j] * (1 - wx) * (1 - wy) + gv[c, i + 1, j] * wx * (1 - wy)
                            + gv[c, i, j + 1] * (1 - wx) * wy + gv[c, i + 1, j + 1] * wx * wy)
    return out.reshape(lead + pts_shape)
