"""Numba ray-marching kernels for the transport operators.

Each kernel marches from a batch of start points along one fixed direction
with a composite trapezoid rule.  Dimension-specialized variants keep the
inner loops branch-light; the absorption coefficient is evaluated either as
a constant, a closed-form parametric field (exact at every quadrature point)
or a gridded field via multilinear interpolation.  Threads never share
accumulators, so results are independent of the thread count.
"""

import numpy as np
from numba import njit, prange

SIG_CONST = 0
SIG_PARAMETRIC = 1
SIG_GRIDDED = 2


@njit(inline="always", cache=True)
def _interp2(vals, x, y, lo, sp, ct):
    fx = (x - lo[0]) / sp[0]
    fy = (y - lo[1]) / sp[1]
    ix = int(np.floor(fx))
    iy = int(np.floor(fy))
    if ix < 0:
        ix = 0
    if iy < 0:
        iy = 0
    if ix > ct[0] - 2:
        ix = ct[0] - 2
    if iy > ct[1] - 2:
        iy = ct[1] - 2
    ax = fx - ix
    ay = fy - iy
    if ax < 0.0:
        ax = 0.0
    if ax > 1.0:
        ax = 1.0
    if ay < 0.0:
        ay = 0.0
    if ay > 1.0:
        ay = 1.0
    return ((vals[ix, iy] * (1.0 - ax) + vals[ix + 1, iy] * ax) * (1.0 - ay)
            + (vals[ix, iy + 1] * (1.0 - ax) + vals[ix + 1, iy + 1] * ax) * ay)


@njit(inline="always", cache=True)
def _interp3(vals, x, y, z, lo, sp, ct):
    fx = (x - lo[0]) / sp[0]
    fy = (y - lo[1]) / sp[1]
    fz = (z - lo[2]) / sp[2]
    ix = int(np.floor(fx))
    iy = int(np.floor(fy))
    iz = int(np.floor(fz))
    if ix < 0:
        ix = 0
    if iy < 0:
        iy = 0
    if iz < 0:
        iz = 0
    if ix > ct[0] - 2:
        ix = ct[0] - 2
    if iy > ct[1] - 2:
        iy = ct[1] - 2
    if iz > ct[2] - 2:
        iz = ct[2] - 2
    ax = fx - ix
    ay = fy - iy
    az = fz - iz
    if ax < 0.0:
        ax = 0.0
    if ax > 1.0:
        ax = 1.0
    if ay < 0.0:
        ay = 0.0
    if ay > 1.0:
        ay = 1.0
    if az < 0.0:
        az = 0.0
    if az > 1.0:
        az = 1.0
    c00 = vals[ix, iy, iz] * (1.0 - ax) + vals[ix + 1, iy, iz] * ax
    c10 = vals[ix, iy + 1, iz] * (1.0 - ax) + vals[ix + 1, iy + 1, iz] * ax
    c01 = vals[ix, iy, iz + 1] * (1.0 - ax) + vals[ix + 1, iy, iz + 1] * ax
    c11 = vals[ix, iy + 1, iz + 1] * (1.0 - ax) + vals[ix + 1, iy + 1, iz + 1] * ax
    return (c00 * (1.0 - ay) + c10 * ay) * (1.0 - az) + (c01 * (1.0 - ay) + c11 * ay) * az


@njit(inline="always", cache=True)
def _sigma2(x, y, smode, scal, gauss, incl, gvals, sup, lo, sp, ct):
    if sup[0] > 0.5:
        dx = x - sup[1]
        dy = y - sup[2]
        if dx * dx + dy * dy > sup[4] * sup[4]:
            return 0.0
    if smode == SIG_CONST:
        return scal[0]
    if smode == SIG_GRIDDED:
        return _interp2(gvals, x, y, lo, sp, ct)
    v = scal[0]
    for g in range(gauss.shape[0]):
        dx = x - gauss[g, 0]
        dy = y - gauss[g, 1]
        v += gauss[g, 2] * np.exp(-(dx * dx + dy * dy) * gauss[g, 3])
    for i in range(incl.shape[0]):
        dx = x - incl[i, 0]
        dy = y - incl[i, 1]
        d = np.sqrt(dx * dx + dy * dy)
        t = 0.5 + (incl[i, 2] - d) / (2.0 * incl[i, 3])
        if t < 0.0:
            t = 0.0
        if t > 1.0:
            t = 1.0
        v += incl[i, 4] * t * t * (3.0 - 2.0 * t)
    return v


@njit(inline="always", cache=True)
def _sigma3(x, y, z, smode, scal, gauss, incl, gvals, sup, lo, sp, ct):
    if sup[0] > 0.5:
        dx = x - sup[1]
        dy = y - sup[2]
        dz = z - sup[3]
        if dx * dx + dy * dy + dz * dz > sup[4] * sup[4]:
            return 0.0
    if smode == SIG_CONST:
        return scal[0]
    if smode == SIG_GRIDDED:
        return _interp3(gvals, x, y, z, lo, sp, ct)
    v = scal[0]
    for g in range(gauss.shape[0]):
        dx = x - gauss[g, 0]
        dy = y - gauss[g, 1]
        dz = z - gauss[g, 2]
        v += gauss[g, 3] * np.exp(-(dx * dx + dy * dy + dz * dz) * gauss[g, 4])
    for i in range(incl.shape[0]):
        dx = x - incl[i, 0]
        dy = y - incl[i, 1]
        dz = z - incl[i, 2]
        d = np.sqrt(dx * dx + dy * dy + dz * dz)
        t = 0.5 + (incl[i, 3] - d) / (2.0 * incl[i, 4])
        if t < 0.0:
            t = 0.0
        if t > 1.0:
            t = 1.0
        v += incl[i, 5] * t * t * (3.0 - 2.0 * t)
    return v


@njit(parallel=True, cache=True)
def lift2(pts, mvec, tmax, step, smode, scal, gauss, incl, gvals, sup,
          lo, sp, ct, src, out):
    """integral of exp(-tau(t)) * src(p + t m) dt along one direction (2-D)."""
    for mth in prange(pts.shape[0]):
        T = tmax[mth]
        if T <= 1e-14:
            out[mth] = 0.0
            continue
        nt = int(T / step) + 1
        h = T / nt
        x = pts[mth, 0]
        y = pts[mth, 1]
        sig_prev = _sigma2(x, y, smode, scal, gauss, incl, gvals, sup, lo, sp, ct)
        s_prev = _interp2(src, x, y, lo, sp, ct)
        tau = 0.0
        acc = 0.5 * s_prev
        for j in range(1, nt + 1):
            t = j * h
            x = pts[mth, 0] + t * mvec[0]
            y = pts[mth, 1] + t * mvec[1]
            sig = _sigma2(x, y, smode, scal, gauss, incl, gvals, sup, lo, sp, ct)
            tau += 0.5 * h * (sig_prev + sig)
            g = np.exp(-tau) * _interp2(src, x, y, lo, sp, ct)
            if j == nt:
                acc += 0.5 * g
            else:
                acc += g
            sig_prev = sig
        out[mth] = acc * h


@njit(parallel=True, cache=True)
def lift3(pts, mvec, tmax, step, smode, scal, gauss, incl, gvals, sup,
          lo, sp, ct, src, out):
    """integral of exp(-tau(t)) * src(p + t m) dt along one direction (3-D)."""
    for mth in prange(pts.shape[0]):
        T = tmax[mth]
        if T <= 1e-14:
            out[mth] = 0.0
            continue
        nt = int(T / step) + 1
        h = T / nt
        x = pts[mth, 0]
        y = pts[mth, 1]
        z = pts[mth, 2]
        sig_prev = _sigma3(x, y, z, smode, scal, gauss, incl, gvals, sup, lo, sp, ct)
        s_prev = _interp3(src, x, y, z, lo, sp, ct)
        tau = 0.0
        acc = 0.5 * s_prev
        for j in range(1, nt + 1):
            t = j * h
            x = pts[mth, 0] + t * mvec[0]
            y = pts[mth, 1] + t * mvec[1]
            z = pts[mth, 2] + t * mvec[2]
            sig = _sigma3(x, y, z, smode, scal, gauss, incl, gvals, sup, lo, sp, ct)
            tau += 0.5 * h * (sig_prev + sig)
            g = np.exp(-tau) * _interp3(src, x, y, z, lo, sp, ct)
            if j == nt:
                acc += 0.5 * g
            else:
                acc += g
            sig_prev = sig
        out[mth] = acc * h


@njit(parallel=True, cache=True)
def transmission2(pts, mvec, tmax, step, smode, scal, gauss, incl, gvals, sup,
                  lo, sp, ct, out):
    """exp(-integral of sigma) from each point over its chord (2-D)."""
    for mth in prange(pts.shape[0]):
        T = tmax[mth]
        if T <= 1e-14:
            out[mth] = 1.0
            continue
        nt = int(T / step) + 1
        h = T / nt
        x = pts[mth, 0]
        y = pts[mth, 1]
        sig_prev = _sigma2(x, y, smode, scal, gauss, incl, gvals, sup, lo, sp, ct)
        tau = 0.0
        for j in range(1, nt + 1):
            t = j * h
            x = pts[mth, 0] + t * mvec[0]
            y = pts[mth, 1] + t * mvec[1]
            sig = _sigma2(x, y, smode, scal, gauss, incl, gvals, sup, lo, sp, ct)
            tau += 0.5 * h * (sig_prev + sig)
            sig_prev = sig
        out[mth] = np.exp(-tau)


@njit(parallel=True, cache=True)
def transmission3(pts, mvec, tmax, step, smode, scal, gauss, incl, gvals, sup,
                  lo, sp, ct, out):
    """exp(-integral of sigma) from each point over its chord (3-D)."""
    for mth in prange(pts.shape[0]):
        T = tmax[mth]
        if T <= 1e-14:
            out[mth] = 1.0
            continue
        nt = int(T / step) + 1
        h = T / nt
        x = pts[mth, 0]
        y = pts[mth, 1]
        z = pts[mth, 2]
        sig_prev = _sigma3(x, y, z, smode, scal, gauss, incl, gvals, sup, lo, sp, ct)
        tau = 0.0
        for j in range(1, nt + 1):
            t = j * h
            x = pts[mth, 0] + t * mvec[0]
            y = pts[mth, 1] + t * mvec[1]
            z = pts[mth, 2] + t * mvec[2]
            sig = _sigma3(x, y, z, smode, scal, gauss, incl, gvals, sup, lo, sp, ct)
            tau += 0.5 * h * (sig_prev + sig)
            sig_prev = sig
        out[mth] = np.exp(-tau)


@njit(parallel=True, cache=True)
def lift2_multi(pts, mvec, tmax, step, smode, scal, gauss, incl, gvals, sup,
                lo, sp, ct, src, out):
    """Batched 2-D lift: src carries a trailing source axis, out is (M, P)."""
    P = src.shape[2]
    for mth in prange(pts.shape[0]):
        T = tmax[mth]
        if T <= 1e-14:
            for p in range(P):
                out[mth, p] = 0.0
            continue
        nt = int(T / step) + 1
        h = T / nt
        acc = np.zeros(P)
        tau = 0.0
        sig_prev = 0.0
        for j in range(nt + 1):
            t = j * h
            x = pts[mth, 0] + t * mvec[0]
            y = pts[mth, 1] + t * mvec[1]
            sig = _sigma2(x, y, smode, scal, gauss, incl, gvals, sup, lo, sp, ct)
            if j > 0:
                tau += 0.5 * h * (sig_prev + sig)
            sig_prev = sig
            fx = (x - lo[0]) / sp[0]
            fy = (y - lo[1]) / sp[1]
            ix = int(np.floor(fx))
            iy = int(np.floor(fy))
            if ix < 0:
                ix = 0
            if iy < 0:
                iy = 0
            if ix > ct[0] - 2:
                ix = ct[0] - 2
            if iy > ct[1] - 2:
                iy = ct[1] - 2
            ax = fx - ix
            ay = fy - iy
            if ax < 0.0:
                ax = 0.0
            if ax > 1.0:
                ax = 1.0
            if ay < 0.0:
                ay = 0.0
            if ay > 1.0:
                ay = 1.0
            w00 = (1.0 - ax) * (1.0 - ay)
            w10 = ax * (1.0 - ay)
            w01 = (1.0 - ax) * ay
            w11 = ax * ay
            ew = np.exp(-tau)
            if j == 0 or j == nt:
                ew *= 0.5
            for p in range(P):
                sv = (w00 * src[ix, iy, p] + w10 * src[ix + 1, iy, p]
                      + w01 * src[ix, iy + 1, p] + w11 * src[ix + 1, iy + 1, p])
                acc[p] += ew * sv
        for p in range(P):
            out[mth, p] = acc[p] * h


@njit(parallel=True, cache=True)
def lift3_multi(pts, mvec, tmax, step, smode, scal, gauss, incl, gvals, sup,
                lo, sp, ct, src, out):
    """Batched 3-D lift: src carries a trailing source axis, out is (M, P)."""
    P = src.shape[3]
    for mth in prange(pts.shape[0]):
        T = tmax[mth]
        if T <= 1e-14:
            for p in range(P):
                out[mth, p] = 0.0
            continue
        nt = int(T / step) + 1
        h = T / nt
        acc = np.zeros(P)
        tau = 0.0
        sig_prev = 0.0
        for j in range(nt + 1):
            t = j * h
            x = pts[mth, 0] + t * mvec[0]
            y = pts[mth, 1] + t * mvec[1]
            z = pts[mth, 2] + t * mvec[2]
            sig = _sigma3(x, y, z, smode, scal, gauss, incl, gvals, sup, lo, sp, ct)
            if j > 0:
                tau += 0.5 * h * (sig_prev + sig)
            sig_prev = sig
            fx = (x - lo[0]) / sp[0]
            fy = (y - lo[1]) / sp[1]
            fz = (z - lo[2]) / sp[2]
            ix = int(np.floor(fx))
            iy = int(np.floor(fy))
            iz = int(np.floor(fz))
            if ix < 0:
                ix = 0
            if iy < 0:
                iy = 0
            if iz < 0:
                iz = 0
            if ix > ct[0] - 2:
                ix = ct[0] - 2
            if iy > ct[1] - 2:
                iy = ct[1] - 2
            if iz > ct[2] - 2:
                iz = ct[2] - 2
            ax = fx - ix
            ay = fy - iy
            az = fz - iz
            if ax < 0.0:
                ax = 0.0
            if ax > 1.0:
                ax = 1.0
            if ay < 0.0:
                ay = 0.0
            if ay > 1.0:
                ay = 1.0
            if az < 0.0:
                az = 0.0
            if az > 1.0:
                az = 1.0
            w000 = (1.0 - ax) * (1.0 - ay) * (1.0 - az)
            w100 = ax * (1.0 - ay) * (1.0 - az)
            w010 = (1.0 - ax) * ay * (1.0 - az)
            w110 = ax * ay * (1.0 - az)
            w001 = (1.0 - ax) * (1.0 - ay) * az
            w101 = ax * (1.0 - ay) * az
            w011 = (1.0 - ax) * ay * az
            w111 = ax * ay * az
            ew = np.exp(-tau)
            if j == 0 or j == nt:
                ew *= 0.5
            for p in range(P):
                sv = (w000 * src[ix, iy, iz, p] + w100 * src[ix + 1, iy, iz, p]
                      + w010 * src[ix, iy + 1, iz, p] + w110 * src[ix + 1, iy + 1, iz, p]
                      + w001 * src[ix, iy, iz + 1, p] + w101 * src[ix + 1, iy, iz + 1, p]
                      + w011 * src[ix, iy + 1, iz + 1, p] + w111 * src[ix + 1, iy + 1, iz + 1, p])
                acc[p] += ew * sv
        for p in range(P):
            out[mth, p] = acc[p] * h


def lift_direction_multi(points, march_vec, tmax, step, pack, src_multi, out=None):
    """Dispatch to the batched lift kernel; src_multi has a trailing source axis."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    n_src = src_multi.shape[-1]
    if out is None:
        out = np.empty((points.shape[0], n_src))
    kern = lift2_multi if points.shape[1] == 2 else lift3_multi
    kern(points, np.ascontiguousarray(march_vec, dtype=np.float64),
         np.ascontiguousarray(tmax, dtype=np.float64), float(step),
         pack.mode, pack.scalars, pack.gauss, pack.incl, pack.grid_values,
         pack.support, pack.grid_lo, pack.grid_spacing, pack.grid_counts,
         np.ascontiguousarray(src_multi, dtype=np.float64), out)
    return out


def lift_direction(points, march_vec, tmax, step, pack, src_grid_values, out=None):
    """Dispatch to the dimension-specialized lift kernel."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    if out is None:
        out = np.empty(points.shape[0])
    kern = lift2 if points.shape[1] == 2 else lift3
    kern(points, np.ascontiguousarray(march_vec, dtype=np.float64),
         np.ascontiguousarray(tmax, dtype=np.float64), float(step),
         pack.mode, pack.scalars, pack.gauss, pack.incl, pack.grid_values,
         pack.support, pack.grid_lo, pack.grid_spacing, pack.grid_counts,
         np.ascontiguousarray(src_grid_values, dtype=np.float64), out)
    return out


def transmission_direction(points, march_vec, tmax, step, pack, out=None):
    """Dispatch to the dimension-specialized transmission kernel."""
    points = np.ascontiguousarray(points, dtype=np.float64)
    if out is None:
        out = np.empty(points.shape[0])
    kern = transmission2 if points.shape[1] == 2 else transmission3
    kern(points, np.ascontiguousarray(march_vec, dtype=np.float64),
         np.ascontiguousarray(tmax, dtype=np.float64), float(step),
         pack.mode, pack.scalars, pack.gauss, pack.incl, pack.grid_values,
         pack.support, pack.grid_lo, pack.grid_spacing, pack.grid_counts, out)
    return out
