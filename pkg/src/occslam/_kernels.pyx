# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels; semantics are defined by ``_pykernels``."""

from libc.math cimport sqrt, floor, isfinite, INFINITY

import numpy as np

cdef int COLLAPSED = -2
cdef int MAX_CELL_LEVEL = 3


def integrate_rays(int[:, :, ::1] index, double[:, ::1] means, unsigned short[:, ::1] weights,
                   double[:, :, ::1] umean, unsigned short[:, :, ::1] uw,
                   unsigned char[:, :, ::1] dirty, Py_ssize_t n_used,
                   double[:, ::1] origins, double[:, ::1] endpoints, Py_ssize_t start,
                   double lo, double h, int n_vox, double[::1] sp, int w_max,
                   long long[::1] counts):
    cdef double l_min = sp[0], s_scale = sp[1], s_min = sp[2], s_max = sp[3]
    cdef double t_scale = sp[4], t_min = sp[5], t_max = sp[6], footprint = sp[7]
    cdef Py_ssize_t capacity = means.shape[0]
    cdef double hi = lo + n_vox * h
    cdef Py_ssize_t n_rays = origins.shape[0]
    cdef Py_ssize_t r, new, slot, k
    cdef double ox, oy, oz, ex, ey, ez, dx, dy, dz, z, ux, uy, uz
    cdef double sigma, tau, band, half_tau, slope, t_in, t_out, ta, tb, o, u, tmp
    cdef double px, py, pz, tmx, tmy, tmz, tdx, tdy, tdz, fw, cs, qx, qy, d_r, l, m
    cdef bint empty, clipped
    cdef int level, csz, nc, cx, cy, cz, stx, sty, stz, x0, y0, z0, ix, iy, iz
    cdef int bx, by, bz, off, w, axis
    cdef Py_ssize_t need
    cdef Py_ssize_t stop = n_rays

    with nogil:
        for r in range(start, n_rays):
            ox = origins[r, 0]
            oy = origins[r, 1]
            oz = origins[r, 2]
            ex = endpoints[r, 0]
            ey = endpoints[r, 1]
            ez = endpoints[r, 2]
            dx = ex - ox
            dy = ey - oy
            dz = ez - oz
            z = sqrt(dx * dx + dy * dy + dz * dz)
            if not (z > 1e-9) or not isfinite(z) or not (isfinite(ox) and isfinite(oy) and isfinite(oz)):
                counts[2] += 1
                continue
            ux = dx / z
            uy = dy / z
            uz = dz / z
            sigma = min(max(s_scale * z, s_min), s_max)
            tau = min(max(t_scale * z, t_min), t_max)
            band = -3.0 * sigma
            half_tau = 0.5 * tau
            slope = -l_min / (3.0 * sigma)

            t_in = 0.0
            t_out = z + half_tau
            empty = False
            for axis in range(3):
                if axis == 0:
                    o = ox
                    u = ux
                elif axis == 1:
                    o = oy
                    u = uy
                else:
                    o = oz
                    u = uz
                if u > 1e-15 or u < -1e-15:
                    ta = (lo - o) / u
                    tb = (hi - o) / u
                    if ta > tb:
                        tmp = ta
                        ta = tb
                        tb = tmp
                    if ta > t_in:
                        t_in = ta
                    if tb < t_out:
                        t_out = tb
                elif o < lo or o >= hi:
                    empty = True
            if empty or t_in >= t_out:
                counts[2] += 1
                continue
            clipped = not (lo <= ex < hi and lo <= ey < hi and lo <= ez < hi)

            level = 0
            if footprint > 0.0:
                fw = z * footprint / h
                while level < MAX_CELL_LEVEL and (2 << level) <= fw:
                    level += 1
            csz = 1 << level
            cs = h * csz
            nc = n_vox >> level

            need = 3 * (<Py_ssize_t>((t_out - t_in) / cs) + 2) + 1
            if capacity - n_used < need:
                stop = r
                break

            px = ox + ux * t_in
            py = oy + uy * t_in
            pz = oz + uz * t_in
            cx = min(max(<int>floor((px - lo) / cs), 0), nc - 1)
            cy = min(max(<int>floor((py - lo) / cs), 0), nc - 1)
            cz = min(max(<int>floor((pz - lo) / cs), 0), nc - 1)

            if ux > 0.0:
                stx = 1
                tmx = (lo + (cx + 1) * cs - ox) / ux
                tdx = cs / ux
            elif ux < 0.0:
                stx = -1
                tmx = (lo + cx * cs - ox) / ux
                tdx = -cs / ux
            else:
                stx = 0
                tmx = INFINITY
                tdx = INFINITY
            if uy > 0.0:
                sty = 1
                tmy = (lo + (cy + 1) * cs - oy) / uy
                tdy = cs / uy
            elif uy < 0.0:
                sty = -1
                tmy = (lo + cy * cs - oy) / uy
                tdy = -cs / uy
            else:
                sty = 0
                tmy = INFINITY
                tdy = INFINITY
            if uz > 0.0:
                stz = 1
                tmz = (lo + (cz + 1) * cs - oz) / uz
                tdz = cs / uz
            elif uz < 0.0:
                stz = -1
                tmz = (lo + cz * cs - oz) / uz
                tdz = -cs / uz
            else:
                stz = 0
                tmz = INFINITY
                tdz = INFINITY

            while True:
                x0 = cx * csz
                y0 = cy * csz
                z0 = cz * csz
                for ix in range(x0, x0 + csz):
                    qx = (lo + (ix + 0.5) * h - ox) * ux
                    for iy in range(y0, y0 + csz):
                        qy = (lo + (iy + 0.5) * h - oy) * uy
                        for iz in range(z0, z0 + csz):
                            d_r = qx + qy + (lo + (iz + 0.5) * h - oz) * uz - z
                            if d_r > half_tau:
                                continue
                            if clipped and d_r > band:
                                continue
                            if d_r <= band:
                                l = l_min
                            else:
                                l = slope * d_r
                            bx = ix >> 3
                            by = iy >> 3
                            bz = iz >> 3
                            slot = index[bx, by, bz]
                            if slot < 0:
                                new = n_used
                                n_used += 1
                                if slot == COLLAPSED:
                                    m = umean[bx, by, bz]
                                    w = uw[bx, by, bz]
                                    for k in range(512):
                                        means[new, k] = m
                                        weights[new, k] = <unsigned short>w
                                else:
                                    for k in range(512):
                                        means[new, k] = 0.0
                                        weights[new, k] = 0
                                index[bx, by, bz] = <int>new
                                slot = new
                            dirty[bx, by, bz] = 1
                            off = ((ix & 7) << 6) | ((iy & 7) << 3) | (iz & 7)
                            w = weights[slot, off]
                            means[slot, off] = (means[slot, off] * w + l) / (w + 1)
                            weights[slot, off] = <unsigned short>(w + 1 if w < w_max else w_max)
                            counts[3] += 1
                if tmx <= tmy and tmx <= tmz:
                    if tmx >= t_out:
                        break
                    cx += stx
                    if cx < 0 or cx >= nc:
                        break
                    tmx += tdx
                elif tmy <= tmz:
                    if tmy >= t_out:
                        break
                    cy += sty
                    if cy < 0 or cy >= nc:
                        break
                    tmy += tdy
                else:
                    if tmz >= t_out:
                        break
                    cz += stz
                    if cz < 0 or cz >= nc:
                        break
                    tmz += tdz
            if clipped:
                counts[1] += 1
            else:
                counts[0] += 1
    return stop, n_used


cdef inline bint _read(int[:, :, ::1] index, double[:, ::1] means, unsigned short[:, ::1] weights,
                       double[:, :, ::1] umean, unsigned short[:, :, ::1] uw,
                       int ix, int iy, int iz, double* val) noexcept nogil:
    cdef int bx = ix >> 3, by = iy >> 3, bz = iz >> 3
    cdef int slot = index[bx, by, bz]
    cdef int off
    cdef unsigned short w
    if slot >= 0:
        off = ((ix & 7) << 6) | ((iy & 7) << 3) | (iz & 7)
        w = weights[slot, off]
        val[0] = means[slot, off] * w
        return w > 0
    if slot == COLLAPSED:
        w = uw[bx, by, bz]
        val[0] = umean[bx, by, bz] * w
        return w > 0
    val[0] = 0.0
    return False


def trilinear(int[:, :, ::1] index, double[:, ::1] means, unsigned short[:, ::1] weights,
              double[:, :, ::1] umean, unsigned short[:, :, ::1] uw,
              double lo, double h, int n_vox, double[:, ::1] points,
              double[::1] out, unsigned char[::1] ok):
    cdef Py_ssize_t i, n = points.shape[0]
    cdef double ux, uy, uz, fx0, fy0, fz0, fx, fy, fz, gx, gy, gz
    cdef double v000, v001, v010, v011, v100, v101, v110, v111
    cdef double c00, c01, c10, c11, c0, c1
    cdef int ix, iy, iz
    cdef bint good
    with nogil:
        for i in range(n):
            ux = (points[i, 0] - lo) / h - 0.5
            uy = (points[i, 1] - lo) / h - 0.5
            uz = (points[i, 2] - lo) / h - 0.5
            out[i] = 0.0
            ok[i] = 0
            if not (isfinite(ux) and isfinite(uy) and isfinite(uz)):
                continue
            fx0 = floor(ux)
            fy0 = floor(uy)
            fz0 = floor(uz)
            if fx0 < 0 or fy0 < 0 or fz0 < 0 or fx0 + 1 >= n_vox or fy0 + 1 >= n_vox or fz0 + 1 >= n_vox:
                continue
            fx = ux - fx0
            fy = uy - fy0
            fz = uz - fz0
            ix = <int>fx0
            iy = <int>fy0
            iz = <int>fz0
            good = _read(index, means, weights, umean, uw, ix, iy, iz, &v000)
            good = _read(index, means, weights, umean, uw, ix, iy, iz + 1, &v001) and good
            good = _read(index, means, weights, umean, uw, ix, iy + 1, iz, &v010) and good
            good = _read(index, means, weights, umean, uw, ix, iy + 1, iz + 1, &v011) and good
            good = _read(index, means, weights, umean, uw, ix + 1, iy, iz, &v100) and good
            good = _read(index, means, weights, umean, uw, ix + 1, iy, iz + 1, &v101) and good
            good = _read(index, means, weights, umean, uw, ix + 1, iy + 1, iz, &v110) and good
            good = _read(index, means, weights, umean, uw, ix + 1, iy + 1, iz + 1, &v111) and good
            if not good:
                continue
            gx = 1.0 - fx
            gy = 1.0 - fy
            gz = 1.0 - fz
            c00 = v000 * gx + v100 * fx
            c01 = v001 * gx + v101 * fx
            c10 = v010 * gx + v110 * fx
            c11 = v011 * gx + v111 * fx
            c0 = c00 * gy + c10 * fy
            c1 = c01 * gy + c11 * fy
            out[i] = c0 * gz + c1 * fz
            ok[i] = 1


def block_summaries(double[:, ::1] means, unsigned short[:, ::1] weights, int w_max,
                    double[:, ::1] max1, double[:, ::1] obs1, unsigned char[:, ::1] pr1,
                    double[:, ::1] max2, double[:, ::1] obs2, unsigned char[:, ::1] pr2,
                    double[::1] blk_max, double[::1] blk_obs, unsigned char[::1] collapse):
    cdef Py_ssize_t b, k = means.shape[0]
    cdef int n2, n1, v, x, y, z, off, i1, i2, c1, c2, c3, sat1, sat2, all2
    cdef double mx, mx2, mxb, hi, lo, hi2, lo2, hib, lob, occ, mv
    cdef unsigned short wv
    with nogil:
        for b in range(k):
            c3 = 0
            mxb = -INFINITY
            hib = -INFINITY
            lob = INFINITY
            all2 = 1
            for n2 in range(8):
                c2 = 0
                mx2 = -INFINITY
                hi2 = -INFINITY
                lo2 = INFINITY
                sat2 = 1
                for n1 in range(8):
                    # level-1 node n1 inside level-2 node n2
                    i2 = n2
                    i1 = (((n2 >> 2) & 1) * 2 + ((n1 >> 2) & 1)) * 16 + \
                         (((n2 >> 1) & 1) * 2 + ((n1 >> 1) & 1)) * 4 + ((n2 & 1) * 2 + (n1 & 1))
                    c1 = 0
                    mx = -INFINITY
                    hi = -INFINITY
                    lo = INFINITY
                    sat1 = 1
                    for v in range(8):
                        x = ((i1 >> 4) & 3) * 2 + ((v >> 2) & 1)
                        y = ((i1 >> 2) & 3) * 2 + ((v >> 1) & 1)
                        z = (i1 & 3) * 2 + (v & 1)
                        off = x * 64 + y * 8 + z
                        wv = weights[b, off]
                        mv = means[b, off]
                        if wv > 0:
                            c1 += 1
                            occ = mv * wv
                            if occ > mx:
                                mx = occ
                        if wv != w_max:
                            sat1 = 0
                        if mv > hi:
                            hi = mv
                        if mv < lo:
                            lo = mv
                    max1[b, i1] = mx
                    obs1[b, i1] = c1 / 8.0
                    pr1[b, i1] = 1 if (sat1 and hi == lo) else 0
                    if not pr1[b, i1]:
                        sat2 = 0
                    c2 += c1
                    if mx > mx2:
                        mx2 = mx
                    if hi > hi2:
                        hi2 = hi
                    if lo < lo2:
                        lo2 = lo
                max2[b, i2] = mx2
                obs2[b, i2] = c2 / 64.0
                pr2[b, i2] = 1 if (sat2 and hi2 == lo2) else 0
                if not pr2[b, i2]:
                    all2 = 0
                c3 += c2
                if mx2 > mxb:
                    mxb = mx2
                if hi2 > hib:
                    hib = hi2
                if lo2 < lob:
                    lob = lo2
            blk_max[b] = mxb
            blk_obs[b] = c3 / 512.0
            collapse[b] = 1 if (all2 and hib == lob) else 0
