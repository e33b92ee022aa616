"""Pure-Python implementations of the hot kernels.

These define the reference semantics; ``_kernels.pyx`` mirrors them line by
line so both backends produce the same floating-point results. Ray
integration is written as explicit loops (it is inherently sequential); the
interpolation kernel is vectorised with numpy.

Storage layout shared with the compiled kernels:

* ``index``  int32 ``(nb, nb, nb)``: block slot, ``-1`` unallocated,
  ``-2`` collapsed (uniform block held in ``umean``/``uw``).
* ``means``  float64 ``(capacity, 512)`` and ``weights`` uint16
  ``(capacity, 512)``; voxel offset inside a block is ``x*64 + y*8 + z``.
* ``dirty``  uint8 ``(nb, nb, nb)`` set for every block written.
* ``sp``     float64 ``[l_min, sigma_scale, sigma_min, sigma_max,
  tau_scale, tau_min, tau_max, footprint]``.
* ``counts`` int64 ``[integrated, clipped, rejected, voxel_updates]``.
"""

import math

import numpy as np

UNALLOCATED = -1
COLLAPSED = -2
MAX_CELL_LEVEL = 3


def integrate_rays(index, means, weights, umean, uw, dirty, n_used,
                   origins, endpoints, start, lo, h, n_vox, sp, w_max, counts):
    """Integrate rays ``start..`` until done or the block pool runs short.

    Returns ``(next_ray, n_used)``; ``next_ray < len(origins)`` means the
    caller must grow ``means``/``weights`` and call again from ``next_ray``.
    """
    l_min, s_scale, s_min, s_max, t_scale, t_min, t_max, footprint = (float(v) for v in sp)
    capacity = means.shape[0]
    hi = lo + n_vox * h
    n_rays = origins.shape[0]
    orig = origins.tolist()
    ends = endpoints.tolist()
    inf = math.inf
    for r in range(start, n_rays):
        ox, oy, oz = orig[r]
        ex, ey, ez = ends[r]
        dx = ex - ox
        dy = ey - oy
        dz = ez - oz
        z = math.sqrt(dx * dx + dy * dy + dz * dz)
        if not (z > 1e-9) or not math.isfinite(z) or not (
                math.isfinite(ox) and math.isfinite(oy) and math.isfinite(oz)):
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

        # clip [0, z + tau/2] to the map cube
        t_in = 0.0
        t_out = z + half_tau
        empty = False
        for o, u in ((ox, ux), (oy, uy), (oz, uz)):
            if u > 1e-15 or u < -1e-15:
                ta = (lo - o) / u
                tb = (hi - o) / u
                if ta > tb:
                    ta, tb = tb, ta
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

        need = 3 * (int((t_out - t_in) / cs) + 2) + 1
        if capacity - n_used < need:
            return r, n_used

        px = ox + ux * t_in
        py = oy + uy * t_in
        pz = oz + uz * t_in
        cx = min(max(int(math.floor((px - lo) / cs)), 0), nc - 1)
        cy = min(max(int(math.floor((py - lo) / cs)), 0), nc - 1)
        cz = min(max(int(math.floor((pz - lo) / cs)), 0), nc - 1)

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
            tmx = inf
            tdx = inf
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
            tmy = inf
            tdy = inf
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
            tmz = inf
            tdz = inf

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
                        slot = int(index[bx, by, bz])
                        if slot < 0:
                            new = n_used
                            n_used += 1
                            if slot == COLLAPSED:
                                means[new, :] = umean[bx, by, bz]
                                weights[new, :] = uw[bx, by, bz]
                            else:
                                means[new, :] = 0.0
                                weights[new, :] = 0
                            index[bx, by, bz] = new
                            slot = new
                        dirty[bx, by, bz] = 1
                        off = ((ix & 7) << 6) | ((iy & 7) << 3) | (iz & 7)
                        w = int(weights[slot, off])
                        means[slot, off] = (float(means[slot, off]) * w + l) / (w + 1)
                        weights[slot, off] = w + 1 if w < w_max else w_max
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
    return n_rays, n_used


def _read(index, means, weights, umean, uw, ix, iy, iz):
    bx, by, bz = ix >> 3, iy >> 3, iz >> 3
    slot = index[bx, by, bz]
    off = ((ix & 7) << 6) | ((iy & 7) << 3) | (iz & 7)
    safe = np.maximum(slot, 0)
    m = np.where(slot >= 0, means[safe, off], np.where(slot == COLLAPSED, umean[bx, by, bz], 0.0))
    w = np.where(slot >= 0, weights[safe, off], np.where(slot == COLLAPSED, uw[bx, by, bz], 0))
    return m, w


def trilinear(index, means, weights, umean, uw, lo, h, n_vox, points, out, ok):
    """Trilinear interpolation of accumulated log-odds ``mean * weight``.

    ``ok[i]`` is 0 when the point is outside the interpolation domain or any
    of its 8 corner voxels is unobserved; ``out[i]`` is then 0.
    """
    p = np.asarray(points, dtype=float)
    ux = (p[:, 0] - lo) / h - 0.5
    uy = (p[:, 1] - lo) / h - 0.5
    uz = (p[:, 2] - lo) / h - 0.5
    fx0 = np.floor(ux)
    fy0 = np.floor(uy)
    fz0 = np.floor(uz)
    fx = ux - fx0
    fy = uy - fy0
    fz = uz - fz0
    inside = ((fx0 >= 0) & (fy0 >= 0) & (fz0 >= 0)
              & (fx0 + 1 < n_vox) & (fy0 + 1 < n_vox) & (fz0 + 1 < n_vox))
    inside &= np.isfinite(ux) & np.isfinite(uy) & np.isfinite(uz)
    ix = np.where(inside, fx0, 0).astype(np.int64)
    iy = np.where(inside, fy0, 0).astype(np.int64)
    iz = np.where(inside, fz0, 0).astype(np.int64)
    good = inside.copy()
    v = {}
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                m, w = _read(index, means, weights, umean, uw, ix + a, iy + b, iz + c)
                good &= w > 0
                v[a, b, c] = m * w
    gx = 1.0 - fx
    gy = 1.0 - fy
    gz = 1.0 - fz
    c00 = v[0, 0, 0] * gx + v[1, 0, 0] * fx
    c01 = v[0, 0, 1] * gx + v[1, 0, 1] * fx
    c10 = v[0, 1, 0] * gx + v[1, 1, 0] * fx
    c11 = v[0, 1, 1] * gx + v[1, 1, 1] * fx
    c0 = c00 * gy + c10 * fy
    c1 = c01 * gy + c11 * fy
    res = c0 * gz + c1 * fz
    out[:] = np.where(good, res, 0.0)
    ok[:] = good


def block_summaries(means, weights, w_max, max1, obs1, pr1, max2, obs2, pr2, blk_max, blk_obs, collapse):
    """Node summaries for ``k`` blocks of 8^3 voxels.

    Level 1 nodes (2^3 voxels, 64 per block), level 2 nodes (4^3 voxels, 8 per
    block) and the block itself store the maximum accumulated log-odds of
    observed voxels (``-inf`` if none) and the observed fraction. ``pr*`` flag
    nodes whose voxels are all saturated with identical means; ``collapse``
    flags blocks where that holds for all 512 voxels.
    """
    k = means.shape[0]
    m = means.reshape(k, 8, 8, 8)
    w = weights.reshape(k, 8, 8, 8)
    observed = w > 0
    occ = np.where(observed, m * w, -np.inf)
    sat = w == w_max

    def down(a, op):
        n = a.shape[1] // 2
        return op(a.reshape(k, n, 2, n, 2, n, 2), axis=(2, 4, 6))

    cnt1 = down(observed.astype(np.int64), np.sum)
    mx1 = down(occ, np.max)
    hi1 = down(m, np.max)
    lo1 = down(m, np.min)
    p1 = down(sat, np.all) & (hi1 == lo1)
    cnt2 = down(cnt1, np.sum)
    mx2 = down(mx1, np.max)
    hi2 = down(hi1, np.max)
    lo2 = down(lo1, np.min)
    p2 = down(p1, np.all) & (hi2 == lo2)
    max1[:] = mx1.reshape(k, 64)
    obs1[:] = cnt1.reshape(k, 64) / 8.0
    pr1[:] = p1.reshape(k, 64)
    max2[:] = mx2.reshape(k, 8)
    obs2[:] = cnt2.reshape(k, 8) / 64.0
    pr2[:] = p2.reshape(k, 8)
    blk_max[:] = mx2.reshape(k, 8).max(axis=1)
    blk_obs[:] = cnt2.reshape(k, 8).sum(axis=1) / 512.0
    collapse[:] = p2.reshape(k, 8).all(axis=1) & (hi2.reshape(k, 8).max(axis=1) == lo2.reshape(k, 8).min(axis=1))
