# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled versions of the hot per-pixel kernels.

Must stay bit-identical to `depthssl._kernels_py`: same floating-point
expressions in the same order, same tie-breaking.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport ceil, floor, INFINITY

cnp.import_array()

BACKEND = "cython"


def slic_iterate(
    cnp.ndarray[cnp.float64_t, ndim=2] depth_arr,
    cnp.ndarray[cnp.float64_t, ndim=1] seed_rows,
    cnp.ndarray[cnp.float64_t, ndim=1] seed_cols,
    cnp.ndarray[cnp.float64_t, ndim=1] seed_depth,
    double step,
    double compactness,
    int iterations,
):
    cdef Py_ssize_t h = depth_arr.shape[0]
    cdef Py_ssize_t w = depth_arr.shape[1]
    cdef Py_ssize_t k = seed_rows.shape[0]

    cdef cnp.ndarray[cnp.int32_t, ndim=2] labels_arr = np.full((h, w), -1, dtype=np.int32)
    cdef cnp.ndarray[cnp.float64_t, ndim=2] best_arr = np.empty((h, w), dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] crow_arr = seed_rows.astype(np.float64, copy=True)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] ccol_arr = seed_cols.astype(np.float64, copy=True)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] cdep_arr = seed_depth.astype(np.float64, copy=True)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] sum_d_arr = np.zeros(k, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] sum_r_arr = np.zeros(k, dtype=np.float64)
    cdef cnp.ndarray[cnp.float64_t, ndim=1] sum_c_arr = np.zeros(k, dtype=np.float64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] count_arr = np.zeros(k, dtype=np.int64)

    cdef double[:, ::1] depth = depth_arr
    cdef cnp.int32_t[:, ::1] labels = labels_arr
    cdef double[:, ::1] best = best_arr
    cdef double[::1] crow = crow_arr
    cdef double[::1] ccol = ccol_arr
    cdef double[::1] cdep = cdep_arr
    cdef double[::1] sum_d = sum_d_arr
    cdef double[::1] sum_r = sum_r_arr
    cdef double[::1] sum_c = sum_c_arr
    cdef cnp.int64_t[::1] count = count_arr

    cdef double inv_kappa = 1.0 / compactness
    cdef double inv_s2 = 1.0 / (step * step)
    cdef Py_ssize_t it, ki, r, c, r0, r1, c0, c1
    cdef double dd, dy, dx, dy2, dx2, d2, best_d2
    cdef cnp.int32_t lab

    for it in range(iterations):
        for r in range(h):
            for c in range(w):
                best[r, c] = INFINITY
        for ki in range(k):
            r0 = <Py_ssize_t>ceil(crow[ki] - step)
            if r0 < 0:
                r0 = 0
            r1 = <Py_ssize_t>floor(crow[ki] + step)
            if r1 > h - 1:
                r1 = h - 1
            c0 = <Py_ssize_t>ceil(ccol[ki] - step)
            if c0 < 0:
                c0 = 0
            c1 = <Py_ssize_t>floor(ccol[ki] + step)
            if c1 > w - 1:
                c1 = w - 1
            if r0 > r1 or c0 > c1:
                continue
            for r in range(r0, r1 + 1):
                dy = (<double>r) - crow[ki]
                dy2 = dy * dy
                for c in range(c0, c1 + 1):
                    dd = (depth[r, c] - cdep[ki]) * inv_kappa
                    dx = (<double>c) - ccol[ki]
                    dx2 = dx * dx
                    d2 = dd * dd + (dy2 + dx2) * inv_s2
                    if d2 < best[r, c]:
                        best[r, c] = d2
                        labels[r, c] = <cnp.int32_t>ki

        for r in range(h):
            for c in range(w):
                if labels[r, c] >= 0:
                    continue
                # pixel outside every window (rare, perturbed seeds near
                # edges): globally nearest center, lowest index on ties
                best_d2 = INFINITY
                lab = 0
                for ki in range(k):
                    dd = (depth[r, c] - cdep[ki]) * inv_kappa
                    dy = (<double>r) - crow[ki]
                    dx = (<double>c) - ccol[ki]
                    d2 = dd * dd + (dy * dy + dx * dx) * inv_s2
                    if d2 < best_d2:
                        best_d2 = d2
                        lab = <cnp.int32_t>ki
                labels[r, c] = lab

        for ki in range(k):
            sum_d[ki] = 0.0
            sum_r[ki] = 0.0
            sum_c[ki] = 0.0
            count[ki] = 0
        for r in range(h):
            for c in range(w):
                lab = labels[r, c]
                sum_d[lab] += depth[r, c]
                sum_r[lab] += <double>r
                sum_c[lab] += <double>c
                count[lab] += 1
        for ki in range(k):
            if count[ki] > 0:
                cdep[ki] = sum_d[ki] / (<double>count[ki])
                crow[ki] = sum_r[ki] / (<double>count[ki])
                ccol[ki] = sum_c[ki] / (<double>count[ki])

    return labels_arr


def hull_raster_count(
    cnp.ndarray[cnp.int64_t, ndim=1] rows_arr,
    cnp.ndarray[cnp.int64_t, ndim=1] cols_arr,
):
    """Pixel centers inside or on the convex hull of the given points.

    Inputs must be lexicographically sorted unique member coordinates;
    collinear/degenerate sets return the member count.  Integer-exact.
    """
    cdef Py_ssize_t n = rows_arr.shape[0]
    if n <= 2:
        return int(n)
    cdef cnp.int64_t[::1] pr = rows_arr
    cdef cnp.int64_t[::1] pc = cols_arr
    cdef cnp.ndarray[cnp.int64_t, ndim=1] hr_arr = np.empty(2 * n + 1, dtype=np.int64)
    cdef cnp.ndarray[cnp.int64_t, ndim=1] hc_arr = np.empty(2 * n + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] hr = hr_arr
    cdef cnp.int64_t[::1] hc = hc_arr
    cdef Py_ssize_t k = 0, i, lower_len
    cdef cnp.int64_t cross

    # monotone chain over the pre-sorted points; k tracks the stack top
    for i in range(n):
        while k >= 2:
            cross = (hr[k - 1] - hr[k - 2]) * (pc[i] - hc[k - 2]) - (hc[k - 1] - hc[k - 2]) * (pr[i] - hr[k - 2])
            if cross <= 0:
                k -= 1
            else:
                break
        hr[k] = pr[i]
        hc[k] = pc[i]
        k += 1
    lower_len = k
    for i in range(n - 2, -1, -1):
        while k >= lower_len + 1:
            cross = (hr[k - 1] - hr[k - 2]) * (pc[i] - hc[k - 2]) - (hc[k - 1] - hc[k - 2]) * (pr[i] - hr[k - 2])
            if cross <= 0:
                k -= 1
            else:
                break
        hr[k] = pr[i]
        hc[k] = pc[i]
        k += 1
    k -= 1  # last point repeats the first
    if k <= 2:
        return int(n)

    cdef cnp.int64_t rmin = hr[0], rmax = hr[0], cmin = hc[0], cmax = hc[0]
    for i in range(1, k):
        if hr[i] < rmin: rmin = hr[i]
        if hr[i] > rmax: rmax = hr[i]
        if hc[i] < cmin: cmin = hc[i]
        if hc[i] > cmax: cmax = hc[i]

    cdef cnp.int64_t count = 0, r, c, r0, c0, r1, c1
    cdef Py_ssize_t e
    cdef bint ok
    for r in range(rmin, rmax + 1):
        for c in range(cmin, cmax + 1):
            ok = True
            for e in range(k):
                r0 = hr[e]; c0 = hc[e]
                r1 = hr[(e + 1) % k]; c1 = hc[(e + 1) % k]
                if (r1 - r0) * (c - c0) - (c1 - c0) * (r - r0) < 0:
                    ok = False
                    break
            if ok:
                count += 1
    return int(count)


def fill_nearest(
    cnp.ndarray[cnp.float64_t, ndim=2] depth_arr,
    cnp.ndarray[cnp.uint8_t, ndim=2] valid_arr,
):
    cdef Py_ssize_t h = depth_arr.shape[0]
    cdef Py_ssize_t w = depth_arr.shape[1]
    cdef cnp.ndarray[cnp.float64_t, ndim=2] out_arr = depth_arr.copy()

    cdef double[:, ::1] depth = depth_arr
    cdef cnp.uint8_t[:, ::1] valid = valid_arr
    cdef double[:, ::1] out = out_arr

    cdef Py_ssize_t r, c, ring, rr, cc, r0, r1, c0, c1
    cdef cnp.int64_t best_d2, d2, dr, dc
    cdef Py_ssize_t best_r, best_c
    cdef bint any_valid = False

    for r in range(h):
        for c in range(w):
            if valid[r, c]:
                any_valid = True
                break
        if any_valid:
            break
    if not any_valid:
        raise ValueError("cannot fill a frame with no valid pixels")

    cdef Py_ssize_t max_ring = h + w
    for r in range(h):
        for c in range(w):
            if valid[r, c]:
                continue
            best_d2 = -1
            best_r = -1
            best_c = -1
            # Expanding Chebyshev rings; a ring at radius g only holds
            # pixels with squared distance >= g*g, so stop once g*g
            # exceeds the best.  Lexicographic (d2, row, col) tie-break.
            for ring in range(1, max_ring + 1):
                if best_d2 >= 0 and (<cnp.int64_t>ring) * (<cnp.int64_t>ring) > best_d2:
                    break
                r0 = r - ring
                r1 = r + ring
                c0 = c - ring
                c1 = c + ring
                for rr in range(max(r0, 0), min(r1, h - 1) + 1):
                    if rr == r0 or rr == r1:
                        for cc in range(max(c0, 0), min(c1, w - 1) + 1):
                            if valid[rr, cc]:
                                dr = rr - r
                                dc = cc - c
                                d2 = dr * dr + dc * dc
                                if (
                                    best_d2 < 0
                                    or d2 < best_d2
                                    or (d2 == best_d2 and (rr < best_r or (rr == best_r and cc < best_c)))
                                ):
                                    best_d2 = d2
                                    best_r = rr
                                    best_c = cc
                    else:
                        for cc in (c0, c1):
                            if 0 <= cc < w and valid[rr, cc]:
                                dr = rr - r
                                dc = cc - c
                                d2 = dr * dr + dc * dc
                                if (
                                    best_d2 < 0
                                    or d2 < best_d2
                                    or (d2 == best_d2 and (rr < best_r or (rr == best_r and cc < best_c)))
                                ):
                                    best_d2 = d2
                                    best_r = rr
                                    best_c = cc
            out[r, c] = depth[best_r, best_c]

    return out_arr
