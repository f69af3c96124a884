"""Pure NumPy implementations of the hot per-pixel kernels.

`depthssl.superpix` prefers the compiled `depthssl._kernels` extension and
falls back to this module.  Both backends must produce bit-identical
output: every floating-point expression here is written in the exact
evaluation order of the C code, and tie-breaking is integer-exact.
"""

from __future__ import annotations

import math

import numpy as np

BACKEND = "python"


def slic_iterate(
    depth: np.ndarray,
    seed_rows: np.ndarray,
    seed_cols: np.ndarray,
    seed_depth: np.ndarray,
    step: float,
    compactness: float,
    iterations: int,
) -> np.ndarray:
    """Run the SLIC assign/update loop and return the raw label image.

    Pixels within the 2S x 2S window of a center are assigned to the
    center minimizing ``(dd/kappa)^2 + (dy^2 + dx^2)/S^2``; ties keep the
    lowest center index.  Centers then move to the mean (depth, row, col)
    of their members; centers that lose all members stay put.
    """
    h, w = depth.shape
    k = seed_rows.shape[0]
    crow = seed_rows.astype(np.float64).copy()
    ccol = seed_cols.astype(np.float64).copy()
    cdep = seed_depth.astype(np.float64).copy()
    labels = np.full((h, w), -1, dtype=np.int32)
    best = np.empty((h, w), dtype=np.float64)
    inv_kappa = 1.0 / compactness
    inv_s2 = 1.0 / (step * step)
    row_coord = np.arange(h, dtype=np.float64)
    col_coord = np.arange(w, dtype=np.float64)

    for _ in range(iterations):
        best.fill(np.inf)
        for ki in range(k):
            r0 = max(0, int(math.ceil(crow[ki] - step)))
            r1 = min(h - 1, int(math.floor(crow[ki] + step)))
            c0 = max(0, int(math.ceil(ccol[ki] - step)))
            c1 = min(w - 1, int(math.floor(ccol[ki] + step)))
            if r0 > r1 or c0 > c1:
                continue
            win = depth[r0 : r1 + 1, c0 : c1 + 1]
            dd = (win - cdep[ki]) * inv_kappa
            dy = row_coord[r0 : r1 + 1] - crow[ki]
            dx = col_coord[c0 : c1 + 1] - ccol[ki]
            dy2 = dy * dy
            dx2 = dx * dx
            d2 = dd * dd + (dy2[:, None] + dx2[None, :]) * inv_s2
            bw = best[r0 : r1 + 1, c0 : c1 + 1]
            lw = labels[r0 : r1 + 1, c0 : c1 + 1]
            upd = d2 < bw
            bw[upd] = d2[upd]
            lw[upd] = ki

        flat = labels.ravel()
        if flat.min() < 0:
            # pixels outside every window (rare, perturbed seeds near edges):
            # assign to the globally nearest center, lowest index on ties
            ur, uc = np.nonzero(labels < 0)
            dd = (depth[ur, uc][:, None] - cdep[None, :]) * inv_kappa
            dy = ur.astype(np.float64)[:, None] - crow[None, :]
            dx = uc.astype(np.float64)[:, None] - ccol[None, :]
            d2 = dd * dd + (dy * dy + dx * dx) * inv_s2
            labels[ur, uc] = np.argmin(d2, axis=1).astype(np.int32)
            flat = labels.ravel()
        count = np.bincount(flat, minlength=k).astype(np.float64)
        sum_d = np.bincount(flat, weights=depth.ravel(), minlength=k)
        sum_r = np.bincount(flat, weights=np.broadcast_to(row_coord[:, None], (h, w)).ravel(), minlength=k)
        sum_c = np.bincount(flat, weights=np.broadcast_to(col_coord[None, :], (h, w)).ravel(), minlength=k)
        nz = count > 0
        cdep[nz] = sum_d[nz] / count[nz]
        crow[nz] = sum_r[nz] / count[nz]
        ccol[nz] = sum_c[nz] / count[nz]

    return labels


def hull_raster_count(rows: np.ndarray, cols: np.ndarray) -> int:
    """Pixel centers inside or on the convex hull of the given points.

    ``rows``/``cols`` must be the lexicographically sorted unique member
    coordinates.  Collinear or degenerate point sets return the member
    count (solidity 1 by convention).  All arithmetic is integer-exact.
    """
    n = rows.shape[0]
    if n <= 2:
        return int(n)
    pts = list(zip(rows.tolist(), cols.tolist()))

    def cross(o, a, b):
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[tuple[int, int]] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    upper: list[tuple[int, int]] = []
    for p in reversed(pts):
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    hull = lower[:-1] + upper[:-1]
    if len(hull) <= 2:
        return int(n)
    hr = np.array([p[0] for p in hull], dtype=np.int64)
    hc = np.array([p[1] for p in hull], dtype=np.int64)
    rr = np.arange(hr.min(), hr.max() + 1, dtype=np.int64)[:, None]
    cc = np.arange(hc.min(), hc.max() + 1, dtype=np.int64)[None, :]
    inside = np.ones((rr.shape[0], cc.shape[1]), dtype=bool)
    m = len(hull)
    for i in range(m):
        r0, c0 = hull[i]
        r1, c1 = hull[(i + 1) % m]
        inside &= (r1 - r0) * (cc - c0) - (c1 - c0) * (rr - r0) >= 0
    return int(inside.sum())


def fill_nearest(depth: np.ndarray, valid: np.ndarray) -> np.ndarray:
    """Give every invalid pixel the depth of its nearest valid pixel.

    Distance is Euclidean in pixel units; ties go to the valid pixel with
    the smaller row, then smaller column.  All-integer arithmetic, so the
    result is exact.
    """
    h, w = depth.shape
    vr, vc = np.nonzero(valid)  # row-major, so argmin tie-break = (row, col) order
    if vr.size == 0:
        raise ValueError("cannot fill a frame with no valid pixels")
    out = depth.copy()
    ir, ic = np.nonzero(~valid)
    if ir.size == 0:
        return out
    vr64 = vr.astype(np.int64)
    vc64 = vc.astype(np.int64)
    vals = depth[vr, vc]
    chunk = max(1, int(2**22 // max(1, vr.size)))
    for s in range(0, ir.size, chunk):
        rr = ir[s : s + chunk].astype(np.int64)
        cc = ic[s : s + chunk].astype(np.int64)
        dr = rr[:, None] - vr64[None, :]
        dc = cc[:, None] - vc64[None, :]
        d2 = dr * dr + dc * dc
        nearest = np.argmin(d2, axis=1)
        out[rr, cc] = vals[nearest]
    return out
