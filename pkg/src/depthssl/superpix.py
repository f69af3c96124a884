"""SLIC superpixel over-segmentation of smoothed depth maps.

The per-pixel distance is ``(ddepth/kappa)^2 + (dpixel/S)^2`` with depth in
meters and S the seeding grid step, so the default compactness 3 weighs a
3 m depth difference like one grid step of image distance.

The assign/update loop and the nearest-valid fill run in a compiled
extension when available (``depthssl._kernels``); otherwise a bit-identical
NumPy fallback is used.  Set ``DEPTHSSL_PURE=1`` to force the fallback.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import sparse
from scipy.ndimage import correlate1d
from scipy.sparse.csgraph import connected_components

from ._backend import kernel_backend, kernels as _kern
from .depthio import DepthFrame

__all__ = [
    "SlicParams",
    "SuperpixelMap",
    "kernel_backend",
    "gaussian_smooth",
    "fill_invalid",
    "slic",
    "enforce_connectivity",
    "segment_frame",
    "boundary_mask",
]


@dataclass(frozen=True)
class SlicParams:
    n_segments: int = 500
    compactness: float = 3.0
    sigma: float = 3.0
    iterations: int = 10
    min_region_factor: float = 0.25

    def __post_init__(self):
        if self.n_segments < 1:
            raise ValueError("n_segments must be >= 1")
        if self.compactness <= 0:
            raise ValueError("compactness must be > 0")
        if self.sigma < 0:
            raise ValueError("sigma must be >= 0")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")


@dataclass
class SuperpixelMap:
    labels: np.ndarray  # int32 H x W, ids 0..n-1
    n: int

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape


def gaussian_smooth(depth: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur, kernel radius ceil(3*sigma), replicated edges."""
    depth = np.asarray(depth, dtype=np.float64)
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    if sigma == 0:
        return depth.copy()
    radius = int(math.ceil(3.0 * sigma))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    kernel = np.exp(-(x * x) / (2.0 * sigma * sigma))
    kernel /= kernel.sum()
    out = correlate1d(depth, kernel, axis=0, mode="nearest")
    return correlate1d(out, kernel, axis=1, mode="nearest")


def fill_invalid(frame: DepthFrame) -> np.ndarray:
    """Replace invalid depths with the nearest valid depth (ties: smaller
    row, then smaller column).  Errors on an all-invalid frame."""
    return _kern.fill_nearest(
        np.ascontiguousarray(frame.depth, dtype=np.float64),
        np.ascontiguousarray(frame.valid.astype(np.uint8)),
    )


def _seed_grid(h: int, w: int, step: float) -> tuple[np.ndarray, np.ndarray]:
    # enough seeds that every pixel is within `step` of one per axis, which
    # makes the first 2S x 2S assignment pass total
    ny = max(1, math.ceil((h + 0.5) / step - 0.5))
    nx = max(1, math.ceil((w + 0.5) / step - 0.5))
    rows = np.floor((np.arange(ny) + 0.5) * step - 0.5).astype(np.int64)
    cols = np.floor((np.arange(nx) + 0.5) * step - 0.5).astype(np.int64)
    rows = np.clip(rows, 0, h - 1)
    cols = np.clip(cols, 0, w - 1)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return rr.ravel(), cc.ravel()


def _gradient_image(depth: np.ndarray) -> np.ndarray:
    # sum of |depth difference| to existing 4-neighbors
    g = np.zeros_like(depth)
    d = np.abs(depth[:, 1:] - depth[:, :-1])
    g[:, 1:] += d
    g[:, :-1] += d
    d = np.abs(depth[1:, :] - depth[:-1, :])
    g[1:, :] += d
    g[:-1, :] += d
    return g


def _perturb_seeds(depth: np.ndarray, rows: np.ndarray, cols: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Move each seed to the lowest-gradient pixel of its 3x3 neighborhood.

    If the seed pixel itself attains the minimum it stays; otherwise the
    first minimum in row-major neighborhood order wins.
    """
    h, w = depth.shape
    grad = _gradient_image(depth)
    out_r = rows.copy()
    out_c = cols.copy()
    for i in range(rows.size):
        r, c = rows[i], cols[i]
        r0, r1 = max(0, r - 1), min(h - 1, r + 1)
        c0, c1 = max(0, c - 1), min(w - 1, c + 1)
        window = grad[r0 : r1 + 1, c0 : c1 + 1]
        gmin = window.min()
        if grad[r, c] == gmin:
            continue
        dr, dc = np.nonzero(window == gmin)
        out_r[i] = r0 + dr[0]
        out_c[i] = c0 + dc[0]
    return out_r, out_c


def slic(smoothed: np.ndarray, params: SlicParams) -> SuperpixelMap:
    """Canonical SLIC on a smoothed depth image.

    Seeds sit on a regular grid with step S = sqrt(H*W/K), nudged to the
    lowest-gradient pixel in their 3x3 neighborhood; after the iterations
    connectivity is enforced with min size ``min_region_factor * S^2``.
    """
    depth = np.ascontiguousarray(smoothed, dtype=np.float64)
    h, w = depth.shape
    k = params.n_segments
    if k > h * w:
        raise ValueError(f"n_segments={k} exceeds pixel count {h * w}")
    step = math.sqrt(h * w / k)
    rows, cols = _seed_grid(h, w, step)
    rows, cols = _perturb_seeds(depth, rows, cols)
    seed_depth = depth[rows, cols]
    labels = _kern.slic_iterate(
        depth,
        rows.astype(np.float64),
        cols.astype(np.float64),
        seed_depth.astype(np.float64),
        step,
        params.compactness,
        params.iterations,
    )
    return enforce_connectivity(labels, params.min_region_factor * step * step)


def _components(labels: np.ndarray) -> tuple[int, np.ndarray]:
    """4-connected components of a label image, numbered by first
    row-major occurrence."""
    h, w = labels.shape
    n_pix = h * w
    idx = np.arange(n_pix, dtype=np.int64).reshape(h, w)
    hsame = labels[:, :-1] == labels[:, 1:]
    vsame = labels[:-1, :] == labels[1:, :]
    a = np.concatenate([idx[:, :-1][hsame], idx[:-1, :][vsame]])
    b = np.concatenate([idx[:, 1:][hsame], idx[1:, :][vsame]])
    graph = sparse.coo_matrix(
        (np.ones(a.size, dtype=bool), (a, b)), shape=(n_pix, n_pix)
    )
    n_comp, comp = connected_components(graph, directed=False)
    first = np.full(n_comp, n_pix, dtype=np.int64)
    np.minimum.at(first, comp, np.arange(n_pix, dtype=np.int64))
    remap = np.empty(n_comp, dtype=np.int64)
    remap[np.argsort(first, kind="stable")] = np.arange(n_comp)
    return n_comp, remap[comp].reshape(h, w)


def enforce_connectivity(labels: np.ndarray, min_size: float) -> SuperpixelMap:
    """Split disconnected labels, absorb small components, compact ids.

    Components smaller than ``min_size`` pixels merge into the neighboring
    component sharing the longest boundary (boundary = count of 4-adjacent
    pixel pairs); ties go to the smaller component id.  Components with no
    neighbor (single-component image) are kept.  Final ids are compacted
    to 0..n-1 in order of first row-major occurrence.
    """
    labels = np.asarray(labels)
    h, w = labels.shape
    n_comp, comp = _components(labels)

    sizes = np.bincount(comp.ravel(), minlength=n_comp).astype(np.int64)

    # boundary pair counts between distinct adjacent components
    hdiff = comp[:, :-1] != comp[:, 1:]
    vdiff = comp[:-1, :] != comp[1:, :]
    pa = np.concatenate([comp[:, :-1][hdiff], comp[:-1, :][vdiff]]).astype(np.int64)
    pb = np.concatenate([comp[:, 1:][hdiff], comp[1:, :][vdiff]]).astype(np.int64)
    lo = np.minimum(pa, pb)
    hi = np.maximum(pa, pb)
    keys, counts = np.unique(lo * n_comp + hi, return_counts=True)

    orig_nbr: list[dict[int, int]] = [dict() for _ in range(n_comp)]
    for key, cnt in zip(keys.tolist(), counts.tolist()):
        ca, cb = divmod(key, n_comp)
        orig_nbr[ca][cb] = cnt
        orig_nbr[cb][ca] = cnt

    parent = np.arange(n_comp, dtype=np.int64)

    def find(x: int) -> int:
        root = x
        while parent[root] != root:
            root = parent[root]
        while parent[x] != root:
            parent[x], x = root, parent[x]
        return root

    members: list[list[int]] = [[c] for c in range(n_comp)]
    for c in range(n_comp):
        root = find(c)
        if sizes[root] >= min_size:
            continue
        # aggregate boundary length to each neighboring merged component
        acc: dict[int, int] = {}
        for m in members[root]:
            for nbr, cnt in orig_nbr[m].items():
                rn = find(nbr)
                if rn != root:
                    acc[rn] = acc.get(rn, 0) + cnt
        if not acc:
            continue
        best_cnt = -1
        best_nbr = -1
        for rn in sorted(acc):  # ascending id, so ties keep the smallest
            if acc[rn] > best_cnt:
                best_cnt = acc[rn]
                best_nbr = rn
        parent[root] = best_nbr
        sizes[best_nbr] += sizes[root]
        members[best_nbr].extend(members[root])
        members[root] = []

    roots = np.array([find(c) for c in range(n_comp)], dtype=np.int64)
    resolved = roots[comp]
    # compact by first row-major occurrence
    flat = resolved.ravel()
    first = np.full(n_comp, h * w, dtype=np.int64)
    np.minimum.at(first, flat, np.arange(h * w, dtype=np.int64))
    present = np.nonzero(first < h * w)[0]
    order = present[np.argsort(first[present], kind="stable")]
    remap = np.zeros(n_comp, dtype=np.int64)
    remap[order] = np.arange(order.size)
    return SuperpixelMap(labels=remap[flat].reshape(h, w).astype(np.int32), n=int(order.size))


def segment_frame(frame: DepthFrame, params: SlicParams) -> SuperpixelMap:
    """fill invalid -> Gaussian smooth -> SLIC, the full per-frame chain."""
    filled = fill_invalid(frame)
    smoothed = gaussian_smooth(filled, params.sigma)
    return slic(smoothed, params)


def boundary_mask(labels: np.ndarray) -> np.ndarray:
    """True at pixels bordering a different segment (for debug overlays)."""
    edge = np.zeros(labels.shape, dtype=bool)
    edge[:, 1:] |= labels[:, 1:] != labels[:, :-1]
    edge[1:, :] |= labels[1:, :] != labels[:-1, :]
    return edge
