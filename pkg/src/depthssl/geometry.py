"""Superpixels to filtered 3D clusters to pairwise distance labels.

Pixel convention: ``u`` is the column index, ``v`` the row index.
Back-projection uses the z-depth pinhole model: a pixel (u, v) with depth
z maps to ((u-cx)*z/fx, (v-cy)*z/fy, z) in the camera frame.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass

import numpy as np

from ._backend import kernels as _kern
from .depthio import DepthFrame, Intrinsics
from .superpix import SuperpixelMap


@dataclass(frozen=True)
class Point3:
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


@dataclass(frozen=True)
class FilterThresholds:
    min_solidity: float = 0.75
    max_depth_std: float = 0.2  # meters
    max_missing_frac: float = 0.05

    def __post_init__(self):
        if not (0 <= self.min_solidity <= 1 and 0 <= self.max_missing_frac <= 1):
            raise ValueError("solidity and missing-fraction thresholds must lie in [0, 1]")
        if self.max_depth_std <= 0:
            raise ValueError("max_depth_std must be positive")


@dataclass
class ClusterRecord:
    id: int
    pixel_count: int
    centroid: Point3
    depth_std: float
    solidity: float
    missing_frac: float
    bbox_norm: tuple[float, float, float, float]  # (u0, v0, u1, v1) in [0, 1]


@dataclass(frozen=True)
class PairLabel:
    frame_id: str
    id_a: int
    id_b: int
    distance: float  # meters between cluster centroids


def backproject(u: float, v: float, z: float, intr: Intrinsics) -> Point3:
    """Pixel (u, v) with z-depth z (meters) to a camera-frame 3D point."""
    if z <= 0:
        raise ValueError(f"depth must be positive, got {z}")
    return Point3((u - intr.cx) * z / intr.fx, (v - intr.cy) * z / intr.fy, z)


def project(p: Point3, intr: Intrinsics) -> tuple[float, float]:
    """Camera-frame point back to pixel coordinates (u, v)."""
    if p.z <= 0:
        raise ValueError(f"point depth must be positive, got {p.z}")
    return (p.x * intr.fx / p.z + intr.cx, p.y * intr.fy / p.z + intr.cy)


def backproject_pixels(us: np.ndarray, vs: np.ndarray, zs: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Vectorized back-projection; returns an (N, 3) float64 array."""
    us = np.asarray(us, dtype=np.float64)
    vs = np.asarray(vs, dtype=np.float64)
    zs = np.asarray(zs, dtype=np.float64)
    return np.stack(
        [(us - intr.cx) * zs / intr.fx, (vs - intr.cy) * zs / intr.fy, zs], axis=-1
    )


def solidity(pixels: np.ndarray) -> float:
    """Pixel count divided by the pixel count of the rasterized convex hull.

    ``pixels`` is an (N, 2) integer array of (row, col) coordinates.  The
    hull raster contains every pixel center inside or on the convex hull
    (monotone chain) of the member centers; collinear or singleton masks
    score 1.0.
    """
    pixels = np.asarray(pixels, dtype=np.int64)
    if pixels.size == 0:
        raise ValueError("solidity of an empty mask is undefined")
    if (pixels < 0).any():
        raise ValueError("pixel coordinates must be non-negative")
    rows = pixels[:, 0]
    cols = pixels[:, 1]
    # lexicographically sorted unique points, encoded to keep the sort integer
    shift = int(cols.max()) + 1
    keys = np.unique(rows * shift + cols)
    urows = keys // shift
    ucols = keys - urows * shift
    count = _kern.hull_raster_count(np.ascontiguousarray(urows), np.ascontiguousarray(ucols))
    return keys.size / count


def _stats_from_pixels(frame: DepthFrame, cluster_id: int, rows: np.ndarray, cols: np.ndarray) -> ClusterRecord:
    pixel_count = rows.size
    valid = frame.valid[rows, cols]
    n_valid = int(valid.sum())
    if n_valid == 0:
        centroid = Point3(0.0, 0.0, 0.0)
        depth_std = 0.0
        missing = 1.0
    else:
        zs = frame.depth[rows[valid], cols[valid]]
        pts = backproject_pixels(cols[valid], rows[valid], zs, frame.intrinsics)
        mean = pts.mean(axis=0)
        centroid = Point3(float(mean[0]), float(mean[1]), float(mean[2]))
        depth_std = float(zs.std())
        missing = (pixel_count - n_valid) / pixel_count
    w, h = frame.intrinsics.width, frame.intrinsics.height
    bbox = (
        float(cols.min() / w),
        float(rows.min() / h),
        float((cols.max() + 1) / w),
        float((rows.max() + 1) / h),
    )
    return ClusterRecord(
        id=int(cluster_id),
        pixel_count=int(pixel_count),
        centroid=centroid,
        depth_std=depth_std,
        solidity=solidity(np.stack([rows, cols], axis=1)),
        missing_frac=float(missing),
        bbox_norm=bbox,
    )


def cluster_stats(frame: DepthFrame, spmap: SuperpixelMap, cluster_id: int) -> ClusterRecord:
    """Centroid, depth spread, solidity, missing fraction and normalized
    bbox for one superpixel.

    The centroid and depth std use valid member pixels only; a cluster with
    no valid pixel gets missing_frac 1.0 and a zero centroid, which the
    missing-fraction filter always rejects.
    """
    member = spmap.labels == cluster_id
    if not member.any():
        raise KeyError(f"cluster id {cluster_id} not present in superpixel map")
    rows, cols = np.nonzero(member)
    return _stats_from_pixels(frame, cluster_id, rows, cols)


def all_cluster_stats(frame: DepthFrame, spmap: SuperpixelMap) -> list[ClusterRecord]:
    """Records for every cluster id, grouping member pixels in one pass."""
    labels = spmap.labels
    h, w = labels.shape
    order = np.argsort(labels.ravel(), kind="stable")
    counts = np.bincount(labels.ravel(), minlength=spmap.n)
    bounds = np.concatenate([[0], np.cumsum(counts)])
    records = []
    for cid in range(spmap.n):
        idx = order[bounds[cid] : bounds[cid + 1]]
        if idx.size == 0:
            raise KeyError(f"cluster id {cid} not present in superpixel map")
        records.append(_stats_from_pixels(frame, cid, idx // w, idx % w))
    return records


def filter_clusters(records: list[ClusterRecord], th: FilterThresholds) -> list[ClusterRecord]:
    """Keep homogeneous clusters: solidity strictly over, spread and missing
    fraction strictly under their thresholds.  Order preserved."""
    return [
        r
        for r in records
        if r.solidity > th.min_solidity
        and r.depth_std < th.max_depth_std
        and r.missing_frac < th.max_missing_frac
    ]


def sample_pairs(
    valid: list[ClusterRecord],
    max_pairs: int,
    seed: int,
    frame_id: str = "",
) -> list[PairLabel]:
    """Uniform sample of distinct cluster pairs with centroid distances.

    Draws ``min(max_pairs, C(n, 2))`` unordered pairs without replacement
    from the seeded generator; output is ordered by (id_a, id_b).  Fewer
    than two clusters yield an empty list.
    """
    n = len(valid)
    if n < 2:
        return []
    ia, ib = np.triu_indices(n, k=1)
    total = ia.size
    if max_pairs < total:
        rng = np.random.default_rng(seed)
        chosen = np.sort(rng.choice(total, size=max_pairs, replace=False))
        ia, ib = ia[chosen], ib[chosen]
    out = []
    for i, j in zip(ia.tolist(), ib.tolist()):
        a, b = valid[i], valid[j]
        id_a, id_b = (a.id, b.id) if a.id < b.id else (b.id, a.id)
        dist = float(np.linalg.norm(a.centroid.as_array() - b.centroid.as_array()))
        out.append(PairLabel(frame_id=frame_id, id_a=id_a, id_b=id_b, distance=dist))
    return out


def frame_pair_seed(base_seed: int, frame_id: str) -> int:
    """Stable per-frame pair-sampling seed derived from the run seed."""
    ss = np.random.SeedSequence([base_seed, zlib.crc32(frame_id.encode("utf-8"))])
    return int(ss.generate_state(1, np.uint64)[0])
