"""Manifest-level orchestration: superpixels -> clusters -> pair labels.

Each frame is processed independently (fill, smooth, SLIC, cluster stats,
filtering, pair sampling), so the stage parallelizes over frames; results
are always emitted in manifest order regardless of worker count, and all
per-frame randomness is derived from (run seed, frame_id), which makes the
output identical for any ``workers`` setting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from multiprocessing import get_context
from pathlib import Path

import numpy as np

from . import depthio, geometry, superpix
from .depthio import DatasetManifest
from .geometry import ClusterRecord, FilterThresholds, PairLabel
from .superpix import SlicParams


@dataclass
class FramePairs:
    frame_id: str
    pairs: list[PairLabel]
    bboxes: dict[int, tuple[float, float, float, float]]  # cluster id -> bbox_norm
    n_clusters: int
    n_kept: int


def compute_frame_pairs(
    frame: depthio.DepthFrame,
    slic_params: SlicParams,
    thresholds: FilterThresholds,
    max_pairs: int,
    seed: int,
) -> tuple[FramePairs, list[ClusterRecord], superpix.SuperpixelMap]:
    """The per-frame labeling chain; ``seed`` should come from
    `geometry.frame_pair_seed` so it is stable per (run, frame)."""
    spmap = superpix.segment_frame(frame, slic_params)
    records = geometry.all_cluster_stats(frame, spmap)
    kept = geometry.filter_clusters(records, thresholds)
    pairs = geometry.sample_pairs(kept, max_pairs, seed, frame_id=frame.frame_id)
    bboxes = {r.id: r.bbox_norm for r in kept}
    fp = FramePairs(
        frame_id=frame.frame_id,
        pairs=pairs,
        bboxes=bboxes,
        n_clusters=len(records),
        n_kept=len(kept),
    )
    return fp, kept, spmap


def _dump_superpixels(dump_dir: Path, frame_id: str, spmap: superpix.SuperpixelMap) -> None:
    from PIL import Image

    dump_dir.mkdir(parents=True, exist_ok=True)
    labels = spmap.labels.astype("<u2")
    img = Image.new("I;16", (labels.shape[1], labels.shape[0]))
    img.frombytes(labels.tobytes())
    img.save(dump_dir / f"{frame_id}_labels.png")
    overlay = np.where(superpix.boundary_mask(spmap.labels), 255, 0).astype(np.uint8)
    Image.fromarray(overlay, mode="L").save(dump_dir / f"{frame_id}_boundaries.png")


def _worker(args) -> FramePairs:
    (root, entry, slic_params, thresholds, max_pairs, base_seed, unit_scale, dump_dir) = args
    manifest = DatasetManifest(entries=[entry], split_tag="train", root=Path(root))
    frame = depthio.load_frame(manifest, 0, unit_scale=unit_scale)
    seed = geometry.frame_pair_seed(base_seed, entry.frame_id)
    fp, _, spmap = compute_frame_pairs(frame, slic_params, thresholds, max_pairs, seed)
    if dump_dir is not None:
        _dump_superpixels(Path(dump_dir), entry.frame_id, spmap)
    return fp


def label_pairs_for_manifest(
    manifest: DatasetManifest,
    slic_params: SlicParams,
    thresholds: FilterThresholds,
    max_pairs: int,
    seed: int,
    workers: int = 1,
    unit_scale: float = 0.001,
    dump_dir: str | Path | None = None,
) -> list[FramePairs]:
    """Pair labels for every frame of a manifest, in manifest order."""
    args = [
        (str(manifest.root), e, slic_params, thresholds, max_pairs, seed, unit_scale, dump_dir)
        for e in manifest.entries
    ]
    if workers <= 1:
        return [_worker(a) for a in args]
    ctx = get_context("spawn")
    with ctx.Pool(processes=workers) as pool:
        return pool.map(_worker, args)


def write_pairs_jsonl(path: str | Path, frame_pairs: list[FramePairs]) -> int:
    """One JSON object per pair: frame_id, id_a, id_b, distance, bbox_a,
    bbox_b.  Returns the number of pairs written."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with open(path, "w") as f:
        for fp in frame_pairs:
            for pair in fp.pairs:
                record = {
                    "frame_id": pair.frame_id,
                    "id_a": pair.id_a,
                    "id_b": pair.id_b,
                    "distance": pair.distance,
                    "bbox_a": list(fp.bboxes[pair.id_a]),
                    "bbox_b": list(fp.bboxes[pair.id_b]),
                }
                f.write(json.dumps(record, sort_keys=True) + "\n")
                n += 1
    return n


def read_pairs_jsonl(path: str | Path) -> dict[str, list[dict]]:
    """Pairs grouped by frame_id, preserving file order."""
    out: dict[str, list[dict]] = {}
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise depthio.DatasetError(f"{path}:{lineno}: bad JSON ({exc})") from exc
            out.setdefault(rec["frame_id"], []).append(rec)
    return out


def ensure_pairs_cached(
    manifest: DatasetManifest,
    cache_path: str | Path,
    slic_params: SlicParams,
    thresholds: FilterThresholds,
    max_pairs: int,
    seed: int,
    workers: int = 1,
    unit_scale: float = 0.001,
) -> dict[str, list[dict]]:
    """Load cached pair labels, computing and writing them on first use."""
    cache_path = Path(cache_path)
    if not cache_path.is_file():
        fps = label_pairs_for_manifest(
            manifest, slic_params, thresholds, max_pairs, seed, workers=workers, unit_scale=unit_scale
        )
        write_pairs_jsonl(cache_path, fps)
    return read_pairs_jsonl(cache_path)
