"""Depth frame, intrinsics and manifest I/O.

Storage conventions:
  - depth: 16-bit single-channel PNG, millimeters by default
    (``unit_scale=0.001`` meters per stored unit); stored value 0 means
    "invalid pixel".
  - intrinsics: one JSON sidecar per camera, fields fx, fy, cx, cy,
    width, height.  For manifest entries the sidecar is looked up at
    ``<manifest_dir>/intrinsics/view<view_id>.json``.
  - label masks: 8-bit single-channel PNG of class ids, 255 = ignore.
  - manifests: CSV with header ``frame_id,depth_path,view_id,label_path,
    activity``; empty cells mean absent.  Paths are relative to the
    manifest's directory.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

MAX_DEPTH_M = 100.0  # indoor scenes; anything this far is a unit mistake
IGNORE_LABEL = 255


class DatasetError(Exception):
    """Malformed file or inconsistent dataset contents."""


class ManifestError(DatasetError):
    """Manifest parse/validation failure; message carries the line number."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got fx={self.fx} fy={self.fy}")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside sensor {self.width}x{self.height}"
            )


@dataclass
class DepthFrame:
    """One depth image in meters with validity mask and provenance.

    ``depth`` and ``valid`` are H x W with H = intrinsics.height and
    W = intrinsics.width; invalid pixels always carry depth 0.
    """

    depth: np.ndarray
    valid: np.ndarray
    intrinsics: Intrinsics
    frame_id: str
    view_id: int = 0
    labels: np.ndarray | None = None
    activity: int | None = None

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float64)
        self.valid = np.asarray(self.valid, dtype=bool)
        h, w = self.intrinsics.height, self.intrinsics.width
        if self.depth.shape != (h, w) or self.valid.shape != (h, w):
            raise ValueError(
                f"frame {self.frame_id!r}: arrays {self.depth.shape}/{self.valid.shape} "
                f"do not match intrinsics {h}x{w}"
            )
        if self.depth[~self.valid].any():
            raise ValueError(f"frame {self.frame_id!r}: invalid pixels must have depth 0")
        dv = self.depth[self.valid]
        if dv.size and (not np.isfinite(dv).all() or (dv < 0).any() or (dv >= MAX_DEPTH_M).any()):
            raise ValueError(
                f"frame {self.frame_id!r}: valid depths must be finite, >= 0 and < {MAX_DEPTH_M} m"
            )
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.uint8)
            if self.labels.shape != (h, w):
                raise ValueError(f"frame {self.frame_id!r}: label mask shape mismatch")


@dataclass(frozen=True)
class ManifestEntry:
    frame_id: str
    depth_path: str
    view_id: int
    label_path: str | None = None
    activity: int | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    split_tag: str = "train"
    root: Path = field(default_factory=Path)

    def __len__(self) -> int:
        return len(self.entries)

    def frame_ids(self) -> list[str]:
        return [e.frame_id for e in self.entries]


def _read_png(path: Path) -> tuple[np.ndarray, Image.Image]:
    if not path.is_file():
        raise DatasetError(f"missing file: {path}")
    img = Image.open(path)
    img.load()
    return np.asarray(img), img


def load_depth_frame(
    path: str | Path,
    intrinsics: Intrinsics,
    unit_scale: float = 0.001,
    frame_id: str | None = None,
    view_id: int = 0,
    labels: np.ndarray | None = None,
    activity: int | None = None,
) -> DepthFrame:
    """Load one 16-bit depth PNG; stored value 0 marks an invalid pixel."""
    path = Path(path)
    arr, img = _read_png(path)
    if img.mode not in ("I;16", "I;16B", "I"):
        raise DatasetError(f"{path}: expected 16-bit single-channel image, got mode {img.mode!r}")
    if arr.ndim != 2:
        raise DatasetError(f"{path}: expected single channel, got shape {arr.shape}")
    if arr.shape != (intrinsics.height, intrinsics.width):
        raise DatasetError(
            f"{path}: image is {arr.shape[1]}x{arr.shape[0]}, "
            f"intrinsics say {intrinsics.width}x{intrinsics.height}"
        )
    stored = arr.astype(np.uint32)
    if stored.max(initial=0) > 0xFFFF:
        raise DatasetError(f"{path}: pixel values exceed 16 bits")
    depth = stored.astype(np.float64) * unit_scale
    valid = stored > 0
    if depth.max(initial=0.0) >= MAX_DEPTH_M:
        raise DatasetError(f"{path}: depth >= {MAX_DEPTH_M} m, corrupt file or wrong unit_scale")
    return DepthFrame(
        depth=depth,
        valid=valid,
        intrinsics=intrinsics,
        frame_id=frame_id if frame_id is not None else path.stem,
        view_id=view_id,
        labels=labels,
        activity=activity,
    )


def write_depth_frame(path: str | Path, frame: DepthFrame, unit_scale: float = 0.001) -> None:
    """Write a 16-bit depth PNG; valid pixels must quantize to a nonzero value."""
    path = Path(path)
    stored = np.rint(frame.depth / unit_scale)
    if (stored[frame.valid] < 1).any():
        raise DatasetError(
            f"frame {frame.frame_id!r}: valid depth below {unit_scale / 2} m cannot be encoded"
        )
    if (stored > 0xFFFF).any():
        raise DatasetError(f"frame {frame.frame_id!r}: depth exceeds 16-bit range at {unit_scale} m/unit")
    stored = stored.astype("<u2")
    stored[~frame.valid] = 0
    img = Image.new("I;16", (stored.shape[1], stored.shape[0]))
    img.frombytes(stored.tobytes())
    path.parent.mkdir(parents=True, exist_ok=True)
    img.save(path)


def load_label_mask(path: str | Path, width: int, height: int) -> np.ndarray:
    """Load an 8-bit class-id mask (255 = ignore)."""
    path = Path(path)
    arr, img = _read_png(path)
    if img.mode != "L" or arr.ndim != 2:
        raise DatasetError(f"{path}: expected 8-bit single-channel label mask, got mode {img.mode!r}")
    if arr.shape != (height, width):
        raise DatasetError(f"{path}: label mask is {arr.shape[1]}x{arr.shape[0]}, expected {width}x{height}")
    return arr.astype(np.uint8)


def write_label_mask(path: str | Path, labels: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(labels, dtype=np.uint8), mode="L").save(path)


def load_intrinsics(path: str | Path) -> Intrinsics:
    path = Path(path)
    if not path.is_file():
        raise DatasetError(f"missing intrinsics file: {path}")
    with open(path, "rb") as f:
        raw = json.load(f)
    try:
        return Intrinsics(
            fx=float(raw["fx"]),
            fy=float(raw["fy"]),
            cx=float(raw["cx"]),
            cy=float(raw["cy"]),
            width=int(raw["width"]),
            height=int(raw["height"]),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{path}: bad intrinsics JSON ({exc})") from exc


def write_intrinsics(path: str | Path, intr: Intrinsics) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "fx": intr.fx,
        "fy": intr.fy,
        "cx": intr.cx,
        "cy": intr.cy,
        "width": intr.width,
        "height": intr.height,
    }
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


MANIFEST_HEADER = ["frame_id", "depth_path", "view_id", "label_path", "activity"]


def load_manifest(path: str | Path, split_tag: str | None = None) -> DatasetManifest:
    """Load a CSV manifest; rejects duplicate frame ids and dangling label paths."""
    path = Path(path)
    if not path.is_file():
        raise ManifestError(f"missing manifest: {path}")
    root = path.parent
    entries: list[ManifestEntry] = []
    seen: dict[str, int] = {}
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestError(f"{path}:1: empty manifest, expected header") from None
        if [h.strip() for h in header] != MANIFEST_HEADER:
            raise ManifestError(f"{path}:1: bad header {header!r}, expected {MANIFEST_HEADER!r}")
        for lineno, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise ManifestError(f"{path}:{lineno}: expected {len(MANIFEST_HEADER)} cells, got {len(row)}")
            frame_id, depth_path, view_id, label_path, activity = (c.strip() for c in row)
            if not frame_id or not depth_path:
                raise ManifestError(f"{path}:{lineno}: frame_id and depth_path are required")
            if frame_id in seen:
                raise ManifestError(
                    f"{path}:{lineno}: duplicate frame_id {frame_id!r} (first seen on line {seen[frame_id]})"
                )
            seen[frame_id] = lineno
            try:
                view = int(view_id) if view_id else 0
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: view_id {view_id!r} is not an integer") from None
            if label_path and not (root / label_path).is_file():
                raise ManifestError(f"{path}:{lineno}: label path {label_path!r} does not exist")
            try:
                act = int(activity) if activity else None
            except ValueError:
                raise ManifestError(f"{path}:{lineno}: activity {activity!r} is not an integer") from None
            entries.append(ManifestEntry(frame_id, depth_path, view, label_path or None, act))
    if split_tag is None:
        stem = path.stem.lower()
        split_tag = next((t for t in ("train", "val", "test") if stem.endswith(t)), "train")
    return DatasetManifest(entries=entries, split_tag=split_tag, root=root)


def write_manifest(path: str | Path, manifest: DatasetManifest) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            writer.writerow(
                [
                    e.frame_id,
                    e.depth_path,
                    e.view_id,
                    e.label_path or "",
                    "" if e.activity is None else e.activity,
                ]
            )


def intrinsics_path_for_view(manifest_root: str | Path, view_id: int) -> Path:
    return Path(manifest_root) / "intrinsics" / f"view{view_id}.json"


def load_frame(manifest: DatasetManifest, index: int, unit_scale: float = 0.001) -> DepthFrame:
    """Load one manifest entry, resolving its intrinsics sidecar and label mask."""
    entry = manifest.entries[index]
    intr = load_intrinsics(intrinsics_path_for_view(manifest.root, entry.view_id))
    labels = None
    if entry.label_path is not None:
        labels = load_label_mask(manifest.root / entry.label_path, intr.width, intr.height)
    return load_depth_frame(
        manifest.root / entry.depth_path,
        intr,
        unit_scale=unit_scale,
        frame_id=entry.frame_id,
        view_id=entry.view_id,
        labels=labels,
        activity=entry.activity,
    )
