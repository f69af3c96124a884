"""Synthetic ToF-like depth scenes with ground-truth masks.

World frame is z-up; the room is the axis-aligned box
[0, rx] x [0, ry] x [0, rz].  Each scene is built from one of five
activity templates (fixed object kinds, seeded pose/size jitter) out of
three primitive types: axis-aligned boxes, spheres and vertical capped
cylinders.

Rendering casts one pinhole ray per pixel with the camera-frame direction
((u-cx)/fx, (v-cy)/fy, 1); because the camera-z component is 1, the ray
parameter of the nearest analytic hit *is* the stored z-depth.  Gaussian
noise is added first, then a seeded fraction of pixels is dropped.

Segmentation classes: 0 floor, 1 wall/ceiling, 2 table, 3 cart,
4 robot column, 5 human, 6 light, 7 misc.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import depthio
from .depthio import DatasetManifest, DepthFrame, Intrinsics, ManifestEntry

CLASS_FLOOR = 0
CLASS_WALL = 1
CLASS_TABLE = 2
CLASS_CART = 3
CLASS_ROBOT = 4
CLASS_HUMAN = 5
CLASS_LIGHT = 6
CLASS_MISC = 7
NUM_SEG_CLASSES = 8
NUM_TEMPLATES = 5

_EPS = 1e-9
_MIN_DEPTH = 1e-3  # meters; keeps valid pixels encodable in 16-bit mm


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # full extents
    class_id: int


@dataclass(frozen=True)
class Sphere:
    center: tuple[float, float, float]
    radius: float
    class_id: int


@dataclass(frozen=True)
class VCylinder:
    cx: float
    cy: float
    z0: float
    z1: float
    radius: float
    class_id: int


Primitive = Box | Sphere | VCylinder


@dataclass
class Scene:
    room: tuple[float, float, float]  # (rx, ry, rz)
    objects: list[Primitive]
    template_id: int


@dataclass
class CameraPose:
    position: np.ndarray  # (3,) world
    rotation: np.ndarray  # (3, 3) camera-to-world, columns = cam x,y,z axes
    intrinsics: Intrinsics

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64)
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-9:
            raise ValueError(f"rotation is not orthonormal (err {err:.2e})")


@dataclass
class RenderResult:
    frame: DepthFrame
    object_ids: np.ndarray  # int32 H x W; >=0 object index, -1 floor, -2 wall/ceiling


def _aabb(obj: Primitive) -> tuple[np.ndarray, np.ndarray]:
    if isinstance(obj, Box):
        c = np.array(obj.center)
        h = np.array(obj.size) / 2
        return c - h, c + h
    if isinstance(obj, Sphere):
        c = np.array(obj.center)
        return c - obj.radius, c + obj.radius
    lo = np.array([obj.cx - obj.radius, obj.cy - obj.radius, obj.z0])
    hi = np.array([obj.cx + obj.radius, obj.cy + obj.radius, obj.z1])
    return lo, hi


def object_inside_room(obj: Primitive, room: tuple[float, float, float]) -> bool:
    lo, hi = _aabb(obj)
    return bool((lo >= 0).all() and (hi <= np.array(room)).all())


def _clamped(value: float, half: float, limit: float, margin: float = 0.1) -> float:
    lo, hi = margin + half, limit - margin - half
    return float(np.clip(value, lo, min(hi, limit)))


def _table(rng: np.random.Generator, room) -> list[Primitive]:
    rx, ry, _ = room
    tx = _clamped(rx / 2 + rng.uniform(-0.4, 0.4), 1.1, rx)
    ty = _clamped(ry / 2 + rng.uniform(-0.4, 0.4), 0.5, ry)
    top_h = rng.uniform(0.82, 0.95)
    top = Box((tx, ty, top_h), (2.0, 0.75, 0.08), CLASS_TABLE)
    base = Box((tx, ty, top_h / 2 - 0.04), (0.45, 0.3, top_h - 0.08), CLASS_TABLE)
    return [top, base]


def _cart(rng: np.random.Generator, room, corner: int) -> Primitive:
    rx, ry, _ = room
    # corners 0..3, pulled slightly off the walls
    cx = 0.85 if corner in (0, 3) else rx - 0.85
    cy = 0.85 if corner in (0, 1) else ry - 0.85
    cx += rng.uniform(-0.2, 0.2)
    cy += rng.uniform(-0.2, 0.2)
    h = rng.uniform(0.9, 1.25)
    return Box(
        (_clamped(cx, 0.33, rx), _clamped(cy, 0.28, ry), h / 2),
        (0.65, 0.55, h),
        CLASS_CART,
    )


def _robot_column(rng: np.random.Generator, room, near: tuple[float, float]) -> Primitive:
    rx, ry, _ = room
    r = rng.uniform(0.14, 0.18)
    x = _clamped(near[0] + rng.uniform(-0.25, 0.25) + 1.35, r, rx)
    y = _clamped(near[1] + rng.uniform(-0.25, 0.25), r, ry)
    return VCylinder(x, y, 0.0, rng.uniform(1.7, 2.0), r, CLASS_ROBOT)


def _human(rng: np.random.Generator, room, near: tuple[float, float], side: float) -> list[Primitive]:
    rx, ry, _ = room
    r = rng.uniform(0.16, 0.2)
    x = _clamped(near[0] + rng.uniform(-0.35, 0.35), r, rx)
    y = _clamped(near[1] + side * rng.uniform(0.75, 1.05), r, ry)
    height = rng.uniform(1.5, 1.75)
    torso = VCylinder(x, y, 0.0, height, r, CLASS_HUMAN)
    head = Sphere((x, y, height + 0.1), 0.11, CLASS_HUMAN)
    return [torso, head]


def _light(rng: np.random.Generator, room, above: tuple[float, float] | None = None) -> Primitive:
    # pendant surgical light head, hung low enough to sit in the camera FOV
    rx, ry, _ = room
    ax, ay = above if above is not None else (rx / 2, ry / 2)
    x = _clamped(ax + rng.uniform(-0.4, 0.4), 0.3, rx)
    y = _clamped(ay + rng.uniform(-0.4, 0.4), 0.3, ry)
    return Box((x, y, rng.uniform(1.95, 2.2)), (0.55, 0.55, 0.16), CLASS_LIGHT)


def _misc_on(rng: np.random.Generator, room, support: Box) -> Primitive:
    sx, sy, sz = support.center
    top = sz + support.size[2] / 2
    x = sx + rng.uniform(-0.5, 0.5)
    y = sy + rng.uniform(-0.15, 0.15)
    return Box((x, y, top + 0.11), (0.35, 0.3, 0.22), CLASS_MISC)


def _misc_sphere(rng: np.random.Generator, room) -> Primitive:
    rx, ry, _ = room
    r = rng.uniform(0.14, 0.2)
    x = _clamped(rx / 2 + rng.uniform(-1.2, 1.2), r, rx)
    y = _clamped(ry / 2 + rng.uniform(-1.4, -0.8), r, ry)
    return Sphere((x, y, r), r, CLASS_MISC)


def generate_scene(template_id: int, seed: int) -> Scene:
    """Deterministic scene: the template fixes object kinds and rough
    layout, the seed jitters poses and sizes within template bounds."""
    if not 0 <= template_id < NUM_TEMPLATES:
        raise ValueError(f"unknown template {template_id}, have {NUM_TEMPLATES}")
    rng = np.random.default_rng(np.random.SeedSequence([template_id, seed]))
    room = (
        float(rng.uniform(5.6, 6.8)),
        float(rng.uniform(5.6, 6.8)),
        float(rng.uniform(2.75, 3.05)),
    )
    objects: list[Primitive] = []
    if template_id == 0:  # prep: table, one cart, light
        table = _table(rng, room)
        objects += table
        objects.append(_cart(rng, room, int(rng.integers(0, 4))))
        objects.append(_light(rng, room, above=(table[0].center[0], table[0].center[1])))
    elif template_id == 1:  # docking: table, robot column, cart, one human
        table = _table(rng, room)
        objects += table
        tc = table[0].center
        objects.append(_robot_column(rng, room, (tc[0], tc[1])))
        objects.append(_cart(rng, room, int(rng.integers(0, 4))))
        objects += _human(rng, room, (tc[0], tc[1]), side=-1.0)
    elif template_id == 2:  # surgery: table, robot, two humans, light, misc on table
        table = _table(rng, room)
        objects += table
        tc = table[0].center
        objects.append(_robot_column(rng, room, (tc[0], tc[1])))
        objects += _human(rng, room, (tc[0], tc[1]), side=-1.0)
        objects += _human(rng, room, (tc[0], tc[1]), side=1.0)
        objects.append(_light(rng, room, above=(tc[0], tc[1])))
        objects.append(_misc_on(rng, room, table[0]))
    elif template_id == 3:  # cleanup: two carts, one human, misc sphere
        objects.append(_cart(rng, room, 0))
        objects.append(_cart(rng, room, 2))
        cx, cy = room[0] / 2, room[1] / 2
        objects += _human(rng, room, (cx, cy), side=rng.choice([-1.0, 1.0]))
        objects.append(_misc_sphere(rng, room))
    else:  # idle: table, light, misc on table
        table = _table(rng, room)
        objects += table
        objects.append(_light(rng, room, above=(table[0].center[0], table[0].center[1])))
        objects.append(_misc_on(rng, room, table[0]))
    for obj in objects:
        if not object_inside_room(obj, room):
            raise RuntimeError(f"template {template_id} produced an object outside the room: {obj}")
    return Scene(room=room, objects=objects, template_id=template_id)


def default_intrinsics(size: int = 320) -> Intrinsics:
    f = 0.9 * size
    c = (size - 1) / 2
    return Intrinsics(fx=f, fy=f, cx=c, cy=c, width=size, height=size)


def look_at(position, target, intr: Intrinsics) -> CameraPose:
    """Camera pose with z toward ``target`` and y pointing downward."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    forward = forward / np.linalg.norm(forward)
    up = np.array([0.0, 0.0, 1.0])
    x_cam = np.cross(forward, up)
    norm = np.linalg.norm(x_cam)
    if norm < 1e-9:
        raise ValueError("camera looking straight up/down is unsupported")
    x_cam /= norm
    y_cam = np.cross(forward, x_cam)
    return CameraPose(position=position, rotation=np.stack([x_cam, y_cam, forward], axis=1), intrinsics=intr)


def camera_poses(scene: Scene, n_views: int, seed: int, intr: Intrinsics) -> list[CameraPose]:
    """Cart-style camera rig: views come in pairs a few degrees apart on a
    circle around the room center, looking at it; carts (view pairs) are
    spread around the circle and the whole rig gets a random base azimuth
    per scene."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, scene.template_id, 7]))
    rx, ry, _ = scene.room
    center = np.array([rx / 2, ry / 2, 0.0])
    radius = 0.36 * min(rx, ry)
    base = rng.uniform(0, 2 * np.pi)
    n_carts = (n_views + 1) // 2
    poses = []
    for v in range(n_views):
        cart, slot = divmod(v, 2)
        if slot == 0:
            cart_ang = base + 2 * np.pi * cart / n_carts + rng.uniform(-0.15, 0.15)
            cart_h = rng.uniform(1.8, 2.1)
            target = center + np.array(
                [rng.uniform(-0.2, 0.2), rng.uniform(-0.2, 0.2), rng.uniform(1.0, 1.2)]
            )
            ang = cart_ang
        else:
            # second camera on the same cart, ~20-35 cm away on the circle
            ang = cart_ang + rng.uniform(0.05, 0.09)
        pos = center + np.array([radius * np.cos(ang), radius * np.sin(ang), cart_h + rng.uniform(-0.05, 0.05)])
        poses.append(look_at(pos, target, intr))
    return poses


def _ray_box(origin, dirs, lo, hi):
    """Slab intersection; entry parameter, exit if inside, inf for miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lo = (lo[None, None, :] - origin[None, None, :]) / dirs
        t_hi = (hi[None, None, :] - origin[None, None, :]) / dirs
    near = np.minimum(t_lo, t_hi)
    far = np.maximum(t_lo, t_hi)
    # degenerate axes: ray parallel to slab
    parallel = np.abs(dirs) < _EPS
    inside_slab = (origin[None, None, :] >= lo[None, None, :]) & (origin[None, None, :] <= hi[None, None, :])
    near = np.where(parallel, np.where(inside_slab, -np.inf, np.inf), near)
    far = np.where(parallel, np.where(inside_slab, np.inf, -np.inf), far)
    t_near = near.max(axis=2)
    t_far = far.min(axis=2)
    hit = t_near <= t_far
    t = np.where(hit & (t_near > _EPS), t_near, np.where(hit & (t_far > _EPS), t_far, np.inf))
    return t


def _ray_sphere(origin, dirs, center, radius):
    oc = origin[None, None, :] - np.asarray(center)[None, None, :]
    a = (dirs * dirs).sum(axis=2)
    b = 2.0 * (dirs * oc).sum(axis=2)
    c = (oc * oc).sum() - radius * radius
    disc = b * b - 4 * a * c
    ok = disc >= 0
    sq = np.sqrt(np.where(ok, disc, 0.0))
    t1 = (-b - sq) / (2 * a)
    t2 = (-b + sq) / (2 * a)
    t = np.where(ok & (t1 > _EPS), t1, np.where(ok & (t2 > _EPS), t2, np.inf))
    return t


def _ray_vcylinder(origin, dirs, cyl: VCylinder):
    ox, oy, oz = origin
    dx = dirs[:, :, 0]
    dy = dirs[:, :, 1]
    dz = dirs[:, :, 2]
    fx = ox - cyl.cx
    fy = oy - cyl.cy
    a = dx * dx + dy * dy
    b = 2.0 * (fx * dx + fy * dy)
    c = fx * fx + fy * fy - cyl.radius * cyl.radius
    disc = b * b - 4 * a * c
    ok = (disc >= 0) & (a > _EPS)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_lat1 = np.where(ok, (-b - sq) / (2 * a), np.inf)
        t_lat2 = np.where(ok, (-b + sq) / (2 * a), np.inf)
    best = np.full(dx.shape, np.inf)
    for t_lat in (t_lat1, t_lat2):
        z = oz + t_lat * dz
        good = ok & (t_lat > _EPS) & (z >= cyl.z0) & (z <= cyl.z1)
        best = np.where(good & (t_lat < best), t_lat, best)
    for z_cap in (cyl.z0, cyl.z1):
        with np.errstate(divide="ignore", invalid="ignore"):
            t_cap = np.where(np.abs(dz) > _EPS, (z_cap - oz) / dz, np.inf)
        px = ox + t_cap * dx - cyl.cx
        py = oy + t_cap * dy - cyl.cy
        good = (t_cap > _EPS) & (px * px + py * py <= cyl.radius * cyl.radius)
        best = np.where(good & (t_cap < best), t_cap, best)
    return best


def _room_exit(origin, dirs, room):
    """Exit parameter and face class for rays cast from inside the room."""
    hi = np.asarray(room, dtype=np.float64)
    t_best = np.full(dirs.shape[:2], np.inf)
    face_class = np.full(dirs.shape[:2], CLASS_WALL, dtype=np.uint8)
    face_obj = np.full(dirs.shape[:2], -2, dtype=np.int32)
    for axis in range(3):
        d = dirs[:, :, axis]
        o = origin[axis]
        with np.errstate(divide="ignore", invalid="ignore"):
            t_pos = np.where(d > _EPS, (hi[axis] - o) / d, np.inf)
            t_neg = np.where(d < -_EPS, (0.0 - o) / d, np.inf)
        for t_face, is_floor in ((t_pos, False), (t_neg, axis == 2)):
            better = t_face < t_best
            t_best = np.where(better, t_face, t_best)
            if is_floor:
                face_class = np.where(better, np.uint8(CLASS_FLOOR), face_class)
                face_obj = np.where(better, np.int32(-1), face_obj)
            else:
                face_class = np.where(better, np.uint8(CLASS_WALL), face_class)
                face_obj = np.where(better, np.int32(-2), face_obj)
    return t_best, face_class, face_obj


def render_depth(
    scene: Scene,
    cam: CameraPose,
    noise_std: float = 0.01,
    dropout_frac: float = 0.02,
    seed: int = 0,
    frame_id: str = "frame",
    view_id: int = 0,
) -> RenderResult:
    """Cast one ray per pixel, keep the nearest analytic hit, then apply
    Gaussian depth noise and seeded pixel dropout."""
    intr = cam.intrinsics
    rx, ry, rz = scene.room
    p = cam.position
    if not (0 < p[0] < rx and 0 < p[1] < ry and 0 < p[2] < rz):
        raise ValueError(f"camera position {p} is outside the room {scene.room}")
    us = (np.arange(intr.width, dtype=np.float64) - intr.cx) / intr.fx
    vs = (np.arange(intr.height, dtype=np.float64) - intr.cy) / intr.fy
    dirs_cam = np.empty((intr.height, intr.width, 3), dtype=np.float64)
    dirs_cam[:, :, 0] = us[None, :]
    dirs_cam[:, :, 1] = vs[:, None]
    dirs_cam[:, :, 2] = 1.0
    dirs = dirs_cam @ cam.rotation.T  # camera-z component is 1, so t == z-depth

    depth, classes, obj_ids = _room_exit(p, dirs, scene.room)
    for idx, obj in enumerate(scene.objects):
        if isinstance(obj, Box):
            lo, hi = _aabb(obj)
            t = _ray_box(p, dirs, lo, hi)
        elif isinstance(obj, Sphere):
            t = _ray_sphere(p, dirs, obj.center, obj.radius)
        else:
            t = _ray_vcylinder(p, dirs, obj)
        closer = t < depth
        depth = np.where(closer, t, depth)
        classes = np.where(closer, np.uint8(obj.class_id), classes)
        obj_ids = np.where(closer, np.int32(idx), obj_ids)

    if not np.isfinite(depth).all():
        raise RuntimeError("ray escaped the closed room; renderer bug")

    rng = np.random.default_rng(np.random.SeedSequence([seed, zlib.crc32(frame_id.encode("utf-8"))]))
    if noise_std > 0:
        depth = depth + rng.normal(0.0, noise_std, size=depth.shape)
    depth = np.maximum(depth, _MIN_DEPTH)
    valid = np.ones(depth.shape, dtype=bool)
    if dropout_frac > 0:
        valid &= rng.random(depth.shape) >= dropout_frac
    depth = np.where(valid, depth, 0.0)
    frame = DepthFrame(
        depth=depth,
        valid=valid,
        intrinsics=intr,
        frame_id=frame_id,
        view_id=view_id,
        labels=classes,
        activity=scene.template_id,
    )
    return RenderResult(frame=frame, object_ids=obj_ids)


def surface_distance(scene: Scene, points_world: np.ndarray) -> np.ndarray:
    """Distance from each (N, 3) world point to the nearest scene surface."""
    pts = np.asarray(points_world, dtype=np.float64)
    room = np.asarray(scene.room)
    d_room = np.minimum(pts, room[None, :] - pts).min(axis=1)
    best = np.abs(d_room)
    for obj in scene.objects:
        if isinstance(obj, Box):
            c = np.asarray(obj.center)
            half = np.asarray(obj.size) / 2
            q = np.abs(pts - c[None, :]) - half[None, :]
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
            inside = np.minimum(q.max(axis=1), 0.0)
            d = np.abs(outside + inside)
        elif isinstance(obj, Sphere):
            d = np.abs(np.linalg.norm(pts - np.asarray(obj.center)[None, :], axis=1) - obj.radius)
        else:
            dxy = np.hypot(pts[:, 0] - obj.cx, pts[:, 1] - obj.cy) - obj.radius
            zm, hh = (obj.z0 + obj.z1) / 2, (obj.z1 - obj.z0) / 2
            dz = np.abs(pts[:, 2] - zm) - hh
            qq = np.stack([dxy, dz], axis=1)
            outside = np.linalg.norm(np.maximum(qq, 0.0), axis=1)
            inside = np.minimum(qq.max(axis=1), 0.0)
            d = np.abs(outside + inside)
        best = np.minimum(best, d)
    return best


def camera_to_world(cam: CameraPose, pts_cam: np.ndarray) -> np.ndarray:
    return pts_cam @ cam.rotation.T + cam.position[None, :]


@dataclass
class BuildResult:
    manifests: dict[str, Path]  # split -> manifest path
    all_manifest: Path
    out_dir: Path


def build_dataset(
    n_scenes: int,
    views_per_scene: int,
    out_dir: str | Path,
    seed: int,
    n_templates: int = NUM_TEMPLATES,
    size: int = 320,
    noise_std: float = 0.01,
    dropout_frac: float = 0.02,
    unit_scale: float = 0.001,
) -> BuildResult:
    """Render a dataset to disk: depth + label PNGs, intrinsics sidecars and
    train/val/test manifests split at scene level (roughly 70/15/15)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    intr = default_intrinsics(size)
    for v in range(views_per_scene):
        depthio.write_intrinsics(depthio.intrinsics_path_for_view(out_dir, v), intr)

    entries: list[ManifestEntry] = []
    scene_of_entry: list[int] = []
    for s in range(n_scenes):
        template = s % n_templates
        scene = generate_scene(template, seed=int(np.random.SeedSequence([seed, s]).generate_state(1)[0]))
        poses = camera_poses(scene, views_per_scene, seed=seed + s, intr=intr)
        for v, pose in enumerate(poses):
            frame_id = f"s{s:04d}_v{v}"
            result = render_depth(
                scene, pose, noise_std=noise_std, dropout_frac=dropout_frac, seed=seed, frame_id=frame_id, view_id=v
            )
            depth_rel = f"depth/{frame_id}.png"
            label_rel = f"labels/{frame_id}.png"
            depthio.write_depth_frame(out_dir / depth_rel, result.frame, unit_scale=unit_scale)
            depthio.write_label_mask(out_dir / label_rel, result.frame.labels)
            entries.append(ManifestEntry(frame_id, depth_rel, v, label_rel, scene.template_id))
            scene_of_entry.append(s)

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBEEF]))
    order = rng.permutation(n_scenes)
    n_train = max(1, int(round(0.7 * n_scenes)))
    n_val = max(1, int(round(0.15 * n_scenes)))
    if n_train + n_val >= n_scenes:
        n_train = max(1, n_scenes - 2)
        n_val = 1 if n_scenes > 1 else 0
    split_of_scene = {}
    for rank, s in enumerate(order.tolist()):
        split_of_scene[s] = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")

    manifests: dict[str, Path] = {}
    for split in ("train", "val", "test"):
        sel = [e for e, s in zip(entries, scene_of_entry) if split_of_scene[s] == split]
        m = DatasetManifest(entries=sel, split_tag=split, root=out_dir)
        path = out_dir / f"manifest_{split}.csv"
        depthio.write_manifest(path, m)
        manifests[split] = path
    all_path = out_dir / "manifest.csv"
    depthio.write_manifest(all_path, DatasetManifest(entries=entries, split_tag="train", root=out_dir))
    return BuildResult(manifests=manifests, all_manifest=all_path, out_dir=out_dir)
