"""Relational dataset schema, file formats, and scene loading.

The on-disk layout mimics nuScenes: JSON table files under ``<root>/v1.0/``
cross-referenced by string tokens, camera images under
``<root>/sweeps/<CHANNEL>/``, lidar sweeps under ``<root>/lidar/``.  Two
additions to the classic schema: annotations carry an ``instance_token`` so
actor tracks can be reassembled without a separate instance table, and
per-camera sky masks live under ``<root>/sky/<CHANNEL>/`` to supervise the
sky branch.

Formats are chosen for byte-reproducibility: P6 PPM images, P5 PGM masks,
ASCII ``x y z`` lidar files, and JSON written with sorted keys and sorted
records.  Writing the same tables twice yields identical bytes.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .geometry import (
    CATEGORIES,
    ActorTrack,
    Camera,
    CameraIntrinsics,
    Pose,
    Rig,
    compose,
    project_points,
)

TABLE_NAMES = ("scene", "sample", "sample_data", "ego_pose",
               "calibrated_sensor", "sample_annotation", "category")


class DatasetError(Exception):
    """Base class for schema problems."""


class MissingTableError(DatasetError):
    pass


class MalformedRecordError(DatasetError):
    pass


class ReferentialIntegrityError(DatasetError):
    pass


# --------------------------------------------------------------- records


@dataclass(frozen=True)
class SceneRecord:
    token: str
    name: str
    nbr_samples: int
    first_sample_token: str
    last_sample_token: str
    description: str = ""


@dataclass(frozen=True)
class SampleRecord:
    token: str
    scene_token: str
    timestamp: int  # integer microseconds
    prev: str = ""
    next: str = ""


@dataclass(frozen=True)
class SampleDataRecord:
    token: str
    sample_token: str
    ego_pose_token: str
    calibrated_sensor_token: str
    channel: str
    timestamp: int
    filename: str
    width: int
    height: int
    fileformat: str = "ppm"
    is_key_frame: bool = False


@dataclass(frozen=True)
class EgoPoseRecord:
    token: str
    timestamp: int
    rotation: tuple[float, float, float, float]  # (w, x, y, z)
    translation: tuple[float, float, float]


@dataclass(frozen=True)
class CalibratedSensorRecord:
    token: str
    channel: str
    translation: tuple[float, float, float]
    rotation: tuple[float, float, float, float]
    camera_intrinsic: tuple  # 3x3 nested rows
    width: int
    height: int


@dataclass(frozen=True)
class SampleAnnotationRecord:
    token: str
    sample_token: str
    instance_token: str
    category_name: str
    translation: tuple[float, float, float]
    size: tuple[float, float, float]  # (width, length, height)
    rotation: tuple[float, float, float, float]
    visibility: float  # visible fraction in [0, 1]


@dataclass(frozen=True)
class CategoryRecord:
    token: str
    name: str
    description: str = ""


@dataclass
class DatasetTables:
    scene: list[SceneRecord] = field(default_factory=list)
    sample: list[SampleRecord] = field(default_factory=list)
    sample_data: list[SampleDataRecord] = field(default_factory=list)
    ego_pose: list[EgoPoseRecord] = field(default_factory=list)
    calibrated_sensor: list[CalibratedSensorRecord] = field(default_factory=list)
    sample_annotation: list[SampleAnnotationRecord] = field(default_factory=list)
    category: list[CategoryRecord] = field(default_factory=list)

    def table(self, name: str) -> list:
        if name not in TABLE_NAMES:
            raise KeyError(name)
        return getattr(self, name)


_RECORD_TYPES = {
    "scene": SceneRecord,
    "sample": SampleRecord,
    "sample_data": SampleDataRecord,
    "ego_pose": EgoPoseRecord,
    "calibrated_sensor": CalibratedSensorRecord,
    "sample_annotation": SampleAnnotationRecord,
    "category": CategoryRecord,
}


def _record_to_json(rec) -> dict:
    def convert(v):
        if isinstance(v, tuple):
            return [convert(x) for x in v]
        return v

    return {k: convert(v) for k, v in asdict(rec).items()}


def _record_from_json(table: str, obj: dict):
    cls = _RECORD_TYPES[table]
    if not isinstance(obj, dict):
        raise MalformedRecordError(f"{table}: record is not an object")
    fields = {f for f in cls.__dataclass_fields__}
    missing = fields - set(obj)
    if missing:
        raise MalformedRecordError(
            f"{table}: record {obj.get('token', '?')!r} missing {sorted(missing)}")
    extra = set(obj) - fields
    if extra:
        raise MalformedRecordError(
            f"{table}: record {obj.get('token', '?')!r} has unknown keys {sorted(extra)}")

    def convert(v):
        return tuple(convert(x) for x in v) if isinstance(v, list) else v

    try:
        return cls(**{k: convert(v) for k, v in obj.items()})
    except (TypeError, ValueError) as exc:
        raise MalformedRecordError(f"{table}: {exc}") from exc


# --------------------------------------------------------------- validate


def validate(tables: DatasetTables) -> list[DatasetError]:
    """Check every schema invariant; returns an error list, never raises."""
    errors: list[DatasetError] = []

    tokens: dict[str, set[str]] = {}
    for name in TABLE_NAMES:
        seen = set()
        for rec in tables.table(name):
            if not isinstance(rec.token, str) or not rec.token:
                errors.append(MalformedRecordError(f"{name}: empty token"))
                continue
            if rec.token in seen:
                errors.append(MalformedRecordError(
                    f"{name}: duplicate token {rec.token!r}"))
            seen.add(rec.token)
        tokens[name] = seen

    def ref(kind, token, table, owner):
        if token not in tokens[table]:
            errors.append(ReferentialIntegrityError(
                f"{kind} {owner!r} references missing {table} token {token!r}"))

    samples_by_token = {s.token: s for s in tables.sample}
    for scene in tables.scene:
        ref("scene", scene.first_sample_token, "sample", scene.token)
        ref("scene", scene.last_sample_token, "sample", scene.token)

    for s in tables.sample:
        ref("sample", s.scene_token, "scene", s.token)
        for link in (s.prev, s.next):
            if link and link not in tokens["sample"]:
                errors.append(ReferentialIntegrityError(
                    f"sample {s.token!r} links to missing sample {link!r}"))

    ego_by_sample: dict[str, set[str]] = {}
    for sd in tables.sample_data:
        ref("sample_data", sd.sample_token, "sample", sd.token)
        ref("sample_data", sd.ego_pose_token, "ego_pose", sd.token)
        ref("sample_data", sd.calibrated_sensor_token, "calibrated_sensor", sd.token)
        ego_by_sample.setdefault(sd.sample_token, set()).add(sd.ego_pose_token)
    for sample_token, egos in sorted(ego_by_sample.items()):
        if len(egos) > 1:
            errors.append(MalformedRecordError(
                f"sample {sample_token!r} mixes ego poses {sorted(egos)}"))

    category_names = {c.name for c in tables.category}
    for ann in tables.sample_annotation:
        ref("sample_annotation", ann.sample_token, "sample", ann.token)
        if ann.category_name not in CATEGORIES:
            errors.append(MalformedRecordError(
                f"annotation {ann.token!r} has unknown category "
                f"{ann.category_name!r}"))
        elif category_names and ann.category_name not in category_names:
            errors.append(ReferentialIntegrityError(
                f"annotation {ann.token!r} category {ann.category_name!r} "
                f"not in category table"))
        if not all(v > 0 for v in ann.size):
            errors.append(MalformedRecordError(
                f"annotation {ann.token!r} has non-positive size"))
        norm = math.sqrt(sum(v * v for v in ann.rotation))
        if abs(norm - 1.0) > 1e-6:
            errors.append(MalformedRecordError(
                f"annotation {ann.token!r} rotation is not unit"))
        if not 0.0 <= ann.visibility <= 1.0:
            errors.append(MalformedRecordError(
                f"annotation {ann.token!r} visibility outside [0, 1]"))

    for cat in tables.category:
        if cat.name not in CATEGORIES:
            errors.append(MalformedRecordError(
                f"category {cat.token!r} name {cat.name!r} not recognized"))

    # samples of each scene must chain first -> last with increasing timestamps
    for scene in tables.scene:
        if (scene.first_sample_token not in samples_by_token
                or scene.last_sample_token not in samples_by_token):
            continue  # already reported above
        token = scene.first_sample_token
        count, prev_ts, prev_token = 0, None, ""
        visited = set()
        while token:
            if token in visited or token not in samples_by_token:
                errors.append(ReferentialIntegrityError(
                    f"scene {scene.token!r} sample chain is broken at {token!r}"))
                break
            visited.add(token)
            s = samples_by_token[token]
            if s.prev != prev_token:
                errors.append(MalformedRecordError(
                    f"sample {s.token!r} prev link mismatch"))
            if prev_ts is not None and s.timestamp <= prev_ts:
                errors.append(MalformedRecordError(
                    f"sample {s.token!r} timestamp not increasing"))
            prev_ts, prev_token = s.timestamp, token
            count += 1
            if token == scene.last_sample_token:
                break
            token = s.next
        else:
            errors.append(ReferentialIntegrityError(
                f"scene {scene.token!r} chain never reaches last sample"))
        if count and count != scene.nbr_samples:
            errors.append(MalformedRecordError(
                f"scene {scene.token!r} nbr_samples={scene.nbr_samples} "
                f"but chain has {count}"))

    return errors


# --------------------------------------------------------------- write/read


def write_tables(tables: DatasetTables, root_dir) -> dict:
    """Write all table JSON files; returns a manifest of paths and counts."""
    errors = validate(tables)
    if errors:
        raise errors[0]
    root = Path(root_dir)
    (root / "v1.0").mkdir(parents=True, exist_ok=True)
    manifest = {"tables": {}, "counts": {}}
    for name in TABLE_NAMES:
        records = sorted(tables.table(name), key=lambda r: r.token)
        payload = [_record_to_json(r) for r in records]
        path = root / "v1.0" / f"{name}.json"
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True)
            f.write("\n")
        manifest["tables"][name] = str(path.relative_to(root))
        manifest["counts"][name] = len(records)
    return manifest


def read_tables(root_dir, check: bool = True) -> DatasetTables:
    """Load and validate all tables; raises a specific DatasetError subclass.

    check=False skips the semantic validation pass (parse errors still
    raise), letting callers run validate() themselves for a full error list.
    """
    root = Path(root_dir)
    tables = DatasetTables()
    for name in TABLE_NAMES:
        path = root / "v1.0" / f"{name}.json"
        if not path.exists():
            raise MissingTableError(f"missing table file {path}")
        try:
            payload = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise MalformedRecordError(f"{name}: invalid JSON ({exc})") from exc
        if not isinstance(payload, list):
            raise MalformedRecordError(f"{name}: top level must be an array")
        getattr(tables, name).extend(
            _record_from_json(name, obj) for obj in payload)
    if check:
        errors = validate(tables)
        if errors:
            raise errors[0]
    return tables


# --------------------------------------------------------------- raster I/O


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6, 8-bit; input float image in [0,1], shape (H, W, 3)."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("image must be (H, W, 3)")
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P6\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"P6\n(\d+) (\d+)\n255\n", raw)
    if not m:
        raise ValueError(f"{path}: not a binary P6 image in canonical form")
    w, h = int(m.group(1)), int(m.group(2))
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=m.end())
    return pixels.reshape(h, w, 3).astype(np.float64) / 255.0


def write_pgm(path, mask: np.ndarray) -> None:
    """Binary P5 mask; nonzero input becomes 255."""
    arr = np.asarray(mask)
    if arr.ndim != 2:
        raise ValueError("mask must be (H, W)")
    data = np.where(arr != 0, 255, 0).astype(np.uint8)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(f"P5\n{arr.shape[1]} {arr.shape[0]}\n255\n".encode("ascii"))
        f.write(data.tobytes())


def read_pgm(path) -> np.ndarray:
    with open(path, "rb") as f:
        raw = f.read()
    m = re.match(rb"P5\n(\d+) (\d+)\n255\n", raw)
    if not m:
        raise ValueError(f"{path}: not a binary P5 mask in canonical form")
    w, h = int(m.group(1)), int(m.group(2))
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=m.end())
    return (pixels.reshape(h, w) > 127).astype(np.float64)


def write_xyz(path, points: np.ndarray) -> None:
    """ASCII lidar file, one `x y z` line per point (world frame, meters)."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="ascii") as f:
        for x, y, z in pts:
            f.write(f"{x:.9g} {y:.9g} {z:.9g}\n")


def read_xyz(path) -> np.ndarray:
    rows = []
    with open(path, encoding="ascii") as f:
        for line in f:
            line = line.strip()
            if line:
                rows.append([float(v) for v in line.split()])
    if not rows:
        return np.zeros((0, 3))
    return np.asarray(rows, dtype=np.float64)


# --------------------------------------------------------------- scene view


@dataclass(frozen=True)
class FrameInfo:
    index: int
    sample_token: str
    timestamp: int  # microseconds
    time: float  # seconds
    ego_pose: Pose
    is_key_frame: bool


@dataclass
class SceneData:
    """Everything training and evaluation need from one split, in memory."""

    root: Path
    tables: DatasetTables
    rig: Rig
    frames: tuple[FrameInfo, ...]
    images: dict  # (frame_index, channel) -> (H, W, 3) float in [0,1]
    sky_masks: dict  # (frame_index, channel) -> (H, W) float {0,1}, may be empty
    lidar_points: dict  # frame_index -> (N, 3) world-frame points
    depth_maps: dict  # (frame_index, channel) -> (H, W) float, NaN where absent
    tracks: tuple[ActorTrack, ...]
    aabb: np.ndarray  # (2, 3) world bounds
    time_range: tuple[float, float]

    @property
    def train_frames(self) -> tuple[FrameInfo, ...]:
        return tuple(f for f in self.frames if not f.is_key_frame)

    @property
    def key_frames(self) -> tuple[FrameInfo, ...]:
        return tuple(f for f in self.frames if f.is_key_frame)


def rig_from_tables(tables: DatasetTables, name: str = "rig") -> Rig:
    cameras = []
    for cs in sorted(tables.calibrated_sensor, key=lambda r: r.channel):
        k = cs.camera_intrinsic
        intr = CameraIntrinsics(fx=float(k[0][0]), fy=float(k[1][1]),
                                cx=float(k[0][2]), cy=float(k[1][2]),
                                width=cs.width, height=cs.height)
        pose = Pose(np.array(cs.rotation, dtype=float),
                    np.array(cs.translation, dtype=float))
        cameras.append(Camera(cs.channel, intr, pose))
    return Rig(name, tuple(cameras))


def tracks_from_annotations(tables: DatasetTables) -> tuple[ActorTrack, ...]:
    """Rebuild per-actor motion from annotations keyed by instance_token."""
    sample_time = {s.token: s.timestamp * 1e-6 for s in tables.sample}
    grouped: dict[str, list] = {}
    order: dict[str, tuple[str, tuple[float, float, float]]] = {}
    for ann in tables.sample_annotation:
        t = sample_time[ann.sample_token]
        pose = Pose(np.array(ann.rotation, dtype=float),
                    np.array(ann.translation, dtype=float))
        grouped.setdefault(ann.instance_token, []).append((t, pose))
        w, l, h = ann.size
        order[ann.instance_token] = (ann.category_name, (l, w, h))
    tracks = []
    for instance in sorted(grouped):
        keyframes = sorted(grouped[instance], key=lambda kp: kp[0])
        category, size = order[instance]
        tracks.append(ActorTrack(instance, category, size, keyframes))
    return tuple(tracks)


def _project_depth_map(cam: Camera, ego_pose: Pose, points: np.ndarray) -> np.ndarray:
    """Splat world points into a sparse per-pixel depth image (NaN = empty).

    Depth is the Euclidean ray distance from the camera origin, matching the
    distance-along-ray convention the volume renderer integrates over.
    """
    h, w = cam.intrinsics.height, cam.intrinsics.width
    depth = np.full((h, w), np.nan)
    if len(points) == 0:
        return depth
    uv, _, valid = project_points(cam, points, ego_pose)
    origin = compose(ego_pose, cam.pose_in_ego).translation
    dist = np.linalg.norm(points - origin, axis=1)
    cols = np.floor(uv[:, 0]).astype(int)
    rows = np.floor(uv[:, 1]).astype(int)
    ok = valid & (cols >= 0) & (cols < w) & (rows >= 0) & (rows < h)
    for r, c, d in zip(rows[ok], cols[ok], dist[ok]):
        if np.isnan(depth[r, c]) or d < depth[r, c]:  # keep nearest hit
            depth[r, c] = d
    return depth


def compute_scene_aabb(frames: Sequence[FrameInfo], lidar_points: dict,
                       tracks: Sequence[ActorTrack], margin: float = 2.0) -> np.ndarray:
    pts = [np.stack([f.ego_pose.translation for f in frames])]
    for arr in lidar_points.values():
        if len(arr):
            pts.append(arr)
    for trk in tracks:
        half = float(np.linalg.norm(np.array(trk.size) / 2.0))
        for _, pose in trk.keyframes:
            pts.append(pose.translation[None, :] - half)
            pts.append(pose.translation[None, :] + half)
    allpts = np.concatenate(pts, axis=0)
    return np.stack([allpts.min(axis=0) - margin, allpts.max(axis=0) + margin])


def load_scene(root_dir, load_images: bool = True) -> SceneData:
    """Read a split directory into a SceneData ready for training."""
    root = Path(root_dir)
    tables = read_tables(root)
    if len(tables.scene) != 1:
        raise MalformedRecordError(
            f"expected exactly one scene, found {len(tables.scene)}")
    rig = rig_from_tables(tables, name=tables.scene[0].name)

    by_token = {s.token: s for s in tables.sample}
    frames = []
    token = tables.scene[0].first_sample_token
    ego_for_sample = {}
    keyflag_for_sample = {}
    for sd in tables.sample_data:
        ego_for_sample[sd.sample_token] = sd.ego_pose_token
        keyflag_for_sample[sd.sample_token] = sd.is_key_frame
    ego_records = {e.token: e for e in tables.ego_pose}
    index = 0
    while token:
        s = by_token[token]
        ego = ego_records[ego_for_sample[s.token]]
        frames.append(FrameInfo(
            index=index, sample_token=s.token, timestamp=s.timestamp,
            time=s.timestamp * 1e-6,
            ego_pose=Pose(np.array(ego.rotation), np.array(ego.translation)),
            is_key_frame=keyflag_for_sample.get(s.token, False)))
        if token == tables.scene[0].last_sample_token:
            break
        token = s.next
        index += 1
    frames = tuple(frames)

    sd_by_sample: dict[str, list[SampleDataRecord]] = {}
    for sd in tables.sample_data:
        sd_by_sample.setdefault(sd.sample_token, []).append(sd)

    images, sky_masks, lidar_points, depth_maps = {}, {}, {}, {}
    for f in frames:
        lidar_path = root / "lidar" / f"{f.index:04d}.xyz"
        lidar_points[f.index] = (read_xyz(lidar_path) if lidar_path.exists()
                                 else np.zeros((0, 3)))
        if not load_images:
            continue
        for sd in sd_by_sample.get(f.sample_token, ()):
            images[(f.index, sd.channel)] = read_ppm(root / sd.filename)
            sky_path = root / "sky" / sd.channel / f"{f.index:04d}.pgm"
            if sky_path.exists():
                sky_masks[(f.index, sd.channel)] = read_pgm(sky_path)
            depth_maps[(f.index, sd.channel)] = _project_depth_map(
                rig.camera(sd.channel), f.ego_pose, lidar_points[f.index])

    tracks = tracks_from_annotations(tables)
    aabb = compute_scene_aabb(frames, lidar_points, tracks)
    time_range = (frames[0].time, frames[-1].time)
    return SceneData(root=root, tables=tables, rig=rig, frames=frames,
                     images=images, sky_masks=sky_masks,
                     lidar_points=lidar_points, depth_maps=depth_maps,
                     tracks=tracks, aabb=aabb, time_range=time_range)
