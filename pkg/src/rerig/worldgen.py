"""Procedural driving worlds with an exact ray-casting oracle.

The stand-in world is deliberately simple: a checkered ground plane, a
handful of oriented boxes for buildings, and rigid box actors moving along
straight or gently curved paths under an analytic sky. Every surface has a
closed-form ray intersection, so rendered images, depth, and lidar returns
are exact ground truth for both the original camera rig and any shifted rig
looking at the very same scene.

Everything is a pure function of (seed, config): regenerating, re-rendering,
or re-exporting produces bit-identical results.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import (
    CalibratedSensorRecord,
    CategoryRecord,
    DatasetTables,
    EgoPoseRecord,
    SampleAnnotationRecord,
    SampleDataRecord,
    SampleRecord,
    SceneRecord,
    write_pgm,
    write_ppm,
    write_tables,
    write_xyz,
)
from .geometry import (
    CATEGORIES,
    ActorTrack,
    Camera,
    Pose,
    Rig,
    RigShift,
    camera_rays,
    compose,
    interpolate_pose,
    interpolate_track,
    project_points,
    quat_from_yaw,
    quat_rotate,
    quat_to_matrix,
    shift_rig,
)

# nominal box size (length, width, height) per actor class, meters
CLASS_SIZES = {
    "Ambulance": (5.5, 2.0, 2.4),
    "Bicycle": (1.8, 0.6, 1.3),
    "Bus": (11.0, 2.9, 3.2),
    "Car": (4.5, 1.9, 1.6),
    "Human": (0.6, 0.6, 1.75),
    "Motorcycle": (2.1, 0.8, 1.4),
    "Truck": (8.0, 2.5, 3.0),
}

# plausible speed range (m/s) per class
CLASS_SPEEDS = {
    "Ambulance": (3.0, 8.0),
    "Bicycle": (2.0, 5.0),
    "Bus": (2.0, 4.5),
    "Car": (2.0, 7.0),
    "Human": (0.5, 1.5),
    "Motorcycle": (3.0, 8.0),
    "Truck": (2.0, 5.0),
}

_EGO_CLEARANCE = 2.0   # min 2-D gap between an actor and the ego at any frame
_CORRIDOR_HALF = 4.0   # static boxes keep |y| beyond this so the ego path is free
_RAY_EPS = 1e-9


class PlacementError(RuntimeError):
    """Raised when random placement cannot satisfy the layout constraints."""


@dataclass(frozen=True)
class WorldGenConfig:
    """Knobs for procedural world generation.

    The map is the square [-extent, extent] in x and y; everything generated
    must stay inside it for the whole duration.
    """

    extent: float = 40.0
    n_static_boxes: int = 8
    actor_classes: tuple = ("Car", "Bus", "Human")
    n_actors: int = 4
    duration: float = 9.5
    frame_rate: float = 2.0
    checker_size: float = 4.0
    ambient: float = 0.35
    ego_speed: float = 2.0
    max_retries: int = 200

    def __post_init__(self):
        if self.extent <= 0 or self.duration <= 0 or self.frame_rate <= 0:
            raise ValueError("extent, duration, and frame_rate must be positive")
        if self.checker_size <= 0:
            raise ValueError("checker_size must be positive")
        if not 0.0 <= self.ambient <= 1.0:
            raise ValueError("ambient must be in [0, 1]")
        if self.n_static_boxes < 0:
            raise ValueError("n_static_boxes must be non-negative")
        unknown = [c for c in self.actor_classes if c not in CLASS_SIZES]
        if unknown:
            raise ValueError(f"unknown actor classes {unknown}")
        if not self.actor_classes:
            raise ValueError("at least one actor class required")
        if self.n_actors < len(set(self.actor_classes)):
            raise ValueError("n_actors must cover every configured class")
        if self.ego_speed < 0:
            raise ValueError("ego_speed must be non-negative")
        if self.max_retries < 1:
            raise ValueError("max_retries must be at least 1")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.frame_rate)) + 1

    def frame_times(self) -> np.ndarray:
        return np.arange(self.n_frames) / self.frame_rate


@dataclass(frozen=True)
class LidarPattern:
    """Spinning-lidar ray pattern mounted on the ego roof."""

    beams: int = 8
    azimuth_steps: int = 120
    max_range: float = 70.0
    elevation_min_deg: float = -25.0
    elevation_max_deg: float = 3.0
    mount: Pose = field(default_factory=lambda: Pose(
        np.array([1.0, 0.0, 0.0, 0.0]), np.array([0.0, 0.0, 1.8])))

    def __post_init__(self):
        if self.beams < 1 or self.azimuth_steps < 1:
            raise ValueError("beams and azimuth_steps must be at least 1")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")


@dataclass(frozen=True)
class StaticBox:
    """Oriented box resting in the world with one albedo per face.

    Faces are ordered (+x, -x, +y, -y, +z, -z) in the box frame.
    """

    pose: Pose
    size: tuple  # (length, width, height)
    face_albedo: np.ndarray  # (6, 3)

    def __post_init__(self):
        fa = np.asarray(self.face_albedo, dtype=float)
        if fa.shape != (6, 3):
            raise ValueError("face_albedo must have shape (6, 3)")
        object.__setattr__(self, "face_albedo", fa)


@dataclass(frozen=True)
class WorldScene:
    """Complete deterministic world: geometry, materials, lighting, motion."""

    seed: int
    extent: float
    checker_size: float
    ground_colors: np.ndarray       # (2, 3) checker palette
    horizon_color: np.ndarray       # (3,)
    zenith_color: np.ndarray        # (3,)
    sun_color: np.ndarray           # (3,)
    sun_direction: np.ndarray       # (3,) unit, points from scene toward sun
    sun_cos_radius: float           # disk edge as cos(angular radius)
    ambient: float
    static_boxes: tuple             # StaticBox, ...
    actors: tuple                   # ActorTrack, ...
    actor_albedo: tuple             # (r, g, b) per actor, aligned with actors
    ego_keyframes: tuple            # ((t, Pose), ...)
    duration: float
    frame_rate: float

    def __post_init__(self):
        if len(self.actor_albedo) != len(self.actors):
            raise ValueError("actor_albedo must align with actors")

    @property
    def n_frames(self) -> int:
        return int(round(self.duration * self.frame_rate)) + 1

    def frame_times(self) -> np.ndarray:
        return np.arange(self.n_frames) / self.frame_rate

    def ego_pose_at(self, t: float) -> Pose:
        return interpolate_pose(self.ego_keyframes, t)


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------

def _circumradius(size) -> float:
    return math.hypot(size[0], size[1]) / 2.0


def _arc_positions(x0, y0, yaw0, speed, omega, times):
    """Constant-speed, constant-yaw-rate ground path sampled at times."""
    times = np.asarray(times, dtype=float)
    yaw = yaw0 + omega * times
    if abs(omega) < 1e-9:
        x = x0 + speed * np.cos(yaw0) * times
        y = y0 + speed * np.sin(yaw0) * times
    else:
        x = x0 + (np.sin(yaw) - math.sin(yaw0)) * speed / omega
        y = y0 - (np.cos(yaw) - math.cos(yaw0)) * speed / omega
    return x, y, yaw


def generate_world(seed: int, config: WorldGenConfig = WorldGenConfig()) -> WorldScene:
    """Build a deterministic world from a seed.

    Static boxes stay clear of the ego corridor and of each other (a
    conservative circumscribed-circle test); every actor keeps inside the
    map, clears the ego at every frame, and overlaps nothing at t=0. Raises
    PlacementError when constraints cannot be met within bounded retries.
    """
    rng = np.random.default_rng([seed])
    times = config.frame_times()

    ground_base = rng.uniform(0.25, 0.40, 3)
    ground_colors = np.stack([ground_base,
                              np.clip(ground_base + rng.uniform(0.08, 0.20, 3), 0, 1)])
    horizon = rng.uniform([0.55, 0.65, 0.78], [0.72, 0.82, 0.95])
    zenith = rng.uniform([0.10, 0.22, 0.50], [0.28, 0.42, 0.78])
    sun_color = np.clip(np.array([1.0, 0.98, 0.92]) - rng.uniform(0, 0.05, 3), 0, 1)
    azim = rng.uniform(0, 2 * math.pi)
    elev = rng.uniform(math.radians(25), math.radians(65))
    sun_direction = np.array([math.cos(elev) * math.cos(azim),
                              math.cos(elev) * math.sin(azim),
                              math.sin(elev)])
    sun_cos_radius = math.cos(math.radians(rng.uniform(1.5, 3.0)))

    x_start = -0.35 * config.extent
    x_end = x_start + config.ego_speed * config.duration
    if abs(x_start) > config.extent or abs(x_end) > config.extent:
        raise ValueError("ego path leaves the map extent; shrink ego_speed "
                         "or duration, or grow extent")
    ego_keyframes = tuple(
        (float(t), Pose(np.array([1.0, 0.0, 0.0, 0.0]),
                        np.array([x_start + config.ego_speed * t, 0.0, 0.0])))
        for t in times)
    ego_xy = np.stack([[x_start + config.ego_speed * t, 0.0] for t in times])

    boxes = []
    placed = []  # (x, y, circumradius) of everything already placed
    for b in range(config.n_static_boxes):
        for attempt in range(config.max_retries):
            l = rng.uniform(2.0, 6.0)
            w = rng.uniform(2.0, 6.0)
            h = rng.uniform(2.5, 7.0)
            x = rng.uniform(-0.85 * config.extent, 0.85 * config.extent)
            y = rng.uniform(-0.85 * config.extent, 0.85 * config.extent)
            yaw = rng.uniform(0, 2 * math.pi)
            circ = _circumradius((l, w))
            if abs(y) < _CORRIDOR_HALF + circ:
                continue
            if abs(x) + circ > config.extent or abs(y) + circ > config.extent:
                continue
            if any(math.hypot(x - px, y - py) < circ + pc
                   for px, py, pc in placed):
                continue
            boxes.append(StaticBox(
                Pose(quat_from_yaw(yaw), np.array([x, y, h / 2.0])),
                (l, w, h), rng.uniform(0.2, 0.9, (6, 3))))
            placed.append((x, y, circ))
            break
        else:
            raise PlacementError(
                f"could not place static box {b} after {config.max_retries} tries")

    classes = tuple(config.actor_classes)
    actors = []
    albedos = []
    actor_starts = []  # (x0, y0, circumradius) at t=0
    for i in range(config.n_actors):
        cls = classes[i % len(classes)]
        size = CLASS_SIZES[cls]
        circ = _circumradius(size)
        albedo = rng.uniform(0.15, 0.95, 3)
        for attempt in range(config.max_retries):
            side = 1.0 if rng.uniform() < 0.5 else -1.0
            y0 = side * rng.uniform(2.0, max(2.5, 0.3 * config.extent))
            x0 = rng.uniform(-0.6 * config.extent, 0.6 * config.extent)
            yaw0 = (0.0 if rng.uniform() < 0.5 else math.pi) + rng.uniform(-0.15, 0.15)
            speed = rng.uniform(*CLASS_SPEEDS[cls])
            omega = rng.uniform(-0.06, 0.06) if rng.uniform() < 0.5 else 0.0
            xs, ys, yaws = _arc_positions(x0, y0, yaw0, speed, omega, times)
            if np.any(np.abs(xs) + circ > config.extent):
                continue
            if np.any(np.abs(ys) + circ > config.extent):
                continue
            gap = np.hypot(xs - ego_xy[:, 0], ys - ego_xy[:, 1])
            if np.any(gap < circ + _EGO_CLEARANCE):
                continue
            if any(math.hypot(xs[0] - px, ys[0] - py) < circ + pc
                   for px, py, pc in placed):
                continue
            if any(math.hypot(xs[0] - px, ys[0] - py) < circ + pc
                   for px, py, pc in actor_starts):
                continue
            keyframes = [
                (float(t), Pose(quat_from_yaw(float(yw)),
                                np.array([float(xv), float(yv), size[2] / 2.0])))
                for t, xv, yv, yw in zip(times, xs, ys, yaws)]
            actors.append(ActorTrack(f"inst-{i:02d}", cls, size, keyframes))
            albedos.append(tuple(float(c) for c in albedo))
            actor_starts.append((float(xs[0]), float(ys[0]), circ))
            break
        else:
            raise PlacementError(
                f"could not place actor {i} ({cls}) after {config.max_retries} tries")

    return WorldScene(
        seed=seed, extent=config.extent, checker_size=config.checker_size,
        ground_colors=ground_colors, horizon_color=horizon,
        zenith_color=zenith, sun_color=sun_color, sun_direction=sun_direction,
        sun_cos_radius=sun_cos_radius, ambient=config.ambient,
        static_boxes=tuple(boxes), actors=tuple(actors),
        actor_albedo=tuple(albedos), ego_keyframes=ego_keyframes,
        duration=config.duration, frame_rate=config.frame_rate)


# ---------------------------------------------------------------------------
# Exact intersections and shading
# ---------------------------------------------------------------------------

def sky_color(world: WorldScene, dirs) -> np.ndarray:
    """Analytic sky for (N, 3) unit directions: vertical gradient plus a sun
    disk where the direction falls inside the sun's angular radius."""
    dirs = np.asarray(dirs, dtype=float).reshape(-1, 3)
    up = np.clip(dirs[:, 2], 0.0, 1.0)[:, None]
    color = (1.0 - up) * world.horizon_color + up * world.zenith_color
    in_disk = dirs @ world.sun_direction >= world.sun_cos_radius
    color[in_disk] = world.sun_color
    return np.clip(color, 0.0, 1.0)


def ground_albedo(world: WorldScene, xy) -> np.ndarray:
    """Checkerboard palette lookup for (N, 2) ground-plane coordinates."""
    xy = np.asarray(xy, dtype=float).reshape(-1, 2)
    cell = np.floor(xy / world.checker_size).astype(np.int64)
    parity = (cell[:, 0] + cell[:, 1]) & 1
    return world.ground_colors[parity]


def _ray_plane(origins, dirs):
    """Distance to the z=0 plane, +inf on miss."""
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origins[:, 2] / dirs[:, 2]
    t = np.where(np.isfinite(t) & (t > _RAY_EPS), t, np.inf)
    return t


def _ray_box(origins, dirs, pose: Pose, size):
    """Slab intersection with an oriented box.

    Returns (t, normal, face): distance (+inf miss), outward world normal,
    and face index in (+x, -x, +y, -y, +z, -z) order.
    """
    rot = quat_to_matrix(pose.rotation)
    local_o = (origins - pose.translation) @ rot
    local_d = dirs @ rot
    half = np.asarray(size, dtype=float) / 2.0
    safe_d = np.where(np.abs(local_d) < 1e-12,
                      np.where(local_d < 0, -1e-12, 1e-12), local_d)
    inv = 1.0 / safe_d
    t1 = (-half - local_o) * inv
    t2 = (half - local_o) * inv
    tnear = np.minimum(t1, t2)
    tfar = np.maximum(t1, t2)
    tmin = tnear.max(axis=1)
    tmax = tfar.min(axis=1)
    hit = (tmax >= tmin) & (tmax > _RAY_EPS)
    t = np.where(tmin > _RAY_EPS, tmin, tmax)
    t = np.where(hit, t, np.inf)
    axis = np.argmax(tnear, axis=1)
    rows = np.arange(len(origins))
    sign = np.where(local_d[rows, axis] < 0, 1.0, -1.0)  # face the ray entered
    normal = sign[:, None] * rot[:, axis].T
    face = axis * 2 + (sign < 0).astype(np.int64)
    return t, normal, face


def _scene_hits(world: WorldScene, origins, dirs, t: float):
    """Nearest hit over ground, static boxes, and actors at time t.

    Returns (dist (N,), albedo (N, 3), normal (N, 3)); dist=+inf on miss.
    """
    n = len(origins)
    best = _ray_plane(origins, dirs)
    albedo = np.zeros((n, 3))
    normal = np.zeros((n, 3))
    ground = np.isfinite(best)
    if ground.any():
        pts = origins[ground] + best[ground, None] * dirs[ground]
        albedo[ground] = ground_albedo(world, pts[:, :2])
        normal[ground] = [0.0, 0.0, 1.0]

    surfaces = [(box.pose, box.size, box.face_albedo) for box in world.static_boxes]
    surfaces += [(interpolate_track(actor, t), actor.size,
                  np.tile(world.actor_albedo[i], (6, 1)))
                 for i, actor in enumerate(world.actors)]
    for pose, size, faces in surfaces:
        dist, nrm, face = _ray_box(origins, dirs, pose, size)
        closer = dist < best
        if closer.any():
            best = np.where(closer, dist, best)
            albedo[closer] = faces[face[closer]]
            normal[closer] = nrm[closer]
    return best, albedo, normal


def oracle_render(world: WorldScene, camera: Camera, ego_pose: Pose, t: float):
    """Exact render: (rgb (H, W, 3), depth (H, W), sky_mask (H, W)).

    Depth is the Euclidean ray distance to the nearest surface (+inf where
    the ray escapes to the sky); sky_mask is 1.0 exactly on escape pixels.
    Shading is Lambertian with a fixed ambient floor and no cast shadows.
    """
    k = camera.intrinsics
    origins, dirs = camera_rays(camera, ego_pose, 0.1, 100.0)
    dist, albedo, normal = _scene_hits(world, origins, dirs, t)
    hit = np.isfinite(dist)
    lambert = np.clip(normal @ world.sun_direction, 0.0, None)
    shade = world.ambient + (1.0 - world.ambient) * lambert
    rgb = np.clip(albedo * shade[:, None], 0.0, 1.0)
    rgb[~hit] = sky_color(world, dirs[~hit])
    return (rgb.reshape(k.height, k.width, 3),
            dist.reshape(k.height, k.width),
            (~hit).astype(float).reshape(k.height, k.width))


def sample_lidar(world: WorldScene, ego_pose: Pose, t: float,
                 pattern: LidarPattern = LidarPattern()):
    """Cast the spinning pattern and return world-frame returns.

    Returns (points (N, 3), provenance (N, 2)) where provenance rows are
    (beam index, azimuth index); rays that miss or exceed max range produce
    no entry, so N <= beams * azimuth_steps.
    """
    elev = np.radians(np.linspace(pattern.elevation_min_deg,
                                  pattern.elevation_max_deg, pattern.beams))
    azim = np.arange(pattern.azimuth_steps) * (2 * math.pi / pattern.azimuth_steps)
    ee, aa = np.meshgrid(elev, azim, indexing="ij")
    d_local = np.stack([np.cos(ee) * np.cos(aa),
                        np.cos(ee) * np.sin(aa),
                        np.sin(ee)], axis=-1).reshape(-1, 3)
    mount = compose(ego_pose, pattern.mount)
    dirs = quat_rotate(mount.rotation, d_local)
    origins = np.broadcast_to(mount.translation, dirs.shape)
    dist, _, _ = _scene_hits(world, origins, dirs, t)
    keep = np.isfinite(dist) & (dist <= pattern.max_range)
    points = origins[keep] + dist[keep, None] * dirs[keep]
    beam_idx, azim_idx = np.divmod(np.flatnonzero(keep), pattern.azimuth_steps)
    return points, np.stack([beam_idx, azim_idx], axis=1)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def world_to_json(world: WorldScene) -> dict:
    from .geometry import pose_to_json, track_to_json
    return {
        "seed": world.seed,
        "extent": world.extent,
        "checker_size": world.checker_size,
        "ground_colors": world.ground_colors.tolist(),
        "horizon_color": world.horizon_color.tolist(),
        "zenith_color": world.zenith_color.tolist(),
        "sun_color": world.sun_color.tolist(),
        "sun_direction": world.sun_direction.tolist(),
        "sun_cos_radius": world.sun_cos_radius,
        "ambient": world.ambient,
        "static_boxes": [
            {"pose": pose_to_json(box.pose), "size": list(box.size),
             "face_albedo": box.face_albedo.tolist()}
            for box in world.static_boxes],
        "actors": [track_to_json(actor) for actor in world.actors],
        "actor_albedo": [list(a) for a in world.actor_albedo],
        "ego_keyframes": [[t, pose_to_json(p)] for t, p in world.ego_keyframes],
        "duration": world.duration,
        "frame_rate": world.frame_rate,
    }


def world_from_json(obj: dict) -> WorldScene:
    from .geometry import pose_from_json, track_from_json
    return WorldScene(
        seed=int(obj["seed"]),
        extent=float(obj["extent"]),
        checker_size=float(obj["checker_size"]),
        ground_colors=np.array(obj["ground_colors"], dtype=float),
        horizon_color=np.array(obj["horizon_color"], dtype=float),
        zenith_color=np.array(obj["zenith_color"], dtype=float),
        sun_color=np.array(obj["sun_color"], dtype=float),
        sun_direction=np.array(obj["sun_direction"], dtype=float),
        sun_cos_radius=float(obj["sun_cos_radius"]),
        ambient=float(obj["ambient"]),
        static_boxes=tuple(
            StaticBox(pose_from_json(b["pose"]), tuple(b["size"]),
                      np.array(b["face_albedo"], dtype=float))
            for b in obj["static_boxes"]),
        actors=tuple(track_from_json(a) for a in obj["actors"]),
        actor_albedo=tuple(tuple(a) for a in obj["actor_albedo"]),
        ego_keyframes=tuple((float(t), pose_from_json(p))
                            for t, p in obj["ego_keyframes"]),
        duration=float(obj["duration"]),
        frame_rate=float(obj["frame_rate"]))


def save_world(world: WorldScene, path) -> None:
    text = json.dumps(world_to_json(world), indent=2, sort_keys=True) + "\n"
    Path(path).write_text(text)


def load_world(path) -> WorldScene:
    return world_from_json(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Dual-rig export
# ---------------------------------------------------------------------------

def _visibility(world: WorldScene, rig: Rig, ego_pose: Pose, t: float,
                actor_index: int) -> float:
    """Fraction of 9 probe points (center + 8 corners) that some camera of
    the rig sees without occlusion by other geometry."""
    actor = world.actors[actor_index]
    pose = interpolate_track(actor, t)
    half = np.asarray(actor.size, dtype=float) / 2.0
    corners = np.array([[sx, sy, sz] for sx in (-1, 1)
                        for sy in (-1, 1) for sz in (-1, 1)]) * half
    rot = quat_to_matrix(pose.rotation)
    probes = np.vstack([pose.translation, corners @ rot.T + pose.translation])

    occluders = [(box.pose, box.size) for box in world.static_boxes]
    occluders += [(interpolate_track(other, t), other.size)
                  for j, other in enumerate(world.actors) if j != actor_index]

    seen = np.zeros(len(probes), dtype=bool)
    for cam in rig.cameras:
        uv, depth, valid = project_points(cam, probes, ego_pose)
        k = cam.intrinsics
        in_view = valid & (uv[:, 0] >= 0) & (uv[:, 0] < k.width) \
            & (uv[:, 1] >= 0) & (uv[:, 1] < k.height)
        todo = np.flatnonzero(in_view & ~seen)
        if todo.size == 0:
            continue
        origin = compose(ego_pose, cam.pose_in_ego).translation
        delta = probes[todo] - origin
        dist = np.linalg.norm(delta, axis=1)
        dirs = delta / dist[:, None]
        origins = np.broadcast_to(origin, dirs.shape)
        blocked = np.zeros(len(todo), dtype=bool)
        for opose, osize in occluders:
            ot, _, _ = _ray_box(origins, dirs, opose, osize)
            blocked |= ot < dist - 1e-6
        seen[todo[~blocked]] = True
    return float(seen.sum()) / len(probes)


def export_dual_rig_dataset(world: WorldScene, rig_suv: Rig, shift: RigShift,
                            out_dir, frames=None, key_stride: int = 5,
                            lidar_pattern: LidarPattern = LidarPattern(),
                            split_names: tuple = ("sim-SUV", "sim-SUB")) -> dict:
    """Render the world through the original rig and its shifted twin.

    Writes two dataset splits under out_dir that share scene, sample, ego
    pose, annotation, and category tables byte for byte; only the camera
    calibration (and the pixels) differ. Lidar is rig-independent and is
    written to both splits. Every frame whose index is a multiple of
    key_stride is flagged is_key_frame for held-out evaluation.
    """
    if key_stride < 1:
        raise ValueError("key_stride must be at least 1")
    out_dir = Path(out_dir)
    all_times = world.frame_times()
    if frames is None:
        frame_indices = list(range(world.n_frames))
    else:
        frame_indices = sorted(set(int(f) for f in frames))
        if not frame_indices:
            raise ValueError("frame set is empty")
        if frame_indices[0] < 0 or frame_indices[-1] >= world.n_frames:
            raise ValueError("frame index out of range")
    step_us = round(1e6 / world.frame_rate)
    rig_sub = shift_rig(rig_suv, shift)
    rigs = {split_names[0]: rig_suv, split_names[1]: rig_sub}

    samples, ego_poses, annotations = [], [], []
    n = len(frame_indices)
    for k, fi in enumerate(frame_indices):
        t = float(all_times[fi])
        token = f"sample-{k:04d}"
        samples.append(SampleRecord(
            token=token, scene_token="scene-0000", timestamp=fi * step_us,
            prev=f"sample-{k - 1:04d}" if k > 0 else "",
            next=f"sample-{k + 1:04d}" if k < n - 1 else ""))
        ego = world.ego_pose_at(t)
        ego_poses.append(EgoPoseRecord(
            token=f"ego-{k:04d}", timestamp=fi * step_us,
            rotation=tuple(ego.rotation.tolist()),
            translation=tuple(ego.translation.tolist())))
        for i, actor in enumerate(world.actors):
            pose = interpolate_track(actor, t)
            l, w, h = actor.size
            annotations.append(SampleAnnotationRecord(
                token=f"ann-{k:04d}-{i:02d}", sample_token=token,
                instance_token=actor.actor_id, category_name=actor.class_name,
                translation=tuple(pose.translation.tolist()),
                size=(w, l, h),
                rotation=tuple(pose.rotation.tolist()),
                visibility=_visibility(world, rig_suv, ego, t, i)))
    scene_record = SceneRecord(
        token="scene-0000", name=f"world-{world.seed}", nbr_samples=n,
        first_sample_token="sample-0000", last_sample_token=f"sample-{n - 1:04d}",
        description=f"procedural world seed {world.seed}")
    categories = [CategoryRecord(token=f"category-{name.lower()}", name=name)
                  for name in CATEGORIES]

    manifest = {"splits": {}, "frames": frame_indices}
    lidar_cache = {}
    for split, rig in rigs.items():
        root = out_dir / split
        cal_sensors = []
        for cam in rig.cameras:
            k_mat = ((cam.intrinsics.fx, 0.0, cam.intrinsics.cx),
                     (0.0, cam.intrinsics.fy, cam.intrinsics.cy),
                     (0.0, 0.0, 1.0))
            cal_sensors.append(CalibratedSensorRecord(
                token=f"cs-{cam.channel}", channel=cam.channel,
                translation=tuple(cam.pose_in_ego.translation.tolist()),
                rotation=tuple(cam.pose_in_ego.rotation.tolist()),
                camera_intrinsic=k_mat,
                width=cam.intrinsics.width, height=cam.intrinsics.height))
        sample_data = []
        for k, fi in enumerate(frame_indices):
            t = float(all_times[fi])
            ego = world.ego_pose_at(t)
            is_key = fi % key_stride == 0
            if k not in lidar_cache:
                lidar_cache[k] = sample_lidar(world, ego, t, lidar_pattern)[0]
            write_xyz(root / "lidar" / f"{k:04d}.xyz", lidar_cache[k])
            for cam in rig.cameras:
                rgb, _, sky_mask = oracle_render(world, cam, ego, t)
                rel = f"sweeps/{cam.channel}/{k:04d}.ppm"
                write_ppm(root / rel, rgb)
                write_pgm(root / "sky" / cam.channel / f"{k:04d}.pgm", sky_mask)
                sample_data.append(SampleDataRecord(
                    token=f"sd-{k:04d}-{cam.channel}",
                    sample_token=f"sample-{k:04d}",
                    ego_pose_token=f"ego-{k:04d}",
                    calibrated_sensor_token=f"cs-{cam.channel}",
                    channel=cam.channel, timestamp=fi * step_us, filename=rel,
                    width=cam.intrinsics.width, height=cam.intrinsics.height,
                    is_key_frame=is_key))
        tables = DatasetTables(
            scene=(scene_record,),
            sample=tuple(samples), sample_data=tuple(sample_data),
            ego_pose=tuple(ego_poses), calibrated_sensor=tuple(cal_sensors),
            sample_annotation=tuple(annotations), category=tuple(categories))
        table_manifest = write_tables(tables, root)
        save_world(world, root / "world.json")
        manifest["splits"][split] = {"root": str(root), "tables": table_manifest}
    return manifest
