"""Rigid-body poses, pinhole cameras, multi-camera rigs and actor tracks.

Conventions (fixed so that golden files stay stable):
  * ego frame: x forward, y left, z up
  * camera optical frame: z forward (optical axis), x right, y down
  * quaternions are (w, x, y, z) and unit-norm
  * pixel coordinates are continuous; pixel (i, j) has its center at
    (u, v) = (j + 0.5, i + 0.5)
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from importlib import resources

import numpy as np

_QUAT_TOL = 1e-9
_CLASSIFY_EPS = 1e-9

#: The seven annotation categories.
CATEGORIES = ("Ambulance", "Bicycle", "Bus", "Car", "Human", "Motorcycle", "Truck")


class DegenerateRigError(ValueError):
    """Raised when a rig's cameras cannot be classified front/rear."""


# ---------------------------------------------------------------------------
# Quaternion helpers
# ---------------------------------------------------------------------------

def quat_normalize(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    n = np.linalg.norm(q)
    if n < 1e-12:
        raise ValueError("cannot normalize near-zero quaternion")
    return q / n


def quat_multiply(a, b) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array([
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    ])


def quat_conjugate(q) -> np.ndarray:
    q = np.asarray(q, dtype=float)
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_rotate(q, v) -> np.ndarray:
    """Rotate vectors v (..., 3) by unit quaternion q."""
    return np.asarray(v, dtype=float) @ quat_to_matrix(q).T


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(m) -> np.ndarray:
    """Unit quaternion from a 3x3 rotation matrix (Shepperd's method)."""
    m = np.asarray(m, dtype=float)
    t = np.trace(m)
    if t > 0:
        s = np.sqrt(t + 1.0) * 2
        q = np.array([0.25 * s,
                      (m[2, 1] - m[1, 2]) / s,
                      (m[0, 2] - m[2, 0]) / s,
                      (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] >= m[1, 1] and m[0, 0] >= m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s,
                      0.25 * s,
                      (m[0, 1] + m[1, 0]) / s,
                      (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] >= m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s,
                      (m[0, 1] + m[1, 0]) / s,
                      0.25 * s,
                      (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s,
                      (m[0, 2] + m[2, 0]) / s,
                      (m[1, 2] + m[2, 1]) / s,
                      0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_from_yaw(yaw: float) -> np.ndarray:
    """Rotation about ego z by yaw radians."""
    return np.array([np.cos(yaw / 2), 0.0, 0.0, np.sin(yaw / 2)])


def quat_to_yaw(q) -> float:
    """Heading of the rotated +x axis projected onto the ground plane."""
    fwd = quat_rotate(q, np.array([1.0, 0.0, 0.0]))
    return float(np.arctan2(fwd[1], fwd[0]))


def quat_slerp(qa, qb, u: float) -> np.ndarray:
    """Shortest-arc spherical interpolation between unit quaternions."""
    qa = np.asarray(qa, dtype=float)
    qb = np.asarray(qb, dtype=float)
    dot = float(np.dot(qa, qb))
    if dot < 0.0:
        qb = -qb
        dot = -dot
    if dot > 1.0 - 1e-12:
        return quat_normalize(qa + u * (qb - qa))
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    sin_theta = np.sin(theta)
    wa = np.sin((1.0 - u) * theta) / sin_theta
    wb = np.sin(u * theta) / sin_theta
    return quat_normalize(wa * qa + wb * qb)


# ---------------------------------------------------------------------------
# Pose
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Pose:
    """Rigid transform: rotation (unit quaternion w,x,y,z) then translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=float).reshape(4)
        t = np.asarray(self.translation, dtype=float).reshape(3)
        n = np.linalg.norm(q)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"quaternion norm {n:.6g} is not unit")
        object.__setattr__(self, "rotation", q / n)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.zeros(3))

    def matrix(self) -> np.ndarray:
        """4x4 homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = quat_to_matrix(self.rotation)
        m[:3, 3] = self.translation
        return m


def compose(outer: Pose, inner: Pose) -> Pose:
    """Pose applying `inner` first, then `outer`."""
    q = quat_normalize(quat_multiply(outer.rotation, inner.rotation))
    t = quat_rotate(outer.rotation, inner.translation) + outer.translation
    return Pose(q, t)


def invert(pose: Pose) -> Pose:
    q_inv = quat_conjugate(pose.rotation)
    return Pose(quat_normalize(q_inv), -quat_rotate(q_inv, pose.translation))


def transform_point(pose: Pose, p) -> np.ndarray:
    """Apply R * p + t. Accepts a single point or an (..., 3) array."""
    p = np.asarray(p, dtype=float)
    return quat_rotate(pose.rotation, p) + pose.translation


def transform_direction(pose: Pose, d) -> np.ndarray:
    """Rotate a direction (no translation)."""
    return quat_rotate(pose.rotation, np.asarray(d, dtype=float))


# ---------------------------------------------------------------------------
# Cameras and rigs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 < self.cx < self.width) or not (0 < self.cy < self.height):
            raise ValueError("principal point must lie inside the image")
        if self.width <= 0 or self.height <= 0:
            raise ValueError("image dimensions must be positive")

    def matrix(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx],
                         [0.0, self.fy, self.cy],
                         [0.0, 0.0, 1.0]])


@dataclass(frozen=True)
class Camera:
    channel: str
    intrinsics: CameraIntrinsics
    pose_in_ego: Pose  # camera-to-ego

    def __post_init__(self):
        if not self.channel:
            raise ValueError("camera channel name must be nonempty")


@dataclass(frozen=True)
class Rig:
    name: str
    cameras: tuple

    def __post_init__(self):
        object.__setattr__(self, "cameras", tuple(self.cameras))
        channels = [c.channel for c in self.cameras]
        if len(set(channels)) != len(channels):
            raise ValueError("camera channel names must be unique")

    def camera(self, channel: str) -> Camera:
        for cam in self.cameras:
            if cam.channel == channel:
                return cam
        raise KeyError(channel)

    @property
    def channels(self):
        return tuple(c.channel for c in self.cameras)


@dataclass(frozen=True)
class RigShift:
    """Lower all cameras by dz and pull front/rear and left/right pairs together."""

    dz: float
    d_long: float
    d_lat: float


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        o = np.asarray(self.origin, dtype=float).reshape(3)
        d = np.asarray(self.direction, dtype=float).reshape(3)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-6:
            raise ValueError(f"ray direction norm {n:.6g} is not unit")
        if not (0 <= self.near < self.far):
            raise ValueError("require 0 <= near < far")
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "direction", d / n)

    def point_at(self, t):
        t = np.asarray(t, dtype=float)
        return self.origin + t[..., None] * self.direction if t.ndim else self.origin + t * self.direction


@dataclass
class ActorTrack:
    """Rigid actor with an oriented box and timestamped world poses.

    size is (length, width, height); length lies along the box-local x axis.
    """

    actor_id: str
    class_name: str
    size: tuple
    keyframes: list = field(default_factory=list)  # [(t_seconds, Pose), ...]

    def __post_init__(self):
        if self.class_name not in CATEGORIES:
            raise ValueError(f"unknown actor class {self.class_name!r}")
        if any(s <= 0 for s in self.size):
            raise ValueError("box size components must be positive")
        times = [t for t, _ in self.keyframes]
        if any(b <= a for a, b in zip(times, times[1:])):
            raise ValueError("keyframe timestamps must be strictly increasing")


# ---------------------------------------------------------------------------
# Projection and ray generation
# ---------------------------------------------------------------------------

def project(cam: Camera, p_world, ego_pose: Pose):
    """Project a world point into the camera. Returns (u, v, depth) or None
    when the point lies behind the camera (z <= 0)."""
    p_ego = transform_point(invert(ego_pose), p_world)
    p_cam = transform_point(invert(cam.pose_in_ego), p_ego)
    x, y, z = p_cam
    if z <= 0:
        return None
    k = cam.intrinsics
    return (k.fx * x / z + k.cx, k.fy * y / z + k.cy, z)


def project_points(cam: Camera, pts, ego_pose: Pose):
    """Vectorized projection of (N, 3) world points.

    Returns (uv (N, 2), depth (N,), valid (N,) bool); uv/depth are undefined
    where valid is False.
    """
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    world_to_cam = compose(invert(cam.pose_in_ego), invert(ego_pose))
    p_cam = transform_point(world_to_cam, pts)
    z = p_cam[:, 2]
    valid = z > 0
    zs = np.where(valid, z, 1.0)
    k = cam.intrinsics
    uv = np.stack([k.fx * p_cam[:, 0] / zs + k.cx,
                   k.fy * p_cam[:, 1] / zs + k.cy], axis=1)
    return uv, z, valid


def pixel_to_ray(cam: Camera, u: float, v: float, ego_pose: Pose,
                 near: float, far: float) -> Ray:
    """World-frame ray through pixel coordinate (u, v)."""
    k = cam.intrinsics
    if not (0 <= u < k.width) or not (0 <= v < k.height):
        raise ValueError(f"pixel ({u}, {v}) outside {k.width}x{k.height} image")
    d_cam = np.array([(u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0])
    d_cam /= np.linalg.norm(d_cam)
    cam_to_world = compose(ego_pose, cam.pose_in_ego)
    return Ray(origin=cam_to_world.translation,
               direction=transform_direction(cam_to_world, d_cam),
               near=near, far=far)


def camera_rays(cam: Camera, ego_pose: Pose, near: float, far: float):
    """Rays through every pixel center, row-major.

    Returns (origins (H*W, 3), directions (H*W, 3)); directions unit-norm.
    """
    k = cam.intrinsics
    jj, ii = np.meshgrid(np.arange(k.width), np.arange(k.height))
    u = jj.ravel() + 0.5
    v = ii.ravel() + 0.5
    d_cam = np.stack([(u - k.cx) / k.fx, (v - k.cy) / k.fy, np.ones_like(u)], axis=1)
    d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    cam_to_world = compose(ego_pose, cam.pose_in_ego)
    dirs = transform_direction(cam_to_world, d_cam)
    origins = np.broadcast_to(cam_to_world.translation, dirs.shape).copy()
    return origins, dirs


# ---------------------------------------------------------------------------
# Rig shift
# ---------------------------------------------------------------------------

def shift_rig(rig: Rig, shift: RigShift) -> Rig:
    """Apply a platform shift: every camera drops by dz; cameras forward of
    the rig's longitudinal midpoint move back by d_long/2 and rear cameras
    move forward by the same amount; left/right cameras move toward the
    lateral midline by d_lat/2 each. Intrinsics and orientations unchanged.
    """
    xs = np.array([c.pose_in_ego.translation[0] for c in rig.cameras])
    ys = np.array([c.pose_in_ego.translation[1] for c in rig.cameras])
    if xs.max() - xs.min() <= _CLASSIFY_EPS:
        raise DegenerateRigError(
            "all cameras share one longitudinal position; cannot classify front/rear")
    x_mid = 0.5 * (xs.max() + xs.min())
    y_mid = 0.5 * (ys.max() + ys.min())

    cameras = []
    for cam in rig.cameras:
        t = cam.pose_in_ego.translation.copy()
        if t[0] > x_mid + _CLASSIFY_EPS:
            t[0] -= shift.d_long / 2
        elif t[0] < x_mid - _CLASSIFY_EPS:
            t[0] += shift.d_long / 2
        if t[1] > y_mid + _CLASSIFY_EPS:
            t[1] -= shift.d_lat / 2
        elif t[1] < y_mid - _CLASSIFY_EPS:
            t[1] += shift.d_lat / 2
        t[2] -= shift.dz
        if t[2] <= 0:
            raise ValueError(
                f"shift leaves camera {cam.channel} at non-positive height {t[2]:.3f}")
        cameras.append(Camera(cam.channel, cam.intrinsics,
                              Pose(cam.pose_in_ego.rotation, t)))
    return Rig(rig.name, tuple(cameras))


# ---------------------------------------------------------------------------
# Actor tracks
# ---------------------------------------------------------------------------

def interpolate_pose(keyframes, t: float) -> Pose:
    """Pose at time t from [(t, Pose), ...]: linear translation, slerp
    rotation, clamped at both ends."""
    if not keyframes:
        raise ValueError("no keyframes")
    times = [kf[0] for kf in keyframes]
    if t <= times[0]:
        return keyframes[0][1]
    if t >= times[-1]:
        return keyframes[-1][1]
    hi = int(np.searchsorted(times, t, side="right"))
    lo = hi - 1
    t0, p0 = keyframes[lo]
    t1, p1 = keyframes[hi]
    if t == t0:
        return p0
    u = (t - t0) / (t1 - t0)
    return Pose(quat_slerp(p0.rotation, p1.rotation, u),
                (1 - u) * p0.translation + u * p1.translation)


def interpolate_track(track: ActorTrack, t: float) -> Pose:
    """Pose at time t: linear translation, slerp rotation, clamped ends."""
    return interpolate_pose(track.keyframes, t)


def world_to_box_local(track: ActorTrack, t: float, p_world):
    """Express a world point in the actor box frame at time t, normalized to
    [-1, 1] per axis by the half-extents. Returns (coords, inside)."""
    pose = interpolate_track(track, t)
    local = transform_point(invert(pose), p_world)
    half = np.asarray(track.size, dtype=float) / 2
    coords = local / half
    inside = bool(np.all(np.abs(coords) <= 1.0 + 1e-9))
    return coords, inside


def box_local_coords(pose: Pose, size, pts):
    """Vectorized box-local coordinates for (N, 3) points given a box pose.

    Returns (coords (N, 3), inside (N,) bool)."""
    pts = np.asarray(pts, dtype=float).reshape(-1, 3)
    local = transform_point(invert(pose), pts)
    half = np.asarray(size, dtype=float) / 2
    coords = local / half
    inside = np.all(np.abs(coords) <= 1.0 + 1e-9, axis=1)
    return coords, inside


# ---------------------------------------------------------------------------
# Rig config I/O
# ---------------------------------------------------------------------------
# Config files are flat JSON objects with dotted keys:
#   rig.name
#   camera.<CHANNEL>.translation / .rotation
#   camera.<CHANNEL>.fx / .fy / .cx / .cy / .width / .height
# Channel order in the rig follows the order keys first appear in the file.

def rig_to_config(rig: Rig) -> dict:
    cfg = {"rig.name": rig.name}
    for cam in rig.cameras:
        k = cam.intrinsics
        base = f"camera.{cam.channel}"
        cfg[f"{base}.translation"] = [float(x) for x in cam.pose_in_ego.translation]
        cfg[f"{base}.rotation"] = [float(x) for x in cam.pose_in_ego.rotation]
        cfg[f"{base}.fx"] = k.fx
        cfg[f"{base}.fy"] = k.fy
        cfg[f"{base}.cx"] = k.cx
        cfg[f"{base}.cy"] = k.cy
        cfg[f"{base}.width"] = k.width
        cfg[f"{base}.height"] = k.height
    return cfg


def rig_from_config(cfg: dict) -> Rig:
    channels = []
    for key in cfg:
        if key.startswith("camera."):
            ch = key.split(".")[1]
            if ch not in channels:
                channels.append(ch)
    cameras = []
    for ch in channels:
        base = f"camera.{ch}"
        intr = CameraIntrinsics(fx=float(cfg[f"{base}.fx"]), fy=float(cfg[f"{base}.fy"]),
                                cx=float(cfg[f"{base}.cx"]), cy=float(cfg[f"{base}.cy"]),
                                width=int(cfg[f"{base}.width"]), height=int(cfg[f"{base}.height"]))
        pose = Pose(np.array(cfg[f"{base}.rotation"], dtype=float),
                    np.array(cfg[f"{base}.translation"], dtype=float))
        cameras.append(Camera(ch, intr, pose))
    return Rig(str(cfg.get("rig.name", "rig")), tuple(cameras))


def save_rig(rig: Rig, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(rig_to_config(rig), f, indent=2)
        f.write("\n")


def load_rig(path) -> Rig:
    with open(path, encoding="utf-8") as f:
        return rig_from_config(json.load(f))


def default_rig() -> Rig:
    """The packaged six-camera SUV rig (see configs/suv_rig.json)."""
    text = resources.files("rerig.configs").joinpath("suv_rig.json").read_text()
    return rig_from_config(json.loads(text))


def pose_to_json(pose: Pose) -> dict:
    return {"rotation": [float(v) for v in pose.rotation],
            "translation": [float(v) for v in pose.translation]}


def pose_from_json(obj: dict) -> Pose:
    return Pose(np.array(obj["rotation"], dtype=float),
                np.array(obj["translation"], dtype=float))


def track_to_json(track: ActorTrack) -> dict:
    return {
        "actor_id": track.actor_id,
        "class_name": track.class_name,
        "size": [float(v) for v in track.size],
        "keyframes": [[float(t), pose_to_json(p)] for t, p in track.keyframes],
    }


def track_from_json(obj: dict) -> ActorTrack:
    keyframes = [(float(t), pose_from_json(p)) for t, p in obj["keyframes"]]
    return ActorTrack(obj["actor_id"], obj["class_name"],
                      tuple(obj["size"]), keyframes)
