"""Differentiable volume rendering and per-scene training.

Rays are sampled stratified between near and far.  Each sample point is
encoded by the environment field, or by an actor field if it falls inside an
actor's box at the ray's timestamp; the shared decoder yields a geometry
logit ``s`` and an appearance feature.  Opacity uses a softplus density,
``alpha = 1 - exp(-softplus(s) * delta)``, a deliberate stand-in for an SDF
mapping with the same interface.

Segment lengths come from the midpoints between neighboring samples, with
the first and last boundaries pinned to near/far.  The deltas then tile
``[near, far]`` exactly for any sample placement, which keeps the opacity of
a constant-density slab at its closed-form value instead of drifting with
bin width.

Color has two routes sharing one initialization: ``direct`` applies a learned
1x1 projection plus sigmoid per pixel; ``upsample`` renders features at
``H/S x W/S`` and decodes color with a small conv stack with nearest-neighbor
upsampling in between.  At scale 1 the conv stack starts out exactly equal to
the direct head.

Training draws per-iteration ray batches across all cameras and non-key
frames (the 2 Hz key frames stay held out for evaluation), optimizing
photometric MSE, sparse lidar depth L1, and a sky-mask BCE on ray opacity.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .fields import (
    SceneModel,
    SceneModelConfig,
    actor_encode,
    decode,
    env_encode,
    sky_eval,
)
from .geometry import (
    Camera,
    CameraIntrinsics,
    Pose,
    Ray,
    Rig,
    box_local_coords,
    camera_rays,
    interpolate_track,
    pixel_to_ray,
    pose_to_json,
    rig_to_config,
)
from .optim import adam_step, exponential_lr, init_adam

LOG_EPS = 1e-12  # clamp inside the BCE logs so a perfect match scores exactly 0


# ----------------------------------------------------------------- sampling


def sample_ray(ray: Ray, n: int, seed: int, ray_index: int = 0) -> np.ndarray:
    """Stratified depths: one uniform draw in each of n equal bins.

    Deterministic in (seed, ray_index); sorted by construction.
    """
    if n < 1:
        raise ValueError("need at least one sample")
    rng = np.random.default_rng([seed, ray_index])
    edges = np.linspace(ray.near, ray.far, n + 1)
    u = rng.uniform(size=n)
    return edges[:-1] + u * (edges[1:] - edges[:-1])


def stratified_depths(near: float, far: float, n_rays: int, n: int,
                      rng: np.random.Generator) -> np.ndarray:
    """Batched stratified depths (n_rays, n) from one generator draw."""
    u = rng.uniform(size=(n_rays, n))
    edges = np.linspace(near, far, n + 1)
    return edges[:-1] + u * (edges[1:] - edges[:-1])


def segment_lengths(depths: np.ndarray, near: float, far: float) -> np.ndarray:
    """Midpoint-bounded segment lengths; rows sum exactly to far - near."""
    mid = 0.5 * (depths[..., 1:] + depths[..., :-1])
    lo = np.full(depths.shape[:-1] + (1,), float(near))
    hi = np.full(depths.shape[:-1] + (1,), float(far))
    bounds = np.concatenate([lo, mid, hi], axis=-1)
    return np.diff(bounds, axis=-1)


# ------------------------------------------------------------- compositing


def geometry_to_alpha(s, delta) -> torch.Tensor:
    """alpha = 1 - exp(-softplus(s) * delta), elementwise."""
    s = s if isinstance(s, torch.Tensor) else torch.as_tensor(s, dtype=torch.float64)
    delta = torch.as_tensor(delta, dtype=s.dtype)
    if torch.any(delta <= 0):
        raise ValueError("segment lengths must be positive")
    return 1.0 - torch.exp(-F.softplus(s) * delta)


def composite(alpha, features, f_sky, t=None, far: float | None = None):
    """Front-to-back alpha compositing with a sky background.

    alpha: (..., N) in [0,1]; features: (..., N, F); f_sky: (..., F).
    Returns (feature, weights, t_res, depth); depth is None unless sample
    depths t and far are given, in which case sky rays report far.
    """
    alpha = alpha if isinstance(alpha, torch.Tensor) \
        else torch.as_tensor(alpha, dtype=torch.float64)
    features = features if isinstance(features, torch.Tensor) \
        else torch.as_tensor(features, dtype=alpha.dtype)
    f_sky = f_sky if isinstance(f_sky, torch.Tensor) \
        else torch.as_tensor(f_sky, dtype=alpha.dtype)
    if torch.any(alpha < 0) or torch.any(alpha > 1):
        raise ValueError("alpha outside [0, 1]")
    trans = torch.cumprod(1.0 - alpha, dim=-1)
    ones = torch.ones_like(alpha[..., :1])
    upstream = torch.cat([ones, trans[..., :-1]], dim=-1)  # prod over j < i
    weights = alpha * upstream
    t_res = trans[..., -1]
    feature = (weights.unsqueeze(-1) * features).sum(dim=-2) \
        + t_res.unsqueeze(-1) * f_sky
    depth = None
    if t is not None:
        if far is None:
            raise ValueError("depth compositing needs far")
        t = torch.as_tensor(t, dtype=alpha.dtype)
        depth = (weights * t).sum(dim=-1) + t_res * far
    return feature, weights, t_res, depth


@dataclass
class RaySampleBatch:
    """Everything produced while compositing a batch of rays."""

    t: torch.Tensor  # (R, N) sample depths
    delta: torch.Tensor  # (R, N) segment lengths
    points: torch.Tensor  # (R, N, 3) world positions
    features: torch.Tensor  # (R, N, F_app) per-sample appearance
    alpha: torch.Tensor  # (R, N)
    weights: torch.Tensor  # (R, N)
    t_res: torch.Tensor  # (R,) residual transmittance

    def conservation_error(self) -> float:
        total = self.weights.sum(dim=-1) + self.t_res
        return float((total - 1.0).abs().max().detach())


def render_rays(model: SceneModel, origins: np.ndarray, dirs: np.ndarray,
                times: np.ndarray, depths: np.ndarray, near: float, far: float):
    """Batch core shared by single-ray, image, and training paths.

    Returns (batch: RaySampleBatch, feature (R, F), depth (R,), opacity (R,)).
    Differentiable w.r.t. model parameters.
    """
    dtype = model.params["env_grid.tables"].dtype
    origins = np.asarray(origins, dtype=np.float64)
    dirs = np.asarray(dirs, dtype=np.float64)
    times = np.broadcast_to(np.asarray(times, dtype=np.float64), origins.shape[:1])
    n_rays, n = depths.shape
    pts = origins[:, None, :] + depths[:, :, None] * dirs[:, None, :]
    flat_pts = pts.reshape(-1, 3)

    v_env, _ = env_encode(model, flat_pts)
    s, feat = decode(model, v_env, kind="env")

    # carve out points inside actor boxes; first matching track claims a point
    claimed = np.zeros(len(flat_pts), dtype=bool)
    point_time = np.repeat(times, n)
    for track in model.tracks:
        for tau in np.unique(point_time):
            pose = interpolate_track(track, float(tau))
            sel = np.flatnonzero((point_time == tau) & ~claimed)
            if sel.size == 0:
                continue
            coords, inside = box_local_coords(pose, track.size, flat_pts[sel])
            hit = sel[inside]
            if hit.size == 0:
                continue
            v_act = actor_encode(model, track.actor_id, coords[inside], float(tau))
            s_act, f_act = decode(model, v_act, kind="actor")
            idx = torch.as_tensor(hit)
            s = s.index_copy(0, idx, s_act)
            feat = feat.index_copy(0, idx, f_act)
            claimed[hit] = True

    delta = segment_lengths(depths, near, far)
    alpha = geometry_to_alpha(s.reshape(n_rays, n),
                              torch.as_tensor(delta, dtype=dtype))
    f_sky, _ = sky_eval(model, dirs)
    feature, weights, t_res, exp_depth = composite(
        alpha, feat.reshape(n_rays, n, -1), f_sky,
        t=torch.as_tensor(depths, dtype=dtype), far=far)
    batch = RaySampleBatch(
        t=torch.as_tensor(depths, dtype=dtype),
        delta=torch.as_tensor(delta, dtype=dtype),
        points=torch.as_tensor(pts, dtype=dtype),
        features=feat.reshape(n_rays, n, -1), alpha=alpha,
        weights=weights, t_res=t_res)
    return batch, feature, exp_depth, 1.0 - t_res


def render_ray(model: SceneModel, ray: Ray, t: float, n: int, seed: int,
               ray_index: int = 0):
    """Render one ray; returns (feature (F,), depth scalar, opacity scalar)."""
    depths = sample_ray(ray, n, seed, ray_index)[None, :]
    _, feature, depth, opacity = render_rays(
        model, ray.origin[None, :], ray.direction[None, :],
        np.array([t]), depths, ray.near, ray.far)
    return feature[0], depth[0], opacity[0]


# ------------------------------------------------------------ color decode


def rgb_direct(model: SceneModel, feature: torch.Tensor) -> torch.Tensor:
    """Learned 1x1 projection of the feature, squashed to [0,1]."""
    return torch.sigmoid(feature @ model.params["rgb_head.w"].T
                         + model.params["rgb_head.b"])


def _upsample_stages(factor: int) -> tuple[int, int]:
    stages = {1: (1, 1), 2: (2, 1), 4: (2, 2)}
    if factor not in stages:
        raise ValueError("upsample factor must be 1, 2, or 4")
    return stages[factor]


def rgb_upsample(model: SceneModel, feature: torch.Tensor,
                 opacity: torch.Tensor, factor: int) -> torch.Tensor:
    """Conv decode of a (H', W', F) feature + (H', W') opacity image to RGB.

    Output is (H'*factor, W'*factor, 3) in [0,1].
    """
    s1, s2 = _upsample_stages(factor)
    x = torch.cat([feature, opacity.unsqueeze(-1)], dim=-1)
    x = x.permute(2, 0, 1).unsqueeze(0)
    p = model.params
    x = F.conv2d(x, p["up.c0.w"], p["up.c0.b"], padding=1)
    x = torch.relu(x)
    if s1 > 1:
        x = F.interpolate(x, scale_factor=s1, mode="nearest")
    x = F.conv2d(x, p["up.c1.w"], p["up.c1.b"], padding=1)
    x = torch.relu(x)
    if s2 > 1:
        x = F.interpolate(x, scale_factor=s2, mode="nearest")
    x = F.conv2d(x, p["up.c2.w"], p["up.c2.b"], padding=1)
    return torch.sigmoid(x)[0].permute(1, 2, 0)


# ------------------------------------------------------------ image render


@dataclass(frozen=True)
class RenderOutput:
    feature: np.ndarray  # (H', W', F_app)
    depth: np.ndarray  # (H', W') meters
    opacity: np.ndarray  # (H', W') in [0, 1]
    rgb: np.ndarray  # (H, W, 3) in [0, 1]

    def __post_init__(self):
        if self.rgb.min() < 0 or self.rgb.max() > 1:
            raise ValueError("rgb outside [0, 1]")
        if self.opacity.min() < 0 or self.opacity.max() > 1:
            raise ValueError("opacity outside [0, 1]")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 1500
    rays_per_batch: int = 1024
    samples_per_ray: int = 32
    near: float = 0.1
    far: float = 60.0
    lambda_rgb: float = 1.0
    lambda_depth: float = 0.1
    lambda_sky: float = 0.01
    mode: str = "direct"  # or "upsample"
    upsample_factor: int = 1
    patch_size: int = 16  # full-res patch edge for upsample-mode training
    lr: float = 1e-2
    lr_decay: float = 1.0
    seed: int = 0
    exclude_key_frames: bool = True
    chunk_rays: int = 8192

    def __post_init__(self):
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if self.samples_per_ray < 2:
            raise ValueError("need at least 2 samples per ray")
        if not 0 <= self.near < self.far:
            raise ValueError("need 0 <= near < far")
        if min(self.lambda_rgb, self.lambda_depth, self.lambda_sky) < 0:
            raise ValueError("loss weights must be >= 0")
        if self.mode not in ("direct", "upsample"):
            raise ValueError("mode must be 'direct' or 'upsample'")
        _upsample_stages(self.upsample_factor)
        if self.mode == "upsample" and self.patch_size % self.upsample_factor:
            raise ValueError("patch_size must be divisible by upsample_factor")


def _scaled_camera(cam: Camera, factor: int) -> Camera:
    if factor == 1:
        return cam
    k = cam.intrinsics
    if k.width % factor or k.height % factor:
        raise ValueError("image size must be divisible by the upsample factor")
    low = CameraIntrinsics(fx=k.fx / factor, fy=k.fy / factor,
                           cx=k.cx / factor, cy=k.cy / factor,
                           width=k.width // factor, height=k.height // factor)
    return Camera(cam.channel, low, cam.pose_in_ego)


def render_image(model: SceneModel, camera: Camera, ego_pose: Pose, t: float,
                 config: TrainConfig, image_tag: int = 0) -> RenderOutput:
    """Render a full frame for one camera.

    Feature, depth, and opacity are produced at H/S x W/S; color at H x W.
    The stratified jitter is drawn once from (config.seed, image_tag), so a
    fixed tag gives bit-identical repeat renders.
    """
    factor = config.upsample_factor if config.mode == "upsample" else 1
    cam = _scaled_camera(camera, factor)
    h, w = cam.intrinsics.height, cam.intrinsics.width
    origins, dirs = camera_rays(cam, ego_pose, config.near, config.far)
    rng = np.random.default_rng([config.seed, image_tag])
    depths = stratified_depths(config.near, config.far, len(origins),
                               config.samples_per_ray, rng)

    feats, deps, opas = [], [], []
    with torch.no_grad():
        for lo in range(0, len(origins), config.chunk_rays):
            hi = lo + config.chunk_rays
            _, feature, depth, opacity = render_rays(
                model, origins[lo:hi], dirs[lo:hi],
                np.full(len(origins[lo:hi]), t), depths[lo:hi],
                config.near, config.far)
            feats.append(feature)
            deps.append(depth)
            opas.append(opacity)
        feature = torch.cat(feats).reshape(h, w, -1)
        depth = torch.cat(deps).reshape(h, w)
        opacity = torch.cat(opas).reshape(h, w)
        if config.mode == "upsample":
            rgb = rgb_upsample(model, feature, opacity, factor)
        else:
            rgb = rgb_direct(model, feature)
    return RenderOutput(
        feature=feature.double().numpy(), depth=depth.double().numpy(),
        opacity=opacity.double().numpy(), rgb=rgb.double().numpy())


# ------------------------------------------------------------------ losses


@dataclass(frozen=True)
class LossReport:
    rgb_loss: float
    depth_loss: float
    sky_loss: float
    total: float

    @classmethod
    def from_terms(cls, rgb: float, depth: float, sky: float,
                   config: TrainConfig) -> "LossReport":
        total = (config.lambda_rgb * rgb + config.lambda_depth * depth
                 + config.lambda_sky * sky)
        return cls(rgb, depth, sky, total)


def _bce(opacity: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    o = opacity.clamp(min=0.0, max=1.0)
    return -(target * torch.log(o.clamp(min=LOG_EPS))
             + (1.0 - target) * torch.log((1.0 - o).clamp(min=LOG_EPS))).mean()


def loss_terms(pred_rgb: torch.Tensor, gt_rgb: torch.Tensor,
               pred_depth: torch.Tensor, gt_depth: np.ndarray,
               pred_opacity: torch.Tensor, sky_target: np.ndarray):
    """Torch losses for a ray batch; NaNs in gt mark missing supervision."""
    dtype = pred_rgb.dtype
    rgb = ((pred_rgb - torch.as_tensor(gt_rgb, dtype=dtype)) ** 2).mean()
    dmask = np.flatnonzero(np.isfinite(np.asarray(gt_depth, dtype=np.float64)))
    if dmask.size:
        idx = torch.as_tensor(dmask)
        gt_d = torch.as_tensor(np.asarray(gt_depth)[dmask], dtype=dtype)
        depth = (pred_depth.reshape(-1)[idx] - gt_d).abs().mean()
    else:
        depth = torch.zeros((), dtype=dtype)
    smask = np.flatnonzero(np.isfinite(np.asarray(sky_target, dtype=np.float64)))
    if smask.size:
        idx = torch.as_tensor(smask)
        tgt = torch.as_tensor(np.asarray(sky_target).reshape(-1)[smask], dtype=dtype)
        sky = _bce(pred_opacity.reshape(-1)[idx], tgt)
    else:
        sky = torch.zeros((), dtype=dtype)
    return rgb, depth, sky


def compute_loss(pred: RenderOutput, gt_rgb: np.ndarray, gt_depth: np.ndarray,
                 gt_sky_mask: np.ndarray, config: TrainConfig) -> LossReport:
    """Image-level losses; gt_depth uses NaN for pixels without lidar."""
    if pred.rgb.shape != np.asarray(gt_rgb).shape:
        raise ValueError("rgb shape mismatch")
    if pred.depth.shape != np.asarray(gt_depth).shape:
        raise ValueError("depth shape mismatch")
    if pred.opacity.shape != np.asarray(gt_sky_mask).shape:
        raise ValueError("sky mask shape mismatch")
    rgb = float(np.mean((pred.rgb - gt_rgb) ** 2))
    valid = np.isfinite(gt_depth)
    depth = float(np.mean(np.abs(pred.depth[valid] - gt_depth[valid]))) \
        if valid.any() else 0.0
    target = 1.0 - np.asarray(gt_sky_mask, dtype=np.float64)
    o = np.clip(pred.opacity, 0.0, 1.0)
    sky = float(-np.mean(target * np.log(np.maximum(o, LOG_EPS))
                         + (1.0 - target) * np.log(np.maximum(1.0 - o, LOG_EPS))))
    return LossReport.from_terms(rgb, depth, sky, config)


# ---------------------------------------------------------------- training


class _RayPool:
    """All supervised rays of the training frames, flattened for sampling."""

    def __init__(self, scene, rig: Rig, config: TrainConfig):
        frames = scene.train_frames if config.exclude_key_frames else scene.frames
        if not frames:
            raise ValueError("empty scene: no training frames")
        origins, dirs, rgbs, depths, skys, times = [], [], [], [], [], []
        for frame in frames:
            for cam in rig.cameras:
                key = (frame.index, cam.channel)
                if key not in scene.images:
                    continue
                o, d = camera_rays(cam, frame.ego_pose, config.near, config.far)
                origins.append(o)
                dirs.append(d)
                rgbs.append(scene.images[key].reshape(-1, 3))
                dm = scene.depth_maps.get(key)
                depths.append(np.full(len(o), np.nan) if dm is None
                              else dm.reshape(-1))
                sm = scene.sky_masks.get(key)
                skys.append(np.full(len(o), np.nan) if sm is None
                            else 1.0 - sm.reshape(-1))
                times.append(np.full(len(o), frame.time))
        if not origins:
            raise ValueError("empty scene: no images to train on")
        self.origins = np.concatenate(origins)
        self.dirs = np.concatenate(dirs)
        self.rgb = np.concatenate(rgbs)
        self.depth = np.concatenate(depths)
        self.sky_target = np.concatenate(skys)
        self.time = np.concatenate(times)

    def __len__(self):
        return len(self.origins)


class _PatchPool:
    """Aligned square patches for upsample-mode training."""

    def __init__(self, scene, rig: Rig, config: TrainConfig):
        frames = scene.train_frames if config.exclude_key_frames else scene.frames
        if not frames:
            raise ValueError("empty scene: no training frames")
        self.entries = []  # (frame, cam, row0, col0) in full-res pixels
        p = config.patch_size
        for frame in frames:
            for cam in rig.cameras:
                if (frame.index, cam.channel) not in scene.images:
                    continue
                k = cam.intrinsics
                for r0 in range(0, k.height - p + 1, p):
                    for c0 in range(0, k.width - p + 1, p):
                        self.entries.append((frame, cam, r0, c0))
        if not self.entries:
            raise ValueError("empty scene: no patches to train on")
        self.scene = scene


def _train_step_direct(model, pool: _RayPool, config: TrainConfig, it: int):
    rng = np.random.default_rng([config.seed, it])
    pick = rng.integers(0, len(pool), size=config.rays_per_batch)
    depths = stratified_depths(config.near, config.far,
                               config.rays_per_batch,
                               config.samples_per_ray, rng)
    _, feature, depth, opacity = render_rays(
        model, pool.origins[pick], pool.dirs[pick], pool.time[pick], depths,
        config.near, config.far)
    rgb = rgb_direct(model, feature)
    return loss_terms(rgb, pool.rgb[pick], depth, pool.depth[pick],
                      opacity, pool.sky_target[pick])


def _train_step_patch(model, pool: _PatchPool, config: TrainConfig, it: int):
    rng = np.random.default_rng([config.seed, it])
    s = config.upsample_factor
    low = config.patch_size // s
    n_patches = max(1, config.rays_per_batch // (low * low))
    picks = rng.integers(0, len(pool.entries), size=n_patches)
    rgb_terms, depth_terms, sky_terms = [], [], []
    for e in picks:
        frame, cam, r0, c0 = pool.entries[e]
        lowcam = _scaled_camera(cam, s)
        rows, cols = np.meshgrid(np.arange(low) + r0 // s,
                                 np.arange(low) + c0 // s, indexing="ij")
        us, vs = cols.reshape(-1) + 0.5, rows.reshape(-1) + 0.5
        origins, dirs = _rays_for_pixels(lowcam, frame.ego_pose, us, vs,
                                         config.near, config.far)
        depths = stratified_depths(config.near, config.far, len(origins),
                                   config.samples_per_ray, rng)
        _, feature, depth, opacity = render_rays(
            model, origins, dirs, np.full(len(origins), frame.time), depths,
            config.near, config.far)
        feature = feature.reshape(low, low, -1)
        opacity_img = opacity.reshape(low, low)
        rgb = rgb_upsample(model, feature, opacity_img, s)
        scene = pool.scene
        key = (frame.index, cam.channel)
        gt_rgb = scene.images[key][r0:r0 + config.patch_size,
                                   c0:c0 + config.patch_size]
        half = s // 2
        dm = scene.depth_maps.get(key)
        gt_depth = (np.full(low * low, np.nan) if dm is None else
                    dm[r0 + half:r0 + config.patch_size:s,
                       c0 + half:c0 + config.patch_size:s].reshape(-1))
        sm = scene.sky_masks.get(key)
        sky_target = (np.full(low * low, np.nan) if sm is None else
                      1.0 - sm[r0 + half:r0 + config.patch_size:s,
                               c0 + half:c0 + config.patch_size:s].reshape(-1))
        terms = loss_terms(rgb.reshape(-1, 3), gt_rgb.reshape(-1, 3),
                           depth, gt_depth, opacity, sky_target)
        rgb_terms.append(terms[0])
        depth_terms.append(terms[1])
        sky_terms.append(terms[2])
    return (torch.stack(rgb_terms).mean(), torch.stack(depth_terms).mean(),
            torch.stack(sky_terms).mean())


def _rays_for_pixels(cam: Camera, ego_pose: Pose, us, vs, near, far):
    origins = np.empty((len(us), 3))
    dirs = np.empty((len(us), 3))
    for i, (u, v) in enumerate(zip(us, vs)):
        ray = pixel_to_ray(cam, float(u), float(v), ego_pose, near, far)
        origins[i] = ray.origin
        dirs[i] = ray.direction
    return origins, dirs


def train_scene(scene, rig: Rig | None = None,
                config: TrainConfig = TrainConfig(),
                model_config: SceneModelConfig | None = None,
                log_path=None) -> tuple[SceneModel, list[LossReport]]:
    """Fit a scene model to one split; deterministic in config.seed.

    Returns the trained model and the per-iteration loss log.  The model's
    extras record the rig and frame metadata so a checkpoint is renderable
    on its own.
    """
    rig = rig if rig is not None else scene.rig
    if not scene.frames:
        raise ValueError("empty scene: no frames")
    t0, t1 = scene.time_range
    if not t1 > t0:
        t1 = t0 + 1.0
    extras = {
        "rig": rig_to_config(rig),
        "frames": [{"index": f.index, "time": f.time,
                    "is_key_frame": f.is_key_frame,
                    "ego_pose": pose_to_json(f.ego_pose)}
                   for f in scene.frames],
    }
    model = SceneModel(model_config or SceneModelConfig(), scene.tracks,
                       scene.aabb, (t0, t1), seed=config.seed, extras=extras)
    if config.iterations == 0:
        return model, []

    pool = (_PatchPool(scene, rig, config) if config.mode == "upsample"
            else _RayPool(scene, rig, config))
    params = model.param_vector()
    state = init_adam(params, lr=config.lr)
    log: list[LossReport] = []
    for it in range(config.iterations):
        model.zero_grads()
        if config.mode == "upsample":
            rgb, depth, sky = _train_step_patch(model, pool, config, it)
        else:
            rgb, depth, sky = _train_step_direct(model, pool, config, it)
        total = (config.lambda_rgb * rgb + config.lambda_depth * depth
                 + config.lambda_sky * sky)
        if not math.isfinite(float(total.detach())):
            raise RuntimeError(f"non-finite loss at iteration {it}")
        total.backward()
        grads = model.grad_vector()
        lr = exponential_lr(config.lr, config.lr_decay, it)
        params, state = adam_step(params, grads, state, lr=lr)
        model.load_param_vector(params)
        log.append(LossReport.from_terms(
            float(rgb.detach()), float(depth.detach()), float(sky.detach()),
            config))
    if log_path is not None:
        write_training_log(log, log_path)
    return model, log


def write_training_log(log: Sequence[LossReport], path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["iteration", "rgb_loss", "depth_loss", "sky_loss",
                         "total"])
        for i, row in enumerate(log):
            writer.writerow([i, repr(row.rgb_loss), repr(row.depth_loss),
                             repr(row.sky_loss), repr(row.total)])
