"""Scene adaptation workflow: train, quality-gate, re-render, export.

A source split is fitted with a scene model, the held-out key frames are
re-rendered through the original rig and scored against the captured images,
and only when that quality gate passes does the pipeline render the full
sequence through both the original rig and the shifted target rig, writing
them as new dataset splits whose annotations are copied byte for byte.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import DatasetTables, SceneData, load_scene, write_pgm, write_ppm, write_tables
from .fields import SceneModel, SceneModelConfig, save_checkpoint
from .geometry import Rig, RigShift, rig_to_config, shift_rig
from .metrics import psnr, ssim
from .renderer import RenderOutput, TrainConfig, render_image, train_scene

GATE_PSNR_MIN = 20.0
GATE_SSIM_MIN = 0.6


@dataclass(frozen=True)
class PipelineConfig:
    """Training settings plus the quality-gate thresholds."""

    train: TrainConfig = field(default_factory=TrainConfig)
    gate_psnr_min: float = GATE_PSNR_MIN
    gate_ssim_min: float = GATE_SSIM_MIN


def pipeline_config_from_dict(flat: dict) -> PipelineConfig:
    """Build a config from flat dotted keys: `gate.psnr_min`,
    `gate.ssim_min`, and `train.<field>` for any training field."""
    gate = {"psnr_min": GATE_PSNR_MIN, "ssim_min": GATE_SSIM_MIN}
    train_kwargs = {}
    train_fields = {f.name for f in dataclasses.fields(TrainConfig)}
    for key, value in flat.items():
        scope, _, name = key.partition(".")
        if scope == "gate" and name in gate:
            gate[name] = float(value)
        elif scope == "train" and name in train_fields:
            train_kwargs[name] = value
        else:
            raise ValueError(f"unknown config key {key!r}")
    return PipelineConfig(train=TrainConfig(**train_kwargs),
                          gate_psnr_min=gate["psnr_min"],
                          gate_ssim_min=gate["ssim_min"])


def load_pipeline_config(path) -> PipelineConfig:
    return pipeline_config_from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class QualityReport:
    """Per-image PSNR/SSIM of held-out original views plus aggregates.

    The gate is a pure threshold on the means: it passes exactly when
    mean_psnr >= psnr_min and mean_ssim >= ssim_min.
    """

    per_image: dict   # (frame_index, channel) -> {"psnr": ..., "ssim": ...}
    mean_psnr: float
    min_psnr: float
    mean_ssim: float
    min_ssim: float
    psnr_min: float
    ssim_min: float

    @property
    def passed(self) -> bool:
        return self.mean_psnr >= self.psnr_min and self.mean_ssim >= self.ssim_min

    @classmethod
    def compute(cls, rendered: dict, reference: dict,
                psnr_min: float = GATE_PSNR_MIN,
                ssim_min: float = GATE_SSIM_MIN) -> "QualityReport":
        keys = sorted(set(rendered) & set(reference))
        if not keys:
            raise ValueError("no overlapping images to grade")
        per_image = {}
        for key in keys:
            rgb = rendered[key].rgb if isinstance(rendered[key], RenderOutput) \
                else rendered[key]
            per_image[key] = {"psnr": psnr(rgb, reference[key]),
                              "ssim": ssim(rgb, reference[key])}
        p_values = [v["psnr"] for v in per_image.values()]
        s_values = [v["ssim"] for v in per_image.values()]
        return cls(per_image=per_image,
                   mean_psnr=sum(p_values) / len(p_values),
                   min_psnr=min(p_values),
                   mean_ssim=sum(s_values) / len(s_values),
                   min_ssim=min(s_values),
                   psnr_min=psnr_min, ssim_min=ssim_min)

    def to_json(self) -> dict:
        return {"per_image": {f"{f}/{ch}": v
                              for (f, ch), v in sorted(self.per_image.items())},
                "mean_psnr": self.mean_psnr, "min_psnr": self.min_psnr,
                "mean_ssim": self.mean_ssim, "min_ssim": self.min_ssim,
                "psnr_min": self.psnr_min, "ssim_min": self.ssim_min,
                "passed": self.passed}

    @classmethod
    def from_json(cls, obj: dict) -> "QualityReport":
        per_image = {}
        for key, v in obj["per_image"].items():
            frame, _, channel = key.partition("/")
            per_image[(int(frame), channel)] = dict(v)
        return cls(per_image=per_image, mean_psnr=obj["mean_psnr"],
                   min_psnr=obj["min_psnr"], mean_ssim=obj["mean_ssim"],
                   min_ssim=obj["min_ssim"], psnr_min=obj["psnr_min"],
                   ssim_min=obj["ssim_min"])


@dataclass(frozen=True)
class AdaptSceneResult:
    model: SceneModel
    log: list
    report: QualityReport
    original_renders: dict  # (frame_index, channel) -> RenderOutput
    novel_renders: dict | None  # None when the gate failed


def image_tag(frame_index: int, channel_rank: int) -> int:
    # one rng stream per rendered image, stable across rigs sharing channels
    return frame_index * 64 + channel_rank


def _render_rig(model, rig: Rig, frames, config: TrainConfig) -> dict:
    ranks = {ch: i for i, ch in enumerate(sorted(rig.channels))}
    out = {}
    for frame in frames:
        for cam in rig.cameras:
            out[(frame.index, cam.channel)] = render_image(
                model, cam, frame.ego_pose, frame.time, config,
                image_tag=image_tag(frame.index, ranks[cam.channel]))
    return out


def adapt_scene(scene: SceneData, target_rig: Rig,
                config: PipelineConfig = PipelineConfig(),
                model_config: SceneModelConfig | None = None,
                log_path=None) -> AdaptSceneResult:
    """Fit the scene, gate on held-out key frames, then render both rigs.

    The gate re-renders the key frames (excluded from training) through the
    scene's own rig and scores them against the captured images. On pass,
    every frame is rendered for the original rig and for target_rig at the
    same timestamps and ego poses; on failure novel_renders is None and the
    report carries the evidence. Raises on zero training iterations: an
    untrained model cannot be meaningfully gated.
    """
    if config.train.iterations <= 0:
        raise ValueError("adaptation requires at least one training iteration")
    model, log = train_scene(scene, config=config.train,
                             model_config=model_config, log_path=log_path)
    key_frames = scene.key_frames
    if not key_frames:
        raise ValueError("scene has no key frames to gate on")
    original = _render_rig(model, scene.rig, key_frames, config.train)
    reference = {k: scene.images[k] for k in original if k in scene.images}
    report = QualityReport.compute(original, reference,
                                   config.gate_psnr_min, config.gate_ssim_min)
    if not report.passed:
        return AdaptSceneResult(model=model, log=log, report=report,
                                original_renders=original, novel_renders=None)
    rest = [f for f in scene.frames if not f.is_key_frame]
    original.update(_render_rig(model, scene.rig, rest, config.train))
    novel = _render_rig(model, target_rig, scene.frames, config.train)
    return AdaptSceneResult(model=model, log=log, report=report,
                            original_renders=original, novel_renders=novel)


@dataclass
class AdaptationManifest:
    """Accounting for one adaptation run: where data came from, where the
    outputs live, and how each scene fared (rendered / gated / failed)."""

    source: str
    output: str
    shift: RigShift | None
    scenes: dict = field(default_factory=dict)
    splits: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        shift = None
        if self.shift is not None:
            shift = {"dz": self.shift.dz, "d_long": self.shift.d_long,
                     "d_lat": self.shift.d_lat}
        return {"source": self.source, "output": self.output, "shift": shift,
                "scenes": self.scenes, "splits": self.splits}

    @classmethod
    def from_json(cls, obj: dict) -> "AdaptationManifest":
        shift = obj.get("shift")
        if shift is not None:
            shift = RigShift(dz=shift["dz"], d_long=shift["d_long"],
                             d_lat=shift["d_lat"])
        return cls(source=obj["source"], output=obj["output"], shift=shift,
                   scenes=dict(obj.get("scenes", {})),
                   splits=dict(obj.get("splits", {})))

    def save(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True)
                        + "\n")


def _replaced_calibration(tables: DatasetTables, rig: Rig) -> tuple:
    by_channel = {cam.channel: cam for cam in rig.cameras}
    rows = []
    for rec in tables.calibrated_sensor:
        cam = by_channel[rec.channel]
        rows.append(dataclasses.replace(
            rec,
            translation=tuple(cam.pose_in_ego.translation.tolist()),
            rotation=tuple(cam.pose_in_ego.rotation.tolist())))
    return tuple(rows)


def _write_rendered_split(scene: SceneData, renders: dict, rig: Rig,
                          root: Path, split_name: str) -> None:
    tables = DatasetTables(
        scene=tuple(scene.tables.scene),
        sample=tuple(scene.tables.sample),
        sample_data=tuple(scene.tables.sample_data),
        ego_pose=tuple(scene.tables.ego_pose),
        calibrated_sensor=_replaced_calibration(scene.tables, rig),
        sample_annotation=tuple(scene.tables.sample_annotation),
        category=tuple(scene.tables.category))
    write_tables(tables, root)
    frame_by_token = {f.sample_token: f for f in scene.frames}
    for sd in scene.tables.sample_data:
        frame = frame_by_token[sd.sample_token]
        out = renders[(frame.index, sd.channel)]
        write_ppm(root / sd.filename, out.rgb)
        sky = (out.opacity < 0.5).astype(float)
        write_pgm(root / "sky" / sd.channel / f"{frame.index:04d}.pgm", sky)
    for frame in scene.frames:
        src = scene.root / "lidar" / f"{frame.index:04d}.xyz"
        if src.exists():
            dst = root / "lidar" / f"{frame.index:04d}.xyz"
            dst.parent.mkdir(parents=True, exist_ok=True)
            dst.write_bytes(src.read_bytes())
    world = scene.root / "world.json"
    if world.exists():
        (root / "world.json").write_bytes(world.read_bytes())


def adapt_dataset(src_root, rig_shift: RigShift, out_root,
                  config: PipelineConfig = PipelineConfig(),
                  model_config: SceneModelConfig | None = None,
                  split_names: tuple = ("nerf-SUV", "nerf-SUB")) -> AdaptationManifest:
    """Adapt one source split to a shifted rig, writing rendered twins.

    The original-view renders become split_names[0] and the shifted-rig
    renders split_names[1]; annotations, samples, and poses are copied
    unchanged, so only calibrated_sensor (and the pixels) differ from the
    source. Scenes that fail the quality gate or diverge in training are
    recorded in the manifest and produce no output splits. Gate frames are
    also written as side-by-side render/capture pairs under `quality/` so a
    borderline gate can be reviewed by eye. The source directory is never
    written to.
    """
    src_root = Path(src_root)
    out_root = Path(out_root)
    scene = load_scene(src_root)
    target_rig = shift_rig(scene.rig, rig_shift)
    manifest = AdaptationManifest(source=str(src_root), output=str(out_root),
                                  shift=rig_shift)
    token = scene.tables.scene[0].token
    try:
        result = adapt_scene(scene, target_rig, config=config,
                             model_config=model_config)
    except RuntimeError as exc:
        manifest.scenes[token] = {"status": "failed", "error": str(exc),
                                  "checkpoint": None, "report": None}
        manifest.save(out_root / "manifest.json")
        return manifest

    ckpt_path = out_root / "checkpoints" / f"{token}.ckpt"
    ckpt_path.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(result.model, ckpt_path)
    for (frame, channel), render in sorted(result.original_renders.items()):
        captured = scene.images.get((frame, channel))
        if captured is not None and (frame, channel) in result.report.per_image:
            pair = np.concatenate([render.rgb, captured], axis=1)
            write_ppm(out_root / "quality" / channel / f"{frame:04d}.ppm", pair)
    entry = {"status": "gated", "checkpoint": str(ckpt_path),
             "report": result.report.to_json(), "error": None}
    if result.report.passed:
        _write_rendered_split(scene, result.original_renders, scene.rig,
                              out_root / split_names[0], split_names[0])
        _write_rendered_split(scene, result.novel_renders, target_rig,
                              out_root / split_names[1], split_names[1])
        entry["status"] = "rendered"
        manifest.splits = {split_names[0]: str(out_root / split_names[0]),
                           split_names[1]: str(out_root / split_names[1])}
    manifest.scenes[token] = entry
    manifest.save(out_root / "manifest.json")
    return manifest
