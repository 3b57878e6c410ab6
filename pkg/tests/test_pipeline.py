import dataclasses
import json
import hashlib
from pathlib import Path

import numpy as np
import pytest

from rerig.dataset import load_scene, read_tables, rig_from_tables
from rerig.fields import HashGridConfig, SceneModelConfig, load_checkpoint
from rerig.geometry import (
    Camera,
    CameraIntrinsics,
    Rig,
    RigShift,
    default_rig,
    shift_rig,
)
from rerig.pipeline import (
    AdaptationManifest,
    PipelineConfig,
    QualityReport,
    adapt_dataset,
    adapt_scene,
    load_pipeline_config,
    pipeline_config_from_dict,
)
from rerig.renderer import TrainConfig
from rerig.worldgen import WorldGenConfig, export_dual_rig_dataset, generate_world

SHIFT = RigShift(dz=0.50, d_long=0.90, d_lat=0.20)


def small_rig() -> Rig:
    """Front and back cameras of the stock rig, shrunk to 32x24."""
    base = default_rig()
    intr = CameraIntrinsics(fx=18.0, fy=18.0, cx=16.0, cy=12.0,
                            width=32, height=24)
    cams = tuple(Camera(ch, intr, base.camera(ch).pose_in_ego)
                 for ch in ("CAM_BACK", "CAM_FRONT"))
    return Rig("small", cams)


def tiny_model_config() -> SceneModelConfig:
    return SceneModelConfig(
        env_grid=HashGridConfig(levels=2, table_size=2 ** 10),
        actor_static_grid=HashGridConfig(levels=2, table_size=2 ** 8, input_dims=3),
        actor_dynamic_grid=HashGridConfig(levels=2, table_size=2 ** 8, input_dims=4),
        hidden=16,
    )


def fast_config(iterations=40, psnr_min=4.0, ssim_min=-1.0) -> PipelineConfig:
    train = TrainConfig(iterations=iterations, rays_per_batch=128,
                        samples_per_ray=8, near=0.1, far=45.0, seed=3)
    return PipelineConfig(train=train, gate_psnr_min=psnr_min,
                          gate_ssim_min=ssim_min)


def tree_digest(root: Path) -> str:
    h = hashlib.sha256()
    for path in sorted(root.rglob("*")):
        if path.is_file():
            h.update(str(path.relative_to(root)).encode())
            h.update(path.read_bytes())
    return h.hexdigest()


@pytest.fixture(scope="module")
def source_root(tmp_path_factory):
    world = generate_world(7, WorldGenConfig(
        extent=30.0, n_static_boxes=3, actor_classes=("Car", "Human"),
        n_actors=2, duration=2.0, frame_rate=2.0))
    root = tmp_path_factory.mktemp("pipeline-data")
    export_dual_rig_dataset(world, small_rig(), SHIFT, root, key_stride=2)
    return root / "sim-SUV"


@pytest.fixture(scope="module")
def scene(source_root):
    return load_scene(source_root)


class TestPipelineConfig:
    def test_defaults(self):
        cfg = PipelineConfig()
        assert cfg.gate_psnr_min == 20.0
        assert cfg.gate_ssim_min == 0.6
        assert cfg.train.iterations == 1500

    def test_dotted_keys(self):
        cfg = pipeline_config_from_dict({
            "gate.psnr_min": 11.0, "gate.ssim_min": 0.25,
            "train.iterations": 9, "train.lr": 0.5,
            "train.mode": "upsample", "train.upsample_factor": 2})
        assert cfg.gate_psnr_min == 11.0
        assert cfg.gate_ssim_min == 0.25
        assert cfg.train.iterations == 9
        assert cfg.train.lr == 0.5
        assert cfg.train.mode == "upsample"
        assert cfg.train.rays_per_batch == TrainConfig().rays_per_batch

    @pytest.mark.parametrize("key", ["gate.bogus", "trainiterations",
                                     "train.bogus", "other.lr"])
    def test_unknown_key_rejected(self, key):
        with pytest.raises(ValueError, match="unknown config key"):
            pipeline_config_from_dict({key: 1})

    def test_load_from_file(self, tmp_path):
        path = tmp_path / "cfg.json"
        path.write_text(json.dumps({"train.iterations": 3, "gate.psnr_min": 2}))
        cfg = load_pipeline_config(path)
        assert cfg.train.iterations == 3
        assert cfg.gate_psnr_min == 2.0


class TestQualityReport:
    def make(self, psnrs, ssims, psnr_min=20.0, ssim_min=0.6):
        per = {(i, "CAM_FRONT"): {"psnr": p, "ssim": s}
               for i, (p, s) in enumerate(zip(psnrs, ssims))}
        return QualityReport(per_image=per,
                             mean_psnr=sum(psnrs) / len(psnrs),
                             min_psnr=min(psnrs),
                             mean_ssim=sum(ssims) / len(ssims),
                             min_ssim=min(ssims),
                             psnr_min=psnr_min, ssim_min=ssim_min)

    def test_pass_requires_both_means(self):
        assert self.make([25, 25], [0.7, 0.7]).passed
        assert not self.make([15, 15], [0.7, 0.7]).passed
        assert not self.make([25, 25], [0.5, 0.5]).passed
        # thresholds are inclusive
        assert self.make([20, 20], [0.6, 0.6]).passed

    def test_mean_not_min_decides(self):
        report = self.make([10, 40], [0.2, 1.0])
        assert report.mean_psnr == 25.0
        assert report.min_psnr == 10.0
        assert report.passed

    def test_compute_on_identical_images(self):
        rng = np.random.default_rng(0)
        image = rng.uniform(size=(24, 32, 3))
        report = QualityReport.compute({(0, "CAM_FRONT"): image},
                                       {(0, "CAM_FRONT"): image})
        assert report.mean_psnr == float("inf")
        assert report.mean_ssim == pytest.approx(1.0, abs=1e-9)
        assert report.passed

    def test_compute_requires_overlap(self):
        with pytest.raises(ValueError, match="overlap"):
            QualityReport.compute({(0, "A"): np.zeros((24, 32, 3))},
                                  {(1, "B"): np.zeros((24, 32, 3))})

    def test_json_round_trip(self):
        report = self.make([18.5, 31.25], [0.55, 0.9], psnr_min=12.0)
        clone = QualityReport.from_json(json.loads(json.dumps(report.to_json())))
        assert clone == report
        assert clone.passed == report.passed

    def test_json_round_trip_with_infinite_psnr(self):
        report = self.make([float("inf"), 30.0], [1.0, 1.0])
        clone = QualityReport.from_json(json.loads(json.dumps(report.to_json())))
        assert clone.mean_psnr == float("inf")


@pytest.fixture(scope="module")
def identity_result(scene):
    return adapt_scene(scene, scene.rig, config=fast_config(),
                       model_config=tiny_model_config())


class TestAdaptScene:
    def test_gate_passes(self, identity_result):
        assert identity_result.report.passed
        assert identity_result.report.mean_psnr >= 4.0

    def test_zero_iterations_rejected(self, scene):
        with pytest.raises(ValueError, match="at least one training iteration"):
            adapt_scene(scene, scene.rig, config=fast_config(iterations=0))

    def test_identity_rig_renders_match_bitwise(self, identity_result):
        novel = identity_result.novel_renders
        assert novel is not None
        assert set(novel) == set(identity_result.original_renders)
        for key, render in novel.items():
            original = identity_result.original_renders[key]
            assert np.array_equal(render.rgb, original.rgb)
            assert np.array_equal(render.depth, original.depth)
            assert np.array_equal(render.opacity, original.opacity)

    def test_every_frame_and_camera_rendered(self, scene, identity_result):
        expected = {(f.index, ch) for f in scene.frames
                    for ch in scene.rig.channels}
        assert set(identity_result.original_renders) == expected
        assert set(identity_result.novel_renders) == expected

    def test_report_covers_exactly_the_key_frames(self, scene, identity_result):
        expected = {(f.index, ch) for f in scene.key_frames
                    for ch in scene.rig.channels}
        assert set(identity_result.report.per_image) == expected

    def test_gate_failure_skips_novel_renders(self, scene):
        result = adapt_scene(scene, scene.rig,
                             config=fast_config(iterations=8, psnr_min=99.0),
                             model_config=tiny_model_config())
        assert not result.report.passed
        assert result.novel_renders is None
        key_only = {(f.index, ch) for f in scene.key_frames
                    for ch in scene.rig.channels}
        assert set(result.original_renders) == key_only

    def test_gate_rerun_on_stored_report_is_deterministic(self, scene,
                                                          identity_result):
        report = identity_result.report
        # the gate is a pure function of the stored numbers
        clone = QualityReport.from_json(json.loads(json.dumps(report.to_json())))
        assert clone.passed == report.passed
        assert clone.per_image == report.per_image
        # and recomputing the scores from the saved renders changes nothing
        renders = {k: identity_result.original_renders[k]
                   for k in report.per_image}
        reference = {k: scene.images[k] for k in report.per_image}
        recomputed = QualityReport.compute(renders, reference,
                                           report.psnr_min, report.ssim_min)
        assert recomputed == report


@pytest.fixture(scope="module")
def adapted(source_root, tmp_path_factory):
    out = tmp_path_factory.mktemp("adapted")
    before = tree_digest(source_root)
    manifest = adapt_dataset(source_root, SHIFT, out, config=fast_config(),
                             model_config=tiny_model_config())
    return {"out": out, "manifest": manifest, "source_digest_before": before}


class TestAdaptDataset:
    def test_scene_rendered_and_splits_recorded(self, adapted):
        manifest = adapted["manifest"]
        assert len(manifest.scenes) == 1
        (entry,) = manifest.scenes.values()
        assert entry["status"] == "rendered"
        assert set(manifest.splits) == {"nerf-SUV", "nerf-SUB"}
        for path in manifest.splits.values():
            assert Path(path).is_dir()

    def test_source_directory_untouched(self, adapted, source_root):
        assert tree_digest(source_root) == adapted["source_digest_before"]

    def test_annotations_copied_byte_identically(self, adapted, source_root):
        for name in ("scene", "sample", "ego_pose", "sample_annotation",
                     "category", "sample_data"):
            src = (source_root / "v1.0" / f"{name}.json").read_bytes()
            for split in ("nerf-SUV", "nerf-SUB"):
                out = adapted["out"] / split / "v1.0" / f"{name}.json"
                assert out.read_bytes() == src, f"{name} differs in {split}"

    def test_novel_calibration_is_the_shifted_rig(self, adapted, source_root):
        src_tables = read_tables(source_root)
        sub_tables = read_tables(adapted["out"] / "nerf-SUB")
        expected = shift_rig(rig_from_tables(src_tables), SHIFT)
        actual = rig_from_tables(sub_tables)
        for ch in expected.channels:
            want, got = expected.camera(ch), actual.camera(ch)
            assert np.array_equal(got.pose_in_ego.translation,
                                  want.pose_in_ego.translation)
            assert np.array_equal(got.pose_in_ego.rotation,
                                  want.pose_in_ego.rotation)
            assert got.intrinsics == want.intrinsics
        # tokens are preserved so sample_data links survive
        assert ({c.token for c in sub_tables.calibrated_sensor}
                == {c.token for c in src_tables.calibrated_sensor})

    def test_original_calibration_unchanged(self, adapted, source_root):
        src = (source_root / "v1.0" / "calibrated_sensor.json").read_bytes()
        suv = (adapted["out"] / "nerf-SUV" / "v1.0"
               / "calibrated_sensor.json").read_bytes()
        assert suv == src

    def test_outputs_load_as_scenes(self, adapted, source_root):
        src = load_scene(source_root)
        for split in ("nerf-SUV", "nerf-SUB"):
            out = load_scene(adapted["out"] / split)
            assert len(out.frames) == len(src.frames)
            assert [f.is_key_frame for f in out.frames] == \
                [f.is_key_frame for f in src.frames]
            assert set(out.images) == set(src.images)
            assert set(out.sky_masks) == set(src.images)
            for key, image in out.images.items():
                assert image.shape == src.images[key].shape
            for idx, pts in src.lidar_points.items():
                assert np.array_equal(out.lidar_points[idx], pts)

    def test_checkpoint_saved_and_loadable(self, adapted):
        (entry,) = adapted["manifest"].scenes.values()
        model = load_checkpoint(entry["checkpoint"])
        assert model.extras["frames"]

    def test_quality_side_by_sides_written(self, adapted, source_root):
        scene = load_scene(source_root)
        frame = scene.key_frames[0]
        path = adapted["out"] / "quality" / "CAM_FRONT" / f"{frame.index:04d}.ppm"
        assert path.exists()
        header = path.read_bytes().split(b"\n", 2)
        width, height = header[1].split()
        assert int(width) == 2 * scene.rig.camera("CAM_FRONT").intrinsics.width
        assert int(height) == scene.rig.camera("CAM_FRONT").intrinsics.height

    def test_manifest_round_trips(self, adapted):
        manifest = adapted["manifest"]
        raw = json.loads((adapted["out"] / "manifest.json").read_text())
        clone = AdaptationManifest.from_json(raw)
        assert clone.source == manifest.source
        assert clone.shift == SHIFT
        assert clone.scenes == manifest.scenes
        assert clone.splits == manifest.splits

    def test_gated_run_writes_no_splits(self, source_root, tmp_path):
        out = tmp_path / "gated"
        manifest = adapt_dataset(source_root, SHIFT, out,
                                 config=fast_config(iterations=8, psnr_min=99.0),
                                 model_config=tiny_model_config())
        (entry,) = manifest.scenes.values()
        assert entry["status"] == "gated"
        assert entry["report"]["passed"] is False
        assert manifest.splits == {}
        assert not (out / "nerf-SUV").exists()
        assert not (out / "nerf-SUB").exists()
        assert Path(entry["checkpoint"]).exists()
        assert (out / "manifest.json").exists()
