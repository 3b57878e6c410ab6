import hashlib
import json
import math
from pathlib import Path

import numpy as np
import pytest

from rerig.dataset import load_scene, read_tables
from rerig.geometry import (
    Camera,
    CameraIntrinsics,
    Pose,
    RigShift,
    box_local_coords,
    default_rig,
    interpolate_track,
    quat_to_matrix,
)
from rerig.worldgen import (
    CLASS_SIZES,
    LidarPattern,
    PlacementError,
    WorldGenConfig,
    export_dual_rig_dataset,
    generate_world,
    ground_albedo,
    load_world,
    oracle_render,
    sample_lidar,
    save_world,
    sky_color,
    world_from_json,
    world_to_json,
)

SMALL = WorldGenConfig(extent=30.0, n_static_boxes=4, n_actors=3,
                       duration=2.0, frame_rate=2.0)


def down_camera(height=1.6, fx=5000.0):
    # optical z points at world -z (180 degree roll about the x axis)
    intr = CameraIntrinsics(fx=fx, fy=fx, cx=32.0, cy=24.0, width=64, height=48)
    return Camera("CAM_DOWN", intr,
                  Pose(np.array([0.0, 1.0, 0.0, 0.0]), np.array([0.0, 0.0, height])))


class TestConfig:
    def test_defaults_give_twenty_frames(self):
        cfg = WorldGenConfig()
        assert cfg.n_frames == 20
        np.testing.assert_allclose(np.diff(cfg.frame_times()), 0.5)

    def test_bad_values_rejected(self):
        with pytest.raises(ValueError, match="positive"):
            WorldGenConfig(extent=0.0)
        with pytest.raises(ValueError, match="cover every"):
            WorldGenConfig(actor_classes=("Car", "Bus"), n_actors=1)
        with pytest.raises(ValueError, match="unknown actor classes"):
            WorldGenConfig(actor_classes=("Tram",))
        with pytest.raises(ValueError, match="ambient"):
            WorldGenConfig(ambient=1.5)


class TestGenerate:
    def test_same_seed_is_bit_identical(self):
        a = json.dumps(world_to_json(generate_world(5, SMALL)), sort_keys=True)
        b = json.dumps(world_to_json(generate_world(5, SMALL)), sort_keys=True)
        assert a == b

    def test_different_seeds_differ(self):
        a = json.dumps(world_to_json(generate_world(1, SMALL)), sort_keys=True)
        b = json.dumps(world_to_json(generate_world(2, SMALL)), sort_keys=True)
        assert a != b

    def test_every_configured_class_present(self):
        world = generate_world(7, SMALL)
        present = {a.class_name for a in world.actors}
        assert set(SMALL.actor_classes) <= present

    def test_actors_stay_inside_extent_all_frames(self):
        for seed in range(6):
            world = generate_world(seed, SMALL)
            for actor in world.actors:
                for _, pose in actor.keyframes:
                    assert abs(pose.translation[0]) <= world.extent
                    assert abs(pose.translation[1]) <= world.extent

    def test_no_actor_box_intersection_at_start(self):
        world = generate_world(11, SMALL)
        for actor in world.actors:
            pose = interpolate_track(actor, 0.0)
            half = np.asarray(actor.size) / 2.0
            corners = np.array([[sx, sy, sz] for sx in (-1, 1)
                                for sy in (-1, 1) for sz in (-1, 1)]) * half
            rot = quat_to_matrix(pose.rotation)
            corners = corners @ rot.T + pose.translation
            for box in world.static_boxes:
                _, inside = box_local_coords(box.pose, box.size, corners)
                assert not inside.any()
                _, inside = box_local_coords(pose, actor.size,
                                             box.pose.translation[None, :])
                assert not inside.any()

    def test_boxes_clear_the_ego_corridor(self):
        world = generate_world(3, SMALL)
        for box in world.static_boxes:
            circ = math.hypot(box.size[0], box.size[1]) / 2.0
            assert abs(box.pose.translation[1]) >= 4.0 + circ - 1e-9

    def test_infeasible_box_layout_raises(self):
        # corridor clearance plus the minimum box footprint cannot fit in x/y
        cfg = WorldGenConfig(extent=6.0, n_static_boxes=1, n_actors=3,
                             duration=2.0, max_retries=50)
        with pytest.raises(PlacementError, match="static box"):
            generate_world(0, cfg)

    def test_infeasible_actor_layout_raises(self):
        # a bus cannot keep clear of the ego anywhere in a 12 m half-extent
        cfg = WorldGenConfig(extent=12.0, n_static_boxes=0, duration=2.0,
                             actor_classes=("Bus",), n_actors=1, max_retries=50)
        with pytest.raises(PlacementError, match="actor"):
            generate_world(0, cfg)

    def test_ego_path_must_fit_the_map(self):
        cfg = WorldGenConfig(extent=8.0, ego_speed=5.0, duration=9.5)
        with pytest.raises(ValueError, match="ego path"):
            generate_world(0, cfg)

    def test_ego_path_straight_and_level(self):
        world = generate_world(9, SMALL)
        ys = [p.translation[1] for _, p in world.ego_keyframes]
        zs = [p.translation[2] for _, p in world.ego_keyframes]
        assert ys == [0.0] * len(ys) and zs == [0.0] * len(zs)
        xs = [p.translation[0] for _, p in world.ego_keyframes]
        assert all(b > a for a, b in zip(xs, xs[1:]))


class TestSkyAndGround:
    def test_gradient_endpoints(self):
        world = generate_world(4, SMALL)
        away = -world.sun_direction  # guaranteed outside the sun disk
        horizon_dir = np.array([away[0], away[1], 0.0])
        horizon_dir /= np.linalg.norm(horizon_dir)
        np.testing.assert_allclose(sky_color(world, horizon_dir)[0],
                                   world.horizon_color, atol=1e-12)
        if world.sun_direction[2] < world.sun_cos_radius:
            np.testing.assert_allclose(sky_color(world, [0.0, 0.0, 1.0])[0],
                                       world.zenith_color, atol=1e-12)

    def test_sun_disk(self):
        world = generate_world(4, SMALL)
        np.testing.assert_array_equal(sky_color(world, world.sun_direction)[0],
                                      world.sun_color)

    def test_checker_parity(self):
        world = generate_world(4, SMALL)
        cs = world.checker_size
        a = ground_albedo(world, [0.1, 0.1])[0]
        b = ground_albedo(world, [cs + 0.1, 0.1])[0]
        c = ground_albedo(world, [cs + 0.1, cs + 0.1])[0]
        assert not np.array_equal(a, b)
        np.testing.assert_array_equal(a, c)


class TestOracleRender:
    def test_down_camera_depth_is_height(self):
        world = generate_world(6, SMALL)
        rgb, depth, sky = oracle_render(world, down_camera(1.6), Pose.identity(), 0.0)
        assert sky.max() == 0.0
        np.testing.assert_allclose(depth, 1.6, atol=1e-3)  # narrow fov

    def test_depth_times_vertical_cosine_is_height(self):
        # wide fov: ray length times |d_z| recovers the plane distance exactly
        world = generate_world(6, WorldGenConfig(extent=30.0, n_static_boxes=0,
                                                 n_actors=3, duration=2.0))
        cam = down_camera(2.5, fx=30.0)
        from rerig.geometry import camera_rays
        _, dirs = camera_rays(cam, Pose.identity(), 0.1, 100.0)
        _, depth, sky = oracle_render(world, cam, Pose.identity(), 0.0)
        hit = sky.ravel() == 0.0
        np.testing.assert_allclose(depth.ravel()[hit] * -dirs[hit, 2], 2.5,
                                   atol=1e-9)

    def test_up_camera_sees_only_sky(self):
        world = generate_world(6, SMALL)
        intr = CameraIntrinsics(fx=35.0, fy=35.0, cx=32.0, cy=24.0,
                                width=64, height=48)
        up = Camera("CAM_UP", intr,
                    Pose(np.array([1.0, 0.0, 0.0, 0.0]), np.array([0.0, 0.0, 5.0])))
        rgb, depth, sky = oracle_render(world, up, Pose.identity(), 0.0)
        assert sky.min() == 1.0
        assert np.all(np.isinf(depth))
        from rerig.geometry import camera_rays
        _, dirs = camera_rays(up, Pose.identity(), 0.1, 100.0)
        np.testing.assert_allclose(rgb.reshape(-1, 3), sky_color(world, dirs),
                                   atol=1e-12)

    def test_reintersection_within_tolerance(self):
        world = generate_world(8, SMALL)
        rig = default_rig()
        for t in (0.0, 1.0):
            ego = world.ego_pose_at(t)
            for ch in ("CAM_FRONT", "CAM_BACK_LEFT"):
                cam = rig.camera(ch)
                from rerig.geometry import camera_rays
                origins, dirs = camera_rays(cam, ego, 0.1, 100.0)
                _, depth, sky = oracle_render(world, cam, ego, t)
                hit = np.isfinite(depth.ravel())
                pts = origins[hit] + depth.ravel()[hit, None] * dirs[hit]
                err = np.full(len(pts), np.inf)
                err = np.minimum(err, np.abs(pts[:, 2]))  # ground plane
                surfaces = [(b.pose, b.size) for b in world.static_boxes]
                surfaces += [(interpolate_track(a, t), a.size)
                             for a in world.actors]
                for pose, size in surfaces:
                    coords, _ = box_local_coords(pose, size, pts)
                    half = np.asarray(size) / 2.0
                    # distance to the box shell in Chebyshev-normalized form
                    shell = np.abs(np.max(np.abs(coords), axis=1) - 1.0)
                    shell *= half.min()  # lower bound on metric distance
                    err = np.minimum(err, shell)
                assert err.max() < 1e-6

    def test_lambertian_shading_bounds(self):
        world = generate_world(8, SMALL)
        rgb, _, sky = oracle_render(world, default_rig().camera("CAM_FRONT"),
                                    world.ego_pose_at(0.0), 0.0)
        assert rgb.min() >= 0.0 and rgb.max() <= 1.0


class TestLidar:
    def test_single_downward_beam(self):
        world = generate_world(6, SMALL)
        pattern = LidarPattern(beams=1, azimuth_steps=1, max_range=10.0,
                               elevation_min_deg=-90.0, elevation_max_deg=-90.0)
        pts, prov = sample_lidar(world, Pose.identity(), 0.0, pattern)
        assert pts.shape == (1, 3)
        np.testing.assert_allclose(pts[0], [0.0, 0.0, 0.0], atol=1e-9)
        dist = np.linalg.norm(pts[0] - np.array([0.0, 0.0, 1.8]))
        assert dist == pytest.approx(1.8, abs=1e-9)
        np.testing.assert_array_equal(prov, [[0, 0]])

    def test_upward_beams_return_nothing(self):
        cfg = WorldGenConfig(extent=20.0, n_static_boxes=0,
                             actor_classes=("Human",), n_actors=1)
        world = generate_world(2, cfg)
        pattern = LidarPattern(beams=2, azimuth_steps=16, max_range=50.0,
                               elevation_min_deg=40.0, elevation_max_deg=60.0)
        pts, prov = sample_lidar(world, Pose.identity(), 0.0, pattern)
        assert pts.shape == (0, 3) and prov.shape == (0, 2)

    def test_provenance_reconstructs_rays(self):
        world = generate_world(6, SMALL)
        pattern = LidarPattern()
        ego = world.ego_pose_at(1.0)
        pts, prov = sample_lidar(world, ego, 1.0, pattern)
        assert len(pts) <= pattern.beams * pattern.azimuth_steps
        assert len(np.unique(prov, axis=0)) == len(prov)
        elev = np.radians(np.linspace(pattern.elevation_min_deg,
                                      pattern.elevation_max_deg, pattern.beams))
        origin = ego.translation + np.array([0.0, 0.0, 1.8])
        for p, (b, s) in zip(pts, prov):
            e = elev[b]
            a = s * 2 * math.pi / pattern.azimuth_steps
            d = np.array([math.cos(e) * math.cos(a),
                          math.cos(e) * math.sin(a), math.sin(e)])
            ray = (p - origin) / np.linalg.norm(p - origin)
            np.testing.assert_allclose(ray, d, atol=1e-9)
            assert np.linalg.norm(p - origin) <= pattern.max_range + 1e-9


class TestSerialization:
    def test_round_trip_bytes(self, tmp_path):
        world = generate_world(12, SMALL)
        save_world(world, tmp_path / "world.json")
        reloaded = load_world(tmp_path / "world.json")
        save_world(reloaded, tmp_path / "world2.json")
        assert (tmp_path / "world.json").read_bytes() \
            == (tmp_path / "world2.json").read_bytes()

    def test_round_trip_fields(self):
        world = generate_world(12, SMALL)
        back = world_from_json(world_to_json(world))
        assert back.seed == world.seed
        np.testing.assert_array_equal(back.sun_direction, world.sun_direction)
        assert len(back.static_boxes) == len(world.static_boxes)
        assert [a.actor_id for a in back.actors] \
            == [a.actor_id for a in world.actors]
        np.testing.assert_array_equal(
            back.actors[0].keyframes[0][1].translation,
            world.actors[0].keyframes[0][1].translation)


def tree_digest(root: Path) -> dict:
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file():
            out[str(p.relative_to(root))] = hashlib.sha256(p.read_bytes()).hexdigest()
    return out


@pytest.fixture(scope="module")
def exported(tmp_path_factory):
    out = tmp_path_factory.mktemp("dual")
    world = generate_world(21, SMALL)
    manifest = export_dual_rig_dataset(
        world, default_rig(), RigShift(0.50, 0.90, 0.20), out, key_stride=2)
    return world, out, manifest


class TestExport:
    def test_shared_tables_byte_identical(self, exported):
        _, out, _ = exported
        for name in ("scene", "sample", "ego_pose", "sample_annotation", "category"):
            a = (out / "sim-SUV" / "v1.0" / f"{name}.json").read_bytes()
            b = (out / "sim-SUB" / "v1.0" / f"{name}.json").read_bytes()
            assert a == b, name

    def test_calibration_heights_differ_by_half_meter(self, exported):
        _, out, _ = exported
        suv = json.loads((out / "sim-SUV" / "v1.0" / "calibrated_sensor.json").read_text())
        sub = json.loads((out / "sim-SUB" / "v1.0" / "calibrated_sensor.json").read_text())
        hs = {r["channel"]: r["translation"][2] for r in suv}
        hb = {r["channel"]: r["translation"][2] for r in sub}
        for ch in hs:
            assert hs[ch] - hb[ch] == pytest.approx(0.50, abs=1e-12)

    def test_six_camera_records_per_sample(self, exported):
        _, out, _ = exported
        for split in ("sim-SUV", "sim-SUB"):
            tables = read_tables(out / split)
            per_sample = {}
            for sd in tables.sample_data:
                per_sample[sd.sample_token] = per_sample.get(sd.sample_token, 0) + 1
            assert set(per_sample.values()) == {6}

    def test_loads_as_scene_with_key_frames(self, exported):
        world, out, _ = exported
        scene = load_scene(out / "sim-SUV")
        assert len(scene.frames) == world.n_frames == 5
        assert [f.is_key_frame for f in scene.frames] == [True, False, True, False, True]
        assert len(scene.tracks) == len(world.actors)
        assert sorted(scene.rig.channels) == sorted(default_rig().channels)

    def test_lidar_and_world_identical_across_splits(self, exported):
        _, out, _ = exported
        for name in ("lidar/0000.xyz", "lidar/0004.xyz", "world.json"):
            assert (out / "sim-SUV" / name).read_bytes() \
                == (out / "sim-SUB" / name).read_bytes()

    def test_visibility_fractions_sane(self, exported):
        _, out, _ = exported
        anns = json.loads(
            (out / "sim-SUV" / "v1.0" / "sample_annotation.json").read_text())
        values = [r["visibility"] for r in anns]
        assert all(0.0 <= v <= 1.0 for v in values)
        assert max(values) > 0.5

    def test_export_is_deterministic(self, exported, tmp_path):
        world, out, _ = exported
        export_dual_rig_dataset(world, default_rig(), RigShift(0.50, 0.90, 0.20),
                                tmp_path, key_stride=2)
        assert tree_digest(tmp_path) == tree_digest(out)

    def test_frame_subset(self, tmp_path):
        world = generate_world(21, SMALL)
        export_dual_rig_dataset(world, default_rig(), RigShift(0.50, 0.90, 0.20),
                                tmp_path, frames=[1, 3])
        scene = load_scene(tmp_path / "sim-SUV")
        assert len(scene.frames) == 2
        assert [f.timestamp for f in scene.frames] == [500000, 1500000]

    def test_annotation_boxes_match_world_tracks(self, exported):
        world, out, _ = exported
        tables = read_tables(out / "sim-SUB")
        by_instance = {}
        for ann in tables.sample_annotation:
            by_instance.setdefault(ann.instance_token, []).append(ann)
        for actor in world.actors:
            anns = by_instance[actor.actor_id]
            assert len(anns) == world.n_frames
            w, l, h = anns[0].size
            assert (l, w, h) == actor.size
            pose = interpolate_track(actor, 0.0)
            np.testing.assert_allclose(anns[0].translation, pose.translation,
                                       atol=1e-12)
