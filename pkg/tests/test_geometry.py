import numpy as np
import pytest

from rerig.geometry import (
    ActorTrack,
    Camera,
    CameraIntrinsics,
    DegenerateRigError,
    Pose,
    Ray,
    Rig,
    RigShift,
    box_local_coords,
    camera_rays,
    compose,
    default_rig,
    interpolate_track,
    invert,
    load_rig,
    pixel_to_ray,
    project,
    project_points,
    quat_from_yaw,
    quat_multiply,
    quat_normalize,
    rig_from_config,
    rig_to_config,
    save_rig,
    shift_rig,
    transform_point,
    world_to_box_local,
)


def random_pose(rng):
    q = quat_normalize(rng.normal(size=4))
    return Pose(q, rng.normal(scale=5.0, size=3))


@pytest.fixture(scope="module")
def rig():
    return default_rig()


class TestPose:
    def test_identity_transform(self):
        p = transform_point(Pose.identity(), [1.0, 2.0, 3.0])
        np.testing.assert_allclose(p, [1.0, 2.0, 3.0])

    def test_pure_translation(self):
        pose = Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, -0.5]))
        np.testing.assert_allclose(transform_point(pose, [1.0, 0.0, 1.6]),
                                   [1.0, 0.0, 1.1])

    def test_round_trip_random(self):
        rng = np.random.default_rng(0)
        for _ in range(100):
            pose = random_pose(rng)
            p = rng.normal(size=3)
            back = transform_point(invert(pose), transform_point(pose, p))
            np.testing.assert_allclose(back, p, atol=1e-9)

    def test_compose_with_inverse_is_identity(self):
        rng = np.random.default_rng(1)
        for _ in range(50):
            pose = random_pose(rng)
            ident = compose(pose, invert(pose))
            np.testing.assert_allclose(ident.translation, 0.0, atol=1e-9)
            assert abs(abs(ident.rotation[0]) - 1.0) < 1e-9

    def test_quaternion_stays_unit(self):
        rng = np.random.default_rng(2)
        for _ in range(200):
            a, b = random_pose(rng), random_pose(rng)
            c = compose(a, b)
            assert abs(np.linalg.norm(c.rotation) - 1.0) < 1e-9

    def test_non_unit_quaternion_rejected(self):
        with pytest.raises(ValueError, match="not unit"):
            Pose(np.array([2.0, 0, 0, 0]), np.zeros(3))


class TestProjection:
    def test_principal_point(self, rig):
        cam = rig.camera("CAM_FRONT")
        k = cam.intrinsics
        # point 5 m along the optical axis, expressed in world coordinates
        p = transform_point(cam.pose_in_ego, [0.0, 0.0, 5.0])
        u, v, depth = project(cam, p, Pose.identity())
        assert (u, v) == pytest.approx((k.cx, k.cy))
        assert depth == pytest.approx(5.0)

    def test_behind_camera(self, rig):
        cam = rig.camera("CAM_FRONT")
        p = transform_point(cam.pose_in_ego, [0.0, 0.0, -1.0])
        assert project(cam, p, Pose.identity()) is None

    def test_axis_pixel_to_ray(self, rig):
        cam = rig.camera("CAM_FRONT")
        k = cam.intrinsics
        ray = pixel_to_ray(cam, k.cx, k.cy, Pose.identity(), 0.1, 10.0)
        # CAM_FRONT looks along ego +x
        np.testing.assert_allclose(ray.direction, [1.0, 0.0, 0.0], atol=1e-12)

    def test_corner_rays_distinct_unit(self, rig):
        cam = rig.camera("CAM_FRONT_LEFT")
        k = cam.intrinsics
        corners = [(0.0, 0.0), (k.width - 1e-6, 0.0),
                   (0.0, k.height - 1e-6), (k.width - 1e-6, k.height - 1e-6)]
        dirs = [pixel_to_ray(cam, u, v, Pose.identity(), 0.1, 10.0).direction
                for u, v in corners]
        for d in dirs:
            assert np.linalg.norm(d) == pytest.approx(1.0, abs=1e-9)
        for i in range(4):
            for j in range(i + 1, 4):
                assert np.linalg.norm(dirs[i] - dirs[j]) > 1e-3

    def test_out_of_bounds_pixel_rejected(self, rig):
        cam = rig.camera("CAM_FRONT")
        with pytest.raises(ValueError, match="outside"):
            pixel_to_ray(cam, -1.0, 5.0, Pose.identity(), 0.1, 10.0)

    def test_project_ray_round_trip(self, rig):
        rng = np.random.default_rng(3)
        ego = Pose(quat_normalize(rng.normal(size=4)), rng.normal(size=3))
        for cam in rig.cameras:
            k = cam.intrinsics
            for _ in range(25):
                u = rng.uniform(0, k.width)
                v = rng.uniform(0, k.height)
                d = rng.uniform(0.5, 40.0)
                ray = pixel_to_ray(cam, u, v, ego, 0.1, 100.0)
                p = ray.point_at(d)
                u2, v2, depth = project(cam, p, ego)
                assert abs(u2 - u) < 1e-6 and abs(v2 - v) < 1e-6
                # depth is the camera-frame z, not the marched distance
                assert depth <= d + 1e-9

    def test_project_points_matches_scalar(self, rig):
        rng = np.random.default_rng(4)
        cam = rig.camera("CAM_BACK_LEFT")
        ego = random_pose(rng)
        pts = rng.normal(scale=10.0, size=(50, 3))
        uv, z, valid = project_points(cam, pts, ego)
        for i, p in enumerate(pts):
            res = project(cam, p, ego)
            if res is None:
                assert not valid[i]
            else:
                assert valid[i]
                np.testing.assert_allclose(uv[i], res[:2], atol=1e-9)
                assert z[i] == pytest.approx(res[2])

    def test_camera_rays_match_pixel_to_ray(self, rig):
        cam = rig.camera("CAM_BACK")
        ego = Pose(quat_from_yaw(0.3), np.array([4.0, -2.0, 0.0]))
        origins, dirs = camera_rays(cam, ego, 0.1, 50.0)
        k = cam.intrinsics
        idx = 5 * k.width + 17
        ray = pixel_to_ray(cam, 17 + 0.5, 5 + 0.5, ego, 0.1, 50.0)
        np.testing.assert_allclose(origins[idx], ray.origin, atol=1e-12)
        np.testing.assert_allclose(dirs[idx], ray.direction, atol=1e-12)


class TestRigShift:
    def test_documented_front_camera_shift(self, rig):
        shifted = shift_rig(rig, RigShift(0.50, 0.90, 0.20))
        t = shifted.camera("CAM_FRONT").pose_in_ego.translation
        np.testing.assert_allclose(t, [1.25, 0.00, 1.10], atol=1e-12)

    def test_zero_shift_is_identity(self, rig):
        shifted = shift_rig(rig, RigShift(0.0, 0.0, 0.0))
        for a, b in zip(rig.cameras, shifted.cameras):
            np.testing.assert_array_equal(a.pose_in_ego.translation,
                                          b.pose_in_ego.translation)
            np.testing.assert_array_equal(a.pose_in_ego.rotation,
                                          b.pose_in_ego.rotation)

    def test_gap_deltas_recomputed_from_output(self, rig):
        shift = RigShift(0.50, 0.90, 0.20)
        shifted = shift_rig(rig, shift)

        def gaps(r):
            xs = np.array([c.pose_in_ego.translation[0] for c in r.cameras])
            ys = np.array([c.pose_in_ego.translation[1] for c in r.cameras])
            x_mid = 0.5 * (xs.max() + xs.min())
            y_mid = 0.5 * (ys.max() + ys.min())
            lon = xs[xs > x_mid].mean() - xs[xs < x_mid].mean()
            lat = ys[ys > y_mid].mean() - ys[ys < y_mid].mean()
            return lon, lat

        lon0, lat0 = gaps(rig)
        lon1, lat1 = gaps(shifted)
        assert lon0 - lon1 == pytest.approx(0.90, abs=1e-12)
        assert lat0 - lat1 == pytest.approx(0.20, abs=1e-12)
        for a, b in zip(rig.cameras, shifted.cameras):
            dz = a.pose_in_ego.translation[2] - b.pose_in_ego.translation[2]
            assert dz == pytest.approx(0.50, abs=1e-12)

    def test_intrinsics_and_order_unchanged(self, rig):
        shifted = shift_rig(rig, RigShift(0.50, 0.90, 0.20))
        assert shifted.channels == rig.channels
        for a, b in zip(rig.cameras, shifted.cameras):
            assert a.intrinsics == b.intrinsics  # bitwise-equal floats

    def test_degenerate_rig_rejected(self, rig):
        cams = [Camera(f"C{i}", rig.cameras[0].intrinsics,
                       Pose(np.array([1.0, 0, 0, 0]), np.array([1.0, float(i), 1.5])))
                for i in range(3)]
        with pytest.raises(DegenerateRigError):
            shift_rig(Rig("flat", tuple(cams)), RigShift(0.1, 0.2, 0.0))

    def test_height_must_stay_positive(self, rig):
        with pytest.raises(ValueError, match="height"):
            shift_rig(rig, RigShift(2.0, 0.0, 0.0))


class TestActorTrack:
    def make_track(self):
        kf = [(0.0, Pose(np.array([1.0, 0, 0, 0]), np.array([0.0, 0.0, 0.0]))),
              (2.0, Pose(quat_from_yaw(np.pi / 2), np.array([2.0, 0.0, 0.0])))]
        return ActorTrack("actor-1", "Car", (4.0, 2.0, 1.5), kf)

    def test_keyframe_exact(self):
        track = self.make_track()
        for t, pose in track.keyframes:
            got = interpolate_track(track, t)
            np.testing.assert_array_equal(got.translation, pose.translation)
            np.testing.assert_allclose(got.rotation, pose.rotation, atol=1e-15)

    def test_midpoint_translation(self):
        got = interpolate_track(self.make_track(), 1.0)
        np.testing.assert_allclose(got.translation, [1.0, 0.0, 0.0], atol=1e-12)

    def test_clamping_outside_range(self):
        track = self.make_track()
        np.testing.assert_array_equal(interpolate_track(track, -5.0).translation,
                                      track.keyframes[0][1].translation)
        np.testing.assert_array_equal(interpolate_track(track, 99.0).translation,
                                      track.keyframes[-1][1].translation)

    def test_interpolated_quaternion_unit(self):
        rng = np.random.default_rng(5)
        kf = [(float(i), Pose(quat_normalize(rng.normal(size=4)), rng.normal(size=3)))
              for i in range(5)]
        track = ActorTrack("actor-2", "Bus", (10.0, 3.0, 3.0), kf)
        for t in rng.uniform(-1.0, 5.0, size=1000):
            q = interpolate_track(track, float(t)).rotation
            assert abs(np.linalg.norm(q) - 1.0) < 1e-9

    def test_nonincreasing_timestamps_rejected(self):
        kf = [(1.0, Pose.identity()), (1.0, Pose.identity())]
        with pytest.raises(ValueError, match="strictly increasing"):
            ActorTrack("a", "Car", (4.0, 2.0, 1.5), kf)


class TestBoxLocal:
    def make_track(self):
        pose = Pose(quat_from_yaw(0.7), np.array([3.0, -1.0, 0.75]))
        return ActorTrack("actor-3", "Truck", (8.0, 2.5, 3.0), [(0.0, pose)])

    def test_center_maps_to_origin(self):
        track = self.make_track()
        center = track.keyframes[0][1].translation
        coords, inside = world_to_box_local(track, 0.0, center)
        np.testing.assert_allclose(coords, 0.0, atol=1e-12)
        assert inside

    def test_corner_on_boundary(self):
        track = self.make_track()
        pose = track.keyframes[0][1]
        half = np.array(track.size) / 2
        corner_world = transform_point(pose, half * np.array([1.0, -1.0, 1.0]))
        coords, inside = world_to_box_local(track, 0.0, corner_world)
        np.testing.assert_allclose(np.abs(coords), 1.0, atol=1e-9)
        assert inside

    def test_flag_matches_brute_force(self):
        track = self.make_track()
        pose = track.keyframes[0][1]
        rng = np.random.default_rng(6)
        pts = rng.uniform(-8, 8, size=(500, 3)) + pose.translation
        coords, inside = box_local_coords(pose, track.size, pts)
        # brute force: test the 6 oriented half-space constraints directly
        from rerig.geometry import quat_to_matrix
        R = quat_to_matrix(pose.rotation)
        half = np.array(track.size) / 2
        for p, flag in zip(pts, inside):
            rel = R.T @ (p - pose.translation)
            expect = all(abs(rel[k]) <= half[k] + 1e-9 for k in range(3))
            assert flag == expect


class TestRigConfig:
    def test_default_rig_shape(self, rig):
        assert len(rig.cameras) == 6
        assert rig.name == "SUV"
        heights = [c.pose_in_ego.translation[2] for c in rig.cameras]
        assert all(1.5 <= h <= 1.7 for h in heights)

    def test_round_trip(self, rig, tmp_path):
        path = tmp_path / "rig.json"
        save_rig(rig, path)
        loaded = load_rig(path)
        assert loaded.channels == rig.channels
        for a, b in zip(rig.cameras, loaded.cameras):
            np.testing.assert_array_equal(a.pose_in_ego.translation,
                                          b.pose_in_ego.translation)
            assert a.intrinsics == b.intrinsics

    def test_config_keys(self, rig):
        cfg = rig_to_config(rig)
        assert "camera.CAM_FRONT.translation" in cfg
        assert "camera.CAM_FRONT.fx" in cfg
        assert rig_from_config(cfg).channels == rig.channels
