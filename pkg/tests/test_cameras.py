import math

import numpy as np
import pytest

from lightforge import cameras as cam


@pytest.fixture
def intr():
    return cam.fisheye_for_resolution(64, 64)


def test_image_circle_fills_frame(intr):
    # focal chosen so the 180 deg circle exactly touches the short side
    assert intr.image_circle_radius == pytest.approx(32.0, abs=1e-9)
    assert intr.principal_point.tolist() == [32.0, 32.0]


def test_focal_cannot_overflow_frame():
    with pytest.raises(ValueError):
        cam.FisheyeIntrinsics(width=64, height=64, focal=100.0)


def test_right_angle_maps_to_focal_times_sqrt2(intr):
    # algebraic identity 2f*sin(45 deg) = f*sqrt(2); equality up to libm
    # rounding of sin (observed 2 ulp at r = 32 px)
    px = cam.project(intr, np.array([1.0, 0.0, 0.0]))
    r = abs(px[0] - intr.principal_point[0])
    assert r == pytest.approx(intr.focal * math.sqrt(2.0), abs=1e-12)


def test_optical_axis_maps_to_center(intr):
    px = cam.project(intr, np.array([0.0, 0.0, 1.0]))
    assert np.array_equal(px, intr.principal_point)
    d = cam.unproject(intr, intr.principal_point)
    assert d.tolist() == [0.0, 0.0, 1.0]


def test_project_rejects_behind_camera(intr):
    with pytest.raises(cam.OutsideFovError):
        cam.project(intr, np.array([0.0, 0.1, -1.0]))


def test_unproject_rejects_outside_circle(intr):
    with pytest.raises(cam.OutsideImageCircleError):
        cam.unproject(intr, np.array([65.0, 32.0]))


def test_project_unproject_round_trip(intr):
    # mirror of the geometry gate: 1e4 random pixels inside the circle
    rng = np.random.default_rng(11)
    r = intr.image_circle_radius * np.sqrt(rng.uniform(0.0, 0.9999, 10_000))
    phi = rng.uniform(0.0, 2.0 * np.pi, 10_000)
    pix = intr.principal_point + np.stack([r * np.cos(phi), r * np.sin(phi)], axis=-1)
    back = cam.project(intr, cam.unproject(intr, pix))
    err = np.abs(back - pix).max()
    assert err <= 1e-6


def test_unproject_project_round_trip_directions(intr):
    rng = np.random.default_rng(12)
    v = rng.normal(size=(5000, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    v[:, 2] = np.abs(v[:, 2])  # keep inside the forward hemisphere
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    back = cam.unproject(intr, cam.project(intr, v))
    assert np.abs(back - v).max() < 1e-9


def test_equisolid_radius_formula(intr):
    for theta_deg in (10.0, 45.0, 60.0, 89.0):
        theta = math.radians(theta_deg)
        d = np.array([math.sin(theta), 0.0, math.cos(theta)])
        px = cam.project(intr, d)
        r = px[0] - intr.principal_point[0]
        assert r == pytest.approx(2.0 * intr.focal * math.sin(theta / 2.0), abs=1e-12)


def test_narrower_fov_limits_projection():
    narrow = cam.FisheyeIntrinsics(width=64, height=64, focal=20.0, fov_deg=90.0)
    cam.project(narrow, np.array([math.sin(0.7), 0.0, math.cos(0.7)]))
    with pytest.raises(cam.OutsideFovError):
        cam.project(narrow, np.array([math.sin(0.8), 0.0, math.cos(0.8)]))


# --- poses -------------------------------------------------------------------

def test_look_at_rotation_is_special_orthogonal():
    pose = cam.look_at_pose(np.array([1.0, 2.0, 1.5]), np.array([4.0, 5.0, 1.0]))
    r = pose.rotation
    assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9
    assert np.linalg.det(r) == pytest.approx(1.0, abs=1e-9)


def test_look_at_points_at_target():
    eye = np.array([0.5, 0.5, 1.0])
    target = np.array([3.0, 2.0, 1.2])
    pose = cam.look_at_pose(eye, target)
    fwd = pose.rotation[:, 2]  # camera +z in world coords
    want = (target - eye) / np.linalg.norm(target - eye)
    assert np.abs(fwd - want).max() < 1e-12


def test_look_at_keeps_image_upright():
    pose = cam.look_at_pose(np.array([0.0, 0.0, 1.0]), np.array([1.0, 0.0, 1.0]))
    down = pose.rotation[:, 1]  # camera +y in world coords
    assert down @ np.array([0.0, 0.0, -1.0]) > 0.99


def test_pose_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        cam.CameraPose(position=np.zeros(3), rotation=np.eye(3) * 1.01)


# --- rigs --------------------------------------------------------------------

def test_elliptical_rig_geometry(intr):
    center = np.array([2.0, 3.0, 0.0])
    rig = cam.make_elliptical_rig(center, 1.5, 1.0, 1.4, intr, n=90)
    assert len(rig.poses) == 90
    for k in (0, 13, 45, 89):
        pos = rig.poses[k].position
        phi = 2.0 * math.pi * k / 90.0
        want = center + np.array([1.5 * math.cos(phi), 1.0 * math.sin(phi), 1.4])
        assert np.abs(pos - want).max() < 1e-12
    # cameras are spaced 4 degrees apart in parameter angle
    assert 360.0 / 90 == 4.0


def test_rig_looks_radially(intr):
    rig = cam.make_elliptical_rig(np.zeros(3), 2.0, 2.0, 0.0, intr, n=8)
    for k in range(8):
        fwd = rig.poses[k].rotation[:, 2]
        radial = rig.poses[k].position / np.linalg.norm(rig.poses[k].position)
        assert fwd @ radial > 0.999999


def test_rig_inward_mode_flips(intr):
    rig = cam.make_elliptical_rig(np.zeros(3), 2.0, 2.0, 0.0, intr, n=4, look="inward")
    fwd = rig.poses[0].rotation[:, 2]
    assert fwd @ np.array([1.0, 0.0, 0.0]) < -0.999999


def test_rig_json_round_trip(intr):
    rig = cam.make_elliptical_rig(np.array([1.0, 2.0, 0.5]), 2.5, 1.25, 1.4, intr, n=9)
    back = cam.rig_from_json(cam.rig_to_json(rig))
    assert back.intrinsics == rig.intrinsics
    assert len(back.poses) == 9
    for a, b in zip(rig.poses, back.poses):
        assert np.array_equal(a.position, b.position)
        assert np.array_equal(a.rotation, b.rotation)
    assert back.meta == rig.meta


# --- ray grids ---------------------------------------------------------------

def test_camera_ray_grid_shapes_and_validity(intr):
    pose = cam.look_at_pose(np.array([1.0, 1.0, 1.0]), np.array([2.0, 1.0, 1.0]))
    camera = cam.Camera(intrinsics=intr, pose=pose)
    origins, dirs, valid = cam.camera_ray_grid(camera)
    assert origins.shape == (64 * 64, 3) and dirs.shape == (64 * 64, 3)
    assert valid.sum() > 0.7 * 64 * 64  # circle covers ~pi/4 of the square
    assert np.abs(np.linalg.norm(dirs, axis=1) - 1.0).max() < 1e-12
    assert np.array_equal(origins[0], pose.position)


def test_center_pixel_ray_matches_forward_axis(intr):
    pose = cam.look_at_pose(np.array([0.0, 0.0, 0.0]), np.array([5.0, 0.0, 0.0]))
    camera = cam.Camera(intrinsics=intr, pose=pose)
    origin, direction = cam.pixel_ray(intr, pose, intr.principal_point)
    assert np.abs(direction - [1.0, 0.0, 0.0]).max() < 1e-12
    assert np.array_equal(origin, pose.position)


def test_grid_matches_pixel_ray(intr):
    pose = cam.look_at_pose(np.array([1.0, 2.0, 1.0]), np.array([0.0, 0.0, 1.5]))
    camera = cam.Camera(intrinsics=intr, pose=pose)
    _, dirs, valid = cam.camera_ray_grid(camera)
    row, col = 30, 40
    flat = row * 64 + col
    assert valid[flat]
    _, d = cam.pixel_ray(intr, pose, np.array([col + 0.5, row + 0.5]))
    assert np.abs(dirs[flat] - d).max() < 1e-12


def test_intrinsics_dict_round_trip(intr):
    back = cam.intrinsics_from_dict(cam.intrinsics_to_dict(intr))
    assert back == intr
