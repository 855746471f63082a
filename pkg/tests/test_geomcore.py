import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from reldistill.errors import BehindCameraError, DomainError
from reldistill.geomcore import (Camera, CameraIntrinsics, Ray, RigidPose, hemisphere_poses, look_at, project,
                                 ray_for_pixel, rotation_between, unproject)

K = CameraIntrinsics(500.0, 480.0, 320.0, 180.0, 640, 360)


def random_rotation(rng):
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


def random_camera(rng):
    return Camera(K, RigidPose(random_rotation(rng), rng.normal(size=3)))


def quaternion_rotation(a, b):
    """Independent construction: q = (1 + a.b, a x b) normalized, as a matrix."""
    a = a / np.linalg.norm(a)
    b = b / np.linalg.norm(b)
    w = 1.0 + a @ b
    v = np.cross(a, b)
    q = np.array([w, *v])
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
        [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
        [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
    ])


# -- types

@pytest.mark.parametrize("kw", [dict(fx=0), dict(fy=-1), dict(cx=640), dict(cy=-0.1), dict(width=7, cx=3)])
def test_intrinsics_reject_invalid(kw):
    args = dict(fx=500.0, fy=500.0, cx=320.0, cy=180.0, width=640, height=360)
    args.update(kw)
    with pytest.raises(DomainError):
        CameraIntrinsics(**args)


def test_pose_rejects_reflection_and_skew():
    with pytest.raises(DomainError):
        RigidPose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(DomainError):
        RigidPose(np.eye(3) * 1.001, np.zeros(3))


def test_pose_json_is_row_major_4x4():
    R = look_at([1, 2, 3], [0, 0, 0]).rotation
    p = RigidPose(R, [1, 2, 3])
    m = np.array(p.to_json())
    assert m.shape == (4, 4)
    np.testing.assert_array_equal(m[:3, 3], [1, 2, 3])
    back = RigidPose.from_matrix(m)
    np.testing.assert_array_equal(back.rotation, R)
    np.testing.assert_array_equal(back.translation, [1, 2, 3])


def test_ray_invariants():
    with pytest.raises(DomainError):
        Ray(np.zeros(3), np.array([1.0, 1.0, 0.0]), 0.0, 1.0)
    with pytest.raises(DomainError):
        Ray(np.zeros(3), np.array([1.0, 0.0, 0.0]), 1.0, 1.0)


# -- ray_for_pixel

def test_principal_point_ray_is_forward_axis():
    r = ray_for_pixel(Camera(K), (K.cx, K.cy))
    np.testing.assert_allclose(r.direction, [0, 0, 1], atol=1e-15)


def test_ray_one_focal_length_right_is_45_degrees():
    k = CameraIntrinsics(200.0, 200.0, 320.0, 180.0, 640, 360)
    r = ray_for_pixel(Camera(k), (k.cx + k.fx, k.cy))
    np.testing.assert_allclose(r.direction, np.array([1, 0, 1]) / math.sqrt(2), atol=1e-12)


def test_ray_pixel_out_of_bounds():
    with pytest.raises(DomainError):
        ray_for_pixel(Camera(K), (641, 10))


def test_ray_roundtrip_through_projection(rng):
    for _ in range(100):
        cam = random_camera(rng)
        px = rng.random(2) * (K.width, K.height)
        r = ray_for_pixel(cam, px)
        back, _ = project(r.origin + 2 * r.direction, cam)
        assert np.abs(back - px).max() < 1e-6
        assert abs(np.linalg.norm(r.direction) - 1) < 1e-9


def test_distinct_pixels_give_distinct_rays():
    cam = Camera(CameraIntrinsics.from_fov(16, 12, 60))
    dirs = np.array([ray_for_pixel(cam, (u + 0.5, v + 0.5)).direction for v in range(12) for u in range(16)])
    d = np.linalg.norm(dirs[:, None] - dirs[None], axis=-1)
    assert (d + np.eye(len(dirs)) > 1e-6).all()


# -- project / unproject

def test_project_forward_point():
    cam = Camera(K, look_at([0.3, -0.2, 1.0], [0, 0, 0]))
    px, z = project(cam.center + cam.forward * 1.0, cam)
    np.testing.assert_allclose(px, [K.cx, K.cy], atol=1e-9)
    assert z == pytest.approx(1.0, abs=1e-12)


def test_project_behind_camera():
    cam = Camera(K)
    with pytest.raises(BehindCameraError):
        project([0, 0, -1.0], cam)
    with pytest.raises(BehindCameraError):
        project([0.5, 0.5, 0.0], cam)


@pytest.mark.parametrize("depth", [0.0, -1.0, np.inf, np.nan])
def test_unproject_rejects_bad_depth(depth):
    with pytest.raises(DomainError):
        unproject((10, 10), depth, Camera(K))


def test_random_roundtrip_error(rng):
    worst = 0.0
    for _ in range(100):
        cam = random_camera(rng)
        px = rng.random(2) * (K.width, K.height)
        p = unproject(px, rng.uniform(0.1, 5), cam)
        q = unproject(*project(p, cam), cam)
        worst = max(worst, np.linalg.norm(p - q))
    assert worst < 1e-6


@given(u=st.floats(0, 640), v=st.floats(0, 360), z=st.floats(0.05, 20), seed=st.integers(0, 2**32 - 1))
def test_project_unproject_identity(u, v, z, seed):
    cam = random_camera(np.random.default_rng(seed))
    p = unproject((u, v), z, cam)
    px, depth = project(p, cam)
    assert abs(depth - z) < 1e-9
    assert np.abs(px - (u, v)).max() < 1e-6
    assert np.linalg.norm(unproject(px, depth, cam) - p) < 1e-9


# -- rotation_between

def test_rotation_identity_case():
    np.testing.assert_allclose(rotation_between([1, 2, 3], [2, 4, 6]), np.eye(3), atol=1e-15)


@pytest.mark.parametrize("a", [[1, 0, 0], [0, 0, 1], [0.3, -0.2, 0.9], [1, 1, 1]])
def test_rotation_antipodal_uses_documented_axis(a):
    a = np.asarray(a, float)
    R = rotation_between(a, -a)
    ah = a / np.linalg.norm(a)
    np.testing.assert_allclose(R @ ah, -ah, atol=1e-12)
    # 180 degrees about axis n: R = 2 n n^T - I with n = a x (least aligned world axis)
    e = np.zeros(3)
    e[np.argmin(np.abs(a))] = 1
    n = np.cross(ah, e)
    n /= np.linalg.norm(n)
    np.testing.assert_allclose(R, 2 * np.outer(n, n) - np.eye(3), atol=1e-12)


def test_rotation_rejects_zero():
    with pytest.raises(DomainError):
        rotation_between([0, 0, 0], [1, 0, 0])


def test_rotation_matches_quaternion_oracle(rng):
    for _ in range(200):
        a, b = rng.normal(size=3), rng.normal(size=3)
        if a @ b / (np.linalg.norm(a) * np.linalg.norm(b)) < -0.999:
            continue
        np.testing.assert_allclose(rotation_between(a, b), quaternion_rotation(a, b), atol=1e-9)


vec = arrays(np.float64, 3, elements=st.floats(-10, 10)).filter(lambda v: np.linalg.norm(v) > 1e-3)


@given(a=vec, b=vec)
def test_rotation_between_properties(a, b):
    R = rotation_between(a, b)
    ah, bh = a / np.linalg.norm(a), b / np.linalg.norm(b)
    assert np.abs(R @ ah - bh).max() < 1e-9
    assert np.abs(R.T @ R - np.eye(3)).max() < 1e-9
    assert abs(np.linalg.det(R) - 1) < 1e-9
    angle = math.acos(np.clip((np.trace(R) - 1) / 2, -1, 1))
    expected = math.acos(np.clip(ah @ bh, -1, 1))
    # acos is ill-conditioned near 0 and pi, compare through the cosine there
    assert abs(math.cos(angle) - math.cos(expected)) < 1e-9
    if 1e-3 < expected < math.pi - 1e-3:
        assert abs(angle - expected) < 1e-7


# -- hemisphere_poses

def test_single_pose_is_top_down():
    (p,) = hemisphere_poses(1, 0.5, center=(0.1, 0.2, 0.0))
    np.testing.assert_allclose(p.translation, [0.1, 0.2, 0.5])
    np.testing.assert_allclose(p.rotation[:, 2], [0, 0, -1], atol=1e-12)


def test_poses_face_center():
    c = np.array([0.0, 0.1, 0.05])
    for p in hemisphere_poses(8, 0.6, c):
        to_c = (c - p.translation) / np.linalg.norm(c - p.translation)
        assert np.abs(p.rotation[:, 2] - to_c).max() < 1e-9
        assert p.translation[2] > c[2]


def test_sixteen_pose_azimuth_spacing():
    poses = hemisphere_poses(16, 0.6)
    az = np.degrees([math.atan2(p.translation[1], p.translation[0]) for p in poses])
    step = np.diff(np.unwrap(np.radians(az)))
    np.testing.assert_allclose(np.degrees(step), 360 / 16, atol=1e-9)


def test_poses_deterministic_and_validated():
    a = hemisphere_poses(5, 0.4)
    b = hemisphere_poses(5, 0.4)
    assert all(np.array_equal(x.as_matrix(), y.as_matrix()) for x, y in zip(a, b))
    with pytest.raises(DomainError):
        hemisphere_poses(0, 0.4)
    with pytest.raises(DomainError):
        hemisphere_poses(3, 0.0)
