import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdfocc.errors import BehindCameraError, DomainError
from sdfocc.geometry import (Aabb, Camera, Intrinsics, NEAR_CLIP, Pose, Ray, RelativeCamera,
                             backproject, bilinear_image_sample, bilinear_sample, look_at,
                             pixel_to_ray, project_point, ray_aabb, warp_pixel, warp_pixels)

K100 = Intrinsics(100.0, 100.0, 50.0, 50.0, 101, 101)
seeds = st.integers(0, 2 ** 31 - 1)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def random_camera(rng):
    k = Intrinsics(*rng.uniform(50, 150, 2), *rng.uniform(20, 40, 2), 64, 48)
    return Camera(k, Pose(random_rotation(rng), rng.normal(size=3)))


def test_principal_pixel_is_optical_axis():
    ray = pixel_to_ray(Camera(K100, Pose.identity()), (50, 50))
    assert np.allclose(ray.direction, [0, 0, 1]) and np.allclose(ray.origin, 0)


def test_offset_pixel_direction():
    ray = pixel_to_ray(Camera(Intrinsics(100, 100, 50, 50, 200, 101), Pose.identity()), (150, 50))
    assert np.allclose(ray.direction, np.array([1, 0, 1]) / np.sqrt(2))


def test_pixel_out_of_bounds():
    with pytest.raises(DomainError):
        pixel_to_ray(Camera(K100, Pose.identity()), (101, 3))


@settings(max_examples=50, deadline=None)
@given(seed=seeds, t=st.floats(0.5, 50))
def test_ray_projection_round_trip(seed, t):
    rng = np.random.default_rng(seed)
    cam = random_camera(rng)
    px = rng.uniform([0, 0], [cam.width - 1, cam.height - 1])
    ray = pixel_to_ray(cam, px)
    uv, _ = project_point(cam, ray.at(t))
    assert np.allclose(uv, px, atol=1e-7)


def test_project_examples():
    cam = Camera(K100, Pose.identity())
    uv, z = project_point(cam, (0, 0, 5))
    assert np.allclose(uv, [50, 50]) and z == 5
    assert project_point(cam, (1, 0, 5))[0][0] == pytest.approx(70)
    with pytest.raises(BehindCameraError):
        project_point(cam, (0, 0, NEAR_CLIP))


@settings(max_examples=30, deadline=None)
@given(seed=seeds)
def test_zdepth_is_camera_z(seed):
    rng = np.random.default_rng(seed)
    cam = random_camera(rng)
    p = cam.pose.center + 5 * cam.pose.rotation[2] + rng.normal(size=3)
    _, z = project_point(cam, p)
    assert z == pytest.approx((cam.pose.rotation @ p + cam.pose.translation)[2], abs=1e-12)


def test_pose_invariants():
    with pytest.raises(DomainError):
        Pose(np.diag([1.0, 1.0, -1.0]), np.zeros(3))
    with pytest.raises(DomainError):
        Pose(np.eye(3) * 1.01, np.zeros(3))


@settings(max_examples=30, deadline=None)
@given(seed=seeds, depth=st.floats(0.5, 40))
def test_identity_warp(seed, depth):
    rng = np.random.default_rng(seed)
    cam = random_camera(rng)
    x = rng.uniform([0, 0], [63, 47])
    assert np.max(np.abs(warp_pixel(x, depth, RelativeCamera(cam, cam)) - x)) <= 1e-9


def test_stereo_disparity():
    b, depth = 0.5, 8.0
    left = Camera(K100, Pose.identity())
    # source camera centered at x = +b: world->camera translation -b
    right = Camera(K100, Pose(np.eye(3), np.array([-b, 0.0, 0.0])))
    x = np.array([60.0, 40.0])
    assert warp_pixel(x, depth, RelativeCamera(left, right))[0] == pytest.approx(60 - 100 * b / depth)


@settings(max_examples=30, deadline=None)
@given(seed=seeds)
def test_warp_composes_backproject_and_project(seed):
    rng = np.random.default_rng(seed)
    tgt = random_camera(rng)
    src = Camera(tgt.intrinsics, Pose(tgt.pose.rotation, tgt.pose.translation + rng.normal(scale=0.3, size=3)))
    x, depth = rng.uniform([0, 0], [63, 47]), rng.uniform(2, 20)
    expect, _ = project_point(src, backproject(tgt, x, depth))
    assert np.allclose(warp_pixel(x, depth, RelativeCamera(tgt, src)), expect, atol=1e-8)
    uv, ok = warp_pixels(RelativeCamera(tgt, src), x[None], np.array([depth]))
    assert np.allclose(uv[0], expect, atol=1e-8)


def test_warp_behind_source():
    tgt = Camera(K100, Pose.identity())
    src = Camera(K100, Pose(np.eye(3), np.array([0.0, 0.0, -10.0])))
    with pytest.raises(BehindCameraError):
        warp_pixel((50, 50), 5.0, RelativeCamera(tgt, src))
    _, ok = warp_pixels(RelativeCamera(tgt, src), np.array([[50.0, 50.0]]), np.array([5.0]))
    assert not ok[0]


def test_ray_aabb_examples():
    box = Aabb(np.array([2.0, -1, -1]), np.array([5.0, 1, 1]))
    assert ray_aabb(Ray(np.zeros(3), np.array([1.0, 0, 0])), box) == pytest.approx((2, 5))
    assert ray_aabb(Ray(np.array([0.0, 3, 0]), np.array([1.0, 0, 0])), box) is None
    inside = Ray(np.array([3.0, 0, 0]), np.array([0.0, 1, 0]))
    assert ray_aabb(inside, box)[0] == NEAR_CLIP


@settings(max_examples=60, deadline=None)
@given(seed=seeds)
def test_ray_aabb_endpoints_on_boundary(seed):
    rng = np.random.default_rng(seed)
    box = Aabb(np.array([-1.0, -2, -0.5]), np.array([1.5, 1, 2]))
    o = rng.uniform(-6, 6, 3)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    hit = ray_aabb(Ray(o, d), box)
    if hit is None:
        return
    tn, tf = hit
    assert tn <= tf
    for t in (tn, tf):
        if t == NEAR_CLIP:
            continue
        p = o + t * d
        on_face = np.min(np.minimum(np.abs(p - box.min), np.abs(p - box.max)))
        assert on_face < 1e-6 and np.all(p >= box.min - 1e-6) and np.all(p <= box.max + 1e-6)


def test_bilinear_examples():
    rng = np.random.default_rng(0)
    img = rng.random((5, 6, 3))
    assert np.allclose(bilinear_image_sample(np.full((4, 4, 3), 0.3), (1.7, 2.2)), 0.3)
    assert np.allclose(bilinear_image_sample(img, (2, 3)), img[3, 2])
    assert np.allclose(bilinear_image_sample(img, (1.5, 2.5)), img[2:4, 1:3].mean(axis=(0, 1)))
    assert np.allclose(bilinear_image_sample(img, (5, 4)), img[4, 5])
    with pytest.raises(DomainError):
        bilinear_image_sample(img, (5.01, 1))


@settings(max_examples=30, deadline=None)
@given(seed=seeds)
def test_bilinear_is_convex_combination(seed):
    rng = np.random.default_rng(seed)
    img = rng.random((7, 9, 3))
    xy = rng.uniform([0, 0], [8, 6], size=(20, 2))
    out = bilinear_sample(img, xy)
    assert np.all(out >= img.min() - 1e-12) and np.all(out <= img.max() + 1e-12)


def test_look_at_forward():
    pose = look_at([1.0, 2.0, 3.0], [1.0, 10.0, 3.0])
    assert np.allclose(pose.rotation[2], [0, 1, 0]) and np.allclose(pose.center, [1, 2, 3])
    assert np.allclose(pose.rotation[1], [0, 0, -1])  # image v points down
