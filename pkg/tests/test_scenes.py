import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sdfocc.errors import DomainError, ParseError
from sdfocc.field import GridSpec
from sdfocc.geometry import Aabb, Camera, Intrinsics, Pose, look_at, pixels_to_rays
from sdfocc.scenes import (FAR_SENTINEL, AnalyticScene, DatasetManifest, Frame, Primitive, analytic_sdf,
                           cast_rays, default_scene, generate_trajectory, load_dataset, occupancy_labels,
                           oracle_render, parse_scene_file, read_cameras, read_manifest, read_pfm,
                           read_pgm, read_ppm, sphere_trace, write_cameras, write_manifest, write_pfm,
                           write_pgm, write_ppm)

seeds = st.integers(0, 2 ** 31 - 1)


def test_primitive_validation():
    with pytest.raises(DomainError):
        Primitive("sphere", (0, 0, 0, 0))
    with pytest.raises(DomainError):
        Primitive("box", (0, 0, 0, 1, -1, 1))
    with pytest.raises(DomainError):
        Primitive("cone", (0, 0, 0, 1))
    with pytest.raises(DomainError):
        AnalyticScene([])


def test_sdf_examples():
    c = np.array([1.0, -2.0, 0.5])
    sc = AnalyticScene([Primitive("sphere", (*c, 0.7))])
    assert analytic_sdf(sc, c[None])[0][0] == pytest.approx(-0.7)
    a, b = Primitive("sphere", (0, 0, 0, 1)), Primitive("sphere", (1.5, 0, 0, 0.5))
    pts = np.random.default_rng(0).uniform(-3, 3, (500, 3))
    s, albedo, idx = analytic_sdf(AnalyticScene([a, b]), pts)
    assert np.array_equal(s, np.minimum(a.sdf(pts), b.sdf(pts)))
    assert np.array_equal(idx, np.argmin([a.sdf(pts), b.sdf(pts)], axis=0))


def test_box_sign_matches_membership():
    box = Primitive("box", (0.3, -0.2, 1.0, 1.2, 0.4, 0.8))
    pts = np.random.default_rng(1).uniform(-2, 3, (100_000, 3))
    inside = np.all(np.abs(pts - [0.3, -0.2, 1.0]) <= [1.2, 0.4, 0.8], axis=1)
    assert np.array_equal(box.sdf(pts) <= 0, inside)


@settings(max_examples=30, deadline=None)
@given(seed=seeds)
def test_default_scene_is_one_lipschitz(seed):
    rng = np.random.default_rng(seed)
    sc = default_scene()
    p = rng.uniform([-7, -1, -1], [7, 14, 13], (2000, 3))
    q = p + rng.normal(0, rng.uniform(0.01, 3), (2000, 3))
    sp, sq = analytic_sdf(sc, p)[0], analytic_sdf(sc, q)[0]
    assert np.all(np.abs(sp - sq) <= np.linalg.norm(p - q, axis=1) + 1e-12)


def membership_labels(scene, pts):
    """Occupancy by direct containment tests, an independent path from the SDF."""
    out = np.zeros(len(pts), dtype=int)
    dist = np.full(len(pts), np.inf)
    for prim in scene.primitives:
        v = np.array(prim.params)
        if prim.kind == "sphere":
            inside = np.sum((pts - v[:3]) ** 2, axis=1) <= v[3] ** 2
        elif prim.kind == "box":
            inside = np.all(np.abs(pts - v[:3]) <= v[3:], axis=1)
        else:
            inside = pts @ v[:3] <= v[3]
        # the union takes the label of the deepest primitive
        depth = prim.sdf(pts)
        take = inside & (depth < dist)
        out[take] = prim.label
        dist = np.where(take, depth, dist)
    if scene.bounds is not None:
        out[~scene.bounds.contains(pts)] = 0
    return out


def test_ground_truth_occupancy_two_ways():
    sc = default_scene()
    spec = GridSpec(sc.bounds, (32, 32, 32))
    pts = spec.centers().reshape(-1, 3)
    assert np.array_equal(occupancy_labels(sc, pts), membership_labels(sc, pts))


def test_plane_depth_at_principal_point():
    sc = AnalyticScene([Primitive("plane", (0, 0, -1, -5.0))])  # occupied for z >= 5
    cam = Camera(Intrinsics(10, 10, 4, 4, 9, 9), Pose.identity())
    z, color, labels = oracle_render(sc, cam)
    assert z[4, 4] == pytest.approx(5.0) and np.allclose(z, 5.0)
    assert labels[4, 4] == 1


def test_miss_pixels_get_sentinel_and_background():
    sc = AnalyticScene([Primitive("sphere", (0, 0, 10, 1.0))])
    cam = Camera(Intrinsics(10, 10, 10, 10, 21, 21), Pose.identity())
    z, color, labels = oracle_render(sc, cam, supersample=1)
    assert z[0, 0] == FAR_SENTINEL and labels[0, 0] == 0
    assert np.allclose(color[0, 0], sc.background)
    assert z[10, 10] == pytest.approx(9.0)


def test_oracle_matches_sphere_tracing():
    sc = default_scene()
    cam = Camera(Intrinsics(16, 16, 15.5, 15.5, 32, 32),
                 look_at(np.array([0.5, 0.6, 1.7]), np.array([0.0, 8.0, 1.0])))
    vv, uu = np.mgrid[0:32, 0:32]
    o, d = pixels_to_rays(cam, np.stack([uu.ravel(), vv.ravel()], -1).astype(float))
    t_exact, which, _ = cast_rays(sc, o, d)
    t_trace = sphere_trace(sc, o, d, t_max=60.0, tol=1e-10, iters=20000)
    hit = np.isfinite(t_exact)
    assert hit.sum() > 500
    assert np.array_equal(hit, np.isfinite(t_trace))
    assert np.max(np.abs(t_exact[hit] - t_trace[hit])) < 1e-5


def test_sphere_only_rays_match_tracing():
    sc = AnalyticScene([Primitive("sphere", (0.2, -0.1, 6.0, 1.5))])
    rng = np.random.default_rng(3)
    d = rng.normal([0, 0, 1], 0.12, (300, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    o = np.zeros((300, 3))
    t, _, _ = cast_rays(sc, o, d)
    hit = np.isfinite(t)
    assert hit.sum() > 50
    assert np.max(np.abs(sphere_trace(sc, o, d, tol=1e-12)[hit] - t[hit])) < 1e-5


def test_straight_trajectory_spacing():
    poses = generate_trajectory("straight", 8, 1.0)
    c = np.array([p.center for p in poses])
    dist = np.linalg.norm(c[:, None] - c[None], axis=-1)
    idx = np.arange(8)
    assert np.allclose(dist, np.abs(idx[:, None] - idx[None]))


def test_arc_trajectory_chords():
    poses = generate_trajectory("arc", 12, 0.7, radius=5.0)
    c = np.array([p.center for p in poses])
    steps = np.linalg.norm(np.diff(c, axis=0), axis=1)
    assert np.allclose(steps, 0.7)
    # chords spanning k steps share the length 2R sin(k theta / 2)
    theta = 2 * np.arcsin(0.7 / 10.0)
    for k in (2, 3, 5):
        chords = np.linalg.norm(c[k:] - c[:-k], axis=1)
        assert np.allclose(chords, 10.0 * np.sin(k * theta / 2))


def test_trajectory_poses_orthonormal():
    for kind in ("straight", "arc"):
        for p in generate_trajectory(kind, 6, 0.5, pitch=0.2, heading=0.3):
            R = p.rotation
            assert np.allclose(R @ R.T, np.eye(3)) and np.linalg.det(R) == pytest.approx(1)
    with pytest.raises(DomainError):
        generate_trajectory("straight", 2, 1.0)


# ---------------------------------------------------------------- IO

def test_ppm_round_trip_and_header(tmp_path):
    img = np.random.default_rng(0).integers(0, 256, (5, 7, 3)).astype(np.uint8)
    write_ppm(tmp_path / "a.ppm", img)
    raw = (tmp_path / "a.ppm").read_bytes()
    assert raw.startswith(b"P6\n7 5\n255\n")
    assert np.array_equal(read_ppm(tmp_path / "a.ppm"), img)


def test_pgm_round_trip(tmp_path):
    lab = np.random.default_rng(1).integers(0, 17, (4, 9)).astype(np.uint8)
    write_pgm(tmp_path / "a.pgm", lab)
    assert (tmp_path / "a.pgm").read_bytes().startswith(b"P5\n9 4\n255\n")
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), lab)


def test_pfm_round_trip_little_endian(tmp_path):
    d = np.random.default_rng(2).uniform(0, 100, (6, 3)).astype(np.float32)
    write_pfm(tmp_path / "a.pfm", d)
    raw = (tmp_path / "a.pfm").read_bytes()
    assert raw.startswith(b"Pf\n3 6\n-1.0\n")
    assert np.array_equal(read_pfm(tmp_path / "a.pfm"), d)


def test_big_endian_pfm_is_read(tmp_path):
    d = np.arange(6, dtype=np.float32).reshape(2, 3)
    (tmp_path / "b.pfm").write_bytes(b"Pf\n3 2\n1.0\n" + d[::-1].astype(">f4").tobytes())
    assert np.array_equal(read_pfm(tmp_path / "b.pfm"), d)


def test_malformed_headers_report_offsets(tmp_path):
    p = tmp_path / "x.ppm"
    p.write_bytes(b"P3\n1 1\n255\n...")
    with pytest.raises(ParseError) as e:
        read_ppm(p)
    assert e.value.offset == 0
    p.write_bytes(b"P6\n4 abc\n255\n")
    with pytest.raises(ParseError) as e:
        read_ppm(p)
    assert e.value.offset == 5
    p.write_bytes(b"P6\n4 4\n255\n" + bytes(10))
    with pytest.raises(ParseError):
        read_ppm(p)


def test_cameras_round_trip(tmp_path):
    cams = [("0000", Camera(Intrinsics(50.5, 51.0, 31.5, 23.5, 64, 48), look_at(np.array([1.0, 2, 3]),
                                                                                  np.array([0.0, 9, 1])))),
            ("0001", Camera(Intrinsics(20, 20, 9.5, 9.5, 20, 20), Pose.identity()))]
    write_cameras(tmp_path / "cameras.txt", cams)
    back = read_cameras(tmp_path / "cameras.txt")
    for fid, cam in cams:
        got = back[fid]
        assert got.intrinsics == cam.intrinsics
        assert np.array_equal(got.pose.rotation, cam.pose.rotation)
        assert np.array_equal(got.pose.translation, cam.pose.translation)


def test_camera_parse_error_offset(tmp_path):
    p = tmp_path / "c.txt"
    p.write_bytes(b"# header\n0001 1 2 3\n")
    with pytest.raises(ParseError) as e:
        read_cameras(p)
    assert e.value.offset == 9


def test_manifest_round_trip(tmp_path):
    for name in ("a.ppm", "b.ppm", "a.pfm"):
        (tmp_path / name).write_bytes(b"")
    m = DatasetManifest([Frame("0", "train", 0.0, "a.ppm", "a.pfm"), Frame("1", "test", 0.25, "b.ppm")],
                        Aabb(np.array([-1.0, 0, 0]), np.array([1.0, 2, 3])), 3, str(tmp_path))
    write_manifest(tmp_path / "manifest.txt", m)
    back = read_manifest(tmp_path / "manifest.txt")
    assert back.frames == m.frames and back.n_classes == 3
    assert np.array_equal(back.bounds.max, m.bounds.max)
    with pytest.raises(DomainError):
        DatasetManifest([Frame("0", "train", 1.0, "a"), Frame("1", "train", 1.0, "b")], m.bounds)
    (tmp_path / "b.ppm").unlink()
    with pytest.raises(DomainError):
        read_manifest(tmp_path / "manifest.txt")


def test_scene_file_parse(tmp_path):
    p = tmp_path / "scene.cfg"
    p.write_text("bounds = -2 -2 -1 2 2 3\nprimitive = sphere 0 0 1 0.5 0.9 0.1 0.1 2 0.3\n"
                 "image.width = 24\nimage.height = 16\ntrajectory.frames = 5\n")
    cfg = parse_scene_file(p)
    assert cfg.scene.primitives[0].label == 2 and cfg.scene.primitives[0].texture == 0.3
    assert (cfg.intrinsics.width, cfg.intrinsics.height) == (24, 16)
    p.write_text("\nbogus = 1\n")
    with pytest.raises(ParseError) as e:
        parse_scene_file(p)
    assert e.value.offset == 1


def test_synthesized_dataset_loads(tiny_dataset):
    train = load_dataset(tiny_dataset / "manifest.txt", "train")
    test = load_dataset(tiny_dataset / "manifest.txt", "test")
    assert len(train.cameras) == 6 and len(test.cameras) == 2
    cam, depth = train.cameras[0], train.depths[0]
    assert train.images[0].shape == (cam.height, cam.width, 3) and depth.shape == (cam.height, cam.width)
    ts = [f.timestamp for f in train.manifest.frames]
    assert ts == sorted(ts)
