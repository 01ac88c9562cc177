import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from sdfocc import autodiff as ad
from sdfocc import losses as L
from sdfocc.errors import DomainError, NumericError
from sdfocc.field import GridSpec, SdfField
from sdfocc.geometry import Camera, Intrinsics, Pose, RelativeCamera, look_at
from sdfocc.scenes import default_scene, oracle_render

seeds = st.integers(0, 2 ** 31 - 1)
K = Intrinsics(40.0, 40.0, 15.5, 11.5, 32, 24)


_TAPE = [ad.Tape(np.float64)]


def const(x):
    """Leaf on a shared tape so several inputs can meet in one expression."""
    return _TAPE[0].param(np.asarray(x, dtype=np.float64))


def pair(rng, baseline=0.3):
    tgt = Camera(K, Pose.identity())
    src = Camera(K, Pose(np.eye(3), np.array([-baseline, rng.uniform(-0.05, 0.05), 0.0])))
    return RelativeCamera(tgt, src)


def test_photometric_examples():
    a = np.array([0.2, 0.2, 0.2])
    assert L.photometric(a, a) == 0
    assert L.photometric(a, a + 0.2) == pytest.approx(0.2)
    b = np.array([0.9, 0.1, 0.4])
    assert L.photometric(a, b) == L.photometric(b, a)


def test_rpj_identity_and_constant_images():
    rng = np.random.default_rng(0)
    img = rng.random((24, 32, 3))
    cam = Camera(K, Pose.identity())
    px = np.array([[5.0, 7.0], [20.0, 3.0]])
    loss, ok = L.l_rpj(px, img, img, const([3.0, 11.0]), RelativeCamera(cam, cam))
    assert np.allclose(loss.value, 0) and ok.all()
    rel = pair(rng)
    for depth in (2.0, 9.0):
        loss, ok = L.l_rpj(px, np.full((24, 32, 3), 0.5), np.full((24, 32, 3), 0.8), const([depth] * 2), rel)
        assert np.allclose(loss.value[ok], 0.3)


def test_rpj_prefers_true_depth_on_analytic_scene():
    scene = default_scene()
    eye = np.array([0.0, 2.0, 1.6])
    tgt = Camera(Intrinsics(48, 48, 31.5, 31.5, 64, 64), look_at(eye, eye + [0, 1, -0.15]))
    src = Camera(tgt.intrinsics, look_at(eye + [0.4, 0, 0], eye + [0.4, 1, -0.15]))
    zt, ct, _ = oracle_render(scene, tgt)
    _, cs, _ = oracle_render(scene, src)
    vv, uu = np.mgrid[8:56:3, 8:56:3]
    px = np.stack([uu.ravel(), vv.ravel()], -1).astype(float)
    z = zt[px[:, 1].astype(int), px[:, 0].astype(int)]
    sel = z < 100
    px, z = px[sel], z[sel]
    rel = RelativeCamera(tgt, src)
    good, ok1 = L.l_rpj(px, ct, cs, const(z), rel)
    bad, ok2 = L.l_rpj(px, ct, cs, const(2 * z), rel)
    ok = ok1 & ok2
    assert good.value[ok].mean() < bad.value[ok].mean()


@settings(max_examples=30, deadline=None)
@given(seed=seeds)
def test_mvs_matches_eq14_double_loop(seed):
    rng = np.random.default_rng(seed)
    tgt, src = rng.random((24, 32, 3)), rng.random((24, 32, 3))
    rel = pair(rng)
    R, Kp = 5, 6
    px = np.stack([rng.integers(0, 32, R), rng.integers(0, 24, R)], -1).astype(float)
    zd = np.sort(rng.uniform(1.0, 20.0, (R, Kp)), axis=1)
    w = rng.dirichlet(np.ones(Kp + 1), size=R)
    diss, valid = L.proposal_dissimilarities(px, tgt, src, zd, rel)
    bd, bv = L.proposal_dissimilarities(px, tgt, src, zd[:, -1:] + 5.0, rel)
    out, ray_ok = L.l_mvs(const(w[:, :Kp]), const(w[:, Kp]), diss, valid, bd[:, 0], bv[:, 0])
    for r in range(R):
        terms = [oracles.rpj_loop(px[r], zd[r, k], tgt, src, rel) for k in range(Kp)]
        bg = oracles.rpj_loop(px[r], zd[r, -1] + 5.0, tgt, src, rel)
        num = den = 0.0
        for k in range(Kp):
            if terms[k] is not None:
                num += w[r, k] * terms[k]
                den += w[r, k]
        if bg is not None:
            num += w[r, Kp] * bg
            den += w[r, Kp]
        kept = sum(t is not None for t in terms) + (bg is not None)
        assert bool(ray_ok[r]) == (kept >= 0.5 * (Kp + 1))
        expect = num if kept == Kp + 1 else num / (den + 1e-10)
        assert out.value[r] == pytest.approx(expect, abs=1e-9)


def test_mvs_two_proposal_example():
    out, ok = L.l_mvs(const([[0.5, 0.5]]), const([0.0]), np.array([[0.1, 0.3]]), np.ones((1, 2), bool),
                      np.array([0.7]), np.array([True]))
    assert out.value[0] == pytest.approx(0.2) and ok[0]


def test_mvs_drops_and_renormalises():
    diss = np.array([[0.1, 0.3, 0.5, 0.2]])
    valid = np.array([[True, False, True, True]])
    out, ok = L.l_mvs(const([[0.25, 0.25, 0.25, 0.25]]), const([0.0]), diss, valid, np.array([0.0]), np.array([True]))
    assert ok[0] and out.value[0] == pytest.approx((0.1 + 0.5 + 0.2) * 0.25 / 0.75, abs=1e-9)
    _, ok = L.l_mvs(const([[0.25] * 4]), const([0.0]), diss, np.array([[True, False, False, False]]),
                    np.array([0.0]), np.array([False]))
    assert not ok[0]


def test_mvs_gradient_only_through_weights():
    rng = np.random.default_rng(4)
    tgt, src = rng.random((24, 32, 3)), rng.random((24, 32, 3))
    rel = pair(rng)
    px = np.array([[10.0, 12.0]])
    zd = np.array([[3.0, 4.0, 5.0]])

    def grads(source):
        diss, valid = L.proposal_dissimilarities(px, tgt, source, zd, rel)
        tape = ad.Tape()
        w = tape.param(np.array([[0.2, 0.3, 0.4]]))
        out, _ = L.l_mvs(w, tape.param([0.1]), diss, valid, np.array([0.0]), np.array([True]))
        return ad.grad(tape, ad.sum(out), [w])[w.id], diss

    g0, diss = grads(src)
    assert np.allclose(g0, diss)
    touched = np.zeros((24, 32), bool)
    uv, _ = L.warp_pixels(rel, np.repeat(px[:, None], 3, 1), zd)
    for u, v in uv[0]:
        touched[int(v):int(v) + 2, int(u):int(u) + 2] = True
    src2 = src.copy()
    src2[~touched] = rng.random(((~touched).sum(), 3))
    assert np.array_equal(grads(src2)[0], g0)


@settings(max_examples=30, deadline=None)
@given(seed=seeds)
def test_mvs_delta_equals_rpj(seed):
    rng = np.random.default_rng(seed)
    tgt, src = rng.random((24, 32, 3)), rng.random((24, 32, 3))
    rel = pair(rng)
    px = np.stack([rng.integers(0, 32, 8), rng.integers(0, 24, 8)], -1).astype(float)
    zd = np.sort(rng.uniform(2.0, 30.0, (8, 5)), axis=1)
    k = rng.integers(0, 5)
    diss, valid = L.proposal_dissimilarities(px, tgt, src, zd, rel)
    w = np.zeros((8, 5))
    w[:, k] = 1.0
    out, _ = L.l_mvs(const(w), const(np.zeros(8)), diss, valid, np.zeros(8), np.ones(8, bool))
    rpj, ok = L.l_rpj(px, tgt, src, const(zd[:, k]), rel)
    sel = ok & valid.all(1)
    assert np.allclose(out.value[sel], rpj.value[sel], atol=1e-9)


def test_temporal_min_and_automask():
    rng = np.random.default_rng(5)
    img = rng.random((24, 32, 3))
    cam = Camera(K, Pose.identity())
    rel = RelativeCamera(cam, cam)
    px = np.array([[4.0, 4.0], [9.0, 17.0]])
    # static camera, static scene: identity loss 0 <= warped loss, all masked
    loss, per_ray, counts = L.l_dep(px, img, [img, img], [rel, rel], zdepth=const([3.0, 4.0]), kind="rpj")
    assert loss.value == 0 and counts["masked"] == 2


def test_temporal_min_picks_smaller_source():
    rng = np.random.default_rng(6)
    tgt = rng.random((24, 32, 3))
    # a 0.5 m sideways move at 5 m depth shifts content by fx * 0.5 / 5 = 4 px;
    # sources match the target after warping up to a 0.1 or 0.3 offset
    shifted = np.roll(tgt, -4, axis=1)
    prev, nxt = shifted + 0.1, shifted + 0.3
    rel = pair(rng, baseline=0.5)
    rel = RelativeCamera(rel.target, Camera(K, Pose(np.eye(3), np.array([-0.5, 0.0, 0.0]))))
    px = np.array([[10.0, 10.0], [20.0, 5.0]])
    loss, per_ray, counts = L.l_dep(px, tgt, [nxt, prev], [rel, rel], zdepth=const([5.0, 5.0]), kind="rpj")
    assert np.allclose(per_ray.value, 0.1) and counts["masked"] == 0
    assert loss.value == pytest.approx(0.1)


def test_rgb_examples():
    t = np.array([[0.2, 0.4, 0.6]])
    assert L.l_rgb(const(t), t).value == 0
    assert L.l_rgb(const(t + 0.25), t).value == pytest.approx(0.25)
    tape = ad.Tape()
    r = tape.param(np.array([[0.5, 0.1, 0.9]]))
    g = ad.grad(tape, L.l_rgb(r, np.array([[0.2, 0.4, 0.6]])), [r])[r.id]
    assert np.allclose(g, [[1 / 3, -1 / 3, 1 / 3]])


SPEC = GridSpec.cube([0, 0, 0], 3.2, 8)


def field_of(fn, spec=SPEC):
    return SdfField.from_function(spec, fn).bind(ad.Tape())


def interior_points(rng, n, spec=SPEC, margin=1.0):
    vs = spec.voxel_size
    return rng.uniform(spec.box.min + (0.5 + margin) * vs, spec.box.max - (0.5 + margin) * vs, (n, 3))


def test_eikonal_examples():
    rng = np.random.default_rng(0)
    pts = interior_points(rng, 200)
    assert L.l_eikonal(field_of(lambda p: p[:, 2] - 1.3), pts).value == pytest.approx(0, abs=1e-12)
    assert L.l_eikonal(field_of(lambda p: 2 * p[:, 0]), pts).value == pytest.approx(1.0)


def test_eikonal_sphere():
    spec = GridSpec.cube([-2, -2, -2], 4.0, 20)
    c = np.zeros(3)
    b = field_of(lambda p: np.linalg.norm(p - c, axis=1) - 1.0, spec)
    rng = np.random.default_rng(1)
    pts = rng.uniform(-1.6, 1.6, (4000, 3))
    pts = pts[np.linalg.norm(pts, axis=1) >= 2 * spec.voxel_size[0]][:1000]
    assert L.l_eikonal(b, pts).value < 0.05


def test_hessian_examples():
    rng = np.random.default_rng(2)
    centers = SPEC.centers().reshape(-1, 3)
    g = rng.normal(size=3)
    assert L.l_hessian(field_of(lambda p: p @ g + 0.4), centers).value == pytest.approx(0, abs=1e-9)
    assert L.l_hessian(field_of(lambda p: p[:, 0] ** 2), centers).value == pytest.approx(2.0, abs=1e-9)


@settings(max_examples=20, deadline=None)
@given(seed=seeds)
def test_hessian_matches_loop_and_non_negative(seed):
    rng = np.random.default_rng(seed)
    vals = rng.normal(size=SPEC.size)
    b = field_of(lambda p: vals)
    centers = SPEC.centers().reshape(-1, 3)
    pts = centers[rng.choice(len(centers), 20, replace=False)]
    inside = L.interior_mask(SPEC, pts)
    if not inside.any():
        return
    got = L.l_hessian(b, pts).value
    assert got >= 0
    f = lambda q: b.sdf(q[None]).value[0]
    expect = np.mean([np.abs(oracles.hessian_loop(f, p, SPEC.voxel_size)).sum() for p in pts[inside]])
    assert got == pytest.approx(expect, rel=1e-9)


def test_hessian_needs_interior_points():
    with pytest.raises(DomainError):
        L.l_hessian(field_of(lambda p: p[:, 0]), SPEC.centers()[0].reshape(-1, 3))


def test_sparsity_pointwise():
    assert L.l_sparsity(const([-2.0])).value == 2
    assert L.l_sparsity(const([3.0])).value == 0
    assert L.l_sparsity(const([0.0])).value == 0


@settings(max_examples=30, deadline=None)
@given(seed=seeds)
def test_sparsity_is_mean_of_hinge(seed):
    s = np.random.default_rng(seed).normal(size=50)
    assert L.l_sparsity(const(s)).value == pytest.approx(np.mean(np.maximum(-s, 0)), abs=1e-15)


def test_edge_examples():
    rng = np.random.default_rng(3)
    img = rng.random((6, 6, 3))
    assert L.l_edge(const(np.full((6, 6), 4.0)), img).value == 0
    depth = np.full((6, 6), 4.0)
    depth[:, 3:] = 8.0
    edge = np.full((6, 6, 3), 0.2)
    edge[:, 3:] = 0.9
    flat = np.full((6, 6, 3), 0.2)
    assert L.l_edge(const(depth), edge).value < L.l_edge(const(depth), flat).value
    with pytest.raises(DomainError):
        L.l_edge(const(np.ones((1, 5))), img[:1, :5])


@settings(max_examples=20, deadline=None)
@given(seed=seeds)
def test_edge_matches_loop(seed):
    rng = np.random.default_rng(seed)
    d, img = rng.uniform(1, 30, (5, 7)), rng.random((5, 7, 3))
    assert L.l_edge(const(d), img).value == pytest.approx(oracles.edge_loop(d, img), rel=1e-12)


def test_semantic_examples():
    assert L.l_semantic(const([[0.0, 1.0, 0.0]]), [1]).value == pytest.approx(0)
    assert L.l_semantic(const([[0.25] * 4]), [2]).value == pytest.approx(math.log(4))
    assert L.l_semantic(const([[1 - 1e-10, 1e-10]]), [1]).value == pytest.approx(-math.log(1e-8))
    with pytest.raises(DomainError):
        L.l_semantic(const([[0.5, 0.5]]), [2])


def test_total_loss_arithmetic():
    w = L.LossWeights(rgb=0, eikonal=0, hessian=0, sparsity=0)
    rep = L.total_loss({"dep": 0.7, "rgb": 3.0, "eikonal": 2.0, "hessian": 1.0, "sparsity": 5.0}, w)
    assert rep.total == pytest.approx(0.7)
    d = L.LossWeights()
    assert (d.rgb, d.eikonal, d.hessian, d.sparsity, d.edge, d.semantic) == (0.1, 0.1, 0.1, 0.001, 0.01, 0.1)


@settings(max_examples=40, deadline=None)
@given(seed=seeds)
def test_total_is_weighted_sum(seed):
    rng = np.random.default_rng(seed)
    terms = {k: float(rng.random()) for k in ("dep", "rgb", "eikonal", "hessian", "sparsity", "edge", "semantic")}
    lam = rng.random(6)
    w = L.LossWeights(*lam, enabled=tuple(terms))
    rep = L.total_loss(terms, w)
    expect = terms["dep"] + sum(l * terms[k] for l, k in zip(lam, ("rgb", "eikonal", "hessian", "sparsity", "edge", "semantic")))
    assert rep.total == pytest.approx(expect, rel=1e-12)


def test_total_nan_names_term():
    with pytest.raises(NumericError, match="eikonal"):
        L.total_loss({"dep": 0.1, "eikonal": float("nan")}, L.LossWeights())


def test_profiles():
    assert L.PROFILES["depth"] == ("dep", "eikonal", "edge")
    assert L.PROFILES["novel-depth"] == ("dep", "rgb", "eikonal")
    assert set(L.PROFILES["occupancy"]) == set(L.PROFILES["novel-depth"]) | {"hessian", "sparsity"}
    with pytest.raises(DomainError):
        L.LossWeights(rgb=-1)
