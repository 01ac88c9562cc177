"""Training objectives.

Depth supervision warps target pixels into temporal neighbour images.  The
multi-proposal form scores every sample depth along a ray against the
source image and averages those (constant) dissimilarities with the
differentiable rendering weights, so the gradient reaches the field through
the weights only.  The single-depth form warps at the rendered depth and
differentiates through bilinear sampling of the source image.
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .errors import DomainError, NumericError
from .geometry import RelativeCamera, bilinear_sample, warp_pixels

# warped-loss sentinel used to drop an invalid source from the temporal min
_INVALID = 1e6

PROFILES = {
    "depth": ("dep", "eikonal", "edge"),
    "novel-depth": ("dep", "rgb", "eikonal"),
    "occupancy": ("dep", "rgb", "eikonal", "hessian", "sparsity"),
}


@dataclass
class LossWeights:
    rgb: float = 0.1
    eikonal: float = 0.1
    hessian: float = 0.1
    sparsity: float = 0.001
    edge: float = 0.01
    semantic: float = 0.1
    enabled: tuple = PROFILES["occupancy"]

    def __post_init__(self):
        for name in ("rgb", "eikonal", "hessian", "sparsity", "edge", "semantic"):
            if getattr(self, name) < 0:
                raise DomainError(f"loss weight {name} must be non-negative")

    @classmethod
    def for_profile(cls, profile, semantic=False, **overrides):
        enabled = PROFILES[profile] + (("semantic",) if semantic else ())
        return cls(enabled=enabled, **overrides)

    def weight(self, term):
        return 1.0 if term == "dep" else getattr(self, term)


@dataclass
class LossReport:
    terms: dict
    weights: dict
    total: float
    total_var: object = None
    counts: dict = dc_field(default_factory=dict)


# ------------------------------------------------------------------ dissimilarity


def photometric(a, b):
    """Mean absolute difference over the channel axis (works on Vars too)."""
    if isinstance(a, ad.Var) or isinstance(b, ad.Var):
        return ad.mean(ad.absolute(a - b), axis=-1)
    return np.mean(np.abs(np.asarray(a) - np.asarray(b)), axis=-1)


_OFFSETS = np.array([(du, dv) for dv in (-1, 0, 1) for du in (-1, 0, 1)], dtype=np.float64)


def _patch(image, xy):
    H, W = image.shape[:2]
    pts = np.asarray(xy, dtype=np.float64)[..., None, :] + _OFFSETS
    pts[..., 0] = np.clip(pts[..., 0], 0, W - 1)
    pts[..., 1] = np.clip(pts[..., 1], 0, H - 1)
    return bilinear_sample(image, pts.reshape(-1, 2)).reshape(pts.shape[:-1] + (image.shape[2],))


def _ssim_l1(x, y):
    """0.85 * (1 - SSIM) / 2 + 0.15 * L1 for 3x3 patches (..., 9, C)."""
    c1, c2 = 0.01 ** 2, 0.03 ** 2
    mx, my = x.mean(axis=-2), y.mean(axis=-2)
    sx = (x * x).mean(axis=-2) - mx * mx
    sy = (y * y).mean(axis=-2) - my * my
    sxy = (x * y).mean(axis=-2) - mx * my
    ssim = (2 * mx * my + c1) * (2 * sxy + c2) / ((mx * mx + my * my + c1) * (sx + sy + c2))
    dssim = (1 - ssim) * 0.5
    if isinstance(dssim, ad.Var):
        dssim = ad.minimum(ad.clip_min(dssim, 0.0), 1.0)
        center = ad.mean(ad.absolute(x[..., 4, :] - y[..., 4, :]), axis=-1)
        return 0.85 * ad.mean(dssim, axis=-1) + 0.15 * center
    dssim = np.clip(dssim, 0.0, 1.0)
    return 0.85 * dssim.mean(axis=-1) + 0.15 * photometric(x[..., 4, :], y[..., 4, :])


def target_colors(image, pixels):
    pixels = np.asarray(pixels)
    return np.asarray(image)[pixels[:, 1].astype(np.int64), pixels[:, 0].astype(np.int64)]


def dissimilarity(target, pixels, source, xy, mode="l1"):
    """Dissimilarity between target pixels and continuous source locations.

    ``xy`` has shape (R, ..., 2) and is clamped into the source image;
    callers mask locations that left it.
    """
    H, W = source.shape[:2]
    xy = np.asarray(xy, dtype=np.float64).copy()
    xy[..., 0] = np.clip(np.nan_to_num(xy[..., 0]), 0, W - 1)
    xy[..., 1] = np.clip(np.nan_to_num(xy[..., 1]), 0, H - 1)
    extra = xy.shape[1:-1]
    if mode == "l1":
        tgt = target_colors(target, pixels).reshape((-1,) + (1,) * len(extra) + (3,))
        src = bilinear_sample(source, xy.reshape(-1, 2)).reshape(xy.shape[:-1] + (3,))
        return photometric(tgt, src)
    if mode == "ssim":
        tp = _patch(target, pixels)
        tp = tp.reshape((tp.shape[0],) + (1,) * len(extra) + tp.shape[1:])
        sp = _patch(source, xy.reshape(-1, 2)).reshape(xy.shape[:-1] + (9, 3))
        return _ssim_l1(tp, sp)
    raise ValueError(f"unknown dissimilarity {mode!r}")


# ------------------------------------------------------------------ depth losses


def l_rpj(pixels, target, source, zdepth, rel: RelativeCamera, mode="l1"):
    """Single-depth reprojection loss, differentiable through ``zdepth``.

    ``zdepth`` is an (R,) Var of camera z-depths.  Returns (loss (R,), valid)
    where invalid rays (behind the source or outside it) must be excluded.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    q, t = rel.warp_terms(pixels)
    R = pixels.shape[0]
    p = ad.reshape(zdepth, (R, 1)) * q + t
    ks = rel.source.intrinsics
    zs_val = p.value[:, 2]
    front = zs_val > 0.1
    zs = ad.where(front, p[:, 2], 1.0)
    u = ks.fx * p[:, 0] / zs + ks.cx
    v = ks.fy * p[:, 1] / zs + ks.cy
    uv = np.stack([u.value, v.value], axis=-1)
    valid = front & (uv[:, 0] >= 0) & (uv[:, 0] <= ks.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= ks.height - 1)
    if mode == "l1":
        sampled = ad.bilinear_image(source, u, v)
        return photometric(target_colors(target, pixels), sampled), valid
    tp = _patch(target, pixels)
    uu = ad.reshape(u, (R, 1)) + _OFFSETS[:, 0]
    vv = ad.reshape(v, (R, 1)) + _OFFSETS[:, 1]
    sp = ad.bilinear_image(source, uu, vv)
    return _ssim_l1(tp, sp), valid


def proposal_dissimilarities(pixels, target, source, zdepths, rel, mode="l1"):
    """(dissimilarity, valid) for every depth proposal, both (R, K).  No gradient."""
    pixels = np.asarray(pixels, dtype=np.float64)
    K = zdepths.shape[1]
    pix = np.repeat(pixels[:, None, :], K, axis=1)
    uv, valid = warp_pixels(rel, pix, zdepths)
    return dissimilarity(target, pixels, source, uv, mode), valid


def l_mvs(weights, residual, diss, valid, bg_diss, bg_valid, min_kept=0.5):
    """Weight-averaged proposal dissimilarity per ray.

    ``weights`` (R, K) and ``residual`` (R,) are Vars; the dissimilarities
    and validity masks are constants, the residual pairing with the
    background proposal at the exit depth.  Proposals that left the source
    image are dropped and the kept weights renormalised; rays keeping fewer
    than ``min_kept`` of their proposals are reported invalid.
    Returns (loss (R,), ray_valid).
    """
    valid = np.asarray(valid, dtype=bool)
    bg_valid = np.asarray(bg_valid, dtype=bool)
    K = valid.shape[1]
    kept = valid.sum(axis=1) + bg_valid
    ray_valid = kept >= min_kept * (K + 1)
    all_kept = kept == K + 1
    d = np.where(valid, diss, 0.0)
    b = np.where(bg_valid, bg_diss, 0.0)
    numer = ad.sum(weights * d, axis=-1) + residual * b
    if np.all(all_kept):
        return numer, ray_valid
    mass = ad.sum(weights * valid, axis=-1) + residual * bg_valid
    denom = ad.where(all_kept, 1.0, mass + 1e-10)
    return numer / denom, ray_valid


def mvs_for_source(pixels, target, source, samples, rel, cos, mode="l1"):
    """:func:`l_mvs` of rendered samples against one source frame."""
    zd = samples.proposal_depths * cos[:, None]
    diss, valid = proposal_dissimilarities(pixels, target, source, zd, rel, mode)
    zf = (samples.t_far * cos)[:, None]
    bd, bv = proposal_dissimilarities(pixels, target, source, zf, rel, mode)
    return l_mvs(samples.weights, samples.residual, diss, valid, bd[:, 0], bv[:, 0])


def automask_keep(pixels, target, sources, rels, zdepth, mode="l1"):
    """True where the warped match at the rendered depth beats the unwarped one.

    Pixels whose identity (unwarped) dissimilarity is already at least as
    good as the best warped one are masked out.  If no source gives a valid
    warp at the rendered depth the pixel is kept.
    """
    pixels = np.asarray(pixels, dtype=np.float64)
    identity = np.min([dissimilarity(target, pixels, s, pixels[:, None, :], mode)[:, 0]
                       for s in sources], axis=0)
    best = np.full(pixels.shape[0], np.inf)
    for s, rel in zip(sources, rels):
        uv, ok = warp_pixels(rel, pixels[:, None, :], np.asarray(zdepth)[:, None])
        d = dissimilarity(target, pixels, s, uv, mode)[:, 0]
        best = np.where(ok[:, 0], np.minimum(best, d), best)
    return ~(identity <= best)


def l_dep(pixels, target, sources, rels, samples=None, zdepth=None, cos=None, mode="l1",
          kind="mvs"):
    """Temporal-min depth loss with automasking.

    ``kind="mvs"`` averages proposal dissimilarities with the rendering
    weights of ``samples``; ``kind="rpj"`` warps at ``zdepth`` (an (R,) Var
    of rendered z-depths).  Returns (mean loss Var, per-ray loss, counts).
    """
    if not sources:
        raise DomainError("depth loss needs at least one source frame")
    per_source, valids = [], []
    for src, rel in zip(sources, rels):
        if kind == "mvs":
            loss, ok = mvs_for_source(pixels, target, src, samples, rel, cos, mode)
        else:
            loss, ok = l_rpj(pixels, target, src, zdepth, rel, mode)
        per_source.append(ad.where(ok, loss, _INVALID))
        valids.append(ok)
    best = per_source[0]
    for other in per_source[1:]:
        best = ad.minimum(best, other)
    ray_valid = np.any(valids, axis=0)
    zd = zdepth.value if isinstance(zdepth, ad.Var) else np.asarray(zdepth)
    keep = automask_keep(pixels, target, sources, rels, zd, mode)
    use = ray_valid & keep
    per_ray = ad.where(use, best, 0.0)
    n_valid = int(ray_valid.sum())
    counts = {"valid": n_valid, "masked": int((ray_valid & ~keep).sum()), "rays": len(ray_valid)}
    if n_valid == 0:
        return None, per_ray, counts
    return ad.sum(per_ray) * (1.0 / n_valid), per_ray, counts


# ------------------------------------------------------------------ other terms


def l_rgb(rendered, target_pixels):
    return ad.mean(photometric(rendered, np.asarray(target_pixels)))


def l_eikonal(bound, points):
    g = bound.gradient(np.asarray(points, dtype=np.float64))
    return ad.mean(ad.absolute(ad.norm(g, axis=-1) - 1.0))


def _hessian_stencil(step):
    """Offsets (19, 3) and weights (19, 9) for central-difference Hessians."""
    offsets = [np.zeros(3)]
    for a in range(3):
        for s in (1, -1):
            e = np.zeros(3)
            e[a] = s
            offsets.append(e)
    pairs = [(a, b) for a in range(3) for b in range(a + 1, 3)]
    for a, b in pairs:
        for sa, sb in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            e = np.zeros(3)
            e[a], e[b] = sa, sb
            offsets.append(e)
    offsets = np.array(offsets)
    W = np.zeros((len(offsets), 9))
    for a in range(3):
        W[0, 4 * a] = -2.0 / step[a] ** 2
        W[1 + 2 * a, 4 * a] = 1.0 / step[a] ** 2
        W[2 + 2 * a, 4 * a] = 1.0 / step[a] ** 2
    for n, (a, b) in enumerate(pairs):
        base = 7 + 4 * n
        scale = 1.0 / (4.0 * step[a] * step[b])
        for j, sign in enumerate((1, -1, -1, 1)):
            W[base + j, 3 * a + b] = sign * scale
            W[base + j, 3 * b + a] = sign * scale
    return offsets * step, W


def interior_mask(spec, points):
    f = spec.continuous_index(points)
    res = np.asarray(spec.resolution)
    return np.all((f >= 1 - 1e-9) & (f <= res - 2 + 1e-9), axis=-1)


def l_hessian(bound, points):
    """Mean element-wise 1-norm of the finite-difference SDF Hessian.

    Points closer than one voxel to the outermost voxel centers are skipped.
    """
    spec = bound.spec
    points = np.asarray(points, dtype=np.float64)
    points = points[interior_mask(spec, points)]
    if points.shape[0] == 0:
        raise DomainError("no interior points for the Hessian loss")
    offsets, W = _hessian_stencil(spec.voxel_size)
    s = bound.sdf(points[:, None, :] + offsets)
    H = ad.matmul(s, W)
    return ad.mean(ad.sum(ad.absolute(H), axis=-1))


def l_sparsity(s):
    return ad.mean(ad.relu(-s))


def l_edge(depth, image):
    """Edge-aware smoothness of mean-normalised disparity on an (h, w) patch."""
    if depth.ndim != 2 or depth.shape[0] < 2 or depth.shape[1] < 2:
        raise DomainError("edge loss needs at least a 2x2 patch")
    image = np.asarray(image)
    disp = 1.0 / depth
    dn = disp / ad.mean(disp)
    wx = np.exp(-np.mean(np.abs(image[:, 1:] - image[:, :-1]), axis=-1))
    wy = np.exp(-np.mean(np.abs(image[1:] - image[:-1]), axis=-1))
    gx = ad.absolute(dn[:, 1:] - dn[:, :-1]) * wx
    gy = ad.absolute(dn[1:] - dn[:-1]) * wy
    return ad.mean(gx) + ad.mean(gy)


def l_semantic(prob, labels):
    labels = np.asarray(labels, dtype=np.int64)
    C = prob.shape[-1]
    if np.any(labels >= C) or np.any(labels < 0):
        raise DomainError(f"label outside [0, {C})")
    picked = prob[np.arange(labels.size), labels]
    return ad.mean(-ad.log(ad.clip_min(picked, 1e-8)))


def total_loss(terms: dict, weights: LossWeights, counts=None) -> LossReport:
    """L = L_dep + sum of weighted enabled terms."""
    total = None
    values, used = {}, {}
    for name in weights.enabled:
        if name not in terms or terms[name] is None:
            continue
        v = terms[name]
        val = float(v.value if isinstance(v, ad.Var) else v)
        if not np.isfinite(val):
            raise NumericError(f"loss term {name} is not finite")
        lam = weights.weight(name)
        values[name] = val
        used[name] = lam
        part = v * lam
        total = part if total is None else total + part
    total_val = float(total.value) if isinstance(total, ad.Var) else float(total or 0.0)
    return LossReport(values, used, total_val, total, counts or {})
