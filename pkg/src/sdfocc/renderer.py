"""Ray sampling and SDF volume rendering.

Opacity between consecutive samples follows the logistic-CDF ratio

    alpha_m = max((Phi(s_m) - Phi(s_{m+1})) / Phi(s_m), 0),  Phi(x) = 1 / (1 + exp(-a x))

evaluated in log space as ``1 - exp(logPhi(s_{m+1}) - logPhi(s_m))`` so a
large sharpness ``a`` cannot underflow ``Phi(s_m)`` to zero.  Transmittance
is the running product of ``1 - alpha`` and the weights ``T_m * alpha_m``
integrate color, depth and semantics.  Probability mass left after the last
sample (the residual) goes to the background color and to the exit depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import EmptyRayError, NumericError
from .geometry import Aabb, Ray, ray_aabb_batch

DEFAULT_SAMPLES = 96


@dataclass
class RaySamples:
    """Per-ray samples; ``alphas``, ``weights`` and ``residual`` are Vars."""

    depths: np.ndarray      # (R, M) Euclidean ray parameter
    points: np.ndarray      # (R, M, 3)
    t_near: np.ndarray
    t_far: np.ndarray
    sdf: ad.Var             # (R, M)
    alphas: ad.Var          # (R, M-1)
    transmittance: ad.Var   # (R, M-1)
    weights: ad.Var         # (R, M-1)
    residual: ad.Var        # (R,)

    @property
    def proposal_depths(self):
        """Depths paired with each weight: the midpoint of its interval, so a
        sharp surface lands within half a sample spacing of its crossing."""
        return 0.5 * (self.depths[:, :-1] + self.depths[:, 1:])


@dataclass
class RenderResult:
    color: ad.Var           # (R, 3)
    depth: ad.Var           # (R,) Euclidean
    semantics: ad.Var | None
    weight_sum: ad.Var
    samples: RaySamples


def sample_ray_points(origins, directions, t_near, t_far, M):
    """Cell-centered uniform samples: t_i = t_near + (i + 0.5) (t_far - t_near) / M."""
    if M < 2:
        raise ValueError("need at least two samples per ray")
    t_near = np.asarray(t_near, dtype=np.float64)
    t_far = np.asarray(t_far, dtype=np.float64)
    step = (t_far - t_near) / M
    depths = t_near[..., None] + (np.arange(M) + 0.5) * step[..., None]
    points = origins[..., None, :] + depths[..., None] * directions[..., None, :]
    return points, depths


def sample_ray(ray: Ray, box: Aabb, M):
    tn, tf, hit = ray_aabb_batch(ray.origin[None], ray.direction[None], box)
    if not hit[0]:
        raise EmptyRayError("ray misses the volume")
    points, depths = sample_ray_points(ray.origin[None], ray.direction[None], tn, tf, M)
    return points[0], depths[0]


def alphas_from_sdf(s, a):
    """Discrete opacities (..., M-1) from SDF samples (..., M) and sharpness ``a``."""
    if not np.all(np.isfinite(s.value)):
        raise NumericError("non-finite SDF samples")
    log_phi = ad.log_sigmoid(s * a)
    d = log_phi[..., 1:] - log_phi[..., :-1]
    # a non-negative log ratio means alpha = 0; zero it before exp so
    # large values cannot overflow into inf * 0 in the backward pass
    d = ad.where(d.value < 0, d, 0.0)
    return 1.0 - ad.exp(d)


def weights_from_alphas(alphas):
    """(weights, transmittance, residual) from opacities along the last axis."""
    trans = ad.exclusive_cumprod(1.0 - alphas)
    T = trans[..., :-1]
    return T * alphas, T, trans[..., -1]


def march(bound, origins, directions, M=DEFAULT_SAMPLES, semantics=False, t_near=None, t_far=None):
    """Sample, query and weight rays; returns (samples, color, logits)."""
    if t_near is None:
        t_near, t_far, hit = ray_aabb_batch(origins, directions, bound.spec.box)
        if not np.all(hit):
            raise EmptyRayError(f"{np.sum(~hit)} rays miss the volume")
    points, depths = sample_ray_points(origins, directions, t_near, t_far, M)
    s, color, logits = bound.query(points, semantics=semantics)
    alphas = alphas_from_sdf(s, bound.sharpness())
    w, T, residual = weights_from_alphas(alphas)
    samples = RaySamples(depths, points, np.asarray(t_near), np.asarray(t_far), s, alphas, T, w, residual)
    return samples, color, logits


def composite(samples: RaySamples, color, logits, background):
    """Integrate per-sample attributes with the rendering weights."""
    w = samples.weights
    res = samples.residual
    rgb = ad.sum(w[..., None] * color[..., :-1, :], axis=-2) + res[..., None] * background
    depth = ad.sum(w * samples.proposal_depths, axis=-1) + res * samples.t_far
    sem = None
    if logits is not None:
        prob = ad.softmax(logits[..., :-1, :], axis=-1)
        C = prob.shape[-1]
        mix = ad.sum(w[..., None] * prob, axis=-2) + res[..., None] * (1.0 / C)
        sem = mix / ad.sum(mix, axis=-1, keepdims=True)
    return RenderResult(rgb, depth, sem, ad.sum(w, axis=-1), samples)


def render_rays(bound, origins, directions, M=DEFAULT_SAMPLES, semantics=False):
    samples, color, logits = march(bound, origins, directions, M, semantics)
    return composite(samples, color, logits, bound.background)


def render_ray(ray: Ray, bound, M=DEFAULT_SAMPLES, semantics=False):
    return render_rays(bound, ray.origin[None], ray.direction[None], M, semantics)


def render_image(field, cam, M=DEFAULT_SAMPLES, chunk=4096, dtype=np.float64):
    """Full-image render without gradients.

    Returns (zdepth, color) maps; pixels whose ray misses the volume get
    ``nan`` depth and the background color.
    """
    from .geometry import pixels_to_rays

    H, W = cam.height, cam.width
    vv, uu = np.mgrid[0:H, 0:W]
    pixels = np.stack([uu.ravel(), vv.ravel()], axis=-1).astype(np.float64)
    origins, dirs = pixels_to_rays(cam, pixels)
    tn, tf, hit = ray_aabb_batch(origins, dirs, field.spec.box)
    depth = np.full(H * W, np.nan)
    color = np.tile(np.asarray(field.params["background"], dtype=np.float64), (H * W, 1))
    cos = dirs @ cam.optical_axis
    idx = np.flatnonzero(hit)
    for start in range(0, idx.size, chunk):
        sel = idx[start:start + chunk]
        tape = ad.Tape(dtype)
        bound = field.bind(tape)
        samples, c, _ = march(bound, origins[sel], dirs[sel], M, t_near=tn[sel], t_far=tf[sel])
        out = composite(samples, c, None, bound.background)
        depth[sel] = out.depth.value * cos[sel]
        color[sel] = out.color.value
    return depth.reshape(H, W), color.reshape(H, W, 3)
