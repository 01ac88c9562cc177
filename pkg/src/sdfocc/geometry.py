"""Pinhole cameras, rays, projection, pixel warping and image sampling.

Conventions: pixel (0, 0) has its center at (0.0, 0.0); the camera frame is
x right, y down, z forward; a :class:`Pose` maps world points into the
camera frame, ``x_cam = R @ x_world + t``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BehindCameraError, DomainError

NEAR_CLIP = 0.1


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise DomainError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise DomainError("principal point outside the image")

    @property
    def K(self):
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def scaled(self, factor: int) -> "Intrinsics":
        """Intrinsics of the image downsampled by an integer ``factor``."""
        s = 1.0 / factor
        return Intrinsics(self.fx * s, self.fy * s, (self.cx + 0.5) * s - 0.5,
                          (self.cy + 0.5) * s - 0.5, self.width // factor, self.height // factor)


@dataclass(frozen=True)
class Pose:
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6) or abs(np.linalg.det(R) - 1) > 1e-6:
            raise DomainError("rotation is not a proper orthonormal matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls):
        return cls(np.eye(3), np.zeros(3))

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def inverse(self) -> "Pose":
        return Pose(self.rotation.T, -self.rotation.T @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self after other: x -> self(other(x))."""
        return Pose(self.rotation @ other.rotation,
                    self.rotation @ other.translation + self.translation)

    def matrix(self):
        return np.hstack([self.rotation, self.translation[:, None]])


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    pose: Pose

    @property
    def width(self):
        return self.intrinsics.width

    @property
    def height(self):
        return self.intrinsics.height

    @property
    def optical_axis(self):
        """Unit viewing direction (camera +z) in world coordinates."""
        return self.pose.rotation[2].copy()

    def with_pose(self, pose):
        return Camera(self.intrinsics, pose)

    def scaled(self, factor):
        return Camera(self.intrinsics.scaled(factor), self.pose)


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        n = np.linalg.norm(d)
        if abs(n - 1.0) > 1e-9:
            raise DomainError("ray direction must be unit length")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min, dtype=np.float64)
        hi = np.asarray(self.max, dtype=np.float64)
        if lo.shape != (3,) or hi.shape != (3,) or not np.all(lo < hi):
            raise DomainError("box min must be below max on every axis")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def extent(self):
        return self.max - self.min

    def contains(self, p):
        p = np.asarray(p)
        return np.all((p >= self.min) & (p <= self.max), axis=-1)


def pixel_directions(cam: Camera, pixels):
    """Unit world-frame directions through continuous ``pixels`` (N, 2)."""
    pixels = np.asarray(pixels, dtype=np.float64)
    k = cam.intrinsics
    rays_cam = np.stack([(pixels[..., 0] - k.cx) / k.fx,
                         (pixels[..., 1] - k.cy) / k.fy,
                         np.ones(pixels.shape[:-1])], axis=-1)
    d = rays_cam @ cam.pose.rotation  # R^T applied on the left
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def pixels_to_rays(cam: Camera, pixels):
    """Batched back-projection: (origins, directions), each (N, 3)."""
    d = pixel_directions(cam, pixels)
    o = np.broadcast_to(cam.pose.center, d.shape).copy()
    return o, d


def pixel_to_ray(cam: Camera, pixel) -> Ray:
    u, v = pixel
    if not (0 <= u <= cam.width - 1 and 0 <= v <= cam.height - 1):
        raise DomainError(f"pixel {pixel} outside a {cam.width}x{cam.height} image")
    d = pixel_directions(cam, np.asarray(pixel, dtype=np.float64)[None])[0]
    return Ray(cam.pose.center, d)


def project_points(cam: Camera, points):
    """Batched pinhole projection without clipping: (pixels, zdepth)."""
    points = np.asarray(points, dtype=np.float64)
    pc = points @ cam.pose.rotation.T + cam.pose.translation
    z = pc[..., 2]
    k = cam.intrinsics
    with np.errstate(divide="ignore", invalid="ignore"):
        uv = np.stack([k.fx * pc[..., 0] / z + k.cx, k.fy * pc[..., 1] / z + k.cy], axis=-1)
    return uv, z


def project_point(cam: Camera, point):
    uv, z = project_points(cam, np.asarray(point, dtype=np.float64)[None])
    if not z[0] > NEAR_CLIP:
        raise BehindCameraError(f"point at camera depth {z[0]:.3f} m is behind the near clip")
    return uv[0], float(z[0])


def backproject(cam: Camera, pixels, zdepth):
    """World points at camera-frame depth ``zdepth`` through ``pixels``."""
    pixels = np.asarray(pixels, dtype=np.float64)
    k = cam.intrinsics
    z = np.asarray(zdepth, dtype=np.float64)
    pc = np.stack([(pixels[..., 0] - k.cx) / k.fx * z,
                   (pixels[..., 1] - k.cy) / k.fy * z,
                   np.broadcast_to(z, pixels.shape[:-1])], axis=-1)
    return (pc - cam.pose.translation) @ cam.pose.rotation


@dataclass(frozen=True)
class RelativeCamera:
    """Target-to-source transfer used by the warping losses."""

    target: Camera
    source: Camera

    @property
    def pose(self) -> Pose:
        return self.source.pose.compose(self.target.pose.inverse())

    def warp_terms(self, pixels):
        """Per-pixel constants (q, t) with x_src = z * q + t for z-depth z."""
        pixels = np.asarray(pixels, dtype=np.float64)
        k = self.target.intrinsics
        rel = self.pose
        rays = np.stack([(pixels[..., 0] - k.cx) / k.fx, (pixels[..., 1] - k.cy) / k.fy,
                         np.ones(pixels.shape[:-1])], axis=-1)
        return rays @ rel.rotation.T, rel.translation


def warp_pixels(rel: RelativeCamera, pixels, zdepth):
    """Batched warp of target pixels at z-depth into the source image.

    Returns (uv, valid) where ``valid`` is False for points behind the
    source near clip or landing outside the source image.
    """
    q, t = rel.warp_terms(pixels)
    z = np.asarray(zdepth, dtype=np.float64)
    p = z[..., None] * q + t
    ks = rel.source.intrinsics
    zs = p[..., 2]
    front = zs > NEAR_CLIP
    safe = np.where(front, zs, 1.0)
    uv = np.stack([ks.fx * p[..., 0] / safe + ks.cx, ks.fy * p[..., 1] / safe + ks.cy], axis=-1)
    inside = ((uv[..., 0] >= 0) & (uv[..., 0] <= ks.width - 1)
              & (uv[..., 1] >= 0) & (uv[..., 1] <= ks.height - 1))
    return uv, front & inside


def warp_pixel(x, depth, rel: RelativeCamera):
    """Warp one target pixel at camera z-depth ``depth`` into the source camera.

    The result may fall outside the source image; callers mask it.
    """
    if not depth > NEAR_CLIP:
        raise DomainError("depth must exceed the near clip")
    q, t = rel.warp_terms(np.asarray(x, dtype=np.float64)[None])
    p = depth * q[0] + t
    if not p[2] > NEAR_CLIP:
        raise BehindCameraError("warped point is behind the source camera")
    k = rel.source.intrinsics
    return np.array([k.fx * p[0] / p[2] + k.cx, k.fy * p[1] / p[2] + k.cy])


def ray_aabb_batch(origins, directions, box: Aabb, near=NEAR_CLIP):
    """Slab test for many rays: (t_near, t_far, hit)."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t0 = (box.min - o) * inv
        t1 = (box.max - o) * inv
    lo = np.minimum(t0, t1)
    hi = np.maximum(t0, t1)
    # parallel rays: inside the slab -> unbounded, outside -> empty
    parallel = d == 0
    inside = (o >= box.min) & (o <= box.max)
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    t_near = np.maximum(np.max(lo, axis=-1), near)
    t_far = np.min(hi, axis=-1)
    return t_near, t_far, t_far > t_near


def ray_aabb(ray: Ray, box: Aabb):
    """(t_near, t_far) clipped to t >= near clip, or None on a miss."""
    tn, tf, hit = ray_aabb_batch(ray.origin[None], ray.direction[None], box)
    if not hit[0]:
        return None
    return float(tn[0]), float(tf[0])


def bilinear_weights(image_shape, xy):
    """Corner indices and weights for continuous coords ``xy`` (N, 2).

    Returns (v0, u0, weights) with weights (N, 4) ordered
    [(v0,u0), (v0,u0+1), (v0+1,u0), (v0+1,u0+1)].
    """
    H, W = image_shape[:2]
    xy = np.asarray(xy, dtype=np.float64)
    u, v = xy[..., 0], xy[..., 1]
    if np.any((u < 0) | (u > W - 1) | (v < 0) | (v > H - 1)) or not np.all(np.isfinite(xy)):
        raise DomainError("sample location outside the image")
    u0 = np.minimum(np.floor(u).astype(np.int64), W - 2)
    v0 = np.minimum(np.floor(v).astype(np.int64), H - 2)
    tu, tv = u - u0, v - v0
    w = np.stack([(1 - tu) * (1 - tv), tu * (1 - tv), (1 - tu) * tv, tu * tv], axis=-1)
    if __debug__:
        assert np.all(w >= 0) and np.allclose(w.sum(-1), 1.0)
    return v0, u0, w


def bilinear_sample(image, xy):
    """Batched bilinear lookup of ``image`` (H, W, C) at ``xy`` (N, 2)."""
    image = np.asarray(image)
    v0, u0, w = bilinear_weights(image.shape, xy)
    corners = np.stack([image[v0, u0], image[v0, u0 + 1],
                        image[v0 + 1, u0], image[v0 + 1, u0 + 1]], axis=-2)
    return np.sum(w[..., None] * corners, axis=-2)


def bilinear_image_sample(image, x):
    return bilinear_sample(image, np.asarray(x, dtype=np.float64)[None])[0]


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    """World-to-camera pose looking from ``eye`` toward ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    fwd /= np.linalg.norm(fwd)
    right = np.cross(fwd, np.asarray(up, dtype=np.float64))
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    R = np.stack([right, down, fwd])
    return Pose(R, -R @ eye)


def yaw_pitch_pose(eye, yaw, pitch=0.0) -> Pose:
    """Pose of a camera at ``eye`` heading ``yaw`` radians from +y, tilted down by ``pitch``."""
    fwd = np.array([-np.sin(yaw) * np.cos(pitch), np.cos(yaw) * np.cos(pitch), -np.sin(pitch)])
    return look_at(eye, np.asarray(eye, dtype=np.float64) + fwd)
