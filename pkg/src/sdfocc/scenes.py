"""Analytic ground-truth scenes, camera trajectories and the dataset format.

A scene is a union of exact primitive SDFs (sphere, axis-aligned box,
half-space below a plane), optionally restricted to a bounding box.  The
oracle renderer intersects rays with the primitives analytically and
shades hits with a procedural checker texture and a fixed directional
light, so the images carry enough texture for photometric losses.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import DomainError, ParseError
from .geometry import (Aabb, Camera, Intrinsics, Pose, look_at, pixels_to_rays, ray_aabb_batch,
                       yaw_pitch_pose)

FAR_SENTINEL = 1000.0


@dataclass
class Primitive:
    kind: str                 # "sphere" | "box" | "plane"
    params: tuple             # sphere: (cx, cy, cz, r); box: (cx, cy, cz, hx, hy, hz); plane: (nx, ny, nz, h)
    albedo: tuple = (0.7, 0.7, 0.7)
    label: int = 1
    texture: float = 0.5      # checker cell size in meters, 0 disables

    def __post_init__(self):
        p = tuple(float(x) for x in self.params)
        if self.kind == "sphere":
            if len(p) != 4 or p[3] <= 0:
                raise DomainError("sphere needs center and a positive radius")
        elif self.kind == "box":
            if len(p) != 6 or min(p[3:]) <= 0:
                raise DomainError("box needs center and positive half-extents")
        elif self.kind == "plane":
            if len(p) != 4:
                raise DomainError("plane needs a normal and an offset")
            n = np.array(p[:3])
            n /= np.linalg.norm(n)
            p = (*n, p[3])
        else:
            raise DomainError(f"unknown primitive kind {self.kind!r}")
        self.params = p
        self.albedo = tuple(float(a) for a in self.albedo)

    def sdf(self, points):
        p = np.asarray(points, dtype=np.float64)
        v = self.params
        if self.kind == "sphere":
            return np.linalg.norm(p - v[:3], axis=-1) - v[3]
        if self.kind == "box":
            q = np.abs(p - v[:3]) - v[3:]
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            return outside + np.minimum(np.max(q, axis=-1), 0.0)
        return p @ np.array(v[:3]) - v[3]

    def intersect(self, o, d):
        """First entry distance along each ray (inf on a miss) and normals."""
        v = self.params
        n_rays = o.shape[0]
        normals = np.zeros((n_rays, 3))
        if self.kind == "sphere":
            c = np.array(v[:3])
            oc = o - c
            b = np.sum(oc * d, axis=-1)
            cc = np.sum(oc * oc, axis=-1) - v[3] ** 2
            disc = b * b - cc
            hit = disc >= 0
            sq = np.sqrt(np.where(hit, disc, 0.0))
            t = np.where(hit, -b - sq, np.inf)
            t = np.where(t > 0, t, np.inf)
            normals = (o + np.where(np.isfinite(t), t, 0.0)[:, None] * d - c) / v[3]
            return t, normals
        if self.kind == "box":
            lo = np.array(v[:3]) - v[3:]
            hi = np.array(v[:3]) + v[3:]
            tn, tf, hit = ray_aabb_batch(o, d, Aabb(lo, hi), near=-np.inf)
            t = np.where(hit & (tn > 0), tn, np.inf)
            pts = o + np.where(np.isfinite(t), t, 0.0)[:, None] * d
            q = (pts - np.array(v[:3])) / np.array(v[3:])
            axis = np.argmax(np.abs(q), axis=-1)
            normals[np.arange(n_rays), axis] = np.sign(q[np.arange(n_rays), axis])
            return t, normals
        n = np.array(v[:3])
        denom = d @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (v[3] - o @ n) / denom
        above = (o @ n - v[3]) > 0
        t = np.where((denom < 0) & above & (t > 0), t, np.inf)
        normals[:] = n
        return t, normals

    def texture_at(self, points):
        if self.texture <= 0:
            return np.ones(points.shape[0])
        cells = np.floor(points / self.texture + 0.25).astype(np.int64)
        checker = np.sum(cells, axis=-1) % 2
        # a slow gradient inside the cells keeps flat patches from being uniform
        phase = 2.0 * np.pi * points / (2.7 * self.texture)
        ramp = 0.5 + 0.5 * np.sin(phase[:, 0] + 1.7 * phase[:, 1] + 0.6 * phase[:, 2])
        return (1.0 - 0.45 * checker) * (0.75 + 0.25 * ramp)


@dataclass
class AnalyticScene:
    primitives: list
    bounds: Aabb | None = None
    background: tuple = (0.55, 0.7, 0.9)
    light: tuple = (0.4, -0.5, 0.77)
    ambient: float = 0.35

    def __post_init__(self):
        if not self.primitives:
            raise DomainError("scene needs at least one primitive")

    @property
    def n_classes(self):
        return max(p.label for p in self.primitives)


def _bounds_sdf(box: Aabb, points):
    c = 0.5 * (box.min + box.max)
    h = 0.5 * box.extent
    return Primitive("box", (*c, *h)).sdf(points)


def analytic_sdf(scene: AnalyticScene, points):
    """(sdf, albedo, primitive index) of the union at ``points`` (..., 3)."""
    points = np.asarray(points, dtype=np.float64)
    vals = np.stack([p.sdf(points) for p in scene.primitives], axis=-1)
    idx = np.argmin(vals, axis=-1)
    s = np.take_along_axis(vals, idx[..., None], axis=-1)[..., 0]
    if scene.bounds is not None:
        s = np.maximum(s, _bounds_sdf(scene.bounds, points))
    albedo = np.array([p.albedo for p in scene.primitives])[idx]
    return s, albedo, idx


def occupancy_labels(scene: AnalyticScene, points):
    """Ground-truth class per point: 0 free, else the primitive label."""
    s, _, idx = analytic_sdf(scene, points)
    labels = np.array([p.label for p in scene.primitives])[idx]
    return np.where(s <= 0, labels, 0)


def cast_rays(scene: AnalyticScene, origins, directions):
    """Nearest hit per ray: (t, primitive index or -1, normal)."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    best = np.full(o.shape[0], np.inf)
    which = np.full(o.shape[0], -1)
    normal = np.zeros_like(o)
    for i, prim in enumerate(scene.primitives):
        t, n = prim.intersect(o, d)
        closer = t < best
        best = np.where(closer, t, best)
        which = np.where(closer, i, which)
        normal = np.where(closer[:, None], n, normal)
    if scene.bounds is not None:
        tn, tf, hit = ray_aabb_batch(o, d, scene.bounds, near=0.0)
        gone = ~hit | (best > tf) | (best < tn)
        best = np.where(gone, np.inf, best)
        which = np.where(gone, -1, which)
    return best, which, normal


def _shade(scene, which, points, normals):
    light = np.asarray(scene.light, dtype=np.float64)
    light = light / np.linalg.norm(light)
    color = np.tile(np.asarray(scene.background, dtype=np.float64), (which.size, 1))
    for i, prim in enumerate(scene.primitives):
        sel = which == i
        if not sel.any():
            continue
        lam = np.clip(normals[sel] @ light, 0.0, 1.0)
        shade = scene.ambient + (1.0 - scene.ambient) * lam
        color[sel] = np.asarray(prim.albedo) * (prim.texture_at(points[sel]) * shade)[:, None]
    return color


def oracle_render(scene: AnalyticScene, cam: Camera, supersample=2):
    """Exact z-depth, shaded color and label maps for one camera.

    Misses get the far sentinel depth, the background color and label 0.
    Color is averaged over ``supersample``^2 sub-pixel rays; depth and
    labels come from the pixel-center ray.
    """
    H, W = cam.height, cam.width
    vv, uu = np.mgrid[0:H, 0:W]
    pix = np.stack([uu.ravel(), vv.ravel()], axis=-1).astype(np.float64)
    o, d = pixels_to_rays(cam, pix)
    t, which, _ = cast_rays(scene, o, d)
    z = np.where(np.isfinite(t), t * (d @ cam.optical_axis), FAR_SENTINEL)
    labels = np.where(which >= 0, np.array([p.label for p in scene.primitives] + [0])[which], 0)

    n = supersample
    offs = (np.arange(n) + 0.5) / n - 0.5
    color = np.zeros((H * W, 3))
    for du in offs:
        for dv in offs:
            o2, d2 = pixels_to_rays(cam, pix + [du, dv])
            t2, w2, n2 = cast_rays(scene, o2, d2)
            pts = o2 + np.where(np.isfinite(t2), t2, 0.0)[:, None] * d2
            color += _shade(scene, w2, pts, n2)
    color /= n * n
    return z.reshape(H, W), color.reshape(H, W, 3), labels.reshape(H, W).astype(np.uint8)


def sphere_trace(scene: AnalyticScene, origins, directions, t_max=200.0, tol=1e-9, iters=2000):
    """Iterative sphere tracing, an independent check of :func:`cast_rays`."""
    o = np.asarray(origins, dtype=np.float64)
    d = np.asarray(directions, dtype=np.float64)
    t = np.zeros(o.shape[0])
    done = np.zeros(o.shape[0], dtype=bool)
    for _ in range(iters):
        s, _, _ = analytic_sdf(scene, o + t[:, None] * d)
        done |= s < tol
        t = np.where(done, t, t + s)
        if np.all(done | (t > t_max)):
            break
    return np.where(done, t, np.inf)


# ---------------------------------------------------------------- trajectories


def generate_trajectory(kind, frames, spacing, start=(0.0, 0.0, 1.5), heading=0.0,
                        pitch=0.0, radius=20.0):
    """Forward-facing poses with consecutive camera centers ``spacing`` apart.

    ``heading`` is the yaw (radians) from +y toward -x; an arc turns left
    around a circle of ``radius``.
    """
    if frames < 3:
        raise DomainError("a trajectory needs at least three frames")
    start = np.asarray(start, dtype=np.float64)
    poses = []
    if kind == "straight":
        fwd = np.array([-np.sin(heading), np.cos(heading), 0.0])
        for i in range(frames):
            poses.append(yaw_pitch_pose(start + i * spacing * fwd, heading, pitch))
    elif kind == "arc":
        if spacing >= 2 * radius:
            raise DomainError("spacing must be shorter than the arc diameter")
        step = 2.0 * np.arcsin(spacing / (2.0 * radius))
        left = np.array([-np.cos(heading), -np.sin(heading), 0.0])
        center = start + radius * left
        for i in range(frames):
            yaw = heading + i * step
            radial = -np.array([-np.cos(yaw), -np.sin(yaw), 0.0])
            poses.append(yaw_pitch_pose(center + radius * radial, yaw, pitch))
    else:
        raise DomainError(f"unknown trajectory kind {kind!r}")
    return poses


# ---------------------------------------------------------------- image formats


def write_ppm(path, image):
    """Binary P6 with maxval 255; float images in [0, 1] are quantized."""
    img = np.asarray(image)
    if img.dtype != np.uint8:
        img = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img).tobytes())


def write_pgm(path, image):
    img = np.asarray(image, dtype=np.uint8)
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(np.ascontiguousarray(img).tobytes())


def _netpbm_header(data, magic, fields):
    """Parse a netpbm-style header; returns (values, data offset)."""
    if data[:2] != magic:
        raise ParseError(f"expected {magic.decode()} header", 0)
    pos = 2
    values = []
    while len(values) < fields:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token:
            raise ParseError("truncated header", start)
        try:
            values.append(int(token) if magic != b"Pf" or len(values) < 2 else float(token))
        except ValueError:
            raise ParseError(f"bad header field {token!r}", start) from None
    return values, pos + 1


def read_ppm(path):
    """Returns the raw uint8 (H, W, 3) array."""
    with open(path, "rb") as fh:
        data = fh.read()
    (w, h, maxval), off = _netpbm_header(data, b"P6", 3)
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}", off)
    if len(data) - off < w * h * 3:
        raise ParseError("truncated pixel data", len(data))
    return np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=off).reshape(h, w, 3).copy()


def read_pgm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    (w, h, maxval), off = _netpbm_header(data, b"P5", 3)
    if maxval != 255:
        raise ParseError(f"unsupported maxval {maxval}", off)
    if len(data) - off < w * h:
        raise ParseError("truncated pixel data", len(data))
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=off).reshape(h, w).copy()


def write_pfm(path, depth):
    """Single-channel PFM, little-endian (scale -1), rows stored bottom-up."""
    d = np.asarray(depth, dtype="<f4")
    h, w = d.shape
    with open(path, "wb") as fh:
        fh.write(f"Pf\n{w} {h}\n-1.0\n".encode())
        fh.write(np.ascontiguousarray(d[::-1]).tobytes())


def read_pfm(path):
    with open(path, "rb") as fh:
        data = fh.read()
    (w, h, scale), off = _netpbm_header(data, b"Pf", 3)
    dtype = "<f4" if scale < 0 else ">f4"
    if len(data) - off < w * h * 4:
        raise ParseError("truncated float data", len(data))
    arr = np.frombuffer(data, dtype=dtype, count=w * h, offset=off).reshape(h, w)
    return arr[::-1].astype(np.float32)


# ---------------------------------------------------------------- cameras / manifest


def format_camera(frame_id, cam: Camera):
    k = cam.intrinsics
    vals = [k.fx, k.fy, k.cx, k.cy, *cam.pose.matrix().ravel()]
    return " ".join([str(frame_id)] + [repr(float(v)) for v in vals] + [str(k.width), str(k.height)])


def write_cameras(path, frames):
    """``frames`` is an iterable of (frame id, Camera)."""
    with open(path, "w") as fh:
        fh.write("# frame fx fy cx cy r00 r01 r02 t0 r10 r11 r12 t1 r20 r21 r22 t2 width height\n")
        for fid, cam in frames:
            fh.write(format_camera(fid, cam) + "\n")


def read_cameras(path, default_size=None):
    """Map frame id -> Camera; width/height default to 2 * (cx, cy) + 1."""
    cams = {}
    offset = 0
    with open(path, "rb") as fh:
        raw = fh.read()
    for line in raw.splitlines(keepends=True):
        text = line.decode().split("#", 1)[0].strip()
        if text:
            parts = text.split()
            if len(parts) not in (17, 19):
                raise ParseError(f"camera record needs 17 or 19 fields, got {len(parts)}", offset)
            try:
                vals = [float(x) for x in parts[1:17]]
            except ValueError:
                raise ParseError("non-numeric camera field", offset) from None
            fx, fy, cx, cy = vals[:4]
            P = np.array(vals[4:]).reshape(3, 4)
            if len(parts) == 19:
                w, h = int(parts[17]), int(parts[18])
            elif default_size is not None:
                w, h = default_size
            else:
                w, h = int(round(2 * cx + 1)), int(round(2 * cy + 1))
            cams[parts[0]] = Camera(Intrinsics(fx, fy, cx, cy, w, h), Pose(P[:, :3], P[:, 3]))
        offset += len(line)
    return cams


@dataclass
class Frame:
    frame_id: str
    split: str
    timestamp: float
    image: str
    depth: str | None = None
    label: str | None = None


@dataclass
class DatasetManifest:
    frames: list
    bounds: Aabb
    n_classes: int = 0
    root: str = "."
    cameras_file: str = "cameras.txt"

    def __post_init__(self):
        ts = [f.timestamp for f in self.frames]
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise DomainError("frame timestamps must increase strictly")

    def path(self, rel):
        return rel if os.path.isabs(rel) else os.path.join(self.root, rel)

    def split(self, name):
        return [f for f in self.frames if f.split == name]


def write_manifest(path, manifest: DatasetManifest):
    b = manifest.bounds
    with open(path, "w") as fh:
        fh.write("# frame <id> <split> <timestamp> <image> <depth|-> <label|->\n")
        fh.write("bounds " + " ".join(repr(float(v)) for v in (*b.min, *b.max)) + "\n")
        fh.write(f"classes {manifest.n_classes}\n")
        fh.write(f"cameras {manifest.cameras_file}\n")
        for f in manifest.frames:
            fh.write(f"frame {f.frame_id} {f.split} {float(f.timestamp)!r} {f.image} {f.depth or '-'} {f.label or '-'}\n")


def read_manifest(path) -> DatasetManifest:
    root = os.path.dirname(os.path.abspath(path))
    frames, bounds, n_classes, cams = [], None, 0, "cameras.txt"
    offset = 0
    with open(path, "rb") as fh:
        raw = fh.read()
    for line in raw.splitlines(keepends=True):
        text = line.decode().split("#", 1)[0].strip()
        if text:
            parts = text.split()
            try:
                if parts[0] == "bounds":
                    v = [float(x) for x in parts[1:7]]
                    bounds = Aabb(np.array(v[:3]), np.array(v[3:]))
                elif parts[0] == "classes":
                    n_classes = int(parts[1])
                elif parts[0] == "cameras":
                    cams = parts[1]
                elif parts[0] == "frame" and len(parts) == 7:
                    none = lambda s: None if s == "-" else s
                    frames.append(Frame(parts[1], parts[2], float(parts[3]), parts[4],
                                        none(parts[5]), none(parts[6])))
                else:
                    raise ValueError
            except (ValueError, IndexError):
                raise ParseError(f"malformed manifest line {text!r}", offset) from None
        offset += len(line)
    if bounds is None:
        raise ParseError("manifest has no bounds record", offset)
    m = DatasetManifest(frames, bounds, n_classes, root, cams)
    for f in frames:
        for rel in (f.image, f.depth, f.label):
            if rel is not None and not os.path.exists(m.path(rel)):
                raise DomainError(f"manifest references missing file {rel}")
    return m


@dataclass
class Dataset:
    """Loaded frames of one split, in timestamp order."""

    manifest: DatasetManifest
    ids: list
    cameras: list
    images: list
    depths: list
    labels: list

    @property
    def positions(self):
        return np.array([c.pose.center for c in self.cameras])


def load_dataset(manifest_path, split="train", dtype=np.float32) -> Dataset:
    m = read_manifest(manifest_path)
    cams = read_cameras(m.path(m.cameras_file))
    frames = m.split(split)
    images, depths, labels, cameras = [], [], [], []
    for f in frames:
        img = read_ppm(m.path(f.image))
        images.append(img.astype(dtype) / dtype(255.0))
        depths.append(read_pfm(m.path(f.depth)) if f.depth else None)
        labels.append(read_pgm(m.path(f.label)) if f.label else None)
        cam = cams[f.frame_id]
        if (cam.width, cam.height) != (img.shape[1], img.shape[0]):
            k = cam.intrinsics
            cam = Camera(Intrinsics(k.fx, k.fy, k.cx, k.cy, img.shape[1], img.shape[0]), cam.pose)
        cameras.append(cam)
    return Dataset(m, [f.frame_id for f in frames], cameras, images, depths, labels)


# ---------------------------------------------------------------- scene files and synthesis


@dataclass
class SynthConfig:
    scene: AnalyticScene
    intrinsics: Intrinsics
    trajectory: dict = dc_field(default_factory=dict)
    heldout: int = 4
    grid_resolution: int = 32
    supersample: int = 2
    frame_interval: float = 0.1


def default_scene(bounds=None) -> AnalyticScene:
    """Ground plane, two spheres and a box inside a 12.8 m cube."""
    if bounds is None:
        bounds = Aabb(np.array([-6.4, 0.0, -0.4]), np.array([6.4, 12.8, 12.4]))
    prims = [
        Primitive("plane", (0, 0, 1, 0.0), (0.6, 0.55, 0.5), label=1, texture=0.25),
        Primitive("sphere", (-3.0, 8.5, 1.2, 1.2), (0.85, 0.3, 0.25), label=2, texture=0.2),
        Primitive("sphere", (3.2, 9.0, 1.0, 1.0), (0.3, 0.45, 0.85), label=2, texture=0.2),
        Primitive("box", (0.2, 7.0, 1.0, 1.2, 0.6, 1.0), (0.35, 0.75, 0.35), label=3, texture=0.2),
    ]
    return AnalyticScene(prims, bounds)


def default_synth_config() -> SynthConfig:
    return SynthConfig(
        scene=default_scene(),
        intrinsics=Intrinsics(64.0, 64.0, 63.5, 63.5, 128, 128),
        trajectory=dict(kind="straight", frames=20, spacing=0.2, start=(0.0, 0.4, 1.6),
                        heading=0.0, pitch=np.deg2rad(12.0), radius=20.0),
    )


_PRIM_FIELDS = {"sphere": 4, "box": 6, "plane": 4}


def parse_scene_file(path) -> SynthConfig:
    """Read a scene description (flat ``key = value`` lines).

    Keys: ``bounds``, ``background``, ``primitive`` (repeatable:
    ``kind params... r g b [label [texture]]``), ``image.width``,
    ``image.height``, ``image.fx``, ``image.fy``, ``trajectory.kind``,
    ``trajectory.frames``, ``trajectory.spacing``, ``trajectory.start``,
    ``trajectory.heading_deg``, ``trajectory.pitch_deg``,
    ``trajectory.radius``, ``heldout``, ``grid.resolution``,
    ``supersample``, ``frame_interval``.
    """
    base = default_synth_config()
    traj = dict(base.trajectory)
    prims, bounds, background = [], base.scene.bounds, base.scene.background
    w, h, fx, fy = 128, 128, None, None
    heldout, res, ss, dt = base.heldout, base.grid_resolution, base.supersample, base.frame_interval
    offset = 0
    with open(path, "rb") as fh:
        raw = fh.read()
    for line in raw.splitlines(keepends=True):
        text = line.decode().split("#", 1)[0].strip()
        here = offset
        offset += len(line)
        if not text:
            continue
        if "=" not in text:
            raise ParseError(f"expected key = value, got {text!r}", here)
        key, value = (s.strip() for s in text.split("=", 1))
        vals = value.split()
        try:
            if key == "primitive":
                kind = vals[0]
                n = _PRIM_FIELDS[kind]
                nums = [float(x) for x in vals[1:]]
                params, albedo, rest = nums[:n], nums[n:n + 3], nums[n + 3:]
                if len(albedo) != 3:
                    raise ValueError
                label = int(rest[0]) if rest else 1
                tex = rest[1] if len(rest) > 1 else 0.5
                prims.append(Primitive(kind, tuple(params), tuple(albedo), label, tex))
            elif key == "bounds":
                v = [float(x) for x in vals]
                bounds = Aabb(np.array(v[:3]), np.array(v[3:6]))
            elif key == "background":
                background = tuple(float(x) for x in vals)
            elif key == "image.width":
                w = int(value)
            elif key == "image.height":
                h = int(value)
            elif key == "image.fx":
                fx = float(value)
            elif key == "image.fy":
                fy = float(value)
            elif key == "trajectory.kind":
                traj["kind"] = value
            elif key == "trajectory.frames":
                traj["frames"] = int(value)
            elif key == "trajectory.spacing":
                traj["spacing"] = float(value)
            elif key == "trajectory.start":
                traj["start"] = tuple(float(x) for x in vals)
            elif key == "trajectory.heading_deg":
                traj["heading"] = np.deg2rad(float(value))
            elif key == "trajectory.pitch_deg":
                traj["pitch"] = np.deg2rad(float(value))
            elif key == "trajectory.radius":
                traj["radius"] = float(value)
            elif key == "heldout":
                heldout = int(value)
            elif key == "grid.resolution":
                res = int(value)
            elif key == "supersample":
                ss = int(value)
            elif key == "frame_interval":
                dt = float(value)
            else:
                raise ParseError(f"unknown scene key {key!r}", here)
        except (ValueError, IndexError, KeyError):
            raise ParseError(f"bad value for {key!r}: {value!r}", here) from None
    fx = fx or w / 2.0
    fy = fy or fx
    scene = AnalyticScene(prims or base.scene.primitives, bounds, background)
    return SynthConfig(scene, Intrinsics(fx, fy, (w - 1) / 2.0, (h - 1) / 2.0, w, h),
                       traj, heldout, res, ss, dt)


def heldout_poses(train_poses, count):
    """Poses halfway between evenly spread pairs of consecutive training poses."""
    if count <= 0:
        return [], []
    n = len(train_poses)
    slots = np.unique(np.linspace(0, n - 2, count).round().astype(int))
    out = []
    for i in slots:
        a, b = train_poses[i], train_poses[i + 1]
        c = 0.5 * (a.center + b.center)
        fwd = a.rotation[2] + b.rotation[2]
        fwd /= np.linalg.norm(fwd)
        out.append(look_at(c, c + fwd))
    return list(slots), out


def synthesize(cfg: SynthConfig, out_dir):
    """Render a full dataset directory from an analytic scene."""
    from .evaluation import OccGrid, camera_visibility_mask, save_occ
    from .field import GridSpec

    for sub in ("images", "depths", "labels"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    poses = generate_trajectory(**cfg.trajectory)
    slots, extra = heldout_poses(poses, cfg.heldout)
    entries = [(i * cfg.frame_interval, f"{i:04d}", "train", p) for i, p in enumerate(poses)]
    entries += [((s + 0.5) * cfg.frame_interval, f"test{j:02d}", "test", p)
                for j, (s, p) in enumerate(zip(slots, extra))]
    entries.sort(key=lambda e: e[0])
    frames, cams, train_cams, train_depths = [], [], [], []
    for ts, fid, split, pose in entries:
        cam = Camera(cfg.intrinsics, pose)
        z, color, labels = oracle_render(cfg.scene, cam, cfg.supersample)
        write_ppm(os.path.join(out_dir, "images", f"{fid}.ppm"), color)
        write_pfm(os.path.join(out_dir, "depths", f"{fid}.pfm"), z)
        write_pgm(os.path.join(out_dir, "labels", f"{fid}.pgm"), labels)
        frames.append(Frame(fid, split, ts, f"images/{fid}.ppm", f"depths/{fid}.pfm", f"labels/{fid}.pgm"))
        cams.append((fid, cam))
        if split == "train":
            train_cams.append(cam)
            train_depths.append(z)
    bounds = cfg.scene.bounds
    manifest = DatasetManifest(frames, bounds, cfg.scene.n_classes, out_dir)
    write_cameras(os.path.join(out_dir, "cameras.txt"), cams)
    write_manifest(os.path.join(out_dir, "manifest.txt"), manifest)
    spec = GridSpec(bounds, (cfg.grid_resolution,) * 3)
    labels = occupancy_labels(cfg.scene, spec.centers())
    mask = camera_visibility_mask(spec, train_cams, train_depths)
    grid = OccGrid(spec, labels, mask, n_classes=cfg.scene.n_classes)
    save_occ(os.path.join(out_dir, "gt_occupancy.socg"), grid)
    return manifest
