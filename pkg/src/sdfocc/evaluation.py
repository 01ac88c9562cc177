"""Occupancy extraction, occupancy/semantic metrics and depth metrics."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .errors import DomainError, NumericError, ParseError
from .field import GridSpec, occupancy_of
from .geometry import Aabb, Camera, Intrinsics, NEAR_CLIP, project_points

MIN_DEPTH = 0.1
MAX_DEPTH = 80.0


@dataclass
class OccGrid:
    spec: GridSpec
    labels: np.ndarray            # (nx, ny, nz) uint8, 0 = free
    mask: np.ndarray | None = None
    n_classes: int = 1            # semantic classes, excluding free

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint8)
        if self.labels.shape != self.spec.resolution:
            raise DomainError("label grid does not match the grid spec")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != self.labels.shape:
                raise DomainError("mask shape does not match labels")
        if self.labels.max(initial=0) > self.n_classes:
            raise DomainError("label exceeds class count")

    @property
    def occupied(self):
        return self.labels > 0


@dataclass
class OccMetrics:
    iou: float
    precision: float
    recall: float
    tp: int
    fp: int
    fn: int
    empty: bool = False


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    d1: float
    d2: float
    d3: float
    valid_count: int

    def as_dict(self):
        return dict(abs_rel=self.abs_rel, sq_rel=self.sq_rel, rmse=self.rmse,
                    rmse_log=self.rmse_log, d1=self.d1, d2=self.d2, d3=self.d3,
                    valid_count=self.valid_count)


def extract_occupancy(field, spec: GridSpec | None = None, chunk=65536) -> OccGrid:
    """Sign-threshold the field at the voxel centers of ``spec``.

    With semantic logits the label is 1 + argmax over classes, otherwise 1.
    """
    spec = spec or field.spec
    if np.any(spec.box.min < field.spec.box.min - 1e-9) or np.any(spec.box.max > field.spec.box.max + 1e-9):
        raise DomainError("evaluation grid extends beyond the field")
    centers = spec.centers().reshape(-1, 3)
    n_cls = field.n_classes
    sdf = np.empty(centers.shape[0])
    labels = np.ones(centers.shape[0], dtype=np.uint8)
    for start in range(0, centers.shape[0], chunk):
        tape = ad.Tape(np.float64)
        bound = field.bind(tape)
        pts = centers[start:start + chunk]
        s, _, logits = bound.query(pts, semantics=n_cls > 0)
        sdf[start:start + chunk] = s.value
        if n_cls:
            labels[start:start + chunk] = 1 + np.argmax(logits.value, axis=-1)
    occ = occupancy_of(sdf)
    labels = np.where(occ, labels, 0).reshape(spec.resolution)
    return OccGrid(spec, labels, n_classes=max(n_cls, 1))


def _same_spec(a: GridSpec, b: GridSpec):
    return (a.resolution == b.resolution and np.allclose(a.box.min, b.box.min)
            and np.allclose(a.box.max, b.box.max))


def _eval_mask(pred, gt, use_mask):
    if not _same_spec(pred.spec, gt.spec):
        raise DomainError("prediction and ground truth grids differ")
    if use_mask and gt.mask is not None:
        return gt.mask
    return np.ones(gt.labels.shape, dtype=bool)


def occ_metrics(pred: OccGrid, gt: OccGrid, use_mask=True) -> OccMetrics:
    """Binary occupied-vs-free IoU, precision and recall over masked voxels."""
    m = _eval_mask(pred, gt, use_mask)
    p = pred.occupied[m]
    g = gt.occupied[m]
    tp = int(np.sum(p & g))
    fp = int(np.sum(p & ~g))
    fn = int(np.sum(~p & g))
    empty = False

    def ratio(num, den):
        nonlocal empty
        if den == 0:
            empty = True
            return 0.0
        return num / den

    iou = ratio(tp, tp + fp + fn)
    prec = ratio(tp, tp + fp)
    rec = ratio(tp, tp + fn)
    return OccMetrics(iou, prec, rec, tp, fp, fn, empty)


def per_class_iou(pred: OccGrid, gt: OccGrid, classes, use_mask=True):
    m = _eval_mask(pred, gt, use_mask)
    p = pred.labels[m]
    g = gt.labels[m]
    out = np.zeros(classes)
    for c in range(1, classes + 1):
        inter = np.sum((p == c) & (g == c))
        union = np.sum((p == c) | (g == c))
        out[c - 1] = inter / union if union else 0.0
    return out


def miou(pred: OccGrid, gt: OccGrid, classes, use_mask=True):
    """Mean IoU over all ``classes`` semantic classes; absent classes count 0."""
    return float(np.mean(per_class_iou(pred, gt, classes, use_mask)))


def _valid(gt, min_depth, max_depth):
    gt = np.asarray(gt, dtype=np.float64)
    return np.isfinite(gt) & (gt >= min_depth) & (gt <= max_depth)


def median_scale(pred, gt, min_depth=MIN_DEPTH, max_depth=MAX_DEPTH):
    """Rescale ``pred`` by median(gt) / median(pred) over valid pixels."""
    pred = np.asarray(pred, dtype=np.float64)
    valid = _valid(gt, min_depth, max_depth) & np.isfinite(pred)
    if not valid.any():
        raise DomainError("no valid pixels for median scaling")
    mp = np.median(pred[valid])
    if mp == 0:
        raise NumericError("median prediction is zero")
    return pred * (np.median(np.asarray(gt, dtype=np.float64)[valid]) / mp)


def depth_metrics(pred, gt, min_depth=MIN_DEPTH, max_depth=MAX_DEPTH) -> DepthMetrics:
    """Standard depth errors over pixels whose ground truth is in range.

    Predictions are clipped to the same range before scoring.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise DomainError("prediction and ground truth shapes differ")
    valid = _valid(gt, min_depth, max_depth) & np.isfinite(pred)
    n = int(valid.sum())
    if n == 0:
        raise DomainError("no valid pixels to evaluate")
    g = gt[valid]
    p = np.clip(pred[valid], min_depth, max_depth)
    thresh = np.maximum(g / p, p / g)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(g - p) / g)),
        sq_rel=float(np.mean((g - p) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((g - p) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(g) - np.log(p)) ** 2))),
        d1=float(np.mean(thresh < 1.25)),
        d2=float(np.mean(thresh < 1.25 ** 2)),
        d3=float(np.mean(thresh < 1.25 ** 3)),
        valid_count=n,
    )


def subsampled_view(cam: Camera, depth=None, factor=2):
    """Camera whose pixel (i, j) sits exactly on full-resolution pixel
    (factor*i, factor*j), plus the matching ground-truth depth samples."""
    k = cam.intrinsics
    w, h = (k.width + factor - 1) // factor, (k.height + factor - 1) // factor
    sub = Camera(Intrinsics(k.fx / factor, k.fy / factor, k.cx / factor, k.cy / factor, w, h), cam.pose)
    if depth is None:
        return sub, None
    return sub, np.asarray(depth)[::factor, ::factor]


def camera_visibility_mask(spec: GridSpec, cameras, depth_maps=None, margin=None):
    """Voxels whose centers fall inside at least one camera frustum.

    With ``depth_maps`` (z-depth per camera) a voxel also has to lie no
    deeper than one voxel diagonal behind the observed surface, which
    approximates a ray-cast visibility mask.
    """
    centers = spec.centers().reshape(-1, 3)
    seen = np.zeros(centers.shape[0], dtype=bool)
    if margin is None:
        margin = float(np.linalg.norm(spec.voxel_size))
    for i, cam in enumerate(cameras):
        uv, z = project_points(cam, centers)
        ok = (z > NEAR_CLIP) & (uv[:, 0] >= -0.5) & (uv[:, 0] < cam.width - 0.5) \
            & (uv[:, 1] >= -0.5) & (uv[:, 1] < cam.height - 0.5)
        if depth_maps is not None:
            d = depth_maps[i]
            ui = np.clip(np.rint(uv[:, 0]), 0, cam.width - 1).astype(int)
            vi = np.clip(np.rint(uv[:, 1]), 0, cam.height - 1).astype(int)
            ok &= z <= d[vi, ui] + margin
        seen |= ok
    return seen.reshape(spec.resolution)


# ---------------------------------------------------------------- SOCG format

_MAGIC = b"SOCG"


def save_occ(path, grid: OccGrid):
    """``SOCG``, u32 version, box as 6 f64, resolution 3 u32, u32 classes,
    u8 has-mask, labels u8 (C order), optional mask u8."""
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<I", 1))
    buf.write(struct.pack("<6d", *grid.spec.box.min, *grid.spec.box.max))
    buf.write(struct.pack("<3I", *grid.spec.resolution))
    buf.write(struct.pack("<IB", grid.n_classes, grid.mask is not None))
    buf.write(np.ascontiguousarray(grid.labels, dtype=np.uint8).tobytes())
    if grid.mask is not None:
        buf.write(np.ascontiguousarray(grid.mask, dtype=np.uint8).tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_occ(path) -> OccGrid:
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise ParseError("bad magic, expected SOCG", 0)
    header = struct.Struct("<I6d3IIB")
    if len(data) < 4 + header.size:
        raise ParseError("truncated header", len(data))
    version, *rest = header.unpack_from(data, 4)
    if version != 1:
        raise ParseError(f"unsupported version {version}", 4)
    box, res, n_classes, has_mask = rest[:6], rest[6:9], rest[9], rest[10]
    spec = GridSpec(Aabb(np.array(box[:3]), np.array(box[3:])), res)
    off = 4 + header.size
    K = spec.size
    if len(data) < off + K * (2 if has_mask else 1):
        raise ParseError("truncated voxel data", len(data))
    labels = np.frombuffer(data, dtype=np.uint8, count=K, offset=off).reshape(res).copy()
    mask = None
    if has_mask:
        mask = np.frombuffer(data, dtype=np.uint8, count=K, offset=off + K).reshape(res).astype(bool)
    return OccGrid(spec, labels, mask, n_classes)
