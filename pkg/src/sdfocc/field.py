"""Optimizable scene fields: dense SDF/color/semantic grids and tri-plane features.

Grid values live at voxel centers.  A continuous point is interpolated
trilinearly from the eight surrounding centers; points beyond the outermost
centers take the border values.  Occupancy is the sign test ``s <= 0``.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from .errors import DomainError, NumericError, ParseError
from .geometry import Aabb

_CORNERS = np.array([[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)])


@dataclass(frozen=True)
class GridSpec:
    box: Aabb
    resolution: tuple

    def __post_init__(self):
        res = tuple(int(r) for r in self.resolution)
        if len(res) != 3 or min(res) < 2:
            raise DomainError("grid resolution must have three components >= 2")
        object.__setattr__(self, "resolution", res)

    @classmethod
    def cube(cls, lo, size, n):
        lo = np.asarray(lo, dtype=np.float64)
        return cls(Aabb(lo, lo + size), (n, n, n))

    @property
    def voxel_size(self):
        return self.box.extent / np.asarray(self.resolution)

    @property
    def size(self):
        return int(np.prod(self.resolution))

    def centers(self):
        """Voxel centers as an (nx, ny, nz, 3) array."""
        axes = [self.box.min[a] + (np.arange(n) + 0.5) * self.voxel_size[a]
                for a, n in enumerate(self.resolution)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def flat_index(self, ijk):
        ijk = np.asarray(ijk)
        nx, ny, nz = self.resolution
        return (ijk[..., 0] * ny + ijk[..., 1]) * nz + ijk[..., 2]

    def continuous_index(self, points):
        points = np.asarray(points, dtype=np.float64)
        if not np.all(np.isfinite(points)):
            raise NumericError("non-finite sample point")
        return (points - self.box.min) / self.voxel_size - 0.5


def trilinear_stencil(spec: GridSpec, points, derivative=None):
    """Flat corner indices and weights for trilinear interpolation.

    With ``derivative`` set to an axis (0, 1, 2) the weights are those of the
    interpolant's partial derivative along that axis instead.  Coordinates
    outside the center lattice are clamped, so the derivative there is 0.
    A point exactly on a cell face uses the cell on its positive side.
    """
    f = spec.continuous_index(points)
    res = np.asarray(spec.resolution)
    fc = np.clip(f, 0.0, res - 1.0)
    i0 = np.minimum(np.floor(fc).astype(np.int64), res - 2)
    t = fc - i0
    nx, ny, nz = spec.resolution
    index = spec.flat_index(i0)[..., None] + ((_CORNERS[:, 0] * ny + _CORNERS[:, 1]) * nz + _CORNERS[:, 2])
    factors = [(1.0 - t[..., a], t[..., a]) for a in range(3)]
    if derivative is not None:
        a = derivative
        inside = ((f[..., a] >= 0) & (f[..., a] <= res[a] - 1)) / spec.voxel_size[a]
        factors[a] = (-inside, inside)
    (x0, x1), (y0, y1), (z0, z1) = factors
    xy = (x0 * y0, x0 * y1, x1 * y0, x1 * y1)
    weights = np.stack([c for q in xy for c in (q * z0, q * z1)], axis=-1)
    return index, weights


def gradient_stencil(spec: GridSpec, points):
    """Stencil of the full interpolant gradient: index and weights (..., 3, 8)."""
    index, _ = trilinear_stencil(spec, points)
    weights = np.stack([trilinear_stencil(spec, points, derivative=a)[1] for a in range(3)], axis=-2)
    return np.broadcast_to(index[..., None, :], weights.shape), weights


def bilinear_stencil(n0, n1, lo, vs, coords, derivative=None):
    """2-D analogue of :func:`trilinear_stencil` on an (n0, n1) lattice."""
    f = (np.asarray(coords, dtype=np.float64) - lo) / vs - 0.5
    res = np.array([n0, n1])
    fc = np.clip(f, 0.0, res - 1.0)
    i0 = np.minimum(np.floor(fc).astype(np.int64), res - 2)
    t = fc - i0
    c = _CORNERS[:4, 1:]  # (0,0) (0,1) (1,0) (1,1)
    ij = i0[..., None, :] + c
    index = ij[..., 0] * n1 + ij[..., 1]
    per_axis = np.where(c == 1, t[..., None, :], 1.0 - t[..., None, :])
    if derivative is None:
        return index, np.prod(per_axis, axis=-1)
    a = derivative
    inside = (f[..., a] >= 0) & (f[..., a] <= res[a] - 1)
    slope = np.where(c[:, a] == 1, 1.0, -1.0) / vs[a]
    return index, per_axis[..., 1 - a] * slope * inside[..., None]


def occupancy_of(s):
    """True where occupied (s <= 0)."""
    s = np.asarray(s)
    if not np.all(np.isfinite(s)):
        raise NumericError("non-finite SDF value")
    return s <= 0


@dataclass
class SdfField:
    """Dense value grids plus the log-sharpness ``rho`` (a = exp(rho))."""

    spec: GridSpec
    params: dict = dc_field(default_factory=dict)

    provider = "grid"
    no_decay = ("rho", "background")

    @classmethod
    def initialize(cls, spec: GridSpec, n_classes=0, seed=0, noise=0.01, dtype=np.float32,
                   ground=0.0, sharpness=None):
        """Start from the half-space below a horizontal plane ``ground``
        meters above the box floor, with sharpness ``sharpness`` (default
        one over the voxel size)."""
        rng = np.random.default_rng(seed)
        z = spec.centers()[..., 2].reshape(-1)
        sdf = z - (spec.box.min[2] + ground) + rng.normal(0.0, noise, z.shape)
        a0 = sharpness or 1.0 / spec.voxel_size.min()
        params = {
            "sdf": sdf,
            "color": np.full((spec.size, 3), 0.5),
            "rho": np.array(np.log(a0)),
            "background": np.full(3, 0.5),
        }
        if n_classes:
            params["semantics"] = np.zeros((spec.size, n_classes))
        return cls(spec, {k: np.asarray(v, dtype=dtype) for k, v in params.items()})

    @classmethod
    def from_function(cls, spec, fn, color=(0.5, 0.5, 0.5), rho=None, dtype=np.float64):
        """Grid holding ``fn`` evaluated at the voxel centers."""
        sdf = np.asarray(fn(spec.centers().reshape(-1, 3)), dtype=dtype)
        params = {
            "sdf": sdf,
            "color": np.tile(np.asarray(color, dtype=dtype), (spec.size, 1)),
            "rho": np.array(np.log(1.0 / spec.voxel_size.min()) if rho is None else rho, dtype=dtype),
            "background": np.full(3, 0.5, dtype=dtype),
        }
        return cls(spec, params)

    @property
    def n_classes(self):
        return self.params["semantics"].shape[1] if "semantics" in self.params else 0

    @property
    def sdf_grid(self):
        return self.params["sdf"].reshape(self.spec.resolution)

    def bind(self, tape: ad.Tape) -> "BoundGrid":
        return BoundGrid(self, {k: tape.param(v, k) for k, v in self.params.items()})

    def copy(self):
        return type(self)(self.spec, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype):
        return type(self)(self.spec, {k: v.astype(dtype) for k, v in self.params.items()})

    def post_step(self):
        np.clip(self.params["color"], 0.0, 1.0, out=self.params["color"])
        np.clip(self.params["background"], 0.0, 1.0, out=self.params["background"])


class BoundGrid:
    """An :class:`SdfField` whose parameters are leaves on a tape."""

    def __init__(self, field: SdfField, vars: dict):
        self.field = field
        self.spec = field.spec
        self.vars = vars

    @property
    def background(self):
        return self.vars["background"]

    @property
    def n_classes(self):
        return self.field.n_classes

    def sharpness(self):
        return ad.exp(self.vars["rho"])

    def sdf(self, points):
        idx, w = trilinear_stencil(self.spec, points)
        return ad.gather_weighted(self.vars["sdf"], idx, w)

    def query(self, points, semantics=False):
        """(sdf, color, logits-or-None) sharing one interpolation stencil."""
        idx, w = trilinear_stencil(self.spec, points)
        s = ad.gather_weighted(self.vars["sdf"], idx, w)
        c = ad.gather_weighted(self.vars["color"], idx, w)
        logits = ad.gather_weighted(self.vars["semantics"], idx, w) if semantics else None
        return s, c, logits

    def color(self, points):
        return self.query(points)[1]

    def gradient(self, points):
        idx, w = gradient_stencil(self.spec, points)
        return ad.gather_weighted(self.vars["sdf"], idx, w)


def sample_sdf(bound, p):
    return bound.sdf(np.asarray(p, dtype=np.float64))


def sample_color(bound, p):
    return bound.color(np.asarray(p, dtype=np.float64))


def field_gradient(bound, p):
    return bound.gradient(np.asarray(p, dtype=np.float64))


@dataclass
class TpvField:
    """Three axis-aligned feature planes summed into a volume, then decoded.

    Decoder: ``out = softplus(f @ W1 + b1) @ W2 + b2`` with outputs
    ``[sdf, r, g, b, logits...]``.  Rendered colors pass through a sigmoid.
    """

    spec: GridSpec
    params: dict = dc_field(default_factory=dict)

    provider = "tpv"
    no_decay = ("rho", "background")

    @classmethod
    def initialize(cls, spec, features=8, hidden=32, n_classes=0, seed=0, dtype=np.float32):
        rng = np.random.default_rng(seed)
        nx, ny, nz = spec.resolution
        n_out = 4 + n_classes
        z = spec.centers()[0, 0, :, 2]
        xz = rng.normal(0.0, 0.01, (nx, nz, features))
        # feature 0 of the xz plane carries a ground-plane prior, passed to
        # the sdf output through an identity pair of hidden units
        xz[:, :, 0] += np.clip(z - spec.box.min[2], -1.0, 1.0)[None, :]
        W1 = rng.normal(0.0, 0.1, (features, hidden))
        W1[:, :2] = 0.0
        W1[0, 0], W1[0, 1] = 1.0, -1.0
        W2 = rng.normal(0.0, 0.1, (hidden, n_out))
        W2[:2, :] = 0.0
        W2[0, 0], W2[1, 0] = 1.0, -1.0
        params = {
            "xy": rng.normal(0.0, 0.01, (nx, ny, features)),
            "xz": xz,
            "yz": rng.normal(0.0, 0.01, (ny, nz, features)),
            "W1": W1, "b1": np.zeros(hidden),
            "W2": W2, "b2": np.zeros(n_out),
            "rho": np.array(np.log(1.0 / spec.voxel_size.min())),
            "background": np.full(3, 0.5),
        }
        return cls(spec, {k: np.asarray(v, dtype=dtype) for k, v in params.items()})

    @property
    def n_classes(self):
        return self.params["W2"].shape[1] - 4

    def bind(self, tape):
        return BoundTpv(self, {k: tape.param(v, k) for k, v in self.params.items()})

    def copy(self):
        return type(self)(self.spec, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype):
        return type(self)(self.spec, {k: v.astype(dtype) for k, v in self.params.items()})

    def post_step(self):
        np.clip(self.params["background"], 0.0, 1.0, out=self.params["background"])


_PLANES = (("xy", 0, 1), ("xz", 0, 2), ("yz", 1, 2))


class BoundTpv:
    def __init__(self, field: TpvField, vars: dict):
        self.field = field
        self.spec = field.spec
        self.vars = vars

    @property
    def background(self):
        return self.vars["background"]

    @property
    def n_classes(self):
        return self.field.n_classes

    def sharpness(self):
        return ad.exp(self.vars["rho"])

    def _plane_features(self, points, derivative=None):
        spec = self.spec
        points = np.asarray(points, dtype=np.float64)
        if not np.all(np.isfinite(points)):
            raise NumericError("non-finite sample point")
        total = None
        for name, a0, a1 in _PLANES:
            d = None
            if derivative is not None:
                if derivative not in (a0, a1):
                    continue
                d = 0 if derivative == a0 else 1
            n0, n1 = spec.resolution[a0], spec.resolution[a1]
            lo = spec.box.min[[a0, a1]]
            vs = spec.voxel_size[[a0, a1]]
            idx, w = bilinear_stencil(n0, n1, lo, vs, points[..., [a0, a1]], derivative=d)
            plane = self.vars[name]
            flat = plane.reshape((n0 * n1, plane.shape[-1]))
            part = ad.gather_weighted(flat, idx, w)
            total = part if total is None else total + part
        return total

    def _hidden(self, feats):
        lead = feats.shape[:-1]
        F = feats.shape[-1]
        h = ad.matmul(feats.reshape((-1, F)), self.vars["W1"]) + self.vars["b1"]
        return h, lead

    def decode(self, points):
        """Raw decoder outputs (..., 4 + C)."""
        h, lead = self._hidden(self._plane_features(points))
        out = ad.matmul(ad.softplus(h), self.vars["W2"]) + self.vars["b2"]
        return out.reshape(lead + (out.shape[-1],))

    def sdf(self, points):
        return self.decode(points)[..., 0]

    def query(self, points, semantics=False):
        out = self.decode(points)
        logits = out[..., 4:] if semantics else None
        return out[..., 0], ad.sigmoid(out[..., 1:4]), logits

    def color(self, points):
        return self.query(points)[1]

    def gradient(self, points):
        points = np.asarray(points, dtype=np.float64)
        h, lead = self._hidden(self._plane_features(points))
        slope = ad.sigmoid(h)
        w_sdf = self.vars["W2"][:, 0:1]
        parts = []
        for axis in range(3):
            df = self._plane_features(points, derivative=axis)
            dh = ad.matmul(df.reshape((-1, df.shape[-1])), self.vars["W1"])
            parts.append(ad.matmul(dh * slope, w_sdf).reshape(lead))
        return ad.stack(parts, axis=-1)


def tpv_sample(bound: BoundTpv, p):
    """(sdf, rgb, logits) raw decoder outputs at ``p``."""
    out = bound.decode(np.asarray(p, dtype=np.float64))
    return out[..., 0], out[..., 1:4], out[..., 4:]


# ---------------------------------------------------------------- checkpoint IO

_MAGIC = b"SOCF"
_OPT_MAGIC = b"OPTM"


def _write_spec(buf, spec):
    buf.write(struct.pack("<6d", *spec.box.min, *spec.box.max))
    buf.write(struct.pack("<3I", *spec.resolution))


def _read(buf, fmt):
    n = struct.calcsize(fmt)
    offset = buf.tell()
    raw = buf.read(n)
    if len(raw) != n:
        raise ParseError("truncated file", offset)
    return struct.unpack(fmt, raw)


def _read_array(buf, shape):
    n = int(np.prod(shape)) * 4
    offset = buf.tell()
    raw = buf.read(n)
    if len(raw) != n:
        raise ParseError("truncated array", offset)
    return np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)


def _f32(a):
    return np.ascontiguousarray(a, dtype="<f4").tobytes()


_TPV_ORDER = ("xy", "xz", "yz", "W1", "b1", "W2", "b2")


def save_field(path, field, optim_state=None):
    """Write a field checkpoint, optionally followed by optimizer moments.

    Layout (little-endian): ``SOCF``, u32 version (1 dense, 2 tri-plane),
    box min/max as 6 f64, resolution as 3 u32, u32 class count; dense:
    sdf, color, semantics as f32; tri-plane: u32 features, u32 hidden, then
    planes and decoder weights as f32; then rho and background_color f32.
    """
    buf = io.BytesIO()
    buf.write(_MAGIC)
    version = 1 if field.provider == "grid" else 2
    buf.write(struct.pack("<I", version))
    _write_spec(buf, field.spec)
    buf.write(struct.pack("<I", field.n_classes))
    p = field.params
    if version == 1:
        buf.write(_f32(p["sdf"]))
        buf.write(_f32(p["color"]))
        if field.n_classes:
            buf.write(_f32(p["semantics"]))
    else:
        buf.write(struct.pack("<2I", p["W1"].shape[0], p["W1"].shape[1]))
        for k in _TPV_ORDER:
            buf.write(_f32(p[k]))
    buf.write(_f32(p["rho"]))
    buf.write(_f32(p["background"]))
    if optim_state is not None:
        buf.write(_OPT_MAGIC)
        buf.write(struct.pack("<II", optim_state.step, len(optim_state.first)))
        for name in sorted(optim_state.first):
            raw = name.encode()
            buf.write(struct.pack("<H", len(raw)) + raw)
            buf.write(_f32(optim_state.first[name]))
            buf.write(_f32(optim_state.second[name]))
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_field(path):
    """Read a checkpoint: returns (field, moments) where moments is None or
    (step, first-moment dict, second-moment dict)."""
    with open(path, "rb") as fh:
        buf = io.BytesIO(fh.read())
    if buf.read(4) != _MAGIC:
        raise ParseError("bad magic, expected SOCF", 0)
    (version,) = _read(buf, "<I")
    if version not in (1, 2):
        raise ParseError(f"unsupported version {version}", 4)
    box = _read(buf, "<6d")
    res = _read(buf, "<3I")
    spec = GridSpec(Aabb(np.array(box[:3]), np.array(box[3:])), res)
    (C,) = _read(buf, "<I")
    K = spec.size
    params = {}
    if version == 1:
        params["sdf"] = _read_array(buf, (K,))
        params["color"] = _read_array(buf, (K, 3))
        if C:
            params["semantics"] = _read_array(buf, (K, C))
        cls = SdfField
    else:
        F, Hd = _read(buf, "<2I")
        nx, ny, nz = res
        shapes = {"xy": (nx, ny, F), "xz": (nx, nz, F), "yz": (ny, nz, F), "W1": (F, Hd),
                  "b1": (Hd,), "W2": (Hd, 4 + C), "b2": (4 + C,)}
        for k in _TPV_ORDER:
            params[k] = _read_array(buf, shapes[k])
        cls = TpvField
    params["rho"] = _read_array(buf, ())
    params["background"] = _read_array(buf, (3,))
    field = cls(spec, params)
    moments = None
    tag = buf.read(4)
    if tag == _OPT_MAGIC:
        step, n = _read(buf, "<II")
        first, second = {}, {}
        for _ in range(n):
            (ln,) = _read(buf, "<H")
            name = buf.read(ln).decode()
            if name not in params:
                raise ParseError(f"moment block for unknown parameter {name!r}", buf.tell())
            first[name] = _read_array(buf, params[name].shape)
            second[name] = _read_array(buf, params[name].shape)
        moments = (step, first, second)
    elif tag:
        raise ParseError("unexpected trailing data", buf.tell() - len(tag))
    return field, moments
