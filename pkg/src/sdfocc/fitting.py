"""The per-scene fitting loop and the gradient check built on it."""

from __future__ import annotations

import csv
import logging
import os
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import autodiff as ad
from . import losses as L
from .config import RunConfig
from .errors import ConfigError, DomainError, NumericError
from .field import SdfField, TpvField, load_field, save_field
from .geometry import Camera, RelativeCamera, pixels_to_rays, ray_aabb_batch
from .optim import adamw_step, cosine_lr
from .renderer import composite, march
from .scenes import Dataset, load_dataset
from .supervision import sample_ray_batch, select_supervision_frame

log = logging.getLogger(__name__)


def build_field(cfg: RunConfig, spec, n_classes=0, dtype=None):
    dtype = dtype or cfg.dtype
    if cfg["field.provider"] == "tpv":
        return TpvField.initialize(spec, cfg["field.tpv_features"], cfg["field.tpv_hidden"],
                                   n_classes, seed=cfg["seed"], dtype=dtype)
    return SdfField.initialize(spec, n_classes, seed=cfg["seed"], noise=cfg["field.init_noise"], dtype=dtype,
                               ground=cfg["field.init_ground_m"], sharpness=cfg["field.init_sharpness"])


@dataclass
class Batch:
    """Everything random about one step, drawn before any rendering."""

    target: int
    sources: list
    pixels: np.ndarray
    reg_points: np.ndarray
    box_points: np.ndarray
    eik_select: np.ndarray | None
    patch: tuple | None = None


@dataclass
class StepOutput:
    report: L.LossReport
    bound: object
    valid_fraction: float


class Problem:
    """Dataset, config and derived constants shared by every step."""

    def __init__(self, cfg: RunConfig, data: Dataset | None = None):
        self.cfg = cfg
        if data is None:
            data = load_dataset(cfg.path("data.manifest"), "train", dtype=np.float32)
        if len(data.cameras) < 2:
            raise ConfigError("fitting needs at least two training frames")
        self.data = data
        self.bounds = data.manifest.bounds
        self.spec = cfg.grid_spec(self.bounds)
        self.weights = cfg.loss_weights()
        try:
            self.sup = cfg.supervision(self.bounds)
        except DomainError as exc:
            raise ConfigError(str(exc)) from None
        self.n_classes = data.manifest.n_classes if cfg["field.semantics"] else 0
        if self.n_classes and any(lbl is None for lbl in data.labels):
            raise ConfigError("semantic fitting needs a label map for every frame")
        self.positions = data.positions

    def neighbors(self, t):
        return [s for s in (t - 1, t + 1) if 0 <= s < len(self.data.cameras)]

    def make_batch(self, step, rays=None, reg_points=None) -> Batch:
        cfg = self.cfg
        rng = np.random.default_rng([cfg["seed"], step])
        T = len(self.data.cameras)
        t = int(rng.integers(T))
        target = select_supervision_frame(t, self.positions, self.sup, rng)
        cam = self.data.cameras[target]
        n = rays or self.sup.rays_per_step
        pixels = sample_ray_batch(cam.width, cam.height, n, rng).astype(np.float64)
        n_reg = reg_points or cfg["loss.regularizer_points"]
        n_reg = min(n_reg, self.spec.size)
        reg = self.spec.centers().reshape(-1, 3)[np.sort(rng.choice(self.spec.size, n_reg, replace=False))]
        M = cfg["render.samples"]
        n_eik = cfg["loss.eikonal_ray_points"] or n * M
        n_eik = min(n_eik, n * M)
        eik_select = None if n_eik == n * M else np.sort(rng.choice(n * M, n_eik, replace=False))
        box = self.bounds
        box_points = box.min + rng.random((n_eik, 3)) * box.extent
        patch = None
        if "edge" in self.weights.enabled:
            ps = min(cfg["loss.edge_patch"], cam.width, cam.height)
            u0 = int(rng.integers(cam.width - ps + 1))
            v0 = int(rng.integers(cam.height - ps + 1))
            patch = (u0, v0, ps)
        return Batch(target, self.neighbors(target), pixels, reg, box_points, eik_select, patch)

    def evaluate(self, field, batch: Batch, tape: ad.Tape) -> StepOutput:
        cfg = self.cfg
        data = self.data
        M = cfg["render.samples"]
        enabled = self.weights.enabled
        cam: Camera = data.cameras[batch.target]
        image = data.images[batch.target]
        sources = [data.images[s] for s in batch.sources]
        rels = [RelativeCamera(cam, data.cameras[s]) for s in batch.sources]
        mode = cfg["loss.photometric"]

        bound = field.bind(tape)
        pixels = batch.pixels
        origins, dirs = pixels_to_rays(cam, pixels)
        tn, tf, hit = ray_aabb_batch(origins, dirs, self.bounds)
        if not np.all(hit):
            keep = np.flatnonzero(hit)
            pixels, origins, dirs, tn, tf = pixels[keep], origins[keep], dirs[keep], tn[keep], tf[keep]
        sem = "semantic" in enabled
        samples, color, logits = march(bound, origins, dirs, M, sem, tn, tf)
        out = composite(samples, color, logits, bound.background)
        cos = dirs @ cam.optical_axis
        zdepth = out.depth * cos

        terms = {}
        dep, _, counts = L.l_dep(pixels, image, sources, rels, samples, zdepth, cos, mode,
                                 kind=cfg["loss.depth"])
        terms["dep"] = dep
        if "rgb" in enabled:
            terms["rgb"] = L.l_rgb(out.color, L.target_colors(image, pixels))
        if "eikonal" in enabled:
            pts = samples.points.reshape(-1, 3)
            if batch.eik_select is not None:
                pts = pts[batch.eik_select]
            terms["eikonal"] = L.l_eikonal(bound, np.concatenate([pts, batch.box_points]))
        if "hessian" in enabled:
            terms["hessian"] = L.l_hessian(bound, batch.reg_points)
        if "sparsity" in enabled:
            terms["sparsity"] = L.l_sparsity(bound.sdf(batch.reg_points))
        if "edge" in enabled and batch.patch is not None:
            u0, v0, ps = batch.patch
            vv, uu = np.mgrid[v0:v0 + ps, u0:u0 + ps]
            pp = np.stack([uu.ravel(), vv.ravel()], axis=-1).astype(np.float64)
            po, pd = pixels_to_rays(cam, pp)
            ptn, ptf, _ = ray_aabb_batch(po, pd, self.bounds)
            ps_samples, pc, _ = march(bound, po, pd, M, False, ptn, ptf)
            pout = composite(ps_samples, pc, None, bound.background)
            pz = ad.reshape(pout.depth * (pd @ cam.optical_axis), (ps, ps))
            terms["edge"] = L.l_edge(pz, image[v0:v0 + ps, u0:u0 + ps])
        if sem:
            lbl = data.labels[batch.target][pixels[:, 1].astype(int), pixels[:, 0].astype(int)]
            has = lbl > 0
            if has.any():
                prob = out.semantics[np.flatnonzero(has)]
                terms["semantic"] = L.l_semantic(prob, lbl[has].astype(np.int64) - 1)
        report = L.total_loss(terms, self.weights, counts)
        if report.total_var is None:
            raise NumericError("no loss term produced a value this step")
        frac = counts["valid"] / max(counts["rays"], 1)
        return StepOutput(report, bound, frac)


def named_gradients(tape, output, bound):
    names = sorted(bound.vars)
    g = ad.grad(tape, output, [bound.vars[n] for n in names])
    return {n: g[bound.vars[n].id] for n in names}


@dataclass
class FitResult:
    field: object
    state: object
    csv_path: str
    checkpoint: str
    rows: list = dc_field(default_factory=list)


def _csv_header(weights):
    return ["iteration"] + list(weights.enabled) + ["total", "lr", "valid_fraction"]


def _atomic_save(path, field, state):
    tmp = path + ".tmp"
    save_field(tmp, field, state)
    os.replace(tmp, path)


def fit_scene(cfg: RunConfig, data: Dataset | None = None, progress=None) -> FitResult:
    """Run the configured number of steps, checkpointing every epoch.

    A non-finite loss or gradient aborts with :class:`NumericError`; the
    checkpoints already on disk are left untouched.
    """
    prob = Problem(cfg, data)
    out_dir = cfg.path("output.dir")
    os.makedirs(out_dir, exist_ok=True)
    field = build_field(cfg, prob.spec, prob.n_classes)
    state = cfg.optim_state(field.no_decay)
    resume = cfg.path("optim.resume")
    if resume:
        loaded, moments = load_field(resume)
        if type(loaded) is not type(field) or loaded.spec.resolution != field.spec.resolution:
            raise ConfigError("resume checkpoint does not match the configured field")
        field = loaded.astype(cfg.dtype)
        if moments is not None:
            state.step, first, second = moments
            state.first = {k: v.astype(cfg.dtype) for k, v in first.items()}
            state.second = {k: v.astype(cfg.dtype) for k, v in second.items()}

    header = _csv_header(prob.weights)
    csv_path = os.path.join(out_dir, "loss.csv")
    kept = []
    if resume and os.path.exists(csv_path):
        with open(csv_path, newline="") as fh:
            kept = [r for r in csv.reader(fh)][1:]
        kept = [r for r in kept if int(r[0]) < state.step]
    fh = open(csv_path, "w", newline="")
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(kept)

    spe = cfg["optim.steps_per_epoch"]
    latest = os.path.join(out_dir, "latest.socf")
    rows = []
    try:
        while state.step < state.total_steps:
            k = state.step
            lr = cosine_lr(state)
            batch = prob.make_batch(k)
            tape = ad.Tape(cfg.dtype)
            prob.weights = cfg.loss_weights_at(k)
            out = prob.evaluate(field, batch, tape)
            grads = named_gradients(tape, out.report.total_var, out.bound)
            adamw_step(state, field.params, grads, lr=lr, post_step=field.post_step)
            lo, hi = cfg.sharpness_bounds(state.step)
            rho = field.params["rho"]
            if lo is not None:
                np.maximum(rho, np.log(lo), out=rho, casting="unsafe")
            if hi is not None:
                np.minimum(rho, np.log(hi), out=rho, casting="unsafe")
            row = [k] + [repr(out.report.terms.get(t, float("nan"))) for t in prob.weights.enabled]
            row += [repr(out.report.total), repr(lr), repr(out.valid_fraction)]
            writer.writerow(row)
            rows.append(row)
            if progress is not None:
                progress(k, out.report)
            if state.step % spe == 0:
                fh.flush()
                epoch = state.step // spe
                path = os.path.join(out_dir, f"epoch_{epoch:03d}.socf")
                _atomic_save(path, field, state)
                _atomic_save(latest, field, state)
                log.info("epoch %d done, loss %.5f", epoch, out.report.total)
    except NumericError:
        log.error("non-finite values at step %d; last good checkpoint kept", state.step)
        raise
    finally:
        fh.close()
    return FitResult(field, state, csv_path, latest, rows)


def read_loss_csv(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [{k: float(v) for k, v in row.items()} for row in reader]


# ---------------------------------------------------------------- gradient check


def gradcheck(cfg: RunConfig, data: Dataset | None = None, f64=True, rays=4, samples=16,
              resolution=8, reg_points=64, eps=1e-6, seed_noise=0.2, step=0):
    """Analytic vs central-difference gradients of the total loss.

    A small field (``resolution``^3 over the dataset bounds) is filled with
    a perturbed ground-plane SDF so no regularizer sits at a kink, one batch
    is drawn, and every parameter entry is perturbed by replaying the tape.
    Returns rows (param_id, analytic, numeric, rel_err) holding, per
    parameter block, the entry with the largest relative error.
    """
    from .config import make_config

    values = dict(cfg.values)
    values.update({"field.resolution": resolution, "render.samples": samples,
                   "supervision.rays_per_step": rays, "loss.eikonal_ray_points": 0,
                   "field.dtype": "float64" if f64 else "float32"})
    small = make_config(cfg.base_dir, values=values)
    prob = Problem(small, data)
    dtype = small.dtype
    field = build_field(small, prob.spec, prob.n_classes, dtype=dtype)
    rng = np.random.default_rng(small["seed"])
    for name, v in field.params.items():
        if name in ("sdf", "color", "semantics", "xy", "xz", "yz"):
            v += rng.normal(0.0, seed_noise, v.shape).astype(dtype)
    if "color" in field.params:
        np.clip(field.params["color"], 0.05, 0.95, out=field.params["color"])
    batch = prob.make_batch(step, rays=rays, reg_points=reg_points)
    tape = ad.Tape(dtype)
    out = prob.evaluate(field, batch, tape)
    total = out.report.total_var
    names = sorted(out.bound.vars)
    analytic = named_gradients(tape, total, out.bound)
    rows = []
    for name in names:
        var = out.bound.vars[name]
        base = tape.values[var.id].copy()

        def f(x, _id=var.id, _shape=base.shape):
            vals = tape.replay({_id: np.asarray(x, dtype=dtype).reshape(_shape)})
            return float(vals[total.id])

        numeric = ad.finite_difference(f, base.ravel(), eps).reshape(base.shape)
        a = np.asarray(analytic[name], dtype=np.float64)
        err = ad.relative_error(a, numeric)
        worst = int(np.argmax(err)) if err.size else 0
        rows.append((name, float(a.ravel()[worst]), float(numeric.ravel()[worst]),
                     float(np.ravel(err)[worst])))
    return rows
