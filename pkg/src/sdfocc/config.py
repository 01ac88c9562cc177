"""Run configuration: flat ``key = value`` text files with dotted keys.

Every key has a default listed in :data:`DEFAULTS`; unknown keys are
rejected.  Relative paths are resolved against the config file's directory.
"""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .field import GridSpec
from .geometry import Aabb
from .losses import PROFILES, LossWeights
from .optim import OptimState
from .supervision import SupervisionConfig

# key -> (default, parser, help)
DEFAULTS = {
    "data.manifest": ("manifest.txt", str, "dataset manifest path"),
    "output.dir": ("run", str, "directory for checkpoints and the loss CSV"),
    "run.id": ("run", str, "identifier written into evaluation CSV rows"),
    "seed": (0, int, "seed for initialization, frame and ray sampling"),
    "task.profile": ("occupancy", str, "depth | novel-depth | occupancy"),
    "field.provider": ("grid", str, "grid (dense voxels) | tpv (tri-plane)"),
    "field.resolution": (32, int, "voxels per axis over the manifest bounds"),
    "field.tpv_features": (8, int, "tri-plane feature channels"),
    "field.tpv_hidden": (32, int, "tri-plane decoder hidden width"),
    "field.init_noise": (0.01, float, "std of the initial SDF perturbation (m)"),
    "field.init_ground_m": (0.0, float, "initial ground plane height above the box floor (m)"),
    "field.init_sharpness": (None, "optfloat", "initial sharpness a (1/m), default 1 / voxel size"),
    "field.semantics": (False, "bool", "fit semantic logits from label maps"),
    "field.dtype": ("float32", str, "float32 | float64"),
    "render.samples": (96, int, "samples per ray (M)"),
    "render.sharpness_floor0": (None, "optfloat", "sharpness lower bound at step 0 (1/m), default none"),
    "render.sharpness_floor1": (None, "optfloat", "sharpness lower bound at the end of the anneal (1/m)"),
    "render.sharpness_mode": ("floor", str, "floor (a >= ramp, still learned) | fixed (a follows the ramp during it)"),
    "render.anneal_fraction": (0.5, float, "fraction of the steps over which the bound rises"),
    "loss.depth": ("mvs", str, "mvs (multi-proposal) | rpj (single depth)"),
    "loss.photometric": ("l1", str, "l1 | ssim (0.85 SSIM + 0.15 L1)"),
    "loss.rgb": (0.1, float, "weight of the color loss"),
    "loss.eikonal": (0.1, float, "weight of the eikonal loss"),
    "loss.hessian": (0.1, float, "weight of the Hessian loss"),
    "loss.sparsity": (0.001, float, "weight of the sparsity loss"),
    "loss.edge": (0.01, float, "weight of the edge-aware smoothness loss"),
    "loss.semantic": (0.1, float, "weight of the semantic loss"),
    "loss.disable": ("", "list", "terms to drop from the profile, e.g. sparsity"),
    "loss.warmup_fraction": (0.0, float, "regularizer weights ramp linearly from 0 over this fraction of steps"),
    "loss.regularizer_points": (4096, int, "voxel centers per step for Hessian and sparsity"),
    "loss.eikonal_ray_points": (0, int, "ray samples per step for the eikonal loss, 0 = all"),
    "loss.edge_patch": (8, int, "side of the square patch for the edge loss"),
    "supervision.p": (0.5, float, "probability of a temporal supervision frame"),
    "supervision.l1_m": (1.0, float, "near end of the ego-distance window (m)"),
    "supervision.l2_m": (None, "optfloat", "far end of the window, default half the forward extent"),
    "supervision.ratio": (None, "ratio", "current:prev:next weights, e.g. 1 1 1"),
    "supervision.rays_per_step": (1024, int, "rays per step"),
    "optim.lr0": (1e-4, float, "initial learning rate"),
    "optim.weight_decay": (0.01, float, "decoupled weight decay"),
    "optim.epochs": (12, int, "epochs"),
    "optim.steps_per_epoch": (100, int, "steps per epoch"),
    "optim.resume": ("", str, "checkpoint to resume from"),
}

# Overrides for the default desk scene (32^3 grid, 20 views, 2000 steps).
# A dense grid carries no learned prior, so it needs a much larger step than
# the defaults, a sharpness ramp instead of a learned-from-the-start a, and
# regularizers that switch on gradually at a weight matched to sparsity.
DESK_PRESET = {
    "optim.lr0": 0.05,
    "optim.epochs": 20,
    "optim.steps_per_epoch": 100,
    "loss.eikonal": 0.01,
    "loss.hessian": 0.01,
    "loss.sparsity": 0.01,
    "loss.warmup_fraction": 0.6,
    "loss.eikonal_ray_points": 4096,
    "field.init_sharpness": 2.5,
    "render.sharpness_floor0": 2.5,
    "render.sharpness_floor1": 100.0,
    "render.sharpness_mode": "fixed",
    "render.anneal_fraction": 0.6,
}

_BOOL = {"true": True, "1": True, "yes": True, "false": False, "0": False, "no": False}


def _parse(key, raw):
    kind = DEFAULTS[key][1]
    try:
        if kind == "bool":
            return _BOOL[raw.lower()]
        if kind == "list":
            return tuple(x for x in raw.replace(",", " ").split() if x)
        if kind == "optfloat":
            return None if raw.lower() in ("", "none") else float(raw)
        if kind == "ratio":
            if raw.lower() in ("", "none"):
                return None
            return tuple(float(x) for x in raw.replace(":", " ").split())
        return kind(raw)
    except (ValueError, KeyError):
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


@dataclass
class RunConfig:
    values: dict
    base_dir: str = "."

    def __getitem__(self, key):
        return self.values[key]

    def path(self, key):
        p = self.values[key]
        return p if not p or os.path.isabs(p) else os.path.join(self.base_dir, p)

    @property
    def profile(self):
        return self.values["task.profile"]

    def loss_weights(self) -> LossWeights:
        v = self.values
        enabled = tuple(t for t in PROFILES[self.profile] if t not in v["loss.disable"])
        if v["field.semantics"]:
            enabled += ("semantic",)
        return LossWeights(v["loss.rgb"], v["loss.eikonal"], v["loss.hessian"], v["loss.sparsity"],
                           v["loss.edge"], v["loss.semantic"], enabled)

    def supervision(self, bounds: Aabb) -> SupervisionConfig:
        v = self.values
        l2 = v["supervision.l2_m"]
        if l2 is None:
            l2 = 0.5 * float(bounds.extent[1])
        return SupervisionConfig(v["supervision.p"], v["supervision.l1_m"], l2,
                                 v["supervision.ratio"], v["supervision.rays_per_step"], v["seed"])

    def optim_state(self, no_decay) -> OptimState:
        v = self.values
        return OptimState(lr0=v["optim.lr0"], total_steps=self.total_steps,
                          weight_decay=v["optim.weight_decay"], no_decay=tuple(no_decay))

    @property
    def total_steps(self):
        return self.values["optim.epochs"] * self.values["optim.steps_per_epoch"]

    def grid_spec(self, bounds: Aabb) -> GridSpec:
        return GridSpec(bounds, (self.values["field.resolution"],) * 3)

    def loss_weights_at(self, step) -> LossWeights:
        """Profile weights with the regularizers scaled by the warm-up ramp."""
        w = self.loss_weights()
        frac = self.values["loss.warmup_fraction"]
        if frac <= 0:
            return w
        scale = min(step / (frac * self.total_steps), 1.0)
        for name in ("eikonal", "hessian", "sparsity", "edge"):
            setattr(w, name, getattr(w, name) * scale)
        return w

    def sharpness_bounds(self, step):
        """(lower, upper) bound on a at ``step``; either may be None."""
        lo = self.sharpness_floor(step)
        if lo is None or self.values["render.sharpness_mode"] == "floor":
            return lo, None
        span = self.values["render.anneal_fraction"] * self.total_steps
        return lo, (lo if step < span else None)

    def sharpness_floor(self, step):
        """Lower bound on a at ``step``: geometric ramp from floor0 to floor1."""
        v = self.values
        a0, a1 = v["render.sharpness_floor0"], v["render.sharpness_floor1"]
        if a0 is None:
            return None
        if a1 is None:
            return a0
        span = max(v["render.anneal_fraction"] * self.total_steps, 1.0)
        x = min(step / span, 1.0)
        return a0 * (a1 / a0) ** x

    @property
    def dtype(self):
        return np.dtype(self.values["field.dtype"])


def make_config(base_dir=".", **overrides) -> RunConfig:
    """Defaults plus overrides given with underscores for dots
    (``optim__lr0=1e-2``) or as a ``values`` dict of dotted keys."""
    values = {k: d[0] for k, d in DEFAULTS.items()}
    for k, v in overrides.pop("values", {}).items():
        if k not in DEFAULTS:
            raise ConfigError(f"unknown config key {k!r}")
        values[k] = v
    for k, v in overrides.items():
        key = k.replace("__", ".")
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = v
    cfg = RunConfig(values, base_dir)
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    values = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            if "=" not in text:
                raise ConfigError(f"{path}:{n}: expected key = value")
            key, raw = (s.strip() for s in text.split("=", 1))
            if key not in DEFAULTS:
                raise ConfigError(f"{path}:{n}: unknown config key {key!r}")
            values[key] = _parse(key, raw)
    return make_config(os.path.dirname(os.path.abspath(path)), values=values)


def validate(cfg: RunConfig):
    v = cfg.values
    if v["task.profile"] not in PROFILES:
        raise ConfigError(f"unknown task profile {v['task.profile']!r}")
    if v["field.provider"] not in ("grid", "tpv"):
        raise ConfigError(f"unknown field provider {v['field.provider']!r}")
    if v["field.dtype"] not in ("float32", "float64"):
        raise ConfigError("field.dtype must be float32 or float64")
    if v["loss.depth"] not in ("mvs", "rpj"):
        raise ConfigError("loss.depth must be mvs or rpj")
    if v["loss.photometric"] not in ("l1", "ssim"):
        raise ConfigError("loss.photometric must be l1 or ssim")
    unknown = set(v["loss.disable"]) - set(PROFILES["occupancy"] + ("edge",))
    if unknown:
        raise ConfigError(f"cannot disable unknown terms {sorted(unknown)}")
    if "dep" in v["loss.disable"]:
        raise ConfigError("the depth loss cannot be disabled")
    for key in ("field.resolution", "render.samples", "optim.epochs", "optim.steps_per_epoch",
                "supervision.rays_per_step", "loss.regularizer_points", "loss.edge_patch"):
        if v[key] <= 0:
            raise ConfigError(f"{key} must be positive")
    if v["render.samples"] < 2:
        raise ConfigError("render.samples must be at least 2")
    for key in ("render.sharpness_floor0", "render.sharpness_floor1"):
        if v[key] is not None and v[key] <= 0:
            raise ConfigError(f"{key} must be positive")
    if v["render.sharpness_floor1"] is not None and v["render.sharpness_floor0"] is None:
        raise ConfigError("render.sharpness_floor1 needs render.sharpness_floor0")
    if v["render.sharpness_mode"] not in ("floor", "fixed"):
        raise ConfigError("render.sharpness_mode must be floor or fixed")
    if not 0 <= v["loss.warmup_fraction"] <= 1:
        raise ConfigError("loss.warmup_fraction must lie in [0, 1]")
    if not 0 < v["render.anneal_fraction"] <= 1:
        raise ConfigError("render.anneal_fraction must lie in (0, 1]")
    if v["optim.lr0"] <= 0 or v["optim.weight_decay"] < 0:
        raise ConfigError("optimizer hyperparameters out of range")


def describe_defaults():
    """Lines documenting every key and its default, for ``--help`` text."""
    return [f"{k} = {d[0]!r}  # {d[2]}" for k, d in DEFAULTS.items()]
