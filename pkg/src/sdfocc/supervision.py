"""Choosing supervision frames and ray batches."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError


@dataclass
class SupervisionConfig:
    p: float = 0.5
    l1: float = 1.0
    l2: float = 6.4
    # (current, prev, next) weights; when set they replace ``p``
    ratio: tuple | None = None
    rays_per_step: int = 1024
    seed: int = 0

    def __post_init__(self):
        if not 0 <= self.p <= 1:
            raise DomainError("p must lie in [0, 1]")
        if not 0 <= self.l1 < self.l2:
            raise DomainError("need 0 <= l1 < l2")
        if self.ratio is not None:
            r = tuple(float(x) for x in self.ratio)
            if len(r) != 3 or min(r) < 0 or sum(r) == 0:
                raise DomainError("ratio needs three non-negative weights, not all zero")
            self.ratio = r


def window_candidates(t, positions, l1, l2):
    """Frames whose ego distance from frame ``t`` lies in [l1, l2]."""
    positions = np.asarray(positions, dtype=np.float64)
    dist = np.linalg.norm(positions - positions[t], axis=-1)
    ok = (dist >= l1) & (dist <= l2)
    ok[t] = False
    return np.flatnonzero(ok)


def select_supervision_frame(t, positions, cfg: SupervisionConfig, rng: np.random.Generator):
    """Frame index used to supervise frame ``t``.

    With ``cfg.ratio`` unset: with probability ``p`` a uniformly random
    frame in the distance window, else ``t``.  With a ratio the role
    (current / previous / next) is drawn first and the frame uniformly from
    that side of the window.  Empty candidate sets fall back to ``t``.
    """
    cands = window_candidates(t, positions, cfg.l1, cfg.l2)
    if cfg.ratio is None:
        if rng.random() >= cfg.p or cands.size == 0:
            return t
        return int(rng.choice(cands))
    w = np.asarray(cfg.ratio) / np.sum(cfg.ratio)
    role = rng.choice(3, p=w)
    if role == 0:
        return t
    side = cands[cands < t] if role == 1 else cands[cands > t]
    if side.size == 0:
        return t
    return int(rng.choice(side))


def sample_ray_batch(width, height, n, rng: np.random.Generator):
    """``n`` distinct pixels (u, v), uniform without replacement."""
    total = width * height
    if n > total or n < 0:
        raise DomainError(f"cannot draw {n} distinct pixels from {total}")
    flat = rng.choice(total, size=n, replace=False)
    return np.stack([flat % width, flat // width], axis=-1)
