"""Controlled mask corruptions for checking the VAE quality score.

Each corruption removes or adds voxels in an order set by its kind, and the
number of voxels touched is solved so that the result has a requested Dice
against the original mask.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage, stats

from .shape_vae import ShapeVae, quality_score

KINDS = ("erosion", "dilation", "noise")
LEVELS = (1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3)


def _removals_for(dice: float, n: int) -> int:
    # removing k of n foreground voxels: 2(n - k) / (2n - k) = d
    return int(round(2 * n * (1 - dice) / (2 - dice)))


def _additions_for(dice: float, n: int) -> int:
    # adding k background voxels: 2n / (2n + k) = d
    return int(round(2 * n * (1 - dice) / dice))


def corrupt_to_dice(mask: np.ndarray, dice: float, kind: str, rng: np.random.Generator) -> np.ndarray:
    """Binary copy of ``mask`` whose Dice with the original is close to ``dice``.

    erosion peels voxels off the surface inwards, dilation grows the surface
    outwards, noise splits the budget between random interior holes and
    random speckles within a few voxels of the organ.
    """
    m = np.asarray(mask) > 0.5
    n = int(m.sum())
    if not 0.0 < dice <= 1.0:
        raise ValueError(f"dice must be in (0, 1], got {dice}")
    if n == 0:
        raise ValueError("cannot corrupt an empty mask")
    out = m.copy()
    jitter = rng.uniform(0, 0.5, m.shape)  # random tie-break between voxels at equal depth
    if kind == "erosion":
        k = _removals_for(dice, n)
        depth = ndimage.distance_transform_edt(m) + jitter
        idx = np.argsort(np.where(m, depth, np.inf), axis=None)[:k]
        out.flat[idx] = False
    elif kind == "dilation":
        k = _additions_for(dice, n)
        dist = ndimage.distance_transform_edt(~m) + jitter
        idx = np.argsort(np.where(m, np.inf, dist), axis=None)[:k]
        out.flat[idx] = True
    elif kind == "noise":
        # k holes plus k speckles keep the total size, so Dice = (n - k) / n
        k = int(round(n * (1 - dice)))
        near = ~m & (ndimage.distance_transform_edt(~m) <= 4)
        inside, outside = np.flatnonzero(m), np.flatnonzero(near)
        k_out = min(k, outside.size)
        out.flat[rng.choice(inside, size=min(k, n), replace=False)] = False
        out.flat[rng.choice(outside, size=k_out, replace=False)] = True
    else:
        raise ValueError(f"unknown corruption {kind!r}, expected one of {KINDS}")
    return out.astype(np.float32)


def true_dice(a: np.ndarray, b: np.ndarray) -> float:
    a, b = np.asarray(a) > 0.5, np.asarray(b) > 0.5
    denom = a.sum() + b.sum()
    return 1.0 if denom == 0 else float(2 * (a & b).sum() / denom)


@dataclass
class QualitySuite:
    kinds: list
    true: np.ndarray
    score: np.ndarray

    @property
    def spearman(self) -> float:
        return float(stats.spearmanr(self.true, self.score)[0])


def quality_suite(vae: ShapeVae, masks, rng: np.random.Generator, levels=LEVELS, kinds=KINDS) -> QualitySuite:
    """Score every mask corrupted to every (level, kind); true Dice is measured, not assumed."""
    rows = []
    for m in masks:
        arr = m.data[0] if hasattr(m, "data") else np.asarray(m)
        for kind in kinds:
            for level in levels:
                c = corrupt_to_dice(arr, level, kind, rng)
                rows.append((kind, true_dice(arr, c), quality_score(vae, c)))
    kinds_, t, s = zip(*rows)
    return QualitySuite(list(kinds_), np.array(t), np.array(s))
