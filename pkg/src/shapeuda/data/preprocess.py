"""Resampling, intensity normalisation, bounding-cube cropping and augmentation."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..volume import Volume
from .synth import Sample, _rotation

CLIP_RANGE = (-200.0, 400.0)


def resample_isotropic(v: Volume, target_spacing: float = 1.0, is_mask: bool = False) -> Volume:
    """Resample to ``target_spacing`` mm per voxel along every axis.

    Output voxel ``j`` sits at physical offset ``j * target`` from the first
    input voxel centre. Images use trilinear interpolation, masks nearest
    neighbour; samples past the last input voxel replicate the edge.
    """
    if target_spacing <= 0:
        raise ValueError(f"target spacing must be positive, got {target_spacing}")
    spacing = np.asarray(v.spacing)
    if np.all(spacing == target_spacing):
        return v
    dims = np.asarray(v.dims)
    new_dims = np.maximum(np.round(dims * spacing / target_spacing).astype(int), 1)
    coords = np.meshgrid(*[np.arange(m) * target_spacing / s for m, s in zip(new_dims, spacing)], indexing="ij")
    order = 0 if is_mask else 1
    out = np.stack([
        ndimage.map_coordinates(v.data[c].astype(np.float64), coords, order=order, mode="nearest")
        for c in range(v.channels)
    ])
    if is_mask:
        out = (out > 0.5).astype(np.float32)
    return Volume(out.astype(np.float32), (target_spacing,) * 3)


def clip_normalize(v: Volume, lo: float = CLIP_RANGE[0], hi: float = CLIP_RANGE[1]) -> Volume:
    """Clamp to [lo, hi] then map linearly onto [-1, 1]."""
    d = np.clip(v.data.astype(np.float64), lo, hi)
    return v.with_data(((d - lo) / (hi - lo) * 2.0 - 1.0).astype(np.float32))


def bounding_cube(ref: np.ndarray, margin: int) -> tuple[slice, slice, slice] | None:
    """Slices of the cube holding the foreground of ``ref`` plus ``margin`` voxels."""
    fg = np.argwhere(ref > 0.5)
    if fg.size == 0:
        return None
    lo, hi = fg.min(axis=0), fg.max(axis=0)
    side = int((hi - lo + 1).max()) + 2 * margin
    slices = []
    for n, a, b in zip(ref.shape, lo, hi):
        s = min(side, n)
        start = int(np.floor((a + b) / 2.0 - (s - 1) / 2.0))
        start = min(max(start, 0), n - s)
        slices.append(slice(start, start + s))
    return tuple(slices)


def crop_bounding_cube(s: Sample, margin: int, reference: np.ndarray | None = None) -> Sample:
    """Crop image and mask to a cube around the foreground.

    The cube is derived from ``reference`` when given (e.g. a teacher
    prediction on unlabeled data), otherwise from the sample's own mask. An
    empty reference leaves the sample unchanged.
    """
    ref = s.mask.data[0] if reference is None else np.asarray(reference)
    if ref.ndim == 4:
        ref = ref[0]
    box = bounding_cube(ref, margin)
    if box is None:
        return s
    sl = (slice(None),) + box
    return s.replace(Volume(s.image.data[sl], s.image.spacing), Volume(s.mask.data[sl], s.mask.spacing))


@dataclass(frozen=True)
class AugmentSpec:
    intensity_scale_range: tuple[float, float] = (0.85, 1.15)
    max_rotation_deg: float = 20.0
    max_translation_vox: int = 5
    intensity: bool = True
    rotation: bool = True
    translation: bool = True

    @classmethod
    def disabled(cls) -> "AugmentSpec":
        return cls(intensity=False, rotation=False, translation=False)


def _rotate(arr: np.ndarray, rot: np.ndarray, order: int) -> np.ndarray:
    center = (np.asarray(arr.shape) - 1) / 2.0
    # affine_transform maps output coords to input coords: in = R^T (out - c) + c
    inv = rot.T
    offset = center - inv @ center
    return ndimage.affine_transform(arr, inv, offset=offset, order=order, mode="constant", cval=0.0)


def _shift(arr: np.ndarray, shift) -> np.ndarray:
    out = np.zeros_like(arr)
    src, dst = [], []
    for n, t in zip(arr.shape, shift):
        t = int(t)
        if abs(t) >= n:
            return out
        src.append(slice(max(0, -t), n - max(0, t)))
        dst.append(slice(max(0, t), n - max(0, -t)))
    out[tuple(dst)] = arr[tuple(src)]
    return out


def apply_transform(s: Sample, rotation=None, translation=(0, 0, 0), scale: float = 1.0) -> Sample:
    """Apply a fixed rigid transform (about the volume centre) and intensity scale."""
    img = s.image.data[0].astype(np.float64)
    msk = s.mask.data[0].astype(np.float64)
    if rotation is not None and not np.allclose(rotation, np.eye(3)):
        img = _rotate(img, rotation, order=1)
        msk = _rotate(msk, rotation, order=0)
    if any(int(t) for t in translation):
        img = _shift(img, translation)
        msk = _shift(msk, translation)
    img = img * scale
    return s.replace(Volume(img.astype(np.float32), s.image.spacing),
                     Volume((msk > 0.5).astype(np.float32), s.mask.spacing))


def augment(s: Sample, spec: AugmentSpec, rng: np.random.Generator) -> Sample:
    """Random rotation, integer translation (zero fill) and image-only intensity scaling.

    Draws from ``rng`` happen in a fixed order regardless of which parts are
    enabled, so toggling one part never reshuffles the others.
    """
    rot = _rotation(rng, spec.max_rotation_deg)
    m = spec.max_translation_vox
    shift = rng.integers(-m, m + 1, size=3)
    scale = rng.uniform(*spec.intensity_scale_range)
    if not (spec.rotation or spec.translation or spec.intensity):
        return s
    return apply_transform(
        s,
        rotation=rot if spec.rotation else None,
        translation=shift if spec.translation else (0, 0, 0),
        scale=scale if spec.intensity else 1.0,
    )
