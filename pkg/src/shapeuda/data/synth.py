"""Synthetic organ phantoms with a shared shape distribution and per-domain appearance.

A shape seed fixes the mask completely; a :class:`DomainSpec` only controls how
the image is rendered from it (intensity levels, texture, acquisition spacing
and bright distractor structures). Two domains therefore share the exact same
masks while their images differ.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from ..volume import Volume

MIN_SIZE = 16
MAX_RETRIES = 10
FG_FRACTION = (0.02, 0.20)


@dataclass(frozen=True)
class IntensityMap:
    """Piecewise-linear intensity as a function of distance to the organ boundary.

    Inside the mask the level ramps from ``fg`` at the rim to ``fg_core`` at
    ``ramp_mm`` depth; outside it ramps from ``bg`` to ``bg_far``. With the
    defaults (``fg_core=fg``, ``bg_far=bg``) the map is flat.
    """

    fg: float
    bg: float
    fg_core: float | None = None
    bg_far: float | None = None
    ramp_mm: float = 4.0

    def render(self, inside_depth: np.ndarray, outside_dist: np.ndarray, mask: np.ndarray) -> np.ndarray:
        core = self.fg if self.fg_core is None else self.fg_core
        far = self.bg if self.bg_far is None else self.bg_far
        t_in = np.minimum(inside_depth / self.ramp_mm, 1.0)
        t_out = np.minimum(outside_dist / self.ramp_mm, 1.0)
        inside = self.fg + (core - self.fg) * t_in
        outside = self.bg + (far - self.bg) * t_out
        return np.where(mask, inside, outside)


@dataclass(frozen=True)
class DomainSpec:
    name: str
    intensity: IntensityMap
    noise_sigma: float = 0.0
    texture_frequency: float = 0.25
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    seed: int = 0
    distractors: int = 0
    distractor_level: float = 0.0
    distractor_radius: tuple[float, float] = (2.0, 3.5)


@dataclass(frozen=True)
class Sample:
    image: Volume
    mask: Volume
    case_id: str = ""

    def __post_init__(self):
        if self.image.dims != self.mask.dims or self.image.spacing != self.mask.spacing:
            raise ValueError(f"image {self.image} and mask {self.mask} disagree in dims or spacing")
        if self.image.channels != 1 or self.mask.channels != 1:
            raise ValueError("samples hold single-channel image and mask")
        m = self.mask.data
        if not np.all((m == 0) | (m == 1)):
            raise ValueError("mask must be strictly binary")

    def replace(self, image: Volume | None = None, mask: Volume | None = None) -> "Sample":
        return Sample(image if image is not None else self.image,
                      mask if mask is not None else self.mask, self.case_id)


class GenerationError(RuntimeError):
    pass


def _dims(size) -> tuple[int, int, int]:
    if np.isscalar(size):
        size = (int(size),) * 3
    size = tuple(int(s) for s in size)
    if len(size) != 3 or min(size) < MIN_SIZE:
        raise ValueError(f"sample size must be at least {MIN_SIZE}^3, got {size}")
    return size


def _rotation(rng, max_deg):
    """Random rotation matrix: axis uniform on the sphere, angle within max_deg."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    ang = np.deg2rad(rng.uniform(-max_deg, max_deg))
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(ang) * k + (1 - np.cos(ang)) * (k @ k)


# body half-axes as fractions of the grid side, each jittered by up to BODY_JITTER
BODY_AXES = (0.209, 0.242, 0.363)
BODY_JITTER = 0.06
# range of each of the three surface-wobble amplitudes
WOBBLE = (0.008, 0.018)


def _blob(rng, dims) -> np.ndarray:
    dims_a = np.array(dims, dtype=float)
    s = dims_a.min()
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in dims], indexing="ij"), axis=-1)
    center = (dims_a - 1) / 2 + rng.uniform(-0.04, 0.04, 3) * s
    rot = _rotation(rng, 12.0)
    # a template organ: elongated body along width plus one smaller lobe on a fixed side
    axes = np.array(BODY_AXES) * s * rng.uniform(1 - BODY_JITTER, 1 + BODY_JITTER, 3)

    direction = rot @ np.array([rng.uniform(-0.15, 0.15), rng.uniform(0.3, 0.6), 1.0])
    direction /= np.linalg.norm(direction)
    reach = np.abs(rot.T @ direction) @ axes
    lobes = [(center, rot, axes),
             (center + direction * reach * rng.uniform(0.6, 0.75), rot @ _rotation(rng, 15.0),
              axes * rng.uniform(0.5, 0.65, 3))]

    # smooth radial perturbation: low-frequency function of direction from the centre
    rel = grid - center
    u = rel / np.maximum(np.linalg.norm(rel, axis=-1, keepdims=True), 1e-6)
    wobble = np.zeros(dims)
    for _ in range(3):
        k = rng.normal(size=3)
        k *= rng.uniform(1.0, 2.0) / np.linalg.norm(k)
        wobble += rng.uniform(*WOBBLE) * np.cos(u @ k + rng.uniform(0, 2 * np.pi))

    radius = np.full(dims, np.inf)
    for c, r, a in lobes:
        local = (grid - c) @ r
        radius = np.minimum(radius, np.sqrt(((local / a) ** 2).sum(axis=-1)))
    mask = radius * (1.0 + wobble) < 1.0

    labels, n = ndimage.label(mask)
    if n > 1:
        sizes = ndimage.sum(mask, labels, index=np.arange(1, n + 1))
        mask = labels == (1 + int(np.argmax(sizes)))
    return mask


def generate_mask(shape_seed: int, size=32) -> np.ndarray:
    """Boolean (D, H, W) organ mask determined by ``shape_seed`` alone."""
    dims = _dims(size)
    n = np.prod(dims)
    for attempt in range(MAX_RETRIES + 1):
        rng = np.random.default_rng([int(shape_seed), attempt, 0x5EED])
        mask = _blob(rng, dims)
        frac = mask.sum() / n
        if mask.any() and FG_FRACTION[0] <= frac <= FG_FRACTION[1]:
            return mask
    raise GenerationError(f"shape seed {shape_seed}: no valid mask after {MAX_RETRIES} retries")


def band_limited_noise(rng, dims, frequency: float) -> np.ndarray:
    """Unit-variance Gaussian noise low-passed at roughly ``frequency`` cycles/voxel."""
    white = rng.standard_normal(dims)
    sigma = 1.0 / (2 * np.pi * max(frequency, 1e-3))
    field_ = ndimage.gaussian_filter(white, sigma, mode="wrap")
    std = field_.std()
    return field_ / std if std > 0 else field_


def _distractors(rng, mask, spec: DomainSpec) -> np.ndarray:
    dims = mask.shape
    out = np.zeros(dims, dtype=bool)
    if spec.distractors <= 0:
        return out
    dist = ndimage.distance_transform_edt(~mask)
    grid = np.stack(np.meshgrid(*[np.arange(n, dtype=float) for n in dims], indexing="ij"), axis=-1)
    placed = 0
    for _ in range(50 * spec.distractors):
        if placed == spec.distractors:
            break
        r = rng.uniform(*spec.distractor_radius)
        c = np.array([rng.uniform(r + 1, n - r - 2) for n in dims])
        ball = ((grid - c) ** 2).sum(axis=-1) <= r * r
        if dist[ball].min() < 3.0:
            continue
        out |= ball
        placed += 1
    return out


def _acquire(img: np.ndarray, spacing) -> np.ndarray:
    """Simulate acquisition on a coarser grid and return to the 1 mm grid (partial volume blur)."""
    spacing = np.asarray(spacing, dtype=float)
    if np.allclose(spacing, 1.0):
        return img
    from .preprocess import resample_isotropic

    dims = np.array(img.shape)
    native = np.maximum(np.round(dims / spacing).astype(int), 2)
    # box-average over each coarse voxel's footprint, then sample at its centre
    smooth = ndimage.uniform_filter(img, size=np.maximum(np.round(spacing).astype(int), 1), mode="nearest")
    coords = [(np.arange(m) + 0.5) * (n / m) - 0.5 for m, n in zip(native, dims)]
    coarse = ndimage.map_coordinates(smooth, np.meshgrid(*coords, indexing="ij"), order=1, mode="nearest")
    up = resample_isotropic(Volume(coarse, tuple(dims / native)), 1.0).data[0]
    out = np.zeros(img.shape, dtype=np.float32)
    sl = tuple(slice(0, min(a, b)) for a, b in zip(up.shape, img.shape))
    out[sl] = up[sl]
    # edge-replicate if rounding left the grid a voxel short
    for ax in range(3):
        if up.shape[ax] < img.shape[ax]:
            idx = [slice(None)] * 3
            idx[ax] = slice(up.shape[ax], None)
            src = [slice(None)] * 3
            src[ax] = slice(up.shape[ax] - 1, up.shape[ax])
            out[tuple(idx)] = out[tuple(src)]
    return out


def generate_sample(shape_seed: int, domain: DomainSpec, size=32, case_id: str | None = None) -> Sample:
    """Render one image/mask pair. Masks depend on ``shape_seed`` only."""
    dims = _dims(size)
    mask = generate_mask(shape_seed, dims)
    rng = np.random.default_rng([int(domain.seed), int(shape_seed), 0xA11])

    depth_in = ndimage.distance_transform_edt(mask)
    dist_out = ndimage.distance_transform_edt(~mask)
    img = domain.intensity.render(depth_in, dist_out, mask)
    extra = _distractors(rng, mask, domain)
    img = np.where(extra, domain.distractor_level, img)
    img = _acquire(img, domain.spacing)
    if domain.noise_sigma > 0:
        img = img + domain.noise_sigma * band_limited_noise(rng, dims, domain.texture_frequency)

    cid = case_id if case_id is not None else f"{domain.name}-{shape_seed:05d}"
    return Sample(Volume(img.astype(np.float32)), Volume(mask.astype(np.float32)), cid)


def generate_set(shape_seeds, domain: DomainSpec, size=32, prefix: str | None = None) -> list[Sample]:
    prefix = prefix or domain.name
    return [generate_sample(s, domain, size, case_id=f"{prefix}-{s:05d}") for s in shape_seeds]
