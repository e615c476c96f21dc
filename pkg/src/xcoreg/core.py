import itertools
import logging
import math
from typing import Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from src.xcoreg.models import Grid, SampleSet, Volume

logger = logging.getLogger(__name__)

Seed = Union[int, Sequence[int], None]


def interpolate_points(
    volume: Volume, points
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Multilinear interpolation at many physical points.

    Returns values (M,), inside flags (M,) and spatial gradients (M, d) in
    intensity per millimetre. Points outside the grid's bounding box get
    value 0, zero gradient and inside=False.
    """
    grid = volume.grid
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    ndim = grid.ndim
    dims = np.asarray(grid.dims)
    spacing = np.asarray(grid.spacing)

    cont = (pts - np.asarray(grid.origin)) / spacing
    inside = np.all((cont >= 0.0) & (cont <= dims - 1), axis=1)
    base = np.clip(np.floor(cont), 0, dims - 2).astype(np.intp)
    frac = cont - base

    values = np.zeros(len(pts))
    grads = np.zeros((len(pts), ndim))
    data = volume.data
    for corner in itertools.product((0, 1), repeat=ndim):
        corner = np.asarray(corner)
        index = tuple((base + corner)[:, a] for a in range(ndim))
        sample = data[index]
        axis_weights = np.where(corner == 1, frac, 1.0 - frac)
        values += np.prod(axis_weights, axis=1) * sample
        for a in range(ndim):
            others = np.prod(np.delete(axis_weights, a, axis=1), axis=1)
            sign = 1.0 if corner[a] else -1.0
            grads[:, a] += sign * others * sample

    grads /= spacing
    values[~inside] = 0.0
    grads[~inside] = 0.0
    return values, inside, grads


def interpolate(volume: Volume, point) -> Tuple[float, bool, np.ndarray]:
    values, inside, grads = interpolate_points(volume, np.asarray(point, dtype=float)[None, :])
    return float(values[0]), bool(inside[0]), grads[0]


def draw_samples(grid: Grid, rate: float, rng_seed: Seed = 0) -> SampleSet:
    """Uniform random subset of grid points drawn without replacement."""
    if not 0.0 < rate <= 1.0:
        raise ValueError(f"sample rate must lie in (0, 1], got {rate}")
    total = grid.size
    if rate >= 1.0:
        indices = np.arange(total)
    else:
        count = min(total, max(1, math.ceil(rate * total - 1e-9)))
        rng = np.random.default_rng(rng_seed)
        indices = np.sort(rng.choice(total, size=count, replace=False))
    index = np.stack(np.unravel_index(indices, grid.dims), axis=1)
    return SampleSet(points=grid.index_to_physical(index), indices=indices)


def nearest_lookup(grid: Grid, array: np.ndarray, points, fill=0) -> np.ndarray:
    """Nearest-neighbour lookup of a grid-shaped array at physical points."""
    pts = np.atleast_2d(np.asarray(points, dtype=float))
    index = np.rint(grid.physical_to_index(pts)).astype(np.intp)
    dims = np.asarray(grid.dims)
    valid = np.all((index >= 0) & (index < dims), axis=1)
    clipped = np.clip(index, 0, dims - 1)
    looked_up = array[tuple(clipped[:, a] for a in range(grid.ndim))]
    return np.where(valid, looked_up, fill)


def warp_volume(
    volume: Volume,
    transform,
    grid: Optional[Grid] = None,
    order: int = 1,
    fill: float = 0.0,
) -> Volume:
    """Resample ``volume`` onto ``grid`` through ``transform`` (common space -> image space)."""
    grid = grid or volume.grid
    mapped = transform.apply(grid.points())
    if order == 0:
        data = nearest_lookup(volume.grid, volume.data, mapped, fill=fill)
    else:
        data, inside, _ = interpolate_points(volume, mapped)
        data = np.where(inside, data, fill)
    return Volume(grid=grid, data=data.reshape(grid.shape), modality=volume.modality)


def smooth_volume(volume: Volume, sigma: float) -> Volume:
    """Gaussian prefilter with ``sigma`` in voxels."""
    if sigma <= 0:
        return volume
    smoothed = ndimage.gaussian_filter(volume.data, sigma=sigma, mode="nearest")
    return volume.with_data(smoothed)


def downsample_volume(volume: Volume, factor: int) -> Volume:
    factor = effective_factor(volume.grid, factor)
    if factor <= 1:
        return volume
    stride = tuple(slice(None, None, factor) for _ in range(volume.grid.ndim))
    return volume.with_data(volume.data[stride], grid=volume.grid.downsample(factor))


def effective_factor(grid: Grid, factor: int) -> int:
    return max(1, min(int(factor), min(grid.dims) - 1))


def resample_field(field: np.ndarray, source: Grid, target: Grid) -> np.ndarray:
    """Carry a per-point multi-channel field from one grid to another (clamped multilinear)."""
    if source == target:
        return np.array(field, copy=True)
    points = target.points()
    lo = np.asarray(source.origin)
    hi = lo + source.extent - 1e-9 * np.asarray(source.spacing)
    points = np.clip(points, lo, hi)
    channels = field.reshape(source.size, -1)
    out = np.empty((target.size, channels.shape[1]))
    for c in range(channels.shape[1]):
        channel = Volume(grid=source, data=channels[:, c].reshape(source.shape))
        out[:, c], _, _ = interpolate_points(channel, points)
    return out
