import numpy as np
import pytest
from scipy import ndimage

from src.xcoreg.models import Binning, Grid, Volume


def smooth_volume_data(rng, shape=(24, 24), sigma=2.0) -> np.ndarray:
    data = ndimage.gaussian_filter(rng.standard_normal(shape), sigma)
    return (data - data.min()) / (data.max() - data.min())


def make_volume(data, spacing=None, modality="") -> Volume:
    data = np.asarray(data, dtype=float)
    return Volume(grid=Grid.from_shape(data.shape, spacing=spacing), data=data, modality=modality)


def interior_points(grid: Grid, margin: int = 5) -> np.ndarray:
    index = np.stack(
        np.meshgrid(*[np.arange(margin, n - margin) for n in grid.dims], indexing="ij"), axis=-1
    ).reshape(-1, grid.ndim)
    return grid.index_to_physical(index)


def binnings_for(volumes, L=32):
    return [Binning.from_values(v.data, L=L) for v in volumes]


def relative_error(analytic, numeric) -> float:
    analytic = np.ravel(analytic)
    numeric = np.ravel(numeric)
    scale = max(np.max(np.abs(analytic)), np.max(np.abs(numeric)), 1e-12)
    return float(np.max(np.abs(analytic - numeric)) / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def smooth_pair(rng):
    first = smooth_volume_data(rng)
    second = 1.0 - first**2 + 0.05 * smooth_volume_data(rng)
    return [make_volume(first, modality="a"), make_volume(second, modality="b")]
