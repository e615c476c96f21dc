"""Synthetic multimodal phantoms, contrast sequences and known misalignments."""

import logging
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np
from scipy import ndimage

from src.xcoreg.core import warp_volume
from src.xcoreg.errors import TransformError
from src.xcoreg.models import Grid, MisalignmentSpec, PhantomSpec, SynthSpec, Volume
from src.xcoreg.transforms import FFD, ChainTransform, Rigid, TransformGroup, Translation, project_zero_mean

logger = logging.getLogger(__name__)

MYOCARDIUM = 1
BLOOD_POOL = 2


@dataclass
class Phantom:
    grid: Grid
    labels: np.ndarray
    volumes: List[Volume]
    class_means: List[np.ndarray]

    @property
    def foreground(self) -> np.ndarray:
        return self.labels > 0


@dataclass
class SyntheticCase:
    case_id: str
    phantom: Phantom
    images: List[Volume]
    labels: List[np.ndarray]
    misalignment: TransformGroup
    dsc_label: Optional[int] = None
    meta: dict = field(default_factory=dict)


def _normalized_coords(grid: Grid) -> np.ndarray:
    """Grid point coordinates scaled to [-1, 1] per axis, shape (d, *dims)."""
    axes = [np.linspace(-1.0, 1.0, n) for n in grid.dims]
    return np.stack(np.meshgrid(*axes, indexing="ij"))


def _body_mask(grid: Grid) -> np.ndarray:
    coords = _normalized_coords(grid)
    return np.sum((coords / 0.8) ** 2, axis=0) <= 1.0


def _blob_classes(grid: Grid, n_classes: int, blob_sigma: float, rng: np.random.Generator) -> np.ndarray:
    sigma = [blob_sigma / s for s in grid.spacing]
    fields = np.stack(
        [ndimage.gaussian_filter(rng.standard_normal(grid.shape), sigma=sigma, mode="reflect") for _ in range(n_classes)]
    )
    return np.argmax(fields, axis=0)


def _blob_labels(spec: PhantomSpec, grid: Grid, rng: np.random.Generator) -> np.ndarray:
    labels = np.zeros(grid.shape, dtype=int)
    body = _body_mask(grid)
    labels[body] = 1 + _blob_classes(grid, spec.K - 1, spec.blob_sigma, rng)[body]
    return labels


def _cardiac_labels(spec: PhantomSpec, grid: Grid, rng: np.random.Generator) -> np.ndarray:
    coords = _normalized_coords(grid)
    labels = np.zeros(grid.shape, dtype=int)
    body = _body_mask(grid)
    labels[body] = 3 + _blob_classes(grid, spec.K - 3, spec.blob_sigma, rng)[body]
    center = np.zeros(grid.ndim)
    center[0] = rng.uniform(-0.1, 0.1)
    center[-1] = rng.uniform(-0.25, -0.1)
    radius = np.sqrt(np.sum((coords - center.reshape((-1,) + (1,) * grid.ndim)) ** 2, axis=0))
    labels[radius <= 0.32] = MYOCARDIUM
    labels[radius <= 0.2] = BLOOD_POOL
    return labels


def class_mean_permutations(K: int, n_images: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Identity, reversed, then distinct random permutations of the class order."""
    perms = [np.arange(K), np.arange(K)[::-1]]
    attempts = 0
    while len(perms) < n_images:
        candidate = rng.permutation(K)
        attempts += 1
        if attempts > 100 or not any(np.array_equal(candidate, p) for p in perms):
            perms.append(candidate)
    return perms[:n_images]


def _bias_field(grid: Grid, strength: float, rng: np.random.Generator) -> np.ndarray:
    coords = _normalized_coords(grid)
    linear = np.tensordot(rng.uniform(-1, 1, grid.ndim), coords, axes=1)
    quadratic = np.tensordot(rng.uniform(-1, 1, grid.ndim), coords**2, axes=1)
    poly = linear + 0.5 * quadratic
    poly /= max(np.max(np.abs(poly)), 1e-12)
    return 1.0 + strength * poly


def _render(labels: np.ndarray, means: np.ndarray, grid: Grid, spec: PhantomSpec, rng: np.random.Generator) -> np.ndarray:
    data = means[labels]
    if spec.bias_strength > 0:
        data = data * _bias_field(grid, spec.bias_strength, rng)
    if spec.noise_sigma > 0:
        data = data + spec.noise_sigma * rng.standard_normal(grid.shape)
    return data


def make_phantom(spec: PhantomSpec) -> Phantom:
    """Aligned multimodal images of one random label map.

    Modality j assigns the class means linspace(0.1, 0.9, K) in its own
    permutation, so the same anatomy can appear with reversed contrast.
    """
    grid = Grid.from_shape(spec.dims, spacing=spec.spacing)
    rng = np.random.default_rng(spec.seed)
    labels = _cardiac_labels(spec, grid, rng) if spec.shape == "cardiac" else _blob_labels(spec, grid, rng)
    base = np.linspace(0.1, 0.9, spec.K)
    means = [base[perm] for perm in class_mean_permutations(spec.K, spec.n_images, rng)]
    volumes = [
        Volume(grid=grid, data=_render(labels, m, grid, spec, rng), modality=f"modality{j}")
        for j, m in enumerate(means)
    ]
    logger.info(f"Phantom {list(grid.dims)} with K={spec.K}, {spec.n_images} modalities, shape={spec.shape}")
    return Phantom(grid=grid, labels=labels, volumes=volumes, class_means=means)


def uptake_curve(n_frames: int, peak: float) -> np.ndarray:
    """Normalized gamma-variate enhancement over the sequence, peaking at fraction ``peak``."""
    t = np.linspace(0.0, 1.0, n_frames) / peak
    return t * np.exp(1.0 - t)


def make_sequence(spec: PhantomSpec, n_frames: int) -> Phantom:
    """Single-modality contrast-enhancement sequence of one cardiac-like label map."""
    spec = PhantomSpec.model_validate({**spec.model_dump(), "shape": "cardiac"})
    grid = Grid.from_shape(spec.dims, spacing=spec.spacing)
    rng = np.random.default_rng(spec.seed)
    labels = _cardiac_labels(spec, grid, rng)
    base = np.linspace(0.1, 0.5, spec.K)
    blood = uptake_curve(n_frames, 0.3)
    myocardium = uptake_curve(n_frames, 0.55)
    means, volumes = [], []
    for frame in range(n_frames):
        m = base.copy()
        m[BLOOD_POOL] += 0.5 * blood[frame]
        m[MYOCARDIUM] += 0.35 * myocardium[frame]
        means.append(m)
        volumes.append(Volume(grid=grid, data=_render(labels, m, grid, spec, rng), modality=f"frame{frame:03d}"))
    logger.info(f"Contrast sequence {list(grid.dims)} with {n_frames} frames")
    return Phantom(grid=grid, labels=labels, volumes=volumes, class_means=means)


def _random_directions(rng: np.random.Generator, count: int, ndim: int) -> np.ndarray:
    directions = rng.standard_normal((count, ndim))
    norms = np.linalg.norm(directions, axis=1, keepdims=True)
    return directions / np.where(norms > 0, norms, 1.0)


def make_misalignment(spec: MisalignmentSpec, grid: Grid, n_images: int) -> TransformGroup:
    """Random misalignments within the configured bounds.

    FFD node displacements never exceed ``ffd_cap * scale``; after the
    optional zero-mean projection the whole group is shrunk back under the
    cap if needed.
    """
    rng = np.random.default_rng(spec.seed)
    ndim = grid.ndim
    max_translation = spec.max_translation * spec.scale
    if spec.kind == "translation":
        members = [Translation(rng.uniform(-max_translation, max_translation, ndim)) for _ in range(n_images)]
    elif spec.kind == "rigid":
        max_angle = np.deg2rad(spec.max_angle_deg) * spec.scale
        n_angles = 1 if ndim == 2 else 3
        members = [
            Rigid(
                grid.center,
                rng.uniform(-max_angle, max_angle, n_angles),
                rng.uniform(-max_translation, max_translation, ndim),
            )
            for _ in range(n_images)
        ]
    elif spec.kind == "ffd":
        cap = spec.ffd_cap * spec.scale
        template = FFD.for_grid(grid, spec.ffd_spacing)
        members = []
        for _ in range(n_images):
            lengths = rng.uniform(0.0, cap, template.n_nodes)[:, None]
            members.append(template.with_params((_random_directions(rng, template.n_nodes, ndim) * lengths).ravel()))
    else:
        raise TransformError(f"unknown misalignment kind: {spec.kind}")

    group = TransformGroup(members)
    if spec.zero_mean:
        group = project_zero_mean(group)
        if spec.kind == "ffd":
            group = _shrink_under_cap(group, spec.ffd_cap * spec.scale)
    return group


def _shrink_under_cap(group: TransformGroup, cap: float) -> TransformGroup:
    largest = max(float(np.max(np.linalg.norm(t.displacements, axis=1))) for t in group.members)
    if largest <= cap or largest == 0:
        return group
    return group.with_flat_params(group.flat_params() * (cap / largest))


def _compose_groups(bulk: TransformGroup, elastic: TransformGroup) -> TransformGroup:
    return TransformGroup([ChainTransform([b], e) for b, e in zip(bulk.members, elastic.members)], zero_mean=True)


def make_case(spec: SynthSpec) -> SyntheticCase:
    """Phantom plus misalignment for one protocol; image j shows the phantom pulled through its misalignment."""
    phantom_spec = spec.phantom
    if spec.protocol == "moco":
        phantom = make_sequence(phantom_spec, spec.n_frames)
        n = spec.n_frames
        bulk = make_misalignment(spec.misalignment.model_copy(update={"kind": "rigid"}), phantom.grid, n)
        elastic = make_misalignment(spec.misalignment.model_copy(update={"kind": "ffd"}), phantom.grid, n)
        group = _compose_groups(bulk, elastic)
        dsc_label = MYOCARDIUM if spec.dsc_label is None else spec.dsc_label
    else:
        phantom = make_phantom(phantom_spec)
        n = phantom_spec.n_images
        kind = "rigid" if spec.protocol == "rigid" else spec.misalignment.kind
        group = make_misalignment(spec.misalignment.model_copy(update={"kind": kind}), phantom.grid, n)
        dsc_label = spec.dsc_label

    images, labels = [], []
    label_volume = Volume(grid=phantom.grid, data=phantom.labels.astype(float))
    for volume, means, t in zip(phantom.volumes, phantom.class_means, group.members):
        images.append(warp_volume(volume, t, fill=float(means[0])))
        labels.append(np.rint(warp_volume(label_volume, t, order=0).data).astype(int))
    return SyntheticCase(
        case_id=spec.case_id,
        phantom=phantom,
        images=images,
        labels=labels,
        misalignment=group,
        dsc_label=dsc_label,
        meta={"protocol": spec.protocol},
    )
