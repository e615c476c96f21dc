import itertools
from typing import Any, Dict, List, Optional, Tuple

try:
    from typing import Literal
except ImportError:
    from typing_extensions import Literal

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from src.xcoreg.errors import (
    DegenerateBinningError,
    DimensionMismatchError,
    InvalidSpacingError,
    NonFiniteDataError,
)

MetricKey = Literal["xmetric", "xmetric-gt", "cg", "ape", "cte", "vi", "gmm"]
TransformKind = Literal["translation", "rigid", "affine", "ffd"]
PipelineKey = Literal["xcoreg", "staged_rigid", "motion_correct"]

SIMPLEX_TOL = 1e-9


class Grid(BaseModel):
    model_config = ConfigDict(frozen=True)

    dims: Tuple[int, ...]
    spacing: Tuple[float, ...]
    origin: Tuple[float, ...]

    @model_validator(mode="after")
    def _check(self):
        if len(self.dims) not in (2, 3):
            raise DimensionMismatchError(f"grid must be 2D or 3D, got {len(self.dims)} axes")
        if len(self.spacing) != len(self.dims) or len(self.origin) != len(self.dims):
            raise DimensionMismatchError("dims, spacing and origin must have equal length")
        if any(d < 2 for d in self.dims):
            raise DimensionMismatchError(f"all dims must be >= 2, got {list(self.dims)}")
        if any(not np.isfinite(s) or s <= 0 for s in self.spacing):
            raise InvalidSpacingError(f"spacing must be strictly positive, got {list(self.spacing)}")
        return self

    @classmethod
    def from_shape(cls, shape, spacing=None, origin=None) -> "Grid":
        ndim = len(shape)
        return cls(
            dims=tuple(int(s) for s in shape),
            spacing=tuple(spacing) if spacing is not None else (1.0,) * ndim,
            origin=tuple(origin) if origin is not None else (0.0,) * ndim,
        )

    @property
    def ndim(self) -> int:
        return len(self.dims)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.dims)

    @property
    def extent(self) -> np.ndarray:
        return (np.asarray(self.dims) - 1) * np.asarray(self.spacing)

    @property
    def center(self) -> np.ndarray:
        return np.asarray(self.origin) + 0.5 * self.extent

    def index_to_physical(self, index) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(index, dtype=float) * np.asarray(self.spacing)

    def physical_to_index(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def points(self) -> np.ndarray:
        """Physical coordinates of every grid point, row-major with the last axis fastest."""
        index = np.indices(self.dims).reshape(self.ndim, -1).T
        return self.index_to_physical(index)

    def corners(self) -> np.ndarray:
        last = np.asarray(self.dims) - 1
        corners = [np.asarray(c) * last for c in itertools.product((0, 1), repeat=self.ndim)]
        return self.index_to_physical(np.asarray(corners))

    def downsample(self, factor: int) -> "Grid":
        if factor <= 1:
            return self
        return Grid(
            dims=tuple(-(-d // factor) for d in self.dims),
            spacing=tuple(s * factor for s in self.spacing),
            origin=self.origin,
        )


class Volume(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    grid: Grid
    data: np.ndarray
    modality: str = ""

    @field_validator("data", mode="before")
    @classmethod
    def _as_float(cls, value):
        array = np.array(value, dtype=np.float64, copy=True)
        array.setflags(write=False)
        return array

    @model_validator(mode="after")
    def _check(self):
        if self.data.shape != self.grid.shape:
            raise DimensionMismatchError(
                f"data shape {self.data.shape} does not match grid dims {self.grid.shape}"
            )
        if not np.all(np.isfinite(self.data)):
            raise NonFiniteDataError("volume contains NaN or Inf values")
        return self

    def with_data(self, data, grid: Optional[Grid] = None) -> "Volume":
        return Volume(grid=grid or self.grid, data=data, modality=self.modality)


class SampleSet(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    points: np.ndarray
    indices: np.ndarray
    inside_mask: Optional[np.ndarray] = None

    @property
    def overlap(self) -> np.ndarray:
        if self.inside_mask is None:
            return np.ones(len(self.points), dtype=bool)
        return np.all(self.inside_mask, axis=1)

    def with_inside(self, inside: np.ndarray) -> "SampleSet":
        """Attach per-image inside flags given on the whole grid, shape (N, grid size)."""
        return self.model_copy(update={"inside_mask": np.asarray(inside, dtype=bool)[:, self.indices].T})

    def __len__(self) -> int:
        return len(self.points)


class Binning(BaseModel):
    model_config = ConfigDict(frozen=True)

    L: int = 64
    lo: float
    hi: float
    h: float = 1.0

    @model_validator(mode="after")
    def _check(self):
        if self.L < 2:
            raise DegenerateBinningError(f"need at least 2 intensity levels, got {self.L}")
        if not self.hi > self.lo:
            raise DegenerateBinningError(f"intensity range is empty: [{self.lo}, {self.hi}]")
        if not self.h > 0:
            raise DegenerateBinningError(f"bandwidth must be positive, got {self.h}")
        return self

    @classmethod
    def from_values(cls, values, L: int = 64, h: float = 1.0) -> "Binning":
        values = np.asarray(values, dtype=float)
        return cls(L=L, lo=float(values.min()), hi=float(values.max()), h=h)

    @property
    def scale(self) -> float:
        return (self.L - 1) / (self.hi - self.lo)

    def coordinates(self, intensities) -> Tuple[np.ndarray, np.ndarray]:
        """Continuous bin coordinate of each intensity and its derivative (zero where clamped)."""
        u = np.asarray(intensities, dtype=float)
        raw = (u - self.lo) * self.scale
        coords = np.clip(raw, 0.0, self.L - 1)
        slope = np.where((raw >= 0.0) & (raw <= self.L - 1), self.scale, 0.0)
        return coords, slope


class CommonSpace(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    gamma: np.ndarray
    pi: np.ndarray

    @field_validator("gamma", "pi", mode="before")
    @classmethod
    def _as_float(cls, value):
        return np.array(value, dtype=np.float64, copy=True)

    @model_validator(mode="after")
    def _check(self):
        if self.gamma.ndim != 2 or self.gamma.shape[1] != self.pi.shape[0]:
            raise ValueError("gamma must be (points, K) with K matching pi")
        if abs(self.pi.sum() - 1.0) > SIMPLEX_TOL or np.any(self.pi < 0):
            raise ValueError("pi is not a probability vector")
        return self

    @property
    def K(self) -> int:
        return int(self.pi.shape[0])

    def is_valid(self, tol: float = SIMPLEX_TOL) -> bool:
        rows_ok = np.all(np.abs(self.gamma.sum(axis=1) - 1.0) <= tol)
        range_ok = np.all(self.gamma >= -tol) and np.all(self.gamma <= 1.0 + tol)
        return bool(rows_ok and range_ok and abs(self.pi.sum() - 1.0) <= tol)


class AppearanceTable(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    f: np.ndarray
    empty_classes: Tuple[int, ...] = ()

    @property
    def K(self) -> int:
        return int(self.f.shape[0])

    @property
    def L(self) -> int:
        return int(self.f.shape[1])


class JointTable(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    p: np.ndarray

    @property
    def class_marginal(self) -> np.ndarray:
        return self.p.sum(axis=1)

    @property
    def intensity_marginal(self) -> np.ndarray:
        return self.p.sum(axis=0)


class MetricValue(BaseModel):
    model_config = ConfigDict(arbitrary_types_allowed=True)

    value: float
    gradient: List[np.ndarray]
    diagnostics: Dict[str, Any] = Field(default_factory=dict)

    def flat_gradient(self) -> np.ndarray:
        if not self.gradient:
            return np.zeros(0)
        return np.concatenate([np.ravel(g) for g in self.gradient])


class PyramidLevel(BaseModel):
    sigma: float = 0.0
    factor: int = 1
    iterations: int = 100

    @field_validator("factor", "iterations")
    @classmethod
    def _positive(cls, value):
        if value < 1:
            raise ValueError("factor and iterations must be >= 1")
        return value


def _default_eta() -> Dict[str, float]:
    return {
        "translation": 1.0,
        "center": 1.0,
        "rotation": 0.01,
        "affine_matrix": 0.01,
        "affine_offset": 1.0,
        "ffd": 0.1,
    }


def _levels_total(pyramid: List[PyramidLevel], parts: int = 1) -> int:
    return sum(max(1, level.iterations // parts) for level in pyramid)


class CoRegConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    T: int = 200
    lam: float = Field(default=1e-3, alias="lambda")
    eta: Dict[str, float] = Field(default_factory=_default_eta)
    K: int = 4
    L: int = 64
    bandwidth: float = 1.0
    sample_rate: float = 0.1
    pyramid: List[PyramidLevel] = Field(default_factory=lambda: [PyramidLevel(iterations=200)])
    metric: MetricKey = "xmetric"
    transform: TransformKind = "ffd"
    pipeline: PipelineKey = "xcoreg"
    ffd_spacings: List[float] = Field(default_factory=lambda: [32.0, 16.0])
    zero_mean: bool = True
    rng_seed: int = 0
    convergence_window: int = 10
    convergence_rtol: float = 1e-5
    independent_joint_sample: bool = False
    warm_start: bool = False
    deterministic: bool = False
    workers: int = 1
    congealing_sigma: float = 0.05
    translation_pyramid: List[PyramidLevel] = Field(
        default_factory=lambda: [
            PyramidLevel(sigma=4.0, factor=8, iterations=10),
            PyramidLevel(sigma=2.0, factor=4, iterations=10),
            PyramidLevel(sigma=1.0, factor=2, iterations=10),
            PyramidLevel(sigma=0.0, factor=1, iterations=10),
        ]
    )
    rigid_pyramid: List[PyramidLevel] = Field(
        default_factory=lambda: [
            PyramidLevel(sigma=1.0, factor=2, iterations=30),
            PyramidLevel(sigma=0.0, factor=1, iterations=30),
        ]
    )
    motion_pyramid: List[PyramidLevel] = Field(default_factory=lambda: [PyramidLevel(iterations=100)])
    motion_prefilter_sigma: float = 1.0
    motion_ffd_spacing: float = 40.0
    motion_lambda: float = 0.01

    @model_validator(mode="after")
    def _check(self):
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0.0 < self.sample_rate <= 1.0:
            raise ValueError("sample_rate must lie in (0, 1]")
        if self.K < 2 or self.L < 2:
            raise ValueError("K and L must both be >= 2")
        if not self.ffd_spacings:
            raise ValueError("ffd_spacings must name at least one level")
        total = self.scheduled_iterations()
        if total > self.T:
            raise ValueError(f"the {self.pipeline} schedule runs {total} iterations, more than T ({self.T})")
        return self

    def scheduled_iterations(self) -> int:
        """Iterations the configured pipeline schedules across all of its stages."""
        if self.pipeline == "staged_rigid":
            return _levels_total(self.translation_pyramid) + _levels_total(self.rigid_pyramid)
        if self.pipeline == "motion_correct":
            rigid = _levels_total(self.translation_pyramid) + _levels_total(self.rigid_pyramid)
            return rigid + _levels_total(self.motion_pyramid)
        if self.transform == "ffd":
            parts = len(self.ffd_spacings)
            return parts * _levels_total(self.pyramid, parts)
        return _levels_total(self.pyramid)

    def step_size(self, group: str) -> float:
        return self.eta.get(group, _default_eta().get(group, 0.1))


class TraceEntry(BaseModel):
    iteration: int
    stage: str
    level: int
    metric: float
    metric_pre: Optional[float] = None
    log_likelihood: Optional[float] = None
    loss: float
    grad_norm: float
    pi: List[float] = Field(default_factory=list)
    seconds: float


class IterationTrace(BaseModel):
    entries: List[TraceEntry] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    @property
    def losses(self) -> List[float]:
        return [entry.loss for entry in self.entries]

    def append(self, entry: TraceEntry) -> None:
        self.entries.append(entry)


class PhantomSpec(BaseModel):
    dims: List[int] = Field(default_factory=lambda: [128, 128])
    spacing: List[float] = Field(default_factory=lambda: [1.0, 1.0])
    K: int = 4
    n_images: int = 3
    noise_sigma: float = 0.03
    blob_sigma: float = 8.0
    shape: Literal["blobs", "cardiac"] = "blobs"
    bias_strength: float = 0.0
    seed: int = 0

    @field_validator("K")
    @classmethod
    def _classes(cls, value):
        if value < 2:
            raise ValueError("a phantom needs at least 2 classes")
        return value

    @model_validator(mode="after")
    def _check(self):
        if len(self.dims) != len(self.spacing):
            raise ValueError("dims and spacing must have equal length")
        if self.shape == "cardiac" and self.K < 4:
            raise ValueError("the cardiac phantom needs K >= 4 (background, myocardium, blood pool, tissue)")
        return self


class MisalignmentSpec(BaseModel):
    kind: Literal["translation", "rigid", "ffd"] = "ffd"
    scale: float = 1.0
    max_angle_deg: float = 15.0
    max_translation: float = 20.0
    ffd_spacing: float = 32.0
    ffd_cap: float = 4.0
    zero_mean: bool = True
    seed: int = 0


class SynthSpec(BaseModel):
    case_id: str = "case000"
    protocol: Literal["nonrigid", "rigid", "moco"] = "nonrigid"
    phantom: PhantomSpec = Field(default_factory=PhantomSpec)
    misalignment: MisalignmentSpec = Field(default_factory=MisalignmentSpec)
    n_frames: int = 20
    dsc_label: Optional[int] = None


class RunManifest(BaseModel):
    case_id: str
    protocol: str = "nonrigid"
    volumes: List[str]
    labels: List[str] = Field(default_factory=list)
    gt_transforms: List[str] = Field(default_factory=list)
    foreground: Optional[str] = None
    config_path: Optional[str] = None
    output_dir: Optional[str] = None
    method: Optional[MetricKey] = None
    dsc_label: Optional[int] = None
    seed: int = 0


class ReportRow(BaseModel):
    case_id: str
    metric_name: str
    method: str
    transform_kind: str
    value: float
