import itertools
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from src.xcoreg.core import nearest_lookup, warp_volume
from src.xcoreg.errors import EmptyForegroundError, EvaluationError
from src.xcoreg.models import Grid, Volume
from src.xcoreg.transforms import Transform, TransformGroup, compose_eval

logger = logging.getLogger(__name__)


@dataclass
class GroundTruth:
    """Known misalignments of a synthetic case.

    ``misalignments[j]`` maps points of image j into the phantom, so image j
    samples the phantom at ``misalignments[j](x)``. An estimate that maps
    common space into image j cancels it. ``foreground`` is a boolean mask on
    the phantom grid.
    """

    grid: Grid
    misalignments: List[Transform]
    foreground: np.ndarray
    labels: List[np.ndarray] = field(default_factory=list)

    @property
    def vertices(self) -> np.ndarray:
        return self.grid.corners()


def _members(estimated) -> List[Transform]:
    return list(estimated.members) if isinstance(estimated, TransformGroup) else list(estimated)


def _centered_residuals(gt: GroundTruth, estimated, points: np.ndarray):
    members = _members(estimated)
    if len(members) != len(gt.misalignments):
        raise EvaluationError(
            f"{len(members)} estimated transforms for {len(gt.misalignments)} ground-truth misalignments"
        )
    mapped = [compose_eval(truth, est, points) for truth, est in zip(gt.misalignments, members)]
    residuals = np.stack([m - points for m in mapped])
    return residuals - residuals.mean(axis=0, keepdims=True), mapped


def gwi(gt: GroundTruth, estimated) -> float:
    """Groupwise warping index in mm: mean over images of the foreground RMS of mean-centred residuals."""
    points = gt.grid.points()
    centered, mapped = _centered_residuals(gt, estimated, points)
    rms = []
    for j, (r, y) in enumerate(zip(centered, mapped)):
        inside = nearest_lookup(gt.grid, gt.foreground, y, fill=False).astype(bool)
        if not np.any(inside):
            raise EmptyForegroundError(f"no residual of image {j} lands in the foreground")
        rms.append(np.sqrt(np.mean(np.sum(r[inside] ** 2, axis=1))))
    return float(np.mean(rms))


def gre(gt: GroundTruth, estimated, vertices: Optional[np.ndarray] = None) -> float:
    """Groupwise registration error in mm over the grid's corner vertices."""
    vertices = gt.vertices if vertices is None else np.atleast_2d(vertices)
    centered, _ = _centered_residuals(gt, estimated, vertices)
    return float(np.mean(np.sqrt(np.mean(np.sum(centered**2, axis=2), axis=1))))


def dice(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    total = int(a.sum() + b.sum())
    if total == 0:
        return 1.0
    return 2.0 * float(np.logical_and(a, b).sum()) / total


def pairwise_dsc(masks: Sequence[np.ndarray], label: Optional[int] = None) -> float:
    """Mean Dice over all unordered mask pairs; with ``label`` the masks are label maps."""
    if label is not None:
        masks = [np.asarray(m) == label for m in masks]
    pairs = list(itertools.combinations(range(len(masks)), 2))
    if not pairs:
        raise EvaluationError("pairwise Dice needs at least two masks")
    return float(np.mean([dice(masks[i], masks[j]) for i, j in pairs]))


def warp_labels(labels: Sequence[np.ndarray], estimated, grid: Grid) -> List[np.ndarray]:
    """Pull each image-space label map into common space through its estimated transform."""
    warped = []
    for label_map, t in zip(labels, _members(estimated)):
        volume = Volume(grid=grid, data=np.asarray(label_map, dtype=float))
        warped.append(np.rint(warp_volume(volume, t, grid=grid, order=0).data).astype(int))
    return warped
