from .models import (
    AppearanceTable,
    Binning,
    CommonSpace,
    CoRegConfig,
    Grid,
    IterationTrace,
    MetricValue,
    PyramidLevel,
    SynthSpec,
    Volume,
)
from .transforms import FFD, Affine, ChainTransform, Rigid, TransformGroup, Translation
from .engine import CoRegResult, motion_correct, staged_rigid, xcoreg
from .evaluation import GroundTruth, gre, gwi, pairwise_dsc
from .persistence import Persistence, load_volume, save_volume

__all__ = [
    "AppearanceTable",
    "Binning",
    "CommonSpace",
    "CoRegConfig",
    "Grid",
    "IterationTrace",
    "MetricValue",
    "PyramidLevel",
    "SynthSpec",
    "Volume",
    "FFD",
    "Affine",
    "ChainTransform",
    "Rigid",
    "TransformGroup",
    "Translation",
    "CoRegResult",
    "motion_correct",
    "staged_rigid",
    "xcoreg",
    "GroundTruth",
    "gre",
    "gwi",
    "pairwise_dsc",
    "Persistence",
    "load_volume",
    "save_volume",
]
