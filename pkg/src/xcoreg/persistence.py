import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from PIL import Image

from src.xcoreg.errors import DimensionMismatchError, MalformedHeaderError, NonFiniteDataError
from src.xcoreg.models import AppearanceTable, Grid, JointTable, RunManifest, Volume
from src.xcoreg.transforms import Transform, transform_from_dict

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

DTYPES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}
HEADER_KEYS = ("dims", "spacing", "origin", "dtype", "modality")


def _write_pvol(path: PathLike, grid: Grid, data: np.ndarray, modality: str, dtype: str, channels: int) -> str:
    if dtype not in DTYPES:
        raise MalformedHeaderError(f"unsupported dtype {dtype!r}; use one of {sorted(DTYPES)}")
    header: Dict[str, Any] = {
        "dims": list(grid.dims),
        "spacing": list(grid.spacing),
        "origin": list(grid.origin),
        "dtype": dtype,
        "modality": modality,
    }
    if channels != 1:
        header["channels"] = channels
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        f.write(np.ascontiguousarray(data, dtype=DTYPES[dtype]).tobytes())
    return str(path)


def _read_pvol(path: PathLike) -> Tuple[Grid, np.ndarray, str, int]:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise MalformedHeaderError(f"{path}: no header terminator")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise MalformedHeaderError(f"{path}: header is not valid JSON ({e})") from e
    if not isinstance(header, dict) or any(key not in header for key in HEADER_KEYS):
        raise MalformedHeaderError(f"{path}: header must contain {list(HEADER_KEYS)}")
    if header["dtype"] not in DTYPES:
        raise MalformedHeaderError(f"{path}: unsupported dtype {header['dtype']!r}")
    try:
        dims = tuple(int(d) for d in header["dims"])
        spacing = tuple(float(s) for s in header["spacing"])
        origin = tuple(float(o) for o in header["origin"])
        channels = int(header.get("channels", 1))
    except (TypeError, ValueError) as e:
        raise MalformedHeaderError(f"{path}: malformed geometry ({e})") from e
    grid = Grid(dims=dims, spacing=spacing, origin=origin)

    dtype = DTYPES[header["dtype"]]
    payload = raw[newline + 1 :]
    expected = grid.size * channels
    if len(payload) != expected * dtype.itemsize:
        raise DimensionMismatchError(
            f"{path}: header declares {expected} values but payload holds {len(payload) / dtype.itemsize:g}"
        )
    data = np.frombuffer(payload, dtype=dtype).astype(np.float64)
    if not np.all(np.isfinite(data)):
        raise NonFiniteDataError(f"{path}: payload contains NaN or Inf")
    return grid, data, str(header["modality"]), channels


def save_volume(volume: Volume, path: PathLike, dtype: str = "f64") -> str:
    return _write_pvol(path, volume.grid, volume.data, volume.modality, dtype, 1)


def load_volume(path: PathLike) -> Volume:
    grid, data, modality, channels = _read_pvol(path)
    if channels != 1:
        raise DimensionMismatchError(f"{path}: expected a scalar volume, found {channels} channels")
    return Volume(grid=grid, data=data.reshape(grid.shape), modality=modality)


def save_channels(grid: Grid, field: np.ndarray, path: PathLike, modality: str = "", dtype: str = "f64") -> str:
    """Write a per-point field (points, C) as one multi-channel volume, channel axis fastest."""
    field = np.asarray(field, dtype=float).reshape(grid.size, -1)
    return _write_pvol(path, grid, field, modality, dtype, field.shape[1])


def load_channels(path: PathLike) -> Tuple[Grid, np.ndarray]:
    grid, data, _, channels = _read_pvol(path)
    return grid, data.reshape(grid.size, channels)


def load_png(path: PathLike, spacing: Optional[Sequence[float]] = None, modality: str = "") -> Volume:
    """Grayscale PNG (8 or 16 bit) as a 2D volume with intensities in [0, 1]."""
    with Image.open(path) as img:
        if img.mode in ("I;16", "I;16B", "I;16L", "I"):
            data = np.asarray(img, dtype=np.float64) / 65535.0
        else:
            data = np.asarray(img.convert("L"), dtype=np.float64) / 255.0
    grid = Grid.from_shape(data.shape, spacing=spacing)
    return Volume(grid=grid, data=data, modality=modality or Path(path).stem)


def save_table_csv(table: Union[AppearanceTable, JointTable], path: PathLike) -> str:
    """Class-by-bin table as CSV: one row per class, one column per intensity bin."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    values = table.f if isinstance(table, AppearanceTable) else table.p
    frame = pd.DataFrame(
        values,
        index=pd.Index(range(values.shape[0]), name="class"),
        columns=[f"bin_{b:03d}" for b in range(values.shape[1])],
    )
    frame.to_csv(path)
    return str(path)


def load_table_csv(path: PathLike, kind: str = "appearance") -> Union[AppearanceTable, JointTable]:
    frame = pd.read_csv(path, index_col="class", float_precision="round_trip")
    values = frame.to_numpy(dtype=float)
    if kind == "joint":
        return JointTable(p=values)
    if kind != "appearance":
        raise ValueError(f"unknown table kind: {kind}")
    return AppearanceTable(f=values)


def save_transform(transform: Transform, path: PathLike) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(transform.to_dict(), f, indent=2)
    return str(path)


def load_transform(path: PathLike) -> Transform:
    with open(path, "r", encoding="utf-8") as f:
        return transform_from_dict(json.load(f))


class Persistence:
    """Directory layout of synthetic cases and registration runs.

    Paths inside a manifest are stored relative to the manifest's directory.
    """

    def __init__(self, base_path: PathLike):
        self.base_path = Path(base_path)
        self.base_path.mkdir(parents=True, exist_ok=True)

    def _relative(self, path: PathLike) -> str:
        return Path(path).relative_to(self.base_path).as_posix()

    def save_case(self, case, seed: int) -> str:
        volumes = [
            save_volume(image, self.base_path / "images" / f"image_{j:02d}.pvol") for j, image in enumerate(case.images)
        ]
        grid = case.phantom.grid
        labels = [
            save_volume(Volume(grid=grid, data=labels), self.base_path / "labels" / f"label_{j:02d}.pvol")
            for j, labels in enumerate(case.labels)
        ]
        transforms = [
            save_transform(t, self.base_path / "ground_truth" / f"transform_{j:02d}.json")
            for j, t in enumerate(case.misalignment.members)
        ]
        foreground = save_volume(
            Volume(grid=grid, data=case.phantom.foreground.astype(float), modality="foreground"),
            self.base_path / "foreground.pvol",
        )
        manifest = RunManifest(
            case_id=case.case_id,
            protocol=case.meta.get("protocol", "nonrigid"),
            volumes=[self._relative(p) for p in volumes],
            labels=[self._relative(p) for p in labels],
            gt_transforms=[self._relative(p) for p in transforms],
            foreground=self._relative(foreground),
            dsc_label=case.dsc_label,
            seed=seed,
        )
        return self.save_manifest(manifest)

    def save_manifest(self, manifest: RunManifest, name: str = "manifest.json") -> str:
        path = self.base_path / name
        with open(path, "w", encoding="utf-8") as f:
            f.write(manifest.model_dump_json(indent=2))
        return str(path)

    def save_run(self, transforms: Sequence[Transform], meta: Dict[str, Any]) -> List[str]:
        paths = [
            save_transform(t, self.base_path / "transforms" / f"transform_{j:02d}.json")
            for j, t in enumerate(transforms)
        ]
        with open(self.base_path / "run.json", "w", encoding="utf-8") as f:
            json.dump(meta, f, indent=2, default=str)
        return paths

    def load_run(self) -> Tuple[List[Transform], Dict[str, Any]]:
        paths = sorted((self.base_path / "transforms").glob("transform_*.json"))
        if not paths:
            raise FileNotFoundError(f"no estimated transforms under {self.base_path / 'transforms'}")
        meta_file = self.base_path / "run.json"
        meta: Dict[str, Any] = {}
        if meta_file.exists():
            with open(meta_file, "r", encoding="utf-8") as f:
                meta = json.load(f)
        return [load_transform(p) for p in paths], meta


def load_manifest(path: PathLike) -> Tuple[RunManifest, Path]:
    """Parse a manifest and resolve its relative paths; every referenced file must exist."""
    path = Path(path)
    manifest = RunManifest.model_validate_json(path.read_text(encoding="utf-8"))
    root = path.parent
    referenced = manifest.volumes + manifest.labels + manifest.gt_transforms
    if manifest.foreground:
        referenced.append(manifest.foreground)
    missing = [p for p in referenced if not (root / p).exists()]
    if missing:
        raise FileNotFoundError(f"manifest {path} references missing files: {missing}")
    return manifest, root
