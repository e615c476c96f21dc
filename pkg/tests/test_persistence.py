import json

import numpy as np
import pandas as pd
import pytest
from PIL import Image

from src.xcoreg.errors import (
    DimensionMismatchError,
    InvalidSpacingError,
    MalformedHeaderError,
    NonFiniteDataError,
)
from src.xcoreg.models import AppearanceTable, Grid, JointTable, RunManifest, Volume
from src.xcoreg.persistence import (
    Persistence,
    load_channels,
    load_manifest,
    load_png,
    load_table_csv,
    load_transform,
    load_volume,
    save_channels,
    save_table_csv,
    save_transform,
    save_volume,
)
from src.xcoreg.transforms import FFD, Affine, ChainTransform, Rigid, Translation


def _write_raw(path, header, values, dtype="<f8"):
    with open(path, "wb") as f:
        f.write(json.dumps(header).encode("utf-8") + b"\n")
        f.write(np.asarray(values, dtype=dtype).tobytes())


def _header(**overrides):
    header = {"dims": [4, 4], "spacing": [1.0, 1.0], "origin": [0.0, 0.0], "dtype": "f64", "modality": "t1"}
    header.update(overrides)
    return header


class TestVolumeFiles:
    def test_round_trip(self, tmp_path, rng):
        grid = Grid.from_shape((16, 12), spacing=(0.5, 2.0), origin=(1.0, -3.0))
        volume = Volume(grid=grid, data=rng.random((16, 12)), modality="flair")
        path = save_volume(volume, tmp_path / "v.pvol")
        loaded = load_volume(path)
        assert loaded.grid == grid
        assert loaded.modality == "flair"
        np.testing.assert_array_equal(loaded.data, volume.data)

    def test_single_precision(self, tmp_path, rng):
        volume = Volume(grid=Grid.from_shape((5, 5, 3)), data=rng.random((5, 5, 3)))
        loaded = load_volume(save_volume(volume, tmp_path / "v.pvol", dtype="f32"))
        np.testing.assert_allclose(loaded.data, volume.data, rtol=1e-6)

    def test_short_payload(self, tmp_path):
        path = tmp_path / "short.pvol"
        _write_raw(path, _header(), np.zeros(15))
        with pytest.raises(DimensionMismatchError):
            load_volume(path)

    def test_negative_spacing(self, tmp_path):
        path = tmp_path / "spacing.pvol"
        _write_raw(path, _header(spacing=[1.0, -1.0]), np.zeros(16))
        with pytest.raises(InvalidSpacingError):
            load_volume(path)

    def test_header_not_json(self, tmp_path):
        path = tmp_path / "bad.pvol"
        path.write_bytes(b"dims=4,4\n" + np.zeros(16).tobytes())
        with pytest.raises(MalformedHeaderError):
            load_volume(path)

    def test_missing_header_key(self, tmp_path):
        path = tmp_path / "nokey.pvol"
        header = _header()
        del header["origin"]
        _write_raw(path, header, np.zeros(16))
        with pytest.raises(MalformedHeaderError):
            load_volume(path)

    def test_nan_payload(self, tmp_path):
        path = tmp_path / "nan.pvol"
        values = np.zeros(16)
        values[3] = np.nan
        _write_raw(path, _header(), values)
        with pytest.raises(NonFiniteDataError):
            load_volume(path)

    def test_channels_round_trip(self, tmp_path, rng):
        grid = Grid.from_shape((6, 5))
        field = rng.dirichlet(np.ones(3), size=grid.size)
        path = save_channels(grid, field, tmp_path / "gamma.pvol", modality="gamma")
        loaded_grid, loaded = load_channels(path)
        assert loaded_grid == grid
        np.testing.assert_array_equal(loaded, field)
        with pytest.raises(DimensionMismatchError):
            load_volume(path)

    def test_png_is_scaled_to_unit_range(self, tmp_path):
        pixels = np.array([[0, 255], [51, 102]], dtype=np.uint8)
        Image.fromarray(pixels).save(tmp_path / "slice.png")
        volume = load_png(tmp_path / "slice.png", spacing=(0.5, 0.5))
        np.testing.assert_allclose(volume.data, pixels / 255.0)
        assert volume.grid.spacing == (0.5, 0.5)
        assert volume.modality == "slice"


class TestTransformFiles:
    @pytest.mark.parametrize(
        "transform",
        [
            Translation([1.5, -2.0]),
            Rigid([3.0, 4.0], [0.2], [1.0, -1.0]).with_bias(np.eye(2) * 0.01, [0.5, 0.0]),
            Rigid([1.0, 2.0, 3.0], [0.1, -0.2, 0.3], [0.5, 0.0, -0.5]),
            Affine([[1.1, 0.1], [0.0, 0.9]], [2.0, 1.0]),
            FFD([-8.0, -8.0], [8.0, 8.0], (8, 8), np.linspace(-1, 1, 128)),
            ChainTransform([Rigid([5.0, 5.0], [0.1], [1.0, 0.0])], FFD([-8.0, -8.0], [8.0, 8.0], (8, 8))),
        ],
        ids=["translation", "rigid2d-biased", "rigid3d", "affine", "ffd", "chain"],
    )
    def test_json_round_trip_maps_points_identically(self, tmp_path, rng, transform):
        path = save_transform(transform, tmp_path / "t.json")
        loaded = load_transform(path)
        points = rng.uniform(0, 30, size=(20, transform.ndim))
        np.testing.assert_allclose(loaded.apply(points), transform.apply(points), rtol=0, atol=1e-12)


class TestTableFiles:
    def test_appearance_table_round_trip(self, tmp_path, rng):
        f = rng.uniform(0.1, 1.0, size=(3, 16))
        table = AppearanceTable(f=f / f.sum(axis=1, keepdims=True))
        path = save_table_csv(table, tmp_path / "tables" / "appearance_00.csv")
        loaded = load_table_csv(path)
        np.testing.assert_array_equal(loaded.f, table.f)
        assert (loaded.K, loaded.L) == (3, 16)

    def test_joint_table_round_trip(self, tmp_path, rng):
        p = rng.uniform(size=(4, 8))
        table = JointTable(p=p / p.sum())
        loaded = load_table_csv(save_table_csv(table, tmp_path / "joint.csv"), kind="joint")
        np.testing.assert_array_equal(loaded.p, table.p)

    def test_one_row_per_class(self, tmp_path):
        path = save_table_csv(AppearanceTable(f=np.full((2, 4), 0.25)), tmp_path / "a.csv")
        frame = pd.read_csv(path)
        assert list(frame.columns) == ["class", "bin_000", "bin_001", "bin_002", "bin_003"]
        assert frame["class"].tolist() == [0, 1]

    def test_unknown_kind(self, tmp_path):
        path = save_table_csv(AppearanceTable(f=np.full((2, 4), 0.25)), tmp_path / "a.csv")
        with pytest.raises(ValueError):
            load_table_csv(path, kind="posterior")


class TestPersistence:
    def test_run_round_trip(self, tmp_path):
        store = Persistence(tmp_path / "run")
        transforms = [Translation([1.0, 0.0]), Translation([-1.0, 0.0])]
        store.save_run(transforms, {"method": "vi"})
        loaded, meta = store.load_run()
        assert meta["method"] == "vi"
        np.testing.assert_allclose(loaded[1].params, [-1.0, 0.0])

    def test_load_run_without_transforms(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            Persistence(tmp_path / "empty").load_run()

    def test_manifest_with_missing_files(self, tmp_path):
        store = Persistence(tmp_path)
        path = store.save_manifest(RunManifest(case_id="c", volumes=["images/none.pvol"]))
        with pytest.raises(FileNotFoundError):
            load_manifest(path)
