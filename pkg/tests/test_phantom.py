import numpy as np
import pytest
from pydantic import ValidationError

from src.xcoreg.models import Grid, MisalignmentSpec, PhantomSpec, SynthSpec
from src.xcoreg.phantom import (
    BLOOD_POOL,
    MYOCARDIUM,
    class_mean_permutations,
    make_case,
    make_misalignment,
    make_phantom,
    make_sequence,
    uptake_curve,
)
from src.xcoreg.transforms import FFD, ChainTransform

GRID = Grid.from_shape((48, 48))


def _spec(**overrides):
    base = dict(dims=[48, 48], spacing=[1.0, 1.0], K=4, n_images=3, noise_sigma=0.0, blob_sigma=6.0, seed=2)
    base.update(overrides)
    return PhantomSpec(**base)


class TestPhantom:
    def test_noise_free_images_are_piecewise_constant(self):
        phantom = make_phantom(_spec())
        for volume, means in zip(phantom.volumes, phantom.class_means):
            np.testing.assert_allclose(volume.data, means[phantom.labels])

    def test_same_seed_same_phantom(self):
        first = make_phantom(_spec(noise_sigma=0.05))
        second = make_phantom(_spec(noise_sigma=0.05))
        for a, b in zip(first.volumes, second.volumes):
            np.testing.assert_array_equal(a.data, b.data)

    def test_second_modality_reverses_contrast(self):
        phantom = make_phantom(_spec())
        a, b = phantom.volumes[0].data.ravel(), phantom.volumes[1].data.ravel()
        assert np.corrcoef(a, b)[0, 1] < 0

    def test_every_class_is_present(self):
        phantom = make_phantom(_spec())
        assert set(np.unique(phantom.labels)) == {0, 1, 2, 3}
        assert phantom.foreground.any() and not phantom.foreground.all()

    def test_permutations_are_distinct(self, rng):
        perms = class_mean_permutations(4, 5, rng)
        assert len({tuple(p) for p in perms}) == 5
        np.testing.assert_array_equal(perms[0], np.arange(4))
        np.testing.assert_array_equal(perms[1], np.arange(4)[::-1])

    def test_three_dimensional(self):
        phantom = make_phantom(_spec(dims=[16, 16, 12], spacing=[1.0, 1.0, 2.0], n_images=2))
        assert phantom.volumes[0].grid.dims == (16, 16, 12)

    def test_spec_validation(self):
        with pytest.raises(ValidationError):
            PhantomSpec(K=1)
        with pytest.raises(ValidationError):
            PhantomSpec(dims=[8, 8], spacing=[1.0])
        with pytest.raises(ValidationError):
            PhantomSpec(shape="cardiac", K=3)


class TestSequence:
    def test_contrast_rises_and_falls(self):
        curve = uptake_curve(20, 0.3)
        peak = int(np.argmax(curve))
        assert 0 < peak < 19
        assert curve[0] == 0.0
        assert curve.max() == pytest.approx(1.0, abs=0.01)

    def test_frames_share_one_label_map(self):
        phantom = make_sequence(_spec(noise_sigma=0.0), 6)
        assert len(phantom.volumes) == 6
        assert (phantom.labels == MYOCARDIUM).any() and (phantom.labels == BLOOD_POOL).any()
        blood = [v.data[phantom.labels == BLOOD_POOL].mean() for v in phantom.volumes]
        assert max(blood) > blood[0]


class TestMisalignment:
    def test_zero_scale_is_identity(self):
        for kind in ("translation", "rigid", "ffd"):
            group = make_misalignment(MisalignmentSpec(kind=kind, scale=0.0, seed=1), GRID, 3)
            points = GRID.points()[::31]
            for mapped in group.apply(points):
                np.testing.assert_allclose(mapped, points, atol=1e-12)

    def test_rigid_draws_stay_within_bounds(self):
        for seed in range(100):
            spec = MisalignmentSpec(kind="rigid", max_angle_deg=15.0, max_translation=20.0, zero_mean=False, seed=seed)
            for t in make_misalignment(spec, GRID, 10).members:
                assert abs(t.angles[0]) <= np.deg2rad(15.0)
                assert np.all(np.abs(t.offset) <= 20.0)

    @pytest.mark.parametrize("zero_mean", [False, True])
    def test_ffd_displacements_respect_the_cap(self, zero_mean):
        for seed in range(100):
            spec = MisalignmentSpec(kind="ffd", ffd_spacing=16.0, ffd_cap=4.0, zero_mean=zero_mean, seed=seed)
            group = make_misalignment(spec, GRID, 3)
            for t in group.members:
                assert np.max(np.linalg.norm(t.displacements, axis=1)) <= 4.0 + 1e-9
                assert np.max(np.linalg.norm(t.displacement(GRID.points()[::7]), axis=1)) <= 4.0 + 1e-9

    def test_zero_mean_group(self):
        group = make_misalignment(MisalignmentSpec(kind="ffd", ffd_spacing=16.0, seed=3), GRID, 4)
        assert group.zero_mean
        mean = np.mean([t.displacements for t in group.members], axis=0)
        np.testing.assert_allclose(mean, 0.0, atol=1e-12)


class TestCase:
    def test_nonrigid_case(self):
        case = make_case(SynthSpec(case_id="c1", phantom=_spec(), misalignment=MisalignmentSpec(ffd_spacing=16.0)))
        assert len(case.images) == 3 and len(case.labels) == 3
        assert all(isinstance(t, FFD) for t in case.misalignment.members)
        assert case.images[0].grid == case.phantom.grid
        assert case.labels[0].dtype.kind == "i"
        assert case.meta["protocol"] == "nonrigid"

    def test_rigid_protocol(self):
        case = make_case(SynthSpec(protocol="rigid", phantom=_spec(n_images=2)))
        assert case.misalignment.kinds == ["rigid", "rigid"]

    def test_motion_protocol(self):
        spec = SynthSpec(
            protocol="moco",
            phantom=_spec(),
            misalignment=MisalignmentSpec(ffd_spacing=16.0, max_translation=3.0, max_angle_deg=3.0),
            n_frames=5,
        )
        case = make_case(spec)
        assert len(case.images) == 5
        assert all(isinstance(t, ChainTransform) for t in case.misalignment.members)
        assert case.dsc_label == MYOCARDIUM

    def test_zero_misalignment_keeps_phantom(self):
        spec = SynthSpec(phantom=_spec(), misalignment=MisalignmentSpec(scale=0.0, ffd_spacing=16.0))
        case = make_case(spec)
        for image, volume in zip(case.images, case.phantom.volumes):
            np.testing.assert_allclose(image.data, volume.data, atol=1e-12)
        for labels in case.labels:
            np.testing.assert_array_equal(labels, case.phantom.labels)
