import numpy as np
import pytest

from src.xcoreg.core import nearest_lookup
from src.xcoreg.errors import EmptyForegroundError, EvaluationError
from src.xcoreg.evaluation import GroundTruth, dice, gre, gwi, pairwise_dsc, warp_labels
from src.xcoreg.models import Grid, MisalignmentSpec, PhantomSpec, SynthSpec
from src.xcoreg.phantom import make_case, make_misalignment
from src.xcoreg.transforms import NumericInverse, Rigid, Translation

GRID = Grid.from_shape((20, 20))


def _truth(misalignments, foreground=None):
    foreground = np.ones(GRID.shape, dtype=bool) if foreground is None else foreground
    return GroundTruth(grid=GRID, misalignments=misalignments, foreground=foreground)


class TestWarpingIndex:
    def test_exact_inverses(self):
        truth = [Translation([2.0, -1.0]), Translation([-2.0, 1.0])]
        assert gwi(_truth(truth), [t.inverse() for t in truth]) == pytest.approx(0.0, abs=1e-12)

    def test_common_translation_is_free(self):
        identity = [Translation.identity(2), Translation.identity(2)]
        estimated = [Translation([3.0, 3.0]), Translation([3.0, 3.0])]
        assert gwi(_truth(identity), estimated) == pytest.approx(0.0, abs=1e-12)

    def test_opposite_unit_residuals(self):
        identity = [Translation.identity(2), Translation.identity(2)]
        estimated = [Translation([1.0, 0.0]), Translation([-1.0, 0.0])]
        assert gwi(_truth(identity), estimated) == pytest.approx(1.0)

    def test_invariant_to_a_common_shift_of_the_estimates(self):
        truth = [Translation([1.0, 0.5]), Translation([-0.5, 2.0]), Translation([0.0, -1.0])]
        estimated = [Translation([0.2, 0.1]), Translation([0.0, -0.3]), Translation([0.4, 0.0])]
        shifted = [Translation(t.offset + [1.5, -2.0]) for t in estimated]
        assert gwi(_truth(truth), shifted) == pytest.approx(gwi(_truth(truth), estimated), abs=1e-12)

    def test_residuals_outside_the_foreground_are_ignored(self):
        foreground = np.zeros(GRID.shape, dtype=bool)
        foreground[:10] = True
        identity = [Translation.identity(2), Translation.identity(2)]
        estimated = [Translation([0.5, 0.0]), Translation([-0.5, 0.0])]
        assert gwi(_truth(identity, foreground), estimated) == pytest.approx(0.5)

    def test_empty_foreground(self):
        identity = [Translation.identity(2), Translation.identity(2)]
        with pytest.raises(EmptyForegroundError):
            gwi(_truth(identity, np.zeros(GRID.shape, dtype=bool)), identity)

    def test_count_mismatch(self):
        with pytest.raises(EvaluationError):
            gwi(_truth([Translation.identity(2)] * 2), [Translation.identity(2)] * 3)

    def test_numeric_inverse_of_a_synthetic_misalignment(self):
        spec = MisalignmentSpec(kind="ffd", ffd_spacing=8.0, ffd_cap=2.0, seed=4)
        group = make_misalignment(spec, GRID, 3)
        truth = _truth(group.members)
        assert gwi(truth, [NumericInverse(t) for t in group.members]) < 0.05

    def test_misalignment_maps_image_points_into_the_phantom(self):
        case = make_case(
            SynthSpec(
                phantom=PhantomSpec(dims=[24, 24], K=3, n_images=2, seed=2),
                misalignment=MisalignmentSpec(kind="translation", max_translation=3.0, seed=2),
            )
        )
        grid = case.phantom.grid
        shift = case.misalignment[1]
        expected = nearest_lookup(grid, case.phantom.labels, shift.apply(grid.points()), fill=0)
        np.testing.assert_array_equal(case.labels[1], expected.reshape(grid.shape))
        members = list(case.misalignment.members)
        truth = GroundTruth(grid=grid, misalignments=members, foreground=case.phantom.foreground)
        assert gwi(truth, [t.inverse() for t in case.misalignment.members]) == pytest.approx(0.0, abs=1e-9)
        assert gwi(truth, members) > 1e-3


class TestRegistrationError:
    def test_opposite_shifts_of_two(self):
        identity = [Translation.identity(2), Translation.identity(2)]
        estimated = [Translation([2.0, 0.0]), Translation([-2.0, 0.0])]
        assert gre(_truth(identity), estimated) == pytest.approx(2.0)

    def test_common_rigid_offset_is_free(self):
        identity = [Translation.identity(2)] * 3
        common = Rigid(GRID.center, [0.2], [1.0, -2.0])
        assert gre(_truth(identity), [common] * 3) == pytest.approx(0.0, abs=1e-10)

    def test_custom_vertices(self):
        identity = [Translation.identity(2), Translation.identity(2)]
        estimated = [Translation([0.0, 1.0]), Translation([0.0, -1.0])]
        assert gre(_truth(identity), estimated, vertices=[[5.0, 5.0]]) == pytest.approx(1.0)


class TestDice:
    def test_identical_masks(self):
        mask = np.zeros((5, 5), dtype=bool)
        mask[1:4, 1:4] = True
        assert dice(mask, mask) == 1.0

    def test_disjoint_masks(self):
        a = np.zeros((4, 4), dtype=bool)
        b = np.zeros((4, 4), dtype=bool)
        a[:2] = True
        b[2:] = True
        assert dice(a, b) == 0.0

    def test_half_overlap(self):
        a = np.zeros((4, 4), dtype=bool)
        b = np.zeros((4, 4), dtype=bool)
        a[:, :2] = True
        b[:, 1:3] = True
        assert dice(a, b) == pytest.approx(0.5)

    def test_two_empty_masks(self):
        empty = np.zeros((3, 3), dtype=bool)
        assert dice(empty, empty) == 1.0

    def test_pairwise_over_label_maps(self):
        a = np.zeros((4, 4), dtype=int)
        a[:2] = 1
        b = a.copy()
        c = np.zeros((4, 4), dtype=int)
        c[2:] = 1
        assert pairwise_dsc([a, b, c], label=1) == pytest.approx(1.0 / 3.0)

    def test_pairwise_needs_two_masks(self):
        with pytest.raises(EvaluationError):
            pairwise_dsc([np.ones((2, 2), dtype=bool)])

    def test_warping_labels_back_restores_overlap(self):
        labels = np.zeros(GRID.shape, dtype=int)
        labels[5:15, 5:15] = 1
        shifted = np.zeros_like(labels)
        shifted[7:17, 5:15] = 1
        warped = warp_labels([labels, shifted], [Translation.identity(2), Translation([2.0, 0.0])], GRID)
        assert pairwise_dsc(warped, label=1) == 1.0
        assert pairwise_dsc([labels, shifted], label=1) < 1.0
