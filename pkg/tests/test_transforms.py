import numpy as np
import pytest

from src.xcoreg.errors import HeterogeneousGroupError, TransformError
from src.xcoreg.models import Grid
from src.xcoreg.transforms import (
    FFD,
    Affine,
    ChainTransform,
    NumericInverse,
    Rigid,
    TransformGroup,
    Translation,
    bending_energy,
    compose_eval,
    identity_like,
    project_zero_mean,
    transform_from_dict,
)

from tests.conftest import relative_error


def _numeric_jacobian(transform, points, h=1e-6):
    params = transform.params
    columns = []
    for p in range(params.size):
        step = np.zeros_like(params)
        step[p] = h
        plus = transform.with_params(params + step).apply(points)
        minus = transform.with_params(params - step).apply(points)
        columns.append((plus - minus) / (2 * h))
    return np.stack(columns, axis=-1)


def _random_ffd(rng, grid, spacing=8.0, scale=1.0):
    ffd = FFD.for_grid(grid, spacing)
    return ffd.with_params(scale * rng.standard_normal(ffd.n_params))


GRID_2D = Grid.from_shape((33, 33))
GRID_3D = Grid.from_shape((17, 17, 9), spacing=(1.0, 1.0, 2.0))


class TestApply:
    def test_identities(self, rng):
        points = rng.uniform(0, 32, size=(100, 2))
        for kind in ("translation", "rigid", "affine", "ffd"):
            t = identity_like(kind, GRID_2D, mesh_spacing=8.0)
            np.testing.assert_allclose(t.apply(points), points, atol=1e-12)

    def test_translation(self):
        np.testing.assert_allclose(Translation([2.0, -1.0]).apply([0.0, 0.0]), [2.0, -1.0])

    def test_quarter_turn(self):
        rigid = Rigid([0.0, 0.0], [np.pi / 2], [0.0, 0.0])
        np.testing.assert_allclose(rigid.apply([1.0, 0.0]), [0.0, 1.0], atol=1e-12)

    def test_rigid_rotates_about_its_center(self):
        rigid = Rigid([5.0, 5.0], [0.7], [0.0, 0.0])
        np.testing.assert_allclose(rigid.apply([5.0, 5.0]), [5.0, 5.0], atol=1e-12)

    def test_ffd_support_weight_at_a_control_node(self):
        ffd = FFD.for_grid(GRID_2D, 8.0)
        index, weights = ffd.support([[16.0, 8.0]])
        node = 3 * ffd.ctrl_dims[1] + 2
        column = list(index[0]).index(node)
        assert weights[0, column] == pytest.approx(4.0 / 9.0)
        assert weights.sum() == pytest.approx(1.0)

    def test_ffd_covers_the_whole_grid(self, rng):
        ffd = _random_ffd(rng, GRID_2D)
        _, weights = ffd.support(GRID_2D.corners())
        np.testing.assert_allclose(weights.sum(axis=1), 1.0)

    def test_points_with_wrong_dimension(self):
        with pytest.raises(TransformError):
            Translation([0.0, 0.0]).apply(np.zeros((3, 3)))

    def test_unknown_kind(self):
        with pytest.raises(TransformError):
            identity_like("spline", GRID_2D)


class TestJacobians:
    @pytest.mark.parametrize(
        "transform",
        [
            Translation([0.3, -0.2]),
            Rigid([16.0, 16.0], [0.3], [1.0, -2.0]),
            Rigid([8.0, 8.0, 8.0], [0.1, -0.2, 0.3], [1.0, 0.5, -0.5]),
            Affine([[1.1, 0.2], [-0.1, 0.9]], [0.5, 1.0]),
        ],
        ids=["translation", "rigid2d", "rigid3d", "affine"],
    )
    def test_linear_models(self, rng, transform):
        points = rng.uniform(0, 16, size=(40, transform.ndim))
        assert relative_error(transform.jacobian(points), _numeric_jacobian(transform, points)) < 1e-5

    def test_ffd_2d(self, rng):
        ffd = _random_ffd(rng, GRID_2D)
        points = rng.uniform(0, 32, size=(30, 2))
        assert relative_error(ffd.jacobian(points), _numeric_jacobian(ffd, points)) < 1e-5

    def test_ffd_3d(self, rng):
        ffd = _random_ffd(rng, GRID_3D, spacing=6.0, scale=0.5)
        points = rng.uniform(0, 16, size=(10, 3))
        assert relative_error(ffd.jacobian(points), _numeric_jacobian(ffd, points)) < 1e-5

    def test_chain_differentiates_its_active_stage(self, rng):
        chain = ChainTransform([Rigid([16.0, 16.0], [0.1], [1.0, 0.0])], _random_ffd(rng, GRID_2D, scale=0.5))
        points = rng.uniform(4, 28, size=(20, 2))
        assert relative_error(chain.jacobian(points), _numeric_jacobian(chain, points)) < 1e-5

    def test_backprop_contracts_the_jacobian(self, rng):
        ffd = _random_ffd(rng, GRID_2D)
        points = rng.uniform(0, 32, size=(25, 2))
        grads = rng.standard_normal((25, 2))
        expected = np.einsum("mdp,md->p", ffd.jacobian(points), grads)
        np.testing.assert_allclose(ffd.backprop(points, grads), expected, atol=1e-12)
        translation = Translation([1.0, 2.0])
        np.testing.assert_allclose(translation.backprop(points, grads), grads.sum(axis=0))

    def test_weight_matrix_reproduces_the_displacement(self, rng):
        ffd = _random_ffd(rng, GRID_2D)
        points = rng.uniform(-4, 36, size=(30, 2))
        flat = ffd.weight_matrix(points) @ ffd.params
        np.testing.assert_allclose(flat.reshape(-1, 2), ffd.displacement(points), atol=1e-12)

    def test_domain_points_cover_the_grid(self):
        points = FFD.for_grid(GRID_2D, 8.0).domain_points()
        np.testing.assert_allclose(points.min(axis=0), [0.0, 0.0])
        np.testing.assert_allclose(points.max(axis=0), [32.0, 32.0])
        assert len(points) == 9 * 9


class TestZeroMean:
    def test_opposite_translations_are_unchanged(self):
        group = project_zero_mean(TransformGroup([Translation([1.0, 0.0]), Translation([-1.0, 0.0])]))
        np.testing.assert_allclose(group[0].offset, [1.0, 0.0])
        np.testing.assert_allclose(group[1].offset, [-1.0, 0.0])

    def test_translation_mean_is_removed(self):
        group = project_zero_mean(TransformGroup([Translation([2.0, 0.0]), Translation([0.0, 0.0])]))
        np.testing.assert_allclose(group[0].offset, [1.0, 0.0])
        np.testing.assert_allclose(group[1].offset, [-1.0, 0.0])
        assert group.zero_mean

    def test_ffd_node_means_vanish(self, rng):
        group = project_zero_mean(TransformGroup([_random_ffd(rng, GRID_2D) for _ in range(3)]))
        mean = np.mean([t.displacements for t in group.members], axis=0)
        np.testing.assert_allclose(mean, 0.0, atol=1e-12)

    @pytest.mark.parametrize("kind", ["translation", "rigid", "affine", "ffd"])
    def test_mean_displacement_vanishes_and_is_idempotent(self, rng, kind):
        members = []
        for _ in range(4):
            if kind == "translation":
                members.append(Translation(rng.uniform(-3, 3, 2)))
            elif kind == "rigid":
                members.append(Rigid(GRID_2D.center, rng.uniform(-0.3, 0.3, 1), rng.uniform(-3, 3, 2)))
            elif kind == "affine":
                members.append(Affine(np.eye(2) + 0.1 * rng.standard_normal((2, 2)), rng.uniform(-3, 3, 2)))
            else:
                members.append(_random_ffd(rng, GRID_2D))
        projected = project_zero_mean(TransformGroup(members))
        points = GRID_2D.points()[::17]
        mean_map = np.mean(projected.apply(points), axis=0)
        np.testing.assert_allclose(mean_map, points, atol=1e-9)
        twice = project_zero_mean(projected)
        np.testing.assert_allclose(twice.flat_params(), projected.flat_params(), atol=1e-12)

    def test_pairwise_differences_are_preserved(self, rng):
        members = [Translation(rng.uniform(-3, 3, 2)) for _ in range(3)]
        projected = project_zero_mean(TransformGroup(members))
        np.testing.assert_allclose(
            projected[0].offset - projected[2].offset, members[0].offset - members[2].offset, atol=1e-12
        )

    def test_chained_ffd_levels_compose_to_the_identity(self, rng):
        coarse = project_zero_mean(TransformGroup([_random_ffd(rng, GRID_2D, spacing=16.0) for _ in range(3)]))
        members = [ChainTransform([c], _random_ffd(rng, GRID_2D, scale=0.5)) for c in coarse.members]
        points = GRID_2D.points()
        projected = project_zero_mean(TransformGroup(members), points=points)
        np.testing.assert_allclose(np.mean(projected.apply(points), axis=0), points, atol=1e-6)
        corners = GRID_2D.corners()
        np.testing.assert_allclose(np.mean(projected.apply(corners), axis=0), corners, atol=1e-6)
        for before, after in zip(members, projected.members):
            assert after.prefix == before.prefix
        twice = project_zero_mean(projected, points=points)
        np.testing.assert_allclose(twice.flat_params(), projected.flat_params(), atol=1e-6)

    def test_chained_ffd_after_rigid_stage(self, rng):
        rigid = project_zero_mean(
            TransformGroup([Rigid(GRID_2D.center, rng.uniform(-0.2, 0.2, 1), rng.uniform(-2, 2, 2)) for _ in range(3)])
        )
        members = [ChainTransform([r], _random_ffd(rng, GRID_2D, scale=0.5)) for r in rigid.members]
        projected = project_zero_mean(TransformGroup(members))
        points = projected[0].active.domain_points()
        np.testing.assert_allclose(np.mean(projected.apply(points), axis=0), points, atol=1e-6)

    def test_plain_and_chained_ffds_do_not_mix(self, rng):
        ffd = _random_ffd(rng, GRID_2D)
        chain = ChainTransform([Translation([1.0, 0.0])], _random_ffd(rng, GRID_2D))
        with pytest.raises(HeterogeneousGroupError):
            project_zero_mean(TransformGroup([ffd, chain]))

    def test_mixed_group_is_rejected(self):
        with pytest.raises(HeterogeneousGroupError):
            project_zero_mean(TransformGroup([Translation([0.0, 0.0]), Affine.identity(2)]))


class TestBendingEnergy:
    def test_zero_for_identity_and_linear_models(self):
        assert bending_energy(FFD.for_grid(GRID_2D, 8.0))[0] == 0.0
        value, grad = bending_energy(Rigid([1.0, 1.0], [0.2], [0.0, 0.0]))
        assert value == 0.0
        assert grad.shape == (5,)

    def test_zero_for_affine_control_displacements(self, rng):
        ffd = FFD.for_grid(GRID_3D, 6.0)
        nodes = np.stack(np.meshgrid(*[np.arange(n) for n in ffd.ctrl_dims], indexing="ij"), axis=-1).reshape(-1, 3)
        positions = ffd.mesh_origin + nodes * ffd.mesh_spacing
        displacements = positions @ rng.standard_normal((3, 3)).T + rng.standard_normal(3)
        value, _ = bending_energy(ffd.with_params(displacements.ravel()))
        assert abs(value) < 1e-12

    def test_translation_invariant(self, rng):
        ffd = _random_ffd(rng, GRID_2D)
        shifted = ffd.with_params((ffd.displacements + [2.0, -1.0]).ravel())
        assert bending_energy(shifted)[0] == pytest.approx(bending_energy(ffd)[0], rel=1e-9)

    def test_gradient_matches_finite_differences(self, rng):
        ffd = _random_ffd(rng, GRID_2D)
        _, grad = bending_energy(ffd)
        params = ffd.params
        numeric = np.zeros_like(params)
        h = 1e-5
        for p in range(params.size):
            step = np.zeros_like(params)
            step[p] = h
            numeric[p] = (
                bending_energy(ffd.with_params(params + step))[0] - bending_energy(ffd.with_params(params - step))[0]
            ) / (2 * h)
        assert relative_error(grad, numeric) < 1e-5

    def test_positive_for_a_bent_mesh(self):
        ffd = FFD.for_grid(GRID_2D, 8.0)
        displacements = np.zeros_like(ffd.displacements)
        displacements[4 * ffd.ctrl_dims[1] + 4, 0] = 1.0
        assert bending_energy(ffd.with_params(displacements.ravel()))[0] > 0


class TestComposition:
    def test_rigid_and_its_inverse(self, rng):
        rigid = Rigid([4.0, 2.0], [0.4], [1.0, -3.0])
        points = rng.uniform(0, 20, size=(10, 2))
        np.testing.assert_allclose(compose_eval(rigid, rigid.inverse(), points), points, atol=1e-10)

    def test_numeric_inverse_of_a_small_ffd(self, rng):
        ffd = _random_ffd(rng, GRID_2D, scale=0.8)
        inverse = NumericInverse(ffd)
        points = rng.uniform(2, 30, size=(50, 2))
        np.testing.assert_allclose(ffd.apply(inverse.apply(points)), points, atol=1e-8)

    def test_from_dict_rejects_unknown_kinds(self):
        with pytest.raises(TransformError):
            transform_from_dict({"kind": "bspline"})

    def test_inverse_survives_serialization(self):
        inverse = NumericInverse(Translation([1.0, 2.0]))
        restored = transform_from_dict(inverse.to_dict())
        np.testing.assert_allclose(restored.apply([0.0, 0.0]), [-1.0, -2.0])
