"""Parametric spatial transforms from common space to image space.

Every transform is an immutable value object: ``with_params`` returns a new
instance. Points are arrays of shape (M, d) in millimetres; a single point
of shape (d,) is accepted and returned as (d,).
"""

import functools
import itertools
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Sequence, Tuple

import numpy as np
from scipy import sparse
from scipy.sparse.linalg import lsqr

from src.xcoreg.density import bspline3
from src.xcoreg.errors import HeterogeneousGroupError, TransformError
from src.xcoreg.models import Grid

logger = logging.getLogger(__name__)


def _as_points(x, ndim: int) -> Tuple[np.ndarray, bool]:
    pts = np.asarray(x, dtype=float)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)
    if pts.shape[1] != ndim:
        raise TransformError(f"expected points with {ndim} coordinates, got shape {pts.shape}")
    return pts, single


def _restore(pts: np.ndarray, single: bool) -> np.ndarray:
    return pts[0] if single else pts


def rotation_matrix(angles) -> np.ndarray:
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    if angles.size == 1:
        c, s = np.cos(angles[0]), np.sin(angles[0])
        return np.array([[c, -s], [s, c]])
    rx, ry, rz = _axis_rotations(angles)
    return rz @ ry @ rx


def rotation_derivatives(angles) -> List[np.ndarray]:
    angles = np.atleast_1d(np.asarray(angles, dtype=float))
    if angles.size == 1:
        c, s = np.cos(angles[0]), np.sin(angles[0])
        return [np.array([[-s, -c], [c, -s]])]
    rx, ry, rz = _axis_rotations(angles)
    drx, dry, drz = _axis_rotation_derivatives(angles)
    return [rz @ ry @ drx, rz @ dry @ rx, drz @ ry @ rx]


def _axis_rotations(angles):
    a, b, g = angles
    ca, sa, cb, sb, cg, sg = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(g), np.sin(g)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
    return rx, ry, rz


def _axis_rotation_derivatives(angles):
    a, b, g = angles
    ca, sa, cb, sb, cg, sg = np.cos(a), np.sin(a), np.cos(b), np.sin(b), np.cos(g), np.sin(g)
    drx = np.array([[0, 0, 0], [0, -sa, -ca], [0, ca, -sa]])
    dry = np.array([[-sb, 0, cb], [0, 0, 0], [-cb, 0, -sb]])
    drz = np.array([[-sg, -cg, 0], [cg, -sg, 0], [0, 0, 0]])
    return drx, dry, drz


class Transform:
    kind = "abstract"

    def __init__(self, ndim: int):
        self.ndim = int(ndim)

    @property
    def params(self) -> np.ndarray:
        raise NotImplementedError

    @property
    def n_params(self) -> int:
        return int(self.params.size)

    def with_params(self, params) -> "Transform":
        raise NotImplementedError

    def param_groups(self) -> List[str]:
        raise NotImplementedError

    def apply(self, x) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x) -> np.ndarray:
        """Dense derivative of apply(x) w.r.t. the parameters, shape (M, d, P)."""
        raise NotImplementedError

    def backprop(self, x, grads) -> np.ndarray:
        """Contract per-point spatial gradients (M, d) with the parameter Jacobian."""
        pts, _ = _as_points(x, self.ndim)
        return np.einsum("mdp,md->p", self.jacobian(pts), np.atleast_2d(grads))

    def to_dict(self) -> Dict[str, Any]:
        raise NotImplementedError


class LinearTransform(Transform):
    def affine_form(self) -> Tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def apply(self, x) -> np.ndarray:
        pts, single = _as_points(x, self.ndim)
        matrix, offset = self.affine_form()
        return _restore(pts @ matrix.T + offset, single)

    def inverse(self) -> "Transform":
        matrix, offset = self.affine_form()
        inv = np.linalg.inv(matrix)
        return Affine(inv, -inv @ offset)


class Translation(LinearTransform):
    kind = "translation"

    def __init__(self, offset):
        offset = np.array(offset, dtype=float)
        super().__init__(offset.size)
        self.offset = offset

    @classmethod
    def identity(cls, ndim: int) -> "Translation":
        return cls(np.zeros(ndim))

    @property
    def params(self) -> np.ndarray:
        return self.offset.copy()

    def with_params(self, params) -> "Translation":
        return Translation(params)

    def param_groups(self) -> List[str]:
        return ["translation"] * self.ndim

    def affine_form(self):
        return np.eye(self.ndim), self.offset.copy()

    def inverse(self) -> "Translation":
        return Translation(-self.offset)

    def jacobian(self, x) -> np.ndarray:
        pts, _ = _as_points(x, self.ndim)
        return np.broadcast_to(np.eye(self.ndim), (len(pts), self.ndim, self.ndim)).copy()

    def backprop(self, x, grads) -> np.ndarray:
        return np.atleast_2d(grads).sum(axis=0)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "params": self.offset.tolist()}


class Rigid(LinearTransform):
    """phi(x) = R (x + t - c) + c, plus a fixed affine bias shared by unbiased groups.

    Parameters are ordered [center, angles, offset]; 3D angles are extrinsic
    x -> y -> z.
    """

    kind = "rigid"

    def __init__(self, center, angles, offset, bias_matrix=None, bias_offset=None):
        center = np.array(center, dtype=float)
        super().__init__(center.size)
        self.center = center
        self.angles = np.atleast_1d(np.array(angles, dtype=float))
        self.offset = np.array(offset, dtype=float)
        expected = 1 if self.ndim == 2 else 3
        if self.angles.size != expected:
            raise TransformError(f"{self.ndim}D rigid transform needs {expected} angles")
        self.bias_matrix = (
            np.zeros((self.ndim, self.ndim)) if bias_matrix is None else np.array(bias_matrix, dtype=float)
        )
        self.bias_offset = np.zeros(self.ndim) if bias_offset is None else np.array(bias_offset, dtype=float)

    @classmethod
    def identity(cls, ndim: int, center=None) -> "Rigid":
        n_angles = 1 if ndim == 2 else 3
        center = np.zeros(ndim) if center is None else center
        return cls(center, np.zeros(n_angles), np.zeros(ndim))

    @classmethod
    def from_translation(cls, translation: Translation, center) -> "Rigid":
        rigid = cls.identity(translation.ndim, center)
        return rigid.with_params(np.concatenate([rigid.center, rigid.angles, translation.offset]))

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.center, self.angles, self.offset])

    def with_params(self, params) -> "Rigid":
        params = np.asarray(params, dtype=float)
        d, na = self.ndim, self.angles.size
        return Rigid(params[:d], params[d : d + na], params[d + na :], self.bias_matrix, self.bias_offset)

    def with_bias(self, bias_matrix, bias_offset) -> "Rigid":
        return Rigid(self.center, self.angles, self.offset, bias_matrix, bias_offset)

    def param_groups(self) -> List[str]:
        return ["center"] * self.ndim + ["rotation"] * self.angles.size + ["translation"] * self.ndim

    @property
    def rotation(self) -> np.ndarray:
        return rotation_matrix(self.angles)

    def affine_form(self):
        r = self.rotation
        return r + self.bias_matrix, r @ (self.offset - self.center) + self.center + self.bias_offset

    def jacobian(self, x) -> np.ndarray:
        pts, _ = _as_points(x, self.ndim)
        d, na = self.ndim, self.angles.size
        r = self.rotation
        shifted = pts + self.offset - self.center
        jac = np.zeros((len(pts), d, 2 * d + na))
        jac[:, :, :d] = np.eye(d) - r
        for i, dr in enumerate(rotation_derivatives(self.angles)):
            jac[:, :, d + i] = shifted @ dr.T
        jac[:, :, d + na :] = r
        return jac

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "params": self.params.tolist(),
            "bias": {"matrix": self.bias_matrix.tolist(), "offset": self.bias_offset.tolist()},
        }


class Affine(LinearTransform):
    kind = "affine"

    def __init__(self, matrix, offset):
        matrix = np.array(matrix, dtype=float)
        super().__init__(matrix.shape[0])
        self.matrix = matrix
        self.offset = np.array(offset, dtype=float)

    @classmethod
    def identity(cls, ndim: int) -> "Affine":
        return cls(np.eye(ndim), np.zeros(ndim))

    @property
    def params(self) -> np.ndarray:
        return np.concatenate([self.matrix.ravel(), self.offset])

    def with_params(self, params) -> "Affine":
        params = np.asarray(params, dtype=float)
        d = self.ndim
        return Affine(params[: d * d].reshape(d, d), params[d * d :])

    def param_groups(self) -> List[str]:
        return ["affine_matrix"] * self.ndim**2 + ["affine_offset"] * self.ndim

    def affine_form(self):
        return self.matrix.copy(), self.offset.copy()

    def determinant(self) -> float:
        return float(np.linalg.det(self.matrix))

    def jacobian(self, x) -> np.ndarray:
        pts, _ = _as_points(x, self.ndim)
        d = self.ndim
        jac = np.zeros((len(pts), d, d * d + d))
        for r in range(d):
            jac[:, r, r * d : (r + 1) * d] = pts
            jac[:, r, d * d + r] = 1.0
        return jac

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "params": self.params.tolist()}


class FFD(Transform):
    """Tensor-product cubic B-spline free-form deformation.

    Control points start one mesh spacing before the grid origin, so every
    grid point has 4^d supporting control points.
    """

    kind = "ffd"

    def __init__(self, mesh_origin, mesh_spacing, ctrl_dims, displacements=None):
        mesh_origin = np.array(mesh_origin, dtype=float)
        super().__init__(mesh_origin.size)
        self.mesh_origin = mesh_origin
        self.mesh_spacing = np.array(mesh_spacing, dtype=float)
        self.ctrl_dims = tuple(int(n) for n in ctrl_dims)
        n_nodes = int(np.prod(self.ctrl_dims))
        if displacements is None:
            displacements = np.zeros((n_nodes, self.ndim))
        self.displacements = np.array(displacements, dtype=float).reshape(n_nodes, self.ndim)

    @classmethod
    def for_grid(cls, grid: Grid, mesh_spacing) -> "FFD":
        spacing = np.broadcast_to(np.asarray(mesh_spacing, dtype=float), (grid.ndim,)).copy()
        ctrl_dims = np.floor(grid.extent / spacing + 1e-9).astype(int) + 4
        origin = np.asarray(grid.origin) - spacing
        return cls(origin, spacing, ctrl_dims)

    @property
    def n_nodes(self) -> int:
        return self.displacements.shape[0]

    @property
    def params(self) -> np.ndarray:
        return self.displacements.ravel().copy()

    def with_params(self, params) -> "FFD":
        return FFD(self.mesh_origin, self.mesh_spacing, self.ctrl_dims, params)

    def same_mesh(self, other: "FFD") -> bool:
        return (
            self.ctrl_dims == other.ctrl_dims
            and np.allclose(self.mesh_spacing, other.mesh_spacing)
            and np.allclose(self.mesh_origin, other.mesh_origin)
        )

    def param_groups(self) -> List[str]:
        return ["ffd"] * self.n_params

    def support(self, x) -> Tuple[np.ndarray, np.ndarray]:
        """Flat control-point indices (M, 4^d) and tensor B-spline weights (M, 4^d)."""
        pts, _ = _as_points(x, self.ndim)
        u = (pts - self.mesh_origin) / self.mesh_spacing
        base = np.floor(u).astype(np.intp)
        offsets = np.arange(-1, 3)
        axis_index, axis_weight = [], []
        for a, n in enumerate(self.ctrl_dims):
            nodes = base[:, a, None] + offsets[None, :]
            weight = bspline3(u[:, a, None] - nodes)
            valid = (nodes >= 0) & (nodes < n)
            axis_index.append(np.clip(nodes, 0, n - 1))
            axis_weight.append(np.where(valid, weight, 0.0))
        strides = np.cumprod((self.ctrl_dims[1:] + (1,))[::-1])[::-1]
        columns = list(itertools.product(range(4), repeat=self.ndim))
        index = np.zeros((len(pts), len(columns)), dtype=np.intp)
        weights = np.ones((len(pts), len(columns)))
        for q, combo in enumerate(columns):
            for a, o in enumerate(combo):
                index[:, q] += axis_index[a][:, o] * strides[a]
                weights[:, q] *= axis_weight[a][:, o]
        return index, weights

    def weight_matrix(self, x) -> sparse.csr_matrix:
        """Sparse map from the flat parameters to the flat displacements at ``x``, shape (M*d, P)."""
        pts, _ = _as_points(x, self.ndim)
        index, weights = self.support(pts)
        d = self.ndim
        rows = np.repeat(np.arange(len(pts)), index.shape[1]) * d
        matrix = sparse.csr_matrix((len(pts) * d, self.n_params))
        for comp in range(d):
            matrix = matrix + sparse.csr_matrix(
                (weights.ravel(), (rows + comp, index.ravel() * d + comp)), shape=matrix.shape
            )
        return matrix

    def domain_points(self) -> np.ndarray:
        """Half-spacing lattice over the region where every point has full control support."""
        axes = [
            self.mesh_origin[a] + self.mesh_spacing[a] * np.arange(1.0, n - 3 + 1e-9, 0.5)
            for a, n in enumerate(self.ctrl_dims)
        ]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, self.ndim)

    def displacement(self, x) -> np.ndarray:
        pts, single = _as_points(x, self.ndim)
        index, weights = self.support(pts)
        disp = np.einsum("mq,mqd->md", weights, self.displacements[index])
        return _restore(disp, single)

    def apply(self, x) -> np.ndarray:
        pts, single = _as_points(x, self.ndim)
        return _restore(pts + self.displacement(pts), single)

    def jacobian(self, x) -> np.ndarray:
        pts, _ = _as_points(x, self.ndim)
        index, weights = self.support(pts)
        d = self.ndim
        jac = np.zeros((len(pts), d, self.n_params))
        rows = np.repeat(np.arange(len(pts)), index.shape[1])
        for comp in range(d):
            np.add.at(jac, (rows, comp, index.ravel() * d + comp), weights.ravel())
        return jac

    def backprop(self, x, grads) -> np.ndarray:
        pts, _ = _as_points(x, self.ndim)
        index, weights = self.support(pts)
        grads = np.atleast_2d(grads)
        out = np.zeros((self.n_nodes, self.ndim))
        np.add.at(out, index.ravel(), (weights[:, :, None] * grads[:, None, :]).reshape(-1, self.ndim))
        return out.ravel()

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "params": self.params.tolist(),
            "mesh_spacing": self.mesh_spacing.tolist(),
            "mesh_origin": self.mesh_origin.tolist(),
            "dims": list(self.ctrl_dims),
        }


class ChainTransform(Transform):
    """Fixed prefix transforms followed by one optimizable stage: active(prefix_n(...prefix_1(x)))."""

    kind = "chain"

    def __init__(self, prefix: Sequence[Transform], active: Transform):
        super().__init__(active.ndim)
        self.prefix = list(prefix)
        self.active = active

    @property
    def params(self) -> np.ndarray:
        return self.active.params

    def with_params(self, params) -> "ChainTransform":
        return ChainTransform(self.prefix, self.active.with_params(params))

    def with_active(self, active: Transform) -> "ChainTransform":
        return ChainTransform(self.prefix, active)

    def param_groups(self) -> List[str]:
        return self.active.param_groups()

    def through_prefix(self, x) -> np.ndarray:
        pts, single = _as_points(x, self.ndim)
        for stage in self.prefix:
            pts = stage.apply(pts)
        return _restore(pts, single)

    def apply(self, x) -> np.ndarray:
        pts, single = _as_points(x, self.ndim)
        return _restore(self.active.apply(self.through_prefix(pts)), single)

    def jacobian(self, x) -> np.ndarray:
        pts, _ = _as_points(x, self.ndim)
        return self.active.jacobian(self.through_prefix(pts))

    def backprop(self, x, grads) -> np.ndarray:
        pts, _ = _as_points(x, self.ndim)
        return self.active.backprop(self.through_prefix(pts), grads)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kind": self.kind,
            "stages": [stage.to_dict() for stage in self.prefix] + [self.active.to_dict()],
        }


class NumericInverse(Transform):
    """Inverse of a near-identity transform, solved pointwise by fixed-point iteration."""

    kind = "inverse"

    def __init__(self, target: Transform, iterations: int = 200, tol: float = 1e-12):
        super().__init__(target.ndim)
        self.target = target
        self.iterations = iterations
        self.tol = tol

    @property
    def params(self) -> np.ndarray:
        return np.zeros(0)

    def param_groups(self) -> List[str]:
        return []

    def apply(self, y) -> np.ndarray:
        pts, single = _as_points(y, self.ndim)
        if isinstance(self.target, LinearTransform):
            return _restore(self.target.inverse().apply(pts), single)
        x = pts.copy()
        for _ in range(self.iterations):
            step = pts - self.target.apply(x)
            x += step
            if np.max(np.abs(step)) < self.tol:
                break
        return _restore(x, single)

    def to_dict(self) -> Dict[str, Any]:
        return {"kind": self.kind, "target": self.target.to_dict()}


def identity_like(kind: str, grid: Grid, mesh_spacing=None) -> Transform:
    if kind == "translation":
        return Translation.identity(grid.ndim)
    if kind == "rigid":
        return Rigid.identity(grid.ndim, grid.center)
    if kind == "affine":
        return Affine.identity(grid.ndim)
    if kind == "ffd":
        if mesh_spacing is None:
            raise TransformError("an FFD needs a mesh spacing")
        return FFD.for_grid(grid, mesh_spacing)
    raise TransformError(f"unknown transform kind: {kind}")


def compose_eval(a: Transform, b: Transform, x) -> np.ndarray:
    return a.apply(b.apply(x))


@dataclass(frozen=True)
class TransformGroup:
    members: List[Transform]
    zero_mean: bool = False
    meta: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.members)

    def __getitem__(self, j: int) -> Transform:
        return self.members[j]

    @property
    def kinds(self) -> List[str]:
        return [_active(t).kind for t in self.members]

    def flat_params(self) -> np.ndarray:
        return np.concatenate([t.params for t in self.members])

    def param_groups(self) -> List[str]:
        return [g for t in self.members for g in t.param_groups()]

    def with_flat_params(self, params) -> "TransformGroup":
        params = np.asarray(params, dtype=float)
        members, start = [], 0
        for t in self.members:
            members.append(t.with_params(params[start : start + t.n_params]))
            start += t.n_params
        return TransformGroup(members, self.zero_mean, dict(self.meta))

    def apply(self, x) -> List[np.ndarray]:
        return [t.apply(x) for t in self.members]


def _active(t: Transform) -> Transform:
    return t.active if isinstance(t, ChainTransform) else t


def _replace_active(t: Transform, active: Transform) -> Transform:
    return t.with_active(active) if isinstance(t, ChainTransform) else active


def _project_chained_ffd(
    group: TransformGroup, points: np.ndarray, tol: float, max_passes: int = 3
) -> List[Transform]:
    """Least-norm change of the active FFDs that makes the composed group mean the identity at ``points``.

    The group-mean displacement at the points is linear in the stacked
    active parameters (A theta). With unbiased prefixes the residual lies in
    the range of A and the least-norm solve removes it up to solver tolerance.
    """
    chains = group.members
    n = len(chains)
    mapped = [chain.through_prefix(points) for chain in chains]
    operator = sparse.hstack([chain.active.weight_matrix(y) for chain, y in zip(chains, mapped)]).tocsr() / n
    base = np.mean(mapped, axis=0) - points
    params = group.flat_params()
    residual = base.ravel() + operator @ params
    for _ in range(max_passes):
        if np.max(np.abs(residual)) <= tol:
            break
        correction = lsqr(operator, residual, atol=1e-14, btol=1e-14, iter_lim=max(1000, 4 * operator.shape[1]))[0]
        params = params - correction
        residual = base.ravel() + operator @ params
    if np.max(np.abs(residual)) > tol:
        logger.debug(f"Chained zero-mean projection left a residual of {np.max(np.abs(residual)):.3e} mm")
    return [chain.with_params(p) for chain, p in zip(chains, np.split(params, n))]


def project_zero_mean(group: TransformGroup, points=None, tol: float = 1e-9) -> TransformGroup:
    """Remove the group-mean displacement so that (1/N) sum_j phi_j(x) = x.

    Chains are projected through their active stage. For chained FFDs the
    composed maps are made unbiased at ``points`` (by default a lattice over
    the control mesh); linear actives are projected on their own parameters.
    """
    actives = [_active(t) for t in group.members]
    kinds = {type(t) for t in actives}
    if len(kinds) != 1:
        raise HeterogeneousGroupError(f"cannot project a group mixing {sorted(k.kind for k in kinds)}")
    kind = kinds.pop()
    n = len(actives)

    if kind is Translation:
        mean = np.mean([t.offset for t in actives], axis=0)
        projected = [Translation(t.offset - mean) for t in actives]
    elif kind is FFD:
        first = actives[0]
        if not all(first.same_mesh(t) for t in actives[1:]):
            raise HeterogeneousGroupError("FFD members must share one control mesh")
        if any(isinstance(t, ChainTransform) and t.prefix for t in group.members):
            if not all(isinstance(t, ChainTransform) for t in group.members):
                raise HeterogeneousGroupError("cannot project a group mixing chained and plain FFDs")
            pts = first.domain_points() if points is None else np.atleast_2d(np.asarray(points, dtype=float))
            return TransformGroup(_project_chained_ffd(group, pts, tol), True, dict(group.meta))
        mean = np.mean([t.displacements for t in actives], axis=0)
        projected = [t.with_params((t.displacements - mean).ravel()) for t in actives]
    elif kind is Affine:
        mean_matrix = np.mean([t.matrix for t in actives], axis=0)
        mean_offset = np.mean([t.offset for t in actives], axis=0)
        eye = np.eye(actives[0].ndim)
        projected = [Affine(t.matrix - mean_matrix + eye, t.offset - mean_offset) for t in actives]
    elif kind is Rigid:
        forms = [t.affine_form() for t in actives]
        mean_matrix = sum(f[0] for f in forms) / n
        mean_offset = sum(f[1] for f in forms) / n
        eye = np.eye(actives[0].ndim)
        projected = [
            t.with_bias(t.bias_matrix - (mean_matrix - eye), t.bias_offset - mean_offset) for t in actives
        ]
    else:
        raise HeterogeneousGroupError(f"zero-mean projection is undefined for {kind.kind}")

    members = [_replace_active(t, a) for t, a in zip(group.members, projected)]
    return TransformGroup(members, True, dict(group.meta))


@functools.lru_cache(maxsize=32)
def _bending_operators(ctrl_dims: Tuple[int, ...], spacing: Tuple[float, ...]):
    ndim = len(ctrl_dims)

    def second(n, s):
        return sparse.diags([1.0, -2.0, 1.0], [0, 1, 2], shape=(n - 2, n)) / (s * s)

    def first(n, s):
        return sparse.diags([-0.5, 0.5], [0, 2], shape=(n - 2, n)) / s

    def interior(n):
        return sparse.eye(n - 2, n, k=1)

    operators = []
    for a, b in itertools.combinations_with_replacement(range(ndim), 2):
        factors = []
        for axis, (n, s) in enumerate(zip(ctrl_dims, spacing)):
            if a == b == axis:
                factors.append(second(n, s))
            elif axis in (a, b) and a != b:
                factors.append(first(n, s))
            else:
                factors.append(interior(n))
        op = factors[0]
        for factor in factors[1:]:
            op = sparse.kron(op, factor)
        operators.append((1.0 if a == b else 2.0, sparse.csr_matrix(op)))
    return operators


def bending_energy(t: Transform) -> Tuple[float, np.ndarray]:
    """Thin-plate bending energy of an FFD's control mesh and its parameter gradient.

    Linear transforms have zero energy. Chains are regularized on their
    active stage.
    """
    ffd = _active(t)
    if not isinstance(ffd, FFD):
        return 0.0, np.zeros(t.n_params)
    ops = _bending_operators(ffd.ctrl_dims, tuple(float(s) for s in ffd.mesh_spacing))
    coeffs = ffd.displacements
    value = 0.0
    grad = np.zeros_like(coeffs)
    for weight, op in ops:
        second_derivs = op @ coeffs
        value += weight * float(np.sum(second_derivs**2))
        grad += 2.0 * weight * (op.T @ second_derivs)
    return value, grad.ravel()


def transform_from_dict(payload: Dict[str, Any]) -> Transform:
    kind = payload.get("kind")
    params = np.asarray(payload.get("params", []), dtype=float)
    if kind == "translation":
        return Translation(params)
    if kind == "rigid":
        ndim = 2 if params.size == 5 else 3
        bias = payload.get("bias") or {}
        identity = Rigid.identity(ndim)
        return identity.with_params(params).with_bias(
            bias.get("matrix", np.zeros((ndim, ndim))), bias.get("offset", np.zeros(ndim))
        )
    if kind == "affine":
        ndim = 2 if params.size == 6 else 3
        return Affine.identity(ndim).with_params(params)
    if kind == "ffd":
        return FFD(payload["mesh_origin"], payload["mesh_spacing"], payload["dims"], params)
    if kind == "chain":
        stages = [transform_from_dict(stage) for stage in payload["stages"]]
        return ChainTransform(stages[:-1], stages[-1])
    if kind == "inverse":
        return NumericInverse(transform_from_dict(payload["target"]))
    raise TransformError(f"unknown transform kind in payload: {kind}")
