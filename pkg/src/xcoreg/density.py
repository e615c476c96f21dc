"""Parzen-window densities, appearance models and information measures.

Every table uses the natural logarithm and a cubic B-spline kernel measured
in bin units. Tables are laid out with classes along rows and intensity
bins along columns.
"""

import itertools
import logging
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from src.xcoreg.errors import DensityError, EmptySampleError
from src.xcoreg.models import AppearanceTable, Binning, CommonSpace, Grid, JointTable, Volume

logger = logging.getLogger(__name__)

PROBABILITY_FLOOR = 1e-12


def bspline3(s):
    a = np.abs(np.asarray(s, dtype=float))
    inner = 2.0 / 3.0 - a**2 + 0.5 * a**3
    outer = (2.0 - a) ** 3 / 6.0
    return np.where(a < 1.0, inner, np.where(a < 2.0, outer, 0.0))


def bspline3_deriv(s):
    s = np.asarray(s, dtype=float)
    a = np.abs(s)
    inner = -2.0 * s + 1.5 * s * a
    outer = -0.5 * np.sign(s) * (2.0 - a) ** 2
    return np.where(a < 1.0, inner, np.where(a < 2.0, outer, 0.0))


def kernel_matrix(intensities, binning: Binning) -> Tuple[np.ndarray, np.ndarray]:
    """Parzen weights of every sample on every bin and their derivative w.r.t. intensity.

    Row m of the first matrix is beta3((c_m - mu) / h) over the bins mu, where
    c_m is the continuous bin coordinate of sample m.
    """
    coords, slope = binning.coordinates(intensities)
    diff = (coords[:, None] - np.arange(binning.L)[None, :]) / binning.h
    weights = bspline3(diff)
    derivs = bspline3_deriv(diff) * (slope / binning.h)[:, None]
    return weights, derivs


def _normalize_rows(table: np.ndarray) -> Tuple[np.ndarray, Tuple[int, ...]]:
    sums = table.sum(axis=1)
    empty = tuple(int(k) for k in np.flatnonzero(sums <= 0.0))
    out = np.empty_like(table)
    full = sums > 0.0
    out[full] = table[full] / sums[full, None]
    out[~full] = 1.0 / table.shape[1]
    return out, empty


def appearance_from_posterior(intensities, weights, binning: Binning) -> AppearanceTable:
    """Class-conditional intensity distributions f_k(mu) from posterior-weighted samples.

    ``weights`` is one gamma column (M,) or the full gamma matrix (M, K).
    Classes without any weight get a uniform row and are listed in
    ``empty_classes``.
    """
    weights = np.asarray(weights, dtype=float)
    if weights.ndim == 1:
        weights = weights[:, None]
    if np.any(weights < 0):
        raise DensityError("posterior weights must be nonnegative")
    kernel, _ = kernel_matrix(intensities, binning)
    f, empty = _normalize_rows(weights.T @ kernel)
    if empty:
        logger.warning(f"Appearance classes {list(empty)} received no weight; using uniform rows")
    return AppearanceTable(f=f, empty_classes=empty)


def appearance_from_labels(volume: Volume, labels, binning: Binning, K: Optional[int] = None) -> AppearanceTable:
    """Ground-truth appearance model from known intensity-class correspondences.

    ``labels`` is either an integer label map on the volume's grid or a
    one-hot array with a trailing class axis.
    """
    labels = np.asarray(labels)
    if labels.shape == volume.grid.shape:
        n_classes = K or int(labels.max()) + 1
        onehot = np.zeros((labels.size, n_classes))
        onehot[np.arange(labels.size), labels.ravel().astype(int)] = 1.0
    else:
        onehot = labels.reshape(volume.grid.size, -1).astype(float)
    return appearance_from_posterior(volume.data.ravel(), onehot, binning)


def joint_table(intensities, gamma, binning: Binning) -> JointTable:
    """Joint class-intensity table p(mu, k), normalized over both axes."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim == 1:
        gamma = gamma[:, None]
    if gamma.shape[0] == 0:
        raise EmptySampleError("joint table needs at least one sample")
    kernel, _ = kernel_matrix(intensities, binning)
    counts = gamma.T @ kernel
    return JointTable(p=counts / counts.sum())


def entropy(dist) -> float:
    p = np.asarray(dist, dtype=float).ravel()
    p = p[p > 0]
    return float(-np.sum(p * np.log(p)))


def mutual_information(table: Union[JointTable, np.ndarray]) -> float:
    p = table.p if isinstance(table, JointTable) else np.asarray(table, dtype=float)
    rows = p.sum(axis=1)
    cols = p.sum(axis=0)
    mask = p > 0
    outer = np.outer(rows, cols)
    return float(np.sum(p[mask] * np.log(p[mask] / outer[mask])))


def mutual_information_and_gradient(counts: np.ndarray) -> Tuple[float, np.ndarray]:
    """MI of an unnormalized 2D table and its derivative w.r.t. every table entry.

    The derivative runs through the normalizing constant, so it is exact for
    tables built by Parzen accumulation.
    """
    total = counts.sum()
    if total <= 0:
        raise EmptySampleError("cannot evaluate mutual information of an empty table")
    p = counts / total
    outer = np.outer(p.sum(axis=1), p.sum(axis=0))
    mask = p > 0
    log_ratio = np.zeros_like(p)
    log_ratio[mask] = np.log(p[mask] / outer[mask])
    mi = float(np.sum(p * log_ratio))
    grad = np.where(mask, (log_ratio - mi) / total, 0.0)
    return mi, grad


def conditional_entropy_and_gradient(counts: np.ndarray) -> Tuple[float, np.ndarray]:
    """H(row variable | column variable) of an unnormalized table and its table derivative."""
    total = counts.sum()
    if total <= 0:
        raise EmptySampleError("cannot evaluate conditional entropy of an empty table")
    p = counts / total
    cols = p.sum(axis=0)
    mask = p > 0
    log_cond = np.zeros_like(p)
    log_cond[mask] = np.log((p / cols[None, :])[mask])
    h = float(-np.sum(p * log_cond))
    grad = np.where(mask, (-log_cond - h) / total, 0.0)
    return h, grad


def _likelihoods(tables: Sequence[AppearanceTable], kernels: Iterable[np.ndarray]):
    for table, kernel in zip(tables, kernels):
        f = table.f / table.f.sum(axis=1, keepdims=True)
        yield kernel @ f.T


def posterior_update(
    tables: Sequence[AppearanceTable], pi, kernels: Iterable[np.ndarray]
) -> np.ndarray:
    """Posterior of the common anatomy at each sample.

    gamma_k is proportional to pi_k * prod_j sum_mu W_j(mu) f_jk(mu), evaluated
    in log space. Samples whose likelihood vanishes for every class fall back
    to the prior.
    """
    pi = np.asarray(pi, dtype=float)
    log_post = None
    dead = None
    for likelihood in _likelihoods(tables, kernels):
        if log_post is None:
            log_post = np.broadcast_to(np.log(np.maximum(pi, PROBABILITY_FLOOR)), likelihood.shape).copy()
            dead = np.zeros(likelihood.shape[0], dtype=bool)
        dead |= ~np.any(likelihood > 0.0, axis=1)
        log_post += np.log(np.maximum(likelihood, PROBABILITY_FLOOR))
    if log_post is None:
        raise DensityError("posterior update needs at least one image")
    log_post -= log_post.max(axis=1, keepdims=True)
    gamma = np.exp(log_post)
    gamma /= gamma.sum(axis=1, keepdims=True)
    if np.any(dead):
        logger.warning(f"{int(dead.sum())} samples had zero likelihood for every class; using prior")
        gamma[dead] = pi
    return gamma


def prior_update(gamma) -> np.ndarray:
    gamma = np.asarray(gamma, dtype=float)
    if gamma.ndim != 2 or gamma.shape[0] == 0:
        raise EmptySampleError("prior update needs a nonempty overlap region")
    totals = gamma.sum(axis=0)
    return totals / totals.sum()


def log_likelihood(tables: Sequence[AppearanceTable], pi, kernels: Iterable[np.ndarray]) -> float:
    """Mean per-sample log-likelihood of the latent model, ln sum_k pi_k prod_j f_jk."""
    pi = np.asarray(pi, dtype=float)
    log_joint = None
    for likelihood in _likelihoods(tables, kernels):
        term = np.log(np.maximum(likelihood, PROBABILITY_FLOOR))
        log_joint = term if log_joint is None else log_joint + term
    log_joint = log_joint + np.log(np.maximum(pi, PROBABILITY_FLOOR))[None, :]
    peak = log_joint.max(axis=1, keepdims=True)
    per_sample = peak[:, 0] + np.log(np.exp(log_joint - peak).sum(axis=1))
    return float(per_sample.mean())


def init_common_space(grid: Union[Grid, int], K: int, rng_seed=0, uniform: bool = False) -> CommonSpace:
    """Random softmax initialization of the spatial class distribution with uniform prior."""
    if K < 2:
        raise DensityError(f"the common anatomy needs K >= 2 classes, got {K}")
    n_points = grid.size if isinstance(grid, Grid) else int(grid)
    pi = np.full(K, 1.0 / K)
    if uniform:
        return CommonSpace(gamma=np.full((n_points, K), 1.0 / K), pi=pi)
    rng = np.random.default_rng(rng_seed)
    g = rng.standard_normal((n_points, K))
    g -= g.max(axis=1, keepdims=True)
    gamma = np.exp(g)
    gamma /= gamma.sum(axis=1, keepdims=True)
    return CommonSpace(gamma=gamma, pi=pi)


def factorized_joint(pi, f_list: Sequence[np.ndarray]) -> np.ndarray:
    """Dense P(z=k, u_1, ..., u_N) = pi_k prod_j f_jk(u_j) with shape (K, L_1, ..., L_N)."""
    joint = np.asarray(pi, dtype=float)
    for j, f in enumerate(f_list):
        f = np.asarray(f, dtype=float)
        shape = (f.shape[0],) + (1,) * j + (f.shape[1],)
        joint = joint.reshape(joint.shape + (1,)) * f.reshape(shape)
    return joint


def total_correlation(joint_u: np.ndarray) -> float:
    """C(U) = sum_j H(U_j) - H(U_1, ..., U_N) of a dense joint distribution."""
    n = joint_u.ndim
    marginal_entropies = 0.0
    for axis in range(n):
        others = tuple(a for a in range(n) if a != axis)
        marginal_entropies += entropy(joint_u.sum(axis=others))
    return marginal_entropies - entropy(joint_u)


def discrete_xmetric_terms(pi, f_list: Sequence[np.ndarray]) -> Tuple[float, float, float]:
    """Brute-force (C(U), I(U, Z), sum_j I(U_j, Z)) for a factorized discrete model."""
    pi = np.asarray(pi, dtype=float)
    joint = factorized_joint(pi, f_list)
    joint_u = joint.sum(axis=0)
    flat = joint.reshape(joint.shape[0], -1)
    joint_mi = mutual_information(flat)
    pairwise = 0.0
    for f in f_list:
        pairwise += mutual_information(pi[:, None] * np.asarray(f, dtype=float))
    return total_correlation(joint_u), joint_mi, pairwise


def enumerate_tuples(levels: int, n_images: int) -> List[Tuple[int, ...]]:
    return list(itertools.product(range(levels), repeat=n_images))
