"""Groupwise similarity metrics sharing one resampled sample context.

All metrics are maximized. Each returns a MetricValue whose gradient lists
one parameter-gradient array per image.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
from scipy import linalg
from scipy.special import logsumexp

from src.xcoreg.core import interpolate_points
from src.xcoreg.density import (
    conditional_entropy_and_gradient,
    kernel_matrix,
    mutual_information_and_gradient,
)
from src.xcoreg.errors import EmptyOverlapError, InsufficientImagesError, MetricError, ZeroVarianceError
from src.xcoreg.models import Binning, MetricValue, Volume
from src.xcoreg.transforms import Transform

logger = logging.getLogger(__name__)

LOW_RELIABILITY_STACK = 8


@dataclass
class MetricContext:
    """Warped sample intensities of every image on the overlap samples.

    ``intensities`` is (N, M), ``spatial_grads`` is (N, M, d) with image
    gradients evaluated at the mapped points, ``points`` are the common-space
    sample positions (M, d).
    """

    points: np.ndarray
    intensities: np.ndarray
    spatial_grads: np.ndarray
    transforms: List[Transform]
    binnings: List[Binning]
    gamma: Optional[np.ndarray] = None
    pi: Optional[np.ndarray] = None
    _kernels: Dict[int, Tuple[np.ndarray, np.ndarray]] = field(default_factory=dict, repr=False)

    @property
    def n_images(self) -> int:
        return self.intensities.shape[0]

    @property
    def n_samples(self) -> int:
        return self.intensities.shape[1]

    @property
    def tuples(self) -> np.ndarray:
        return self.intensities.T

    def kernels(self, j: int) -> Tuple[np.ndarray, np.ndarray]:
        if j not in self._kernels:
            self._kernels[j] = kernel_matrix(self.intensities[j], self.binnings[j])
        return self._kernels[j]

    def kernel_weights(self) -> Iterator[np.ndarray]:
        for j in range(self.n_images):
            yield self.kernels(j)[0]

    def chain(self, du: Sequence[np.ndarray]) -> List[np.ndarray]:
        """Map d(value)/d(sample intensity) of each image to its transform parameters."""
        grads = []
        for j, t in enumerate(self.transforms):
            spatial = np.asarray(du[j])[:, None] * self.spatial_grads[j]
            grads.append(t.backprop(self.points, spatial))
        return grads


def resample_group(
    volumes: Sequence[Volume], transforms: Sequence[Transform], points: np.ndarray, workers: int = 1
) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Values (N, M), inside flags (N, M) and spatial gradients (N, M, d) for every image."""

    def one(pair):
        volume, t = pair
        return interpolate_points(volume, t.apply(points))

    pairs = list(zip(volumes, transforms))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, pairs))
    else:
        results = [one(pair) for pair in pairs]
    values = np.stack([r[0] for r in results])
    inside = np.stack([r[1] for r in results])
    grads = np.stack([r[2] for r in results])
    return values, inside, grads


def build_context(
    volumes: Sequence[Volume],
    transforms: Sequence[Transform],
    points: np.ndarray,
    binnings: Sequence[Binning],
    gamma: Optional[np.ndarray] = None,
    pi: Optional[np.ndarray] = None,
    resampled: Optional[Tuple[np.ndarray, np.ndarray, np.ndarray]] = None,
) -> MetricContext:
    """Resample the group at ``points`` and keep only samples inside every image."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    values, inside, grads = resampled if resampled is not None else resample_group(volumes, transforms, points)
    overlap = np.all(inside, axis=0)
    if not np.any(overlap):
        raise EmptyOverlapError("no sample lies inside every image")
    return MetricContext(
        points=points[overlap],
        intensities=values[:, overlap],
        spatial_grads=grads[:, overlap],
        transforms=list(transforms),
        binnings=list(binnings),
        gamma=None if gamma is None else np.asarray(gamma)[overlap],
        pi=pi,
    )


def xmetric(ctx: MetricContext, gamma: Optional[np.ndarray] = None) -> MetricValue:
    """Sum over images of the mutual information between warped intensity and the common anatomy.

    Gamma is held fixed; the gradient flows through each Parzen table.
    """
    gamma = ctx.gamma if gamma is None else np.asarray(gamma, dtype=float)
    if gamma is None:
        raise MetricError("the X-metric needs a common-space posterior on the samples")
    total = 0.0
    du = []
    per_image = []
    for j in range(ctx.n_images):
        kernel, dkernel = ctx.kernels(j)
        mi, dmi = mutual_information_and_gradient(gamma.T @ kernel)
        total += mi
        per_image.append(mi)
        du.append(np.sum((gamma @ dmi) * dkernel, axis=1))
    return MetricValue(value=total, gradient=ctx.chain(du), diagnostics={"per_image": per_image})


def congealing(ctx: MetricContext, sigma: float = 0.05) -> MetricValue:
    """Negative mean stack entropy with a leave-one-out Gaussian density over each stack.

    Intensities are normalized to [0, 1] by each image's binning range.
    """
    n = ctx.n_images
    if n < 2:
        raise InsufficientImagesError(f"congealing needs at least 2 images, got {n}")
    ranges = np.array([b.hi - b.lo for b in ctx.binnings])
    lows = np.array([b.lo for b in ctx.binnings])
    v = ((ctx.intensities - lows[:, None]) / ranges[:, None]).T
    m = v.shape[0]

    diff = v[:, :, None] - v[:, None, :]
    kernel = np.exp(-0.5 * (diff / sigma) ** 2) / (np.sqrt(2.0 * np.pi) * sigma)
    off_diagonal = 1.0 - np.eye(n)
    kernel *= off_diagonal
    dkernel = -diff / sigma**2 * kernel
    density = np.maximum(kernel.sum(axis=2) / (n - 1), 1e-300)

    value = float(np.mean(np.log(density)))
    own = dkernel.sum(axis=2) / density
    others = -np.einsum("mij,mi->mj", dkernel, 1.0 / density)
    dv = (own + others) / ((n - 1) * n * m)
    du = (dv / ranges[None, :]).T

    diagnostics = {"sigma": sigma}
    if n < LOW_RELIABILITY_STACK:
        diagnostics["low_reliability"] = True
    return MetricValue(value=value, gradient=ctx.chain(du), diagnostics=diagnostics)


def ape(ctx: MetricContext) -> MetricValue:
    """Sum of pairwise mutual information over all image pairs, per-pair marginals."""
    n = ctx.n_images
    if n < 2:
        raise InsufficientImagesError(f"pairwise MI needs at least 2 images, got {n}")
    du = [np.zeros(ctx.n_samples) for _ in range(n)]
    total = 0.0
    pairs = 0
    for i in range(n):
        wi, dwi = ctx.kernels(i)
        for j in range(i + 1, n):
            wj, dwj = ctx.kernels(j)
            mi, dmi = mutual_information_and_gradient(wi.T @ wj)
            total += mi
            pairs += 1
            du[i] += np.sum((wj @ dmi.T) * dwi, axis=1)
            du[j] += np.sum((wi @ dmi) * dwj, axis=1)
    return MetricValue(value=total, gradient=ctx.chain(du), diagnostics={"pairs": pairs})


def first_principal_component(covariance: np.ndarray, max_iter: int = 1000, tol: float = 1e-12, seed: int = 0):
    """Dominant eigenpair of a symmetric PSD matrix by power iteration, sign fixed so sum(w) >= 0."""
    covariance = np.asarray(covariance, dtype=float)
    rng = np.random.default_rng(seed)
    x = rng.normal(size=covariance.shape[0])
    x /= np.linalg.norm(x)
    lam = 0.0
    for _ in range(max_iter):
        y = covariance @ x
        y_norm = np.linalg.norm(y)
        if y_norm == 0:
            raise ZeroVarianceError("image group has zero intensity variance")
        lam = float(x @ y)
        x = y / y_norm
        if np.linalg.norm(covariance @ x - lam * x) < tol * max(1.0, abs(lam)):
            break
    if x.sum() < 0:
        x = -x
    return lam, x


def pca_template(intensities: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    """Per-sample first principal component scores of the N-vectors of intensities.

    Returns (template, weights, explained variance ratio).
    """
    centered = intensities - intensities.mean(axis=1, keepdims=True)
    covariance = centered @ centered.T / max(centered.shape[1], 1)
    trace = float(np.trace(covariance))
    if trace <= 0:
        raise ZeroVarianceError("image group has zero intensity variance")
    lam, weights = first_principal_component(covariance)
    return weights @ centered, weights, lam / trace


def cte(ctx: MetricContext, template: Optional[np.ndarray] = None) -> MetricValue:
    """Negative sum of conditional entropies H(U_j | V) given the first-PC template V.

    The template is recomputed from the context unless one is given; either
    way it is treated as constant in the gradient.
    """
    n = ctx.n_images
    if n < 2:
        raise InsufficientImagesError(f"the PCA template needs at least 2 images, got {n}")
    explained = None
    if template is None:
        template, _, explained = pca_template(ctx.intensities)
    template = np.asarray(template, dtype=float)
    if not template.max() > template.min():
        raise ZeroVarianceError("template has zero variance over the samples")
    template_kernel, _ = kernel_matrix(template, Binning(L=ctx.binnings[0].L, lo=template.min(), hi=template.max()))

    total = 0.0
    du = []
    for j in range(n):
        kernel, dkernel = ctx.kernels(j)
        h, dh = conditional_entropy_and_gradient(kernel.T @ template_kernel)
        total -= h
        du.append(-np.sum((template_kernel @ dh.T) * dkernel, axis=1))
    diagnostics = {} if explained is None else {"explained_variance": explained}
    return MetricValue(value=total, gradient=ctx.chain(du), diagnostics=diagnostics)


def vi(ctx: MetricContext) -> MetricValue:
    """Negative mean across-image intensity variance."""
    n, m = ctx.intensities.shape
    if n < 2:
        raise InsufficientImagesError(f"variance of intensities needs at least 2 images, got {n}")
    deviation = ctx.intensities - ctx.intensities.mean(axis=0, keepdims=True)
    value = -float(np.mean(np.mean(deviation**2, axis=0)))
    du = -2.0 * deviation / (n * m)
    return MetricValue(value=value, gradient=ctx.chain(du))


@dataclass(frozen=True)
class GaussianMixture:
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray

    @property
    def K(self) -> int:
        return int(self.weights.shape[0])


def _component_log_densities(x: np.ndarray, model: GaussianMixture) -> Tuple[np.ndarray, List[np.ndarray]]:
    m, d = x.shape
    log_dens = np.empty((m, model.K))
    factors = []
    for k in range(model.K):
        chol = linalg.cholesky(model.covariances[k], lower=True)
        factors.append(chol)
        white = linalg.solve_triangular(chol, (x - model.means[k]).T, lower=True)
        log_det = 2.0 * np.sum(np.log(np.diag(chol)))
        log_dens[:, k] = -0.5 * (d * np.log(2.0 * np.pi) + log_det + np.sum(white**2, axis=0))
    return log_dens, factors


def _responsibilities(x: np.ndarray, model: GaussianMixture):
    log_dens, factors = _component_log_densities(x, model)
    log_joint = log_dens + np.log(np.maximum(model.weights, 1e-300))[None, :]
    per_sample = logsumexp(log_joint, axis=1)
    return np.exp(log_joint - per_sample[:, None]), per_sample, factors


def init_gmm(x: np.ndarray, K: int) -> GaussianMixture:
    """Split the samples into K quantile groups along their first principal axis."""
    x = np.asarray(x, dtype=float)
    m, d = x.shape
    if m < K:
        raise MetricError(f"need at least {K} samples to seed {K} mixture components")
    centered = x - x.mean(axis=0)
    covariance = centered.T @ centered / m
    if d > 1 and np.trace(covariance) > 0:
        _, axis = first_principal_component(covariance)
        scores = centered @ axis
    else:
        scores = centered[:, 0]
    order = np.argsort(scores, kind="stable")
    ridge = _ridge(x)
    means, covariances = [], []
    for group in np.array_split(order, K):
        means.append(x[group].mean(axis=0))
        dev = x[group] - means[-1]
        covariances.append(dev.T @ dev / len(group) + ridge * np.eye(d))
    return GaussianMixture(np.full(K, 1.0 / K), np.array(means), np.array(covariances))


def _ridge(x: np.ndarray) -> float:
    variance = float(np.mean(np.var(x, axis=0)))
    return 1e-6 * variance if variance > 0 else 1e-12


def gmm_em_step(data, model: GaussianMixture) -> GaussianMixture:
    """One EM update of weights, means and ridge-regularized covariances."""
    x = data.tuples if isinstance(data, MetricContext) else np.asarray(data, dtype=float)
    m, d = x.shape
    resp, _, _ = _responsibilities(x, model)
    counts = resp.sum(axis=0)
    ridge = _ridge(x)
    pooled = np.cov(x, rowvar=False, bias=True).reshape(d, d) + ridge * np.eye(d)

    weights = counts / m
    means = np.array(model.means, copy=True)
    covariances = np.array(model.covariances, copy=True)
    for k in range(model.K):
        if counts[k] <= 1e-12:
            logger.warning(f"Mixture component {k} lost all responsibility; resetting to pooled covariance")
            covariances[k] = pooled
            continue
        means[k] = resp[:, k] @ x / counts[k]
        dev = x - means[k]
        cov = (resp[:, k, None] * dev).T @ dev / counts[k] + ridge * np.eye(d)
        try:
            linalg.cholesky(cov, lower=True)
        except linalg.LinAlgError:
            logger.warning(f"Mixture component {k} has a singular covariance; resetting to pooled covariance")
            cov = pooled
        covariances[k] = cov
    return GaussianMixture(weights, means, covariances)


def gmm_loglik(data, model: GaussianMixture) -> MetricValue:
    """Mean per-sample log-likelihood of the intensity tuples under the mixture."""
    ctx = data if isinstance(data, MetricContext) else None
    x = ctx.tuples if ctx is not None else np.asarray(data, dtype=float)
    resp, per_sample, factors = _responsibilities(x, model)
    value = float(per_sample.mean())
    if ctx is None:
        return MetricValue(value=value, gradient=[])
    dx = np.zeros_like(x)
    for k in range(model.K):
        precision_dev = linalg.cho_solve((factors[k], True), (x - model.means[k]).T).T
        dx -= resp[:, k, None] * precision_dev
    dx /= x.shape[0]
    return MetricValue(value=value, gradient=ctx.chain(dx.T))


def evaluate_metric(
    key: str,
    ctx: MetricContext,
    congealing_sigma: float = 0.05,
    gmm: Optional[GaussianMixture] = None,
) -> MetricValue:
    if key in ("xmetric", "xmetric-gt"):
        return xmetric(ctx)
    if key == "cg":
        return congealing(ctx, congealing_sigma)
    if key == "ape":
        return ape(ctx)
    if key == "cte":
        return cte(ctx)
    if key == "vi":
        return vi(ctx)
    if key == "gmm":
        if gmm is None:
            raise MetricError("the mixture metric needs a fitted model")
        return gmm_loglik(ctx, gmm)
    raise MetricError(f"unknown metric key: {key}")
