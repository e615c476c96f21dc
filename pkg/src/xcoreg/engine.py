"""Alternating co-registration driver.

Each iteration updates the common anatomy (posterior and prior) from the
current warped images, then takes one Adam step on every transform against
the negated metric plus the bending-energy penalty.
"""

import logging
import time
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from src.xcoreg.core import (
    downsample_volume,
    draw_samples,
    effective_factor,
    resample_field,
    smooth_volume,
)
from src.xcoreg.density import (
    appearance_from_posterior,
    init_common_space,
    kernel_matrix,
    log_likelihood,
    posterior_update,
    prior_update,
)
from src.xcoreg.errors import (
    DimensionMismatchError,
    EmptyOverlapError,
    InsufficientImagesError,
    MetricError,
    MixedDimensionalityError,
    NonFiniteGradientError,
    NonFiniteLossError,
)
from src.xcoreg.metrics import (
    LOW_RELIABILITY_STACK,
    GaussianMixture,
    build_context,
    evaluate_metric,
    gmm_em_step,
    gmm_loglik,
    init_gmm,
    resample_group,
    xmetric,
)
from src.xcoreg.models import (
    AppearanceTable,
    Binning,
    CommonSpace,
    CoRegConfig,
    Grid,
    IterationTrace,
    PyramidLevel,
    TraceEntry,
    Volume,
)
from src.xcoreg.transforms import (
    FFD,
    ChainTransform,
    Rigid,
    Transform,
    TransformGroup,
    Translation,
    bending_energy,
    identity_like,
    project_zero_mean,
)

logger = logging.getLogger(__name__)

STAGES = ("xcoreg", "translation", "rigid", "ffd")


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(m=np.zeros(n), v=np.zeros(n))


def adam_step(params, gradient, state: AdamState, eta) -> Tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam descent step; ``eta`` is a scalar or one value per parameter."""
    params = np.asarray(params, dtype=float)
    gradient = np.asarray(gradient, dtype=float)
    if gradient.shape != params.shape or state.m.shape != params.shape:
        raise DimensionMismatchError(
            f"Adam shapes disagree: params {params.shape}, gradient {gradient.shape}, state {state.m.shape}"
        )
    if not np.all(np.isfinite(gradient)):
        raise NonFiniteGradientError("gradient contains NaN or Inf")
    step = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * gradient
    v = state.beta2 * state.v + (1.0 - state.beta2) * gradient**2
    m_hat = m / (1.0 - state.beta1**step)
    v_hat = v / (1.0 - state.beta2**step)
    updated = params - np.asarray(eta) * m_hat / (np.sqrt(v_hat) + state.eps)
    return updated, AdamState(m, v, step, state.beta1, state.beta2, state.eps)


def check_convergence(trace, window: int = 10, rtol: float = 1e-5) -> bool:
    """True when the mean loss over the last ``window`` iterations stopped moving.

    Compares the trailing window with the same window shifted back by one
    iteration, relative to the earlier mean.
    """
    losses = trace.losses if isinstance(trace, IterationTrace) else list(trace)
    if len(losses) < window + 1:
        return False
    current = float(np.mean(losses[-window:]))
    previous = float(np.mean(losses[-window - 1 : -1]))
    return abs(current - previous) <= rtol * max(abs(previous), 1e-12)


@dataclass
class CoRegResult:
    transforms: TransformGroup
    common_space: Optional[CommonSpace]
    trace: IterationTrace
    grid: Grid
    appearance: List[AppearanceTable] = field(default_factory=list)
    diagnostics: Dict[str, Any] = field(default_factory=dict)


def _check_group(images: Sequence[Volume], minimum: int = 2) -> None:
    if len(images) < minimum:
        raise InsufficientImagesError(f"groupwise registration needs at least {minimum} images, got {len(images)}")
    ndims = {v.grid.ndim for v in images}
    if len(ndims) != 1:
        raise MixedDimensionalityError(f"images mix dimensionalities {sorted(ndims)}")


class CoRegEngine:
    """Runs pyramid schedules of the alternating optimization for one image group.

    The first image's grid is the common space. Intensity binnings are fixed
    once from the unfiltered volumes so tables are comparable across levels.
    """

    def __init__(self, images: Sequence[Volume], cfg: CoRegConfig, appearance: Optional[List[AppearanceTable]] = None):
        _check_group(images)
        if cfg.metric == "xmetric-gt" and not appearance:
            raise MetricError("xmetric-gt needs a fixed appearance table for every image")
        if appearance and len(appearance) != len(images):
            raise MetricError(f"got {len(appearance)} appearance tables for {len(images)} images")
        self.images = list(images)
        self.cfg = cfg
        self.grid = self.images[0].grid
        self.constraint_points = self.grid.points()
        self.binnings = [Binning.from_values(v.data, L=cfg.L, h=cfg.bandwidth) for v in self.images]
        self.fixed_appearance = appearance
        self.K = appearance[0].K if appearance else cfg.K
        self.trace = IterationTrace()
        self.common_space: Optional[CommonSpace] = None
        self.gamma_grid: Optional[Grid] = None
        self.appearance: List[AppearanceTable] = list(appearance or [])
        self.gmm: Optional[GaussianMixture] = None
        self.monotone_steps = 0
        self.posterior_steps = 0
        if cfg.metric == "cg" and len(self.images) < LOW_RELIABILITY_STACK:
            logger.warning(
                f"Congealing with N={len(self.images)} images gives an unreliable stack density "
                f"(at least {LOW_RELIABILITY_STACK} recommended)"
            )

    @property
    def uses_common_space(self) -> bool:
        return self.cfg.metric in ("xmetric", "xmetric-gt")

    def run_stage(
        self,
        group: TransformGroup,
        pyramid: Sequence[PyramidLevel],
        stage: str,
        lam: Optional[float] = None,
        images: Optional[Sequence[Volume]] = None,
    ) -> TransformGroup:
        lam = self.cfg.lam if lam is None else lam
        images = self.images if images is None else list(images)
        stage_index = STAGES.index(stage) if stage in STAGES else len(STAGES)
        if group.zero_mean:
            group = project_zero_mean(group, points=self.constraint_points)
        for level_index, level in enumerate(pyramid):
            if len(self.trace) >= self.cfg.T:
                logger.warning(f"Iteration budget T={self.cfg.T} spent before stage {stage} level {level_index}")
                break
            factor = effective_factor(self.grid, level.factor)
            level_grid = self.grid.downsample(factor)
            level_images = [downsample_volume(smooth_volume(v, level.sigma), factor) for v in images]
            logger.info(
                f"Stage {stage} level {level_index}: sigma={level.sigma}, factor={factor}, "
                f"grid={list(level_grid.dims)}, iterations={level.iterations}"
            )
            self._prepare_common_space(level_grid)
            group = self._run_level(group, level_images, level_grid, level, level_index, stage, stage_index, lam)
        return group

    def _prepare_common_space(self, level_grid: Grid) -> None:
        if not self.uses_common_space:
            return
        if self.common_space is None:
            self.common_space = init_common_space(
                level_grid, self.K, rng_seed=self.cfg.rng_seed, uniform=self.cfg.warm_start
            )
        elif self.gamma_grid != level_grid:
            gamma = np.clip(resample_field(self.common_space.gamma, self.gamma_grid, level_grid), 0.0, None)
            gamma /= gamma.sum(axis=1, keepdims=True)
            self.common_space = CommonSpace(gamma=gamma, pi=self.common_space.pi)
        self.gamma_grid = level_grid

    def _sample(self, level_grid: Grid, inside: np.ndarray, seed: List[int]) -> np.ndarray:
        sample = draw_samples(level_grid, self.cfg.sample_rate, rng_seed=seed).with_inside(inside)
        chosen = sample.indices[sample.overlap]
        if chosen.size == 0:
            logger.warning("No sampled point inside the overlap region; using the whole overlap")
            chosen = np.flatnonzero(np.all(inside, axis=0))
        return chosen

    def _update_common_space(self, values: np.ndarray, overlap: np.ndarray, subset: np.ndarray) -> None:
        cs = self.common_space
        if self.fixed_appearance is not None:
            tables = self.fixed_appearance
        else:
            tables = [
                appearance_from_posterior(values[j, subset], cs.gamma[subset], self.binnings[j])
                for j in range(len(values))
            ]
        covered = np.flatnonzero(overlap)
        kernels = (kernel_matrix(values[j, covered], self.binnings[j])[0] for j in range(len(values)))
        gamma = np.array(cs.gamma, copy=True)
        gamma[covered] = posterior_update(tables, cs.pi, kernels)
        pi = prior_update(gamma[subset])
        self.appearance = list(tables)
        self.common_space = CommonSpace(gamma=gamma, pi=pi)

    def _metric(self, ctx):
        if self.cfg.metric == "gmm":
            if self.gmm is None or self.gmm.means.shape[1] != ctx.n_images:
                self.gmm = init_gmm(ctx.tuples, self.K)
            self.gmm = gmm_em_step(ctx, self.gmm)
            return gmm_loglik(ctx, self.gmm)
        return evaluate_metric(self.cfg.metric, ctx, congealing_sigma=self.cfg.congealing_sigma)

    def _run_level(
        self,
        group: TransformGroup,
        images: List[Volume],
        level_grid: Grid,
        level: PyramidLevel,
        level_index: int,
        stage: str,
        stage_index: int,
        lam: float,
    ) -> TransformGroup:
        cfg = self.cfg
        points = level_grid.points()
        eta = np.array([cfg.step_size(g) for g in group.param_groups()])
        state = AdamState.zeros(eta.size)
        level_losses: List[float] = []

        for t in range(min(level.iterations, cfg.T - len(self.trace))):
            started = time.perf_counter()
            values, inside, grads = resample_group(images, group.members, points, workers=cfg.workers)
            overlap = np.all(inside, axis=0)
            if not np.any(overlap):
                logger.error(f"Overlap region vanished at stage {stage}, level {level_index}, iteration {t}")
                raise EmptyOverlapError(
                    f"overlap region is empty at stage {stage}, level {level_index}, iteration {t}"
                )
            draw = 0 if cfg.deterministic else t
            subset = self._sample(level_grid, inside, [cfg.rng_seed, stage_index, level_index, draw])
            if cfg.independent_joint_sample:
                joint_subset = self._sample(level_grid, inside, [cfg.rng_seed, stage_index, level_index, draw, 1])
            else:
                joint_subset = subset

            metric_pre = None
            loglik = None
            pi: List[float] = []
            if self.uses_common_space:
                old_gamma = self.common_space.gamma
                self._update_common_space(values, overlap, subset)
                pi = self.common_space.pi.tolist()

            ctx = build_context(
                images,
                group.members,
                points[joint_subset],
                self.binnings,
                gamma=None if self.common_space is None else self.common_space.gamma[joint_subset],
                pi=None if self.common_space is None else self.common_space.pi,
                resampled=(values[:, joint_subset], inside[:, joint_subset], grads[:, joint_subset]),
            )
            metric = self._metric(ctx)
            if self.uses_common_space:
                metric_pre = xmetric(ctx, old_gamma[joint_subset]).value
                loglik = log_likelihood(self.appearance, self.common_space.pi, ctx.kernel_weights())
                self.posterior_steps += 1
                if metric.value >= metric_pre - 1e-12:
                    self.monotone_steps += 1
            elif self.gmm is not None:
                pi = self.gmm.weights.tolist()

            penalty = 0.0
            penalty_grads = []
            for member in group.members:
                value, grad = bending_energy(member)
                penalty += value
                penalty_grads.append(grad)
            loss = -metric.value + lam * penalty
            gradient = -metric.flat_gradient() + lam * np.concatenate(penalty_grads)
            grad_norm = float(np.linalg.norm(gradient))

            if not np.isfinite(loss):
                logger.error(f"Non-finite loss at stage {stage}, level {level_index}, iteration {t}")
                raise NonFiniteLossError(f"loss became {loss} at stage {stage}, iteration {t}", trace=self.trace)

            params, state = adam_step(group.flat_params(), gradient, state, eta)
            group = group.with_flat_params(params)
            if group.zero_mean:
                group = project_zero_mean(group, points=self.constraint_points)

            entry = TraceEntry(
                iteration=len(self.trace),
                stage=stage,
                level=level_index,
                metric=metric.value,
                metric_pre=metric_pre,
                log_likelihood=loglik,
                loss=loss,
                grad_norm=grad_norm,
                pi=pi,
                seconds=time.perf_counter() - started,
            )
            self.trace.append(entry)
            level_losses.append(loss)
            logger.debug(
                f"{stage}[{level_index}] iter {t}: metric={metric.value:.6f} loss={loss:.6f} |g|={grad_norm:.3e}"
            )
            if check_convergence(level_losses, cfg.convergence_window, cfg.convergence_rtol):
                logger.info(f"Stage {stage} level {level_index} converged after {t + 1} iterations")
                break
        return group

    def result(self, group: TransformGroup) -> CoRegResult:
        diagnostics: Dict[str, Any] = {}
        if self.posterior_steps:
            diagnostics["monotone_fraction"] = self.monotone_steps / self.posterior_steps
        return CoRegResult(
            transforms=group,
            common_space=self.common_space,
            trace=self.trace,
            grid=self.gamma_grid or self.grid,
            appearance=self.appearance,
            diagnostics=diagnostics,
        )


def _split_pyramid(pyramid: Sequence[PyramidLevel], parts: int) -> List[PyramidLevel]:
    return [
        PyramidLevel(sigma=level.sigma, factor=level.factor, iterations=max(1, level.iterations // parts))
        for level in pyramid
    ]


def _run_ffd_levels(
    engine: CoRegEngine,
    prefixes: List[List[Transform]],
    spacings: Sequence[float],
    pyramid: Sequence[PyramidLevel],
    lam: float,
    zero_mean: bool,
    images: Optional[Sequence[Volume]] = None,
) -> TransformGroup:
    """Optimize one FFD level after another, each new level chained after the finished ones."""
    level_pyramid = _split_pyramid(pyramid, len(spacings))
    group = None
    for spacing in spacings:
        ffd = FFD.for_grid(engine.grid, spacing)
        members = [ChainTransform(prefix, ffd) if prefix else ffd for prefix in prefixes]
        group = TransformGroup(members, zero_mean=zero_mean)
        logger.info(f"FFD level with mesh spacing {spacing} mm ({ffd.n_params} parameters per image)")
        group = engine.run_stage(group, level_pyramid, "ffd", lam=lam, images=images)
        prefixes = [
            (list(member.prefix) + [member.active]) if isinstance(member, ChainTransform) else [member]
            for member in group.members
        ]
    return group


def xcoreg(
    images: Sequence[Volume], cfg: CoRegConfig, appearance: Optional[List[AppearanceTable]] = None
) -> CoRegResult:
    """Groupwise co-registration with the configured metric and transform model."""
    engine = CoRegEngine(images, cfg, appearance=appearance)
    logger.info(
        f"Registering {len(images)} images: metric={cfg.metric}, transform={cfg.transform}, K={engine.K}"
    )
    if cfg.transform == "ffd":
        group = _run_ffd_levels(engine, [[] for _ in images], cfg.ffd_spacings, cfg.pyramid, cfg.lam, cfg.zero_mean)
    else:
        members = [identity_like(cfg.transform, engine.grid) for _ in images]
        group = engine.run_stage(TransformGroup(members, zero_mean=cfg.zero_mean), cfg.pyramid, "xcoreg")
    return engine.result(group)


def _translation_then_rigid(engine: CoRegEngine, images: Sequence[Volume], zero_mean: bool) -> TransformGroup:
    cfg = engine.cfg
    ndim = engine.grid.ndim
    group = TransformGroup([Translation.identity(ndim) for _ in images], zero_mean=zero_mean)
    group = engine.run_stage(group, cfg.translation_pyramid, "translation", images=images)
    center = engine.grid.center
    rigid = TransformGroup([Rigid.from_translation(t, center) for t in group.members], zero_mean=zero_mean)
    return engine.run_stage(rigid, cfg.rigid_pyramid, "rigid", images=images)


def staged_rigid(
    images: Sequence[Volume], cfg: CoRegConfig, appearance: Optional[List[AppearanceTable]] = None
) -> CoRegResult:
    """Translation-only registration followed by full rigid registration initialized from it."""
    engine = CoRegEngine(images, cfg, appearance=appearance)
    logger.info(f"Staged rigid registration of {len(images)} images with metric={cfg.metric}")
    group = _translation_then_rigid(engine, engine.images, cfg.zero_mean)
    return engine.result(group)


def motion_correct(
    sequence: Sequence[Volume], cfg: CoRegConfig, appearance: Optional[List[AppearanceTable]] = None
) -> CoRegResult:
    """Prefiltered translation, rigid and coarse FFD registration of a frame sequence, all unbiased."""
    _check_group(sequence, minimum=3)
    engine = CoRegEngine(sequence, cfg, appearance=appearance)
    frames = [smooth_volume(v, cfg.motion_prefilter_sigma) for v in engine.images]
    logger.info(f"Motion correction of {len(frames)} frames with metric={cfg.metric}")
    rigid = _translation_then_rigid(engine, frames, zero_mean=True)
    group = _run_ffd_levels(
        engine,
        [[member] for member in rigid.members],
        [cfg.motion_ffd_spacing],
        cfg.motion_pyramid,
        cfg.motion_lambda,
        zero_mean=True,
        images=frames,
    )
    return engine.result(group)


PIPELINES = {
    "xcoreg": xcoreg,
    "staged_rigid": staged_rigid,
    "motion_correct": motion_correct,
}
