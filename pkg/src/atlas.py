#!/usr/bin/env python3
# Copyright 2026 darc-atlas contributors
# See LICENSE file for licensing details.

"""Groupwise atlas construction by coordinate descent.

Each outer iteration registers every subject to the current atlas, centers the resulting
deformations so that they sum to zero, then updates the atlas with the deformations fixed.
"""

import dataclasses
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Optional, Sequence, Tuple

import numpy as np

from darc_config import LossConfig, Metric, OptimConfig
from fields import (
    FieldError,
    LabelVolume,
    ScalarVolume,
    VectorField,
    check_same_grid,
    stack_values,
)
from loss import NonFiniteLossError, dissimilarity_arrays, evaluate_subject
from segmentation import dice, vote_labels
from transform import exp_velocity, folding_fraction, warp_array, warp_labels_nn

logger = logging.getLogger(__name__)


class AtlasStageError(RuntimeError):
    """Exception raised when a stage of the atlas pipeline fails."""

    def __init__(
        self,
        msg: str,
        stage: str,
        subject: Optional[int] = None,
        iteration: Optional[int] = None,
        epoch: Optional[int] = None,
        batch: Optional[int] = None,
    ):
        """Initialize a new instance of the AtlasStageError exception.

        Args:
            msg (str): Explanation of the error.
            stage (str): Pipeline stage that failed (``register``, ``atlas-update``, ...).
            subject (int): Index of the subject being processed, if any.
            iteration (int): Optimizer step at which the failure happened, if any.
            epoch (int): Atlas-update epoch, if any.
            batch (int): Atlas-update mini-batch, if any.
        """
        self.msg = msg
        self.stage = stage
        self.subject = subject
        self.iteration = iteration
        self.epoch = epoch
        self.batch = batch
        super().__init__(self.describe())

    def describe(self) -> str:
        """Stage-tagged one-line description."""
        context = []
        if self.subject is not None:
            context.append(f"subject {self.subject}")
        if self.iteration is not None:
            context.append(f"iteration {self.iteration}")
        if self.epoch is not None:
            context.append(f"epoch {self.epoch}")
        if self.batch is not None:
            context.append(f"batch {self.batch}")
        where = f" {', '.join(context)}" if context else ""
        return f"[build/{self.stage}]{where}: {self.msg}"

    @property
    def numerical(self) -> bool:
        """Whether a non-finite objective caused the failure."""
        cause = self.__cause__
        while cause is not None:
            if isinstance(cause, NonFiniteLossError):
                return True
            cause = cause.__cause__
        return False


@dataclasses.dataclass(frozen=True)
class AdamState:
    """First and second moments plus step counter of one optimized variable."""

    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros_like(cls, var: np.ndarray) -> "AdamState":
        """Return a fresh state for ``var``."""
        return cls(m=np.zeros_like(var, dtype=np.float64), v=np.zeros_like(var, dtype=np.float64))


def adam_step(
    var: np.ndarray,
    grad: np.ndarray,
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> Tuple[np.ndarray, AdamState]:
    """Apply one bias-corrected Adam update; returns the new variable and state."""
    if var.shape != grad.shape or state.m.shape != var.shape:
        raise FieldError(
            f"Adam shapes differ: var {var.shape}, grad {grad.shape}, state {state.m.shape}"
        )
    t = state.t + 1
    m = beta1 * state.m + (1.0 - beta1) * grad
    v = beta2 * state.v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**t)
    v_hat = v / (1.0 - beta2**t)
    return var - lr * m_hat / (np.sqrt(v_hat) + eps), AdamState(m=m, v=v, t=t)


def _adam_from(opt: OptimConfig) -> Callable[..., Tuple[np.ndarray, AdamState]]:
    def step(var: np.ndarray, grad: np.ndarray, state: AdamState):
        return adam_step(
            var, grad, state, opt.learn_rate, opt.adam_beta1, opt.adam_beta2, opt.adam_eps
        )

    return step


@dataclasses.dataclass(frozen=True)
class PairwiseRegistration:
    """Outcome of registering one image to the atlas."""

    velocity: VectorField
    losses: List[float]
    data: float
    regularization: float


def register_pairwise(
    image: ScalarVolume,
    atlas: ScalarVolume,
    cfg: LossConfig,
    opt: OptimConfig,
    init: Optional[VectorField] = None,
) -> PairwiseRegistration:
    """Optimize the stationary velocity aligning ``image`` to ``atlas`` with Adam.

    ``losses`` holds the objective before each of the ``inner_iters`` steps followed by the
    value at the returned velocity.
    """
    grid = check_same_grid(image, atlas)
    velocity = np.zeros((3, *grid.dims)) if init is None else np.array(init.values)
    scale = np.ones((3, 1, 1, 1))
    if opt.normalized_step:
        scale = np.asarray(grid.normalized_scale).reshape(3, 1, 1, 1)

    def evaluate(iteration: int, theta: np.ndarray):
        try:
            return evaluate_subject(image.values, atlas.values, theta * scale, cfg, opt.exp_steps)
        except NonFiniteLossError as e:
            raise AtlasStageError(e.msg, stage="register", iteration=iteration) from e

    step = _adam_from(opt)
    theta = velocity / scale
    state = AdamState.zeros_like(theta)
    evaluation = evaluate(0, theta)
    losses: List[float] = [evaluation.loss]
    for iteration in range(1, opt.inner_iters + 1):
        theta, state = step(theta, evaluation.grad * scale, state)
        evaluation = evaluate(iteration, theta)
        losses.append(evaluation.loss)
        if iteration % 50 == 0:
            logger.debug("Registration step %d: loss %.6g", iteration, evaluation.loss)

    return PairwiseRegistration(
        velocity=VectorField(grid=grid, values=theta * scale),
        losses=losses,
        data=evaluation.data,
        regularization=evaluation.regularization,
    )


def centrality_norm(fields: Sequence[VectorField]) -> float:
    """Largest absolute per-channel voxel mean of the sum of the displacements."""
    total = stack_values(fields).sum(axis=0)
    return float(np.max(np.abs(total.reshape(3, -1).mean(axis=1))))


def centrality_activation(fields: Sequence[VectorField]) -> List[VectorField]:
    """Subtract the voxelwise mean displacement so the fields sum to zero."""
    if not fields:
        raise FieldError("Centrality activation needs at least one field")
    grid = check_same_grid(*fields)
    stack = stack_values(fields)
    mean = stack.mean(axis=0)
    return [VectorField(grid=grid, values=values - mean) for values in stack]


def update_atlas_closed_form(warped: Sequence[ScalarVolume], metric: Metric) -> ScalarVolume:
    """Exact atlas minimizer for fixed deformations: voxelwise mean (MSE) or lower median (L1)."""
    if not warped:
        raise FieldError("Atlas update needs at least one warped image")
    grid = check_same_grid(*warped)
    stack = stack_values(warped)
    if metric == Metric.MSE:
        return ScalarVolume(grid=grid, values=stack.mean(axis=0))
    if metric == Metric.L1:
        # lower median keeps every output value in the input value set
        ordered = np.sort(stack, axis=0)
        return ScalarVolume(grid=grid, values=ordered[(len(warped) - 1) // 2])
    raise FieldError(f"No closed-form atlas update for metric {metric!r}")


def update_atlas_sgd(
    images: Sequence[ScalarVolume],
    deformations: Sequence[VectorField],
    atlas: ScalarVolume,
    cfg: LossConfig,
    opt: OptimConfig,
    rng: Optional[np.random.Generator] = None,
) -> ScalarVolume:
    """Mini-batch Adam on the atlas with the deformations fixed.

    Only the images of the current batch are warped at any time.
    """
    if not images or len(images) != len(deformations):
        raise FieldError(
            f"Atlas update needs matching non-empty lists, got {len(images)} images "
            f"and {len(deformations)} deformations"
        )
    grid = check_same_grid(atlas, *images, *deformations)
    rng = np.random.default_rng(opt.seed) if rng is None else rng
    step = _adam_from(opt)
    values = np.array(atlas.values)
    state = AdamState.zeros_like(values)
    n = len(images)
    for epoch in range(opt.atlas_epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for batch, start in enumerate(range(0, n, opt.batch_size)):
            grad = np.zeros(grid.dims)
            for i in order[start : start + opt.batch_size]:
                warped = warp_array(images[i].values, deformations[i].values)
                loss, _, grad_atlas = dissimilarity_arrays(warped, values, cfg)
                if not np.isfinite(loss) or not np.all(np.isfinite(grad_atlas)):
                    raise AtlasStageError(
                        f"non-finite {cfg.metric} loss against subject {i}",
                        stage="atlas-update",
                        epoch=epoch,
                        batch=batch,
                    )
                epoch_loss += loss
                grad += grad_atlas
            values, state = step(values, grad, state)
        logger.debug("Atlas epoch %d: mean data term %.6g", epoch, epoch_loss / n)
    return ScalarVolume(grid=grid, values=values)


@dataclasses.dataclass(frozen=True)
class IterationRecord:
    """Log entry of one outer iteration."""

    iteration: int
    loss: float
    data_before_update: float
    data_after_update: float
    regularization: float
    centrality_before: float
    centrality_after: float
    folding_pct: float
    dice: Optional[float] = None

    def as_row(self) -> dict:
        """Return the record as a CSV row mapping."""
        return dataclasses.asdict(self)


@dataclasses.dataclass(frozen=True)
class AtlasResult:
    """Atlas, per-subject fields and the per-iteration log of a build."""

    atlas: ScalarVolume
    velocities: List[VectorField]
    forward_deformations: List[VectorField]
    backward_deformations: List[VectorField]
    warped_images: List[ScalarVolume]
    log: List[IterationRecord]
    timings: List[float]


def _mean_data_term(
    images: Sequence[ScalarVolume],
    deformations: Sequence[VectorField],
    atlas: ScalarVolume,
    cfg: LossConfig,
) -> float:
    total = 0.0
    for image, deformation in zip(images, deformations):
        warped = warp_array(image.values, deformation.values)
        total += dissimilarity_arrays(warped, atlas.values, cfg)[0]
    return total / len(images)


def _label_agreement(labels: Sequence[LabelVolume], deformations: Sequence[VectorField]) -> float:
    warped = [warp_labels_nn(mask, phi) for mask, phi in zip(labels, deformations)]
    consensus = vote_labels(warped)
    foreground = sorted({label for mask in labels for label in mask.label_set()} - {0})
    if not foreground:
        return 1.0
    return float(np.mean([dice(mask, consensus, foreground).mean for mask in warped]))


def _register_all(
    images: Sequence[ScalarVolume],
    atlas: ScalarVolume,
    cfg: LossConfig,
    opt: OptimConfig,
    previous: Sequence[VectorField],
) -> List[PairwiseRegistration]:
    with ThreadPoolExecutor(max_workers=min(opt.workers, len(images))) as pool:
        futures = [
            pool.submit(
                register_pairwise, image, atlas, cfg, opt, previous[i] if opt.warm_start else None
            )
            for i, image in enumerate(images)
        ]
        results = []
        for subject, future in enumerate(futures):
            try:
                results.append(future.result())
            except AtlasStageError as e:
                raise AtlasStageError(
                    e.msg, stage=e.stage, subject=subject, iteration=e.iteration
                ) from e.__cause__
            except (FieldError, ArithmeticError) as e:
                raise AtlasStageError(str(e), stage="register", subject=subject) from e
    return results


def build_atlas(
    images: Sequence[ScalarVolume],
    cfg: LossConfig,
    opt: OptimConfig,
    labels: Optional[Sequence[LabelVolume]] = None,
    on_iteration: Optional[Callable[[int, ScalarVolume], None]] = None,
) -> AtlasResult:
    """Run the coordinate-descent atlas construction.

    Args:
        images: Intensity-normalized volumes sharing one grid.
        cfg: Objective settings.
        opt: Optimizer settings.
        labels: Optional ground-truth masks; enables the per-iteration ``dice`` column.
        on_iteration: Called with the iteration number and the updated atlas.

    Returns:
        The atlas, the velocities, the centered forward and the backward deformations,
        the warped images and the iteration log.
    """
    if len(images) < 2:
        raise FieldError(f"An atlas needs at least 2 images, got {len(images)}")
    grid = check_same_grid(*images)
    if labels is not None:
        if len(labels) != len(images):
            raise FieldError(f"Got {len(labels)} label volumes for {len(images)} images")
        check_same_grid(*images, *labels)

    atlas = ScalarVolume(grid=grid, values=stack_values(images).mean(axis=0))
    velocities = [VectorField.zeros(grid) for _ in images]
    centered: List[VectorField] = []
    records: List[IterationRecord] = []
    timings: List[float] = []
    logger.info(
        "Building atlas from %d images on %s grid (metric %s, lambda %g)",
        len(images),
        grid.dims,
        cfg.metric,
        cfg.lam,
    )

    for iteration in range(1, opt.outer_iters + 1):
        started = time.perf_counter()
        registrations = _register_all(images, atlas, cfg, opt, velocities)
        velocities = [r.velocity for r in registrations]

        try:
            forward = [exp_velocity(v, opt.exp_steps) for v in velocities]
            centrality_before = centrality_norm(forward)
            centered = centrality_activation(forward)
            centrality_after = centrality_norm(centered)
        except FieldError as e:
            raise AtlasStageError(str(e), stage="centrality") from e
        folding = max(folding_fraction(phi) for phi in centered)
        if folding > 0:
            logger.warning("Centered deformations fold %.4f%% of voxels", folding)

        data_before = _mean_data_term(images, centered, atlas, cfg)
        if cfg.closed_form:
            warped = [
                ScalarVolume(grid=grid, values=warp_array(image.values, phi.values))
                for image, phi in zip(images, centered)
            ]
            atlas = update_atlas_closed_form(warped, Metric(cfg.metric))
        else:
            rng = np.random.default_rng([opt.seed, iteration])
            atlas = update_atlas_sgd(images, centered, atlas, cfg, opt, rng)
        data_after = _mean_data_term(images, centered, atlas, cfg)

        record = IterationRecord(
            iteration=iteration,
            loss=float(np.mean([r.losses[-1] for r in registrations])),
            data_before_update=data_before,
            data_after_update=data_after,
            regularization=float(np.mean([r.regularization for r in registrations])),
            centrality_before=centrality_before,
            centrality_after=centrality_after,
            folding_pct=folding,
            dice=_label_agreement(labels, centered) if labels is not None else None,
        )
        records.append(record)
        timings.append(time.perf_counter() - started)
        logger.info(
            "Outer iteration %d/%d: data term %.6g -> %.6g, centrality %.3g -> %.3g, "
            "folding %.3f%%",
            iteration,
            opt.outer_iters,
            data_before,
            data_after,
            centrality_before,
            centrality_after,
            folding,
        )
        if on_iteration is not None:
            on_iteration(iteration, atlas)

    return AtlasResult(
        atlas=atlas,
        velocities=velocities,
        forward_deformations=centered,
        backward_deformations=[exp_velocity(-v, opt.exp_steps) for v in velocities],
        warped_images=[
            ScalarVolume(grid=grid, values=warp_array(image.values, phi.values))
            for image, phi in zip(images, centered)
        ],
        log=records,
        timings=timings,
    )
