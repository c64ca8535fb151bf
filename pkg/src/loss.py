#!/usr/bin/env python3
# Copyright 2026 darc-atlas contributors
# See LICENSE file for licensing details.

"""Dissimilarity metrics, diffusion regularizer and the per-subject objective with its adjoint."""

import dataclasses
import logging
from typing import Sequence, Tuple

import numpy as np
from scipy.ndimage import uniform_filter

from darc_config import LossConfig, Metric, RegularizeOn
from fields import (
    FieldError,
    ScalarVolume,
    VectorField,
    check_same_grid,
    gradient_adjoint,
    gradient_arrays,
)
from kernels import trilinear_gather_grad, trilinear_scatter
from transform import DEFAULT_EXP_STEPS, displaced_points, exp_velocity_trace, to_channels

logger = logging.getLogger(__name__)

UNIT_SCALE = (1.0, 1.0, 1.0)


class NonFiniteLossError(ArithmeticError):
    """Exception raised when an objective evaluates to a non-finite value."""

    def __init__(self, msg: str):
        """Initialize a new instance of the NonFiniteLossError exception.

        Args:
            msg (str): Diagnostic describing where the value appeared.
        """
        super().__init__(msg)
        self.msg = msg


def _box(values: np.ndarray, size: int) -> np.ndarray:
    # symmetric under zero padding, so it is its own adjoint
    return uniform_filter(values, size=size, mode="constant", cval=0.0)


class _WindowMean:
    """Mean over the in-bounds voxels of each cubic window, and its adjoint."""

    def __init__(self, shape: Tuple[int, ...], size: int):
        self.size = size
        self.count = _box(np.ones(shape), size)

    def __call__(self, values: np.ndarray) -> np.ndarray:
        return _box(values, self.size) / self.count

    def adjoint(self, upstream: np.ndarray) -> np.ndarray:
        return _box(upstream / self.count, self.size)


def _mse(w: np.ndarray, a: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    diff = w - a
    grad = 2.0 * diff / diff.size
    return float(np.mean(diff * diff)), grad, -grad


def _l1(w: np.ndarray, a: np.ndarray) -> Tuple[float, np.ndarray, np.ndarray]:
    diff = w - a
    grad = np.sign(diff) / diff.size
    return float(np.mean(np.abs(diff))), grad, -grad


def _ncc(
    w: np.ndarray, a: np.ndarray, size: int, eps: float
) -> Tuple[float, np.ndarray, np.ndarray]:
    n = w.size
    mean = _WindowMean(w.shape, size)
    mu_w = mean(w)
    mu_a = mean(a)
    s_ww = mean(w * w) - mu_w * mu_w
    s_aa = mean(a * a) - mu_a * mu_a
    s_wa = mean(w * a) - mu_w * mu_a
    live_w = s_ww > eps
    live_a = s_aa > eps
    p_w = np.where(live_w, s_ww, eps)
    p_a = np.where(live_a, s_aa, eps)
    cc = s_wa * s_wa / (p_w * p_a)
    loss = 1.0 - float(np.mean(cc))

    g_wa = -2.0 * s_wa / (p_w * p_a) / n
    g_ww = np.where(live_w, cc / p_w, 0.0) / n
    g_aa = np.where(live_a, cc / p_a, 0.0) / n
    g_mu_w = -2.0 * mu_w * g_ww - mu_a * g_wa
    g_mu_a = -2.0 * mu_a * g_aa - mu_w * g_wa
    b_wa = mean.adjoint(g_wa)
    grad_w = 2.0 * w * mean.adjoint(g_ww) + a * b_wa + mean.adjoint(g_mu_w)
    grad_a = 2.0 * a * mean.adjoint(g_aa) + w * b_wa + mean.adjoint(g_mu_a)
    return loss, grad_w, grad_a


def _ssim(
    w: np.ndarray, a: np.ndarray, size: int, c1: float, c2: float
) -> Tuple[float, np.ndarray, np.ndarray]:
    n = w.size
    mean = _WindowMean(w.shape, size)
    mu_w = mean(w)
    mu_a = mean(a)
    s_ww = mean(w * w) - mu_w * mu_w
    s_aa = mean(a * a) - mu_a * mu_a
    s_wa = mean(w * a) - mu_w * mu_a
    num_mu = 2.0 * mu_w * mu_a + c1
    num_s = 2.0 * s_wa + c2
    den_mu = mu_w * mu_w + mu_a * mu_a + c1
    den_s = s_ww + s_aa + c2
    den = den_mu * den_s
    ssim = num_mu * num_s / den
    loss = 1.0 - float(np.mean(ssim))

    g = -1.0 / n
    g_ww = -g * ssim / den_s
    g_aa = g_ww
    g_wa = g * 2.0 * num_mu / den
    g_mu_w = g * (2.0 * mu_a * num_s / den - 2.0 * mu_w * ssim / den_mu)
    g_mu_a = g * (2.0 * mu_w * num_s / den - 2.0 * mu_a * ssim / den_mu)
    g_mu_w = g_mu_w - 2.0 * mu_w * g_ww - mu_a * g_wa
    g_mu_a = g_mu_a - 2.0 * mu_a * g_aa - mu_w * g_wa
    b_wa = mean.adjoint(g_wa)
    grad_w = 2.0 * w * mean.adjoint(g_ww) + a * b_wa + mean.adjoint(g_mu_w)
    grad_a = 2.0 * a * mean.adjoint(g_aa) + w * b_wa + mean.adjoint(g_mu_a)
    return loss, grad_w, grad_a


def dissimilarity_arrays(
    warped: np.ndarray, atlas: np.ndarray, cfg: LossConfig
) -> Tuple[float, np.ndarray, np.ndarray]:
    """Data term and its gradients w.r.t. the warped image and the atlas."""
    if cfg.metric == Metric.MSE:
        return _mse(warped, atlas)
    if cfg.metric == Metric.L1:
        return _l1(warped, atlas)
    if cfg.metric == Metric.NCC:
        return _ncc(warped, atlas, cfg.ncc_window, cfg.ncc_eps)
    if cfg.metric == Metric.SSIM:
        return _ssim(warped, atlas, cfg.ssim_window, cfg.ssim_c1, cfg.ssim_c2)
    raise FieldError(f"Unknown dissimilarity metric {cfg.metric!r}")


def dissimilarity(
    warped: ScalarVolume, atlas: ScalarVolume, cfg: LossConfig
) -> Tuple[float, ScalarVolume, ScalarVolume]:
    """Return the data term with ``dL/dW`` and ``dL/dA``."""
    grid = check_same_grid(warped, atlas)
    loss, grad_w, grad_a = dissimilarity_arrays(warped.values, atlas.values, cfg)
    return loss, ScalarVolume(grid=grid, values=grad_w), ScalarVolume(grid=grid, values=grad_a)


def regularizer_array(
    displacement: np.ndarray, lam: float, scale: Sequence[float] = UNIT_SCALE
) -> Tuple[float, np.ndarray]:
    """``lam`` times the per-voxel mean of squared finite differences, with its adjoint.

    Channel ``c`` is divided by ``scale[c]`` before differencing, so ``scale`` of
    ``(n - 1) / 2`` evaluates the penalty in normalized grid units.
    """
    if lam < 0:
        raise FieldError(f"Regularization weight must be >= 0, got {lam}")
    n = displacement[0].size
    total = 0.0
    grad = np.zeros_like(displacement)
    for c in range(3):
        channel = displacement[c] / scale[c]
        for axis, diff in enumerate(gradient_arrays(channel)):
            total += float(np.sum(diff * diff))
            grad[c] += gradient_adjoint(2.0 * diff, axis) / scale[c]
    factor = lam / n
    return factor * total, factor * grad


def regularizer(
    displacement: VectorField, lam: float, scale: Sequence[float] = UNIT_SCALE
) -> Tuple[float, VectorField]:
    """Diffusion regularizer ``lam * ||grad u||^2`` (per-voxel mean) and its gradient."""
    loss, grad = regularizer_array(displacement.values, lam, scale)
    return loss, VectorField(grid=displacement.grid, values=grad)


def exp_adjoint(trace: Sequence[np.ndarray], upstream: np.ndarray) -> np.ndarray:
    """Pull a gradient w.r.t. ``Exp(v)`` back to ``v`` through scaling and squaring.

    ``trace`` is the list returned by :func:`transform.exp_velocity_trace`.
    """
    steps = len(trace) - 1
    grad = upstream
    for level in reversed(range(steps)):
        field = np.ascontiguousarray(trace[level])
        dims = field.shape[1:]
        points = displaced_points(field)
        flat = np.ascontiguousarray(grad.reshape(3, -1).T)
        _, jac = trilinear_gather_grad(field, points)
        coordinate = np.einsum("nc,ncd->nd", flat, jac)
        scattered = trilinear_scatter(flat, points, dims[0], dims[1], dims[2])
        grad = grad + scattered + to_channels(coordinate, dims)
    return grad / (2.0**steps)


@dataclasses.dataclass(frozen=True)
class SubjectEvaluation:
    """Objective value, its parts, and the gradient w.r.t. the velocity."""

    loss: float
    data: float
    regularization: float
    grad: np.ndarray


def penalty_scale(dims: Sequence[int], cfg: LossConfig) -> Tuple[float, float, float]:
    """Per-axis divisor applied to displacements inside the regularizer."""
    if not cfg.normalized_units:
        return UNIT_SCALE
    return tuple((d - 1) / 2.0 for d in dims)  # type: ignore[return-value]


def evaluate_subject(
    image: np.ndarray,
    atlas: np.ndarray,
    velocity: np.ndarray,
    cfg: LossConfig,
    steps: int = DEFAULT_EXP_STEPS,
) -> SubjectEvaluation:
    """Array-level objective of one subject against the atlas, with exact reverse-mode gradient."""
    dims = image.shape
    trace = exp_velocity_trace(velocity, steps)
    displacement = trace[-1]
    points = displaced_points(displacement)
    sampled, image_grad = trilinear_gather_grad(np.ascontiguousarray(image[None]), points)
    warped = sampled[:, 0].reshape(dims)
    data, grad_warped, _ = dissimilarity_arrays(warped, atlas, cfg)

    grad_u = to_channels(grad_warped.reshape(-1, 1) * image_grad[:, 0, :], dims)
    scale = penalty_scale(dims, cfg)
    if cfg.regularize_on == RegularizeOn.VELOCITY:
        reg, grad_reg = regularizer_array(velocity, cfg.lam, scale)
        grad_v = exp_adjoint(trace, grad_u) + grad_reg
    else:
        reg, grad_reg = regularizer_array(displacement, cfg.lam, scale)
        grad_v = exp_adjoint(trace, grad_u + grad_reg)

    loss = data + reg
    if not np.isfinite(loss) or not np.all(np.isfinite(grad_v)):
        raise NonFiniteLossError(
            f"Non-finite objective (data={data}, regularization={reg}, metric={cfg.metric})"
        )
    return SubjectEvaluation(loss=loss, data=data, regularization=reg, grad=grad_v)


def subject_loss_and_grad(
    image: ScalarVolume,
    atlas: ScalarVolume,
    velocity: VectorField,
    cfg: LossConfig,
    steps: int = DEFAULT_EXP_STEPS,
) -> Tuple[float, VectorField]:
    """Return the per-subject objective and ``dL/dv``."""
    grid = check_same_grid(image, atlas, velocity)
    evaluation = evaluate_subject(image.values, atlas.values, velocity.values, cfg, steps)
    return evaluation.loss, VectorField(grid=grid, values=evaluation.grad)
