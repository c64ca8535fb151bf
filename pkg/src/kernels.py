#!/usr/bin/env python3
# Copyright 2026 darc-atlas contributors
# See LICENSE file for licensing details.

"""Compiled trilinear sampling loops and their adjoints.

Every kernel takes a channel stack of shape ``(C, nx, ny, nz)`` and an ``(N, 3)`` array of
sample positions in voxel coordinates. Positions are clamped to ``[0, n - 1]`` per axis before
interpolation. Kernels release the GIL so per-subject work can run on a thread pool.
"""

import math

import numpy as np
from numba import njit


@njit(nogil=True, cache=True)
def _locate(p, n):
    # lower corner, fractional offset, and 1.0 unless the coordinate was clamped
    inside = 1.0
    if p < 0.0:
        p = 0.0
        inside = 0.0
    elif p > n - 1.0:
        p = n - 1.0
        inside = 0.0
    i0 = int(math.floor(p))
    if i0 > n - 2:
        i0 = n - 2
    return i0, p - i0, inside


@njit(nogil=True, cache=True)
def trilinear_gather(stack, points):
    """Interpolate every channel of ``stack`` at ``points``; returns ``(N, C)``."""
    nc, nx, ny, nz = stack.shape
    n = points.shape[0]
    out = np.empty((n, nc))
    for k in range(n):
        i, tx, _ = _locate(points[k, 0], nx)
        j, ty, _ = _locate(points[k, 1], ny)
        m, tz, _ = _locate(points[k, 2], nz)
        sx = 1.0 - tx
        sy = 1.0 - ty
        sz = 1.0 - tz
        for c in range(nc):
            out[k, c] = (
                stack[c, i, j, m] * sx * sy * sz
                + stack[c, i + 1, j, m] * tx * sy * sz
                + stack[c, i, j + 1, m] * sx * ty * sz
                + stack[c, i + 1, j + 1, m] * tx * ty * sz
                + stack[c, i, j, m + 1] * sx * sy * tz
                + stack[c, i + 1, j, m + 1] * tx * sy * tz
                + stack[c, i, j + 1, m + 1] * sx * ty * tz
                + stack[c, i + 1, j + 1, m + 1] * tx * ty * tz
            )
    return out


@njit(nogil=True, cache=True)
def trilinear_gather_grad(stack, points):
    """Interpolate and differentiate w.r.t. the sample position.

    Returns values ``(N, C)`` and position derivatives ``(N, C, 3)``; the derivative along
    a clamped axis is zero.
    """
    nc, nx, ny, nz = stack.shape
    n = points.shape[0]
    out = np.empty((n, nc))
    grad = np.empty((n, nc, 3))
    for k in range(n):
        i, tx, ix = _locate(points[k, 0], nx)
        j, ty, iy = _locate(points[k, 1], ny)
        m, tz, iz = _locate(points[k, 2], nz)
        sx = 1.0 - tx
        sy = 1.0 - ty
        sz = 1.0 - tz
        for c in range(nc):
            c000 = stack[c, i, j, m]
            c100 = stack[c, i + 1, j, m]
            c010 = stack[c, i, j + 1, m]
            c110 = stack[c, i + 1, j + 1, m]
            c001 = stack[c, i, j, m + 1]
            c101 = stack[c, i + 1, j, m + 1]
            c011 = stack[c, i, j + 1, m + 1]
            c111 = stack[c, i + 1, j + 1, m + 1]
            out[k, c] = (
                c000 * sx * sy * sz
                + c100 * tx * sy * sz
                + c010 * sx * ty * sz
                + c110 * tx * ty * sz
                + c001 * sx * sy * tz
                + c101 * tx * sy * tz
                + c011 * sx * ty * tz
                + c111 * tx * ty * tz
            )
            grad[k, c, 0] = ix * (
                sy * sz * (c100 - c000)
                + ty * sz * (c110 - c010)
                + sy * tz * (c101 - c001)
                + ty * tz * (c111 - c011)
            )
            grad[k, c, 1] = iy * (
                sx * sz * (c010 - c000)
                + tx * sz * (c110 - c100)
                + sx * tz * (c011 - c001)
                + tx * tz * (c111 - c101)
            )
            grad[k, c, 2] = iz * (
                sx * sy * (c001 - c000)
                + tx * sy * (c101 - c100)
                + sx * ty * (c011 - c010)
                + tx * ty * (c111 - c110)
            )
    return out, grad


@njit(nogil=True, cache=True)
def trilinear_scatter(upstream, points, nx, ny, nz):
    """Adjoint of :func:`trilinear_gather` w.r.t. the sampled values.

    ``upstream`` has shape ``(N, C)``; returns the ``(C, nx, ny, nz)`` stack that receives
    each upstream value split over the eight corner weights.
    """
    n, nc = upstream.shape
    out = np.zeros((nc, nx, ny, nz))
    for k in range(n):
        i, tx, _ = _locate(points[k, 0], nx)
        j, ty, _ = _locate(points[k, 1], ny)
        m, tz, _ = _locate(points[k, 2], nz)
        sx = 1.0 - tx
        sy = 1.0 - ty
        sz = 1.0 - tz
        for c in range(nc):
            g = upstream[k, c]
            out[c, i, j, m] += g * sx * sy * sz
            out[c, i + 1, j, m] += g * tx * sy * sz
            out[c, i, j + 1, m] += g * sx * ty * sz
            out[c, i + 1, j + 1, m] += g * tx * ty * sz
            out[c, i, j, m + 1] += g * sx * sy * tz
            out[c, i + 1, j, m + 1] += g * tx * sy * tz
            out[c, i, j + 1, m + 1] += g * sx * ty * tz
            out[c, i + 1, j + 1, m + 1] += g * tx * ty * tz
    return out
