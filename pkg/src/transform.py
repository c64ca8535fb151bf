#!/usr/bin/env python3
# Copyright 2026 darc-atlas contributors
# See LICENSE file for licensing details.

"""Sampling, warping, composition and exponentiation of displacement fields.

A deformation is stored as its displacement ``u`` with ``phi(x) = x + u(x)``. Warping is
backward: ``(V o phi)(x) = V(x + u(x))``. Sampling is trilinear with clamp-to-edge borders.
"""

import dataclasses
import functools
import logging
from typing import List, Sequence, Tuple

import numpy as np
import trimesh

from fields import (
    FieldError,
    LabelVolume,
    ScalarVolume,
    VectorField,
    check_same_grid,
    gradient_arrays,
)
from kernels import trilinear_gather

logger = logging.getLogger(__name__)

DEFAULT_EXP_STEPS = 7


@functools.lru_cache(maxsize=8)
def identity_points(dims: Tuple[int, int, int]) -> np.ndarray:
    """Voxel centers of a grid as a read-only ``(N, 3)`` array in ``[x, y, z]`` C order."""
    points = np.indices(dims, dtype=np.float64).reshape(3, -1).T.copy()
    points.flags.writeable = False
    return points


def displaced_points(displacement: np.ndarray) -> np.ndarray:
    """Sample positions ``x + u(x)`` for a ``(3, nx, ny, nz)`` displacement array."""
    dims = displacement.shape[1:]
    return identity_points(dims) + displacement.reshape(3, -1).T


def to_channels(samples: np.ndarray, dims: Sequence[int]) -> np.ndarray:
    """Reshape ``(N, C)`` samples taken at voxel centers back to ``(C, nx, ny, nz)``."""
    return samples.T.reshape(samples.shape[1], *dims)


def sample_trilinear(volume: ScalarVolume, point: Sequence[float]) -> float:
    """Interpolate ``volume`` at one point given in voxel coordinates."""
    p = np.asarray(point, dtype=np.float64).reshape(1, 3)
    if not np.all(np.isfinite(p)):
        raise FieldError(f"Cannot sample at non-finite point {list(point)}")
    return float(trilinear_gather(np.ascontiguousarray(volume.values[None]), p)[0, 0])


def sample_vector(field: VectorField, points: np.ndarray) -> np.ndarray:
    """Interpolate all three channels of ``field`` at ``(N, 3)`` points; returns ``(N, 3)``."""
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(points)):
        raise FieldError("Cannot sample at non-finite points")
    return trilinear_gather(np.ascontiguousarray(field.values), points)


def warp_array(values: np.ndarray, displacement: np.ndarray) -> np.ndarray:
    """Backward-warp an ``[x, y, z]`` array by a ``(3, nx, ny, nz)`` displacement array."""
    points = displaced_points(displacement)
    sampled = trilinear_gather(np.ascontiguousarray(values[None]), points)
    return sampled[:, 0].reshape(values.shape)


def warp_volume(volume: ScalarVolume, displacement: VectorField) -> ScalarVolume:
    """Return ``volume o phi`` sampled trilinearly at ``x + u(x)``."""
    grid = check_same_grid(volume, displacement)
    return ScalarVolume(grid=grid, values=warp_array(volume.values, displacement.values))


def warp_labels_nn(labels: LabelVolume, displacement: VectorField) -> LabelVolume:
    """Backward-warp a label map with nearest-neighbour lookup (label ids are preserved)."""
    grid = check_same_grid(labels, displacement)
    points = displaced_points(displacement.values)
    upper = np.asarray(grid.dims) - 1
    index = np.clip(np.floor(points + 0.5), 0, upper).astype(np.intp)
    warped = labels.labels[index[:, 0], index[:, 1], index[:, 2]].reshape(grid.dims)
    return LabelVolume(grid=grid, labels=warped)


def compose_arrays(outer: np.ndarray, inner: np.ndarray) -> np.ndarray:
    """Displacement of ``phi_outer o phi_inner``: ``u_o(x + u_i(x)) + u_i(x)``."""
    points = displaced_points(inner)
    sampled = trilinear_gather(np.ascontiguousarray(outer), points)
    return to_channels(sampled, inner.shape[1:]) + inner


def compose(outer: VectorField, inner: VectorField) -> VectorField:
    """Return the displacement of ``phi_outer o phi_inner``."""
    grid = check_same_grid(outer, inner)
    return VectorField(grid=grid, values=compose_arrays(outer.values, inner.values))


def exp_velocity_trace(velocity: np.ndarray, steps: int) -> List[np.ndarray]:
    """Scaling and squaring, keeping every intermediate displacement.

    Returns ``[u_0, ..., u_steps]`` with ``u_0 = v / 2**steps`` and
    ``u_{k+1} = compose(u_k, u_k)``; the last entry is the displacement of ``Exp(v)``.
    """
    if steps < 0:
        raise FieldError(f"Scaling and squaring needs steps >= 0, got {steps}")
    trace = [velocity / (2.0**steps)]
    for _ in range(steps):
        trace.append(compose_arrays(trace[-1], trace[-1]))
    return trace


def exp_velocity(velocity: VectorField, steps: int = DEFAULT_EXP_STEPS) -> VectorField:
    """Return the displacement of the group exponential ``Exp(v)``."""
    return VectorField(grid=velocity.grid, values=exp_velocity_trace(velocity.values, steps)[-1])


def jacobian_determinant_array(displacement: np.ndarray) -> np.ndarray:
    """Per-voxel ``det(I + grad u)`` for a ``(3, nx, ny, nz)`` displacement array."""
    j = [gradient_arrays(channel) for channel in displacement]
    for c in range(3):
        j[c][c] = j[c][c] + 1.0
    return (
        j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
        - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
        + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0])
    )


def jacobian_determinant(displacement: VectorField) -> ScalarVolume:
    """Return the Jacobian determinant map of ``x + u(x)``."""
    return ScalarVolume(
        grid=displacement.grid, values=jacobian_determinant_array(displacement.values)
    )


def folding_fraction(displacement: VectorField) -> float:
    """Percentage of voxels whose Jacobian determinant is non-positive."""
    det = jacobian_determinant_array(displacement.values)
    return 100.0 * float(np.count_nonzero(det <= 0)) / det.size


@dataclasses.dataclass(frozen=True)
class TriMesh:
    """Triangle mesh with vertices in voxel coordinates."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        """Validate face indices."""
        vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if faces.size:
            if faces.min() < 0 or faces.max() >= len(vertices):
                raise FieldError("Face index out of range")
            if np.any(
                (faces[:, 0] == faces[:, 1])
                | (faces[:, 1] == faces[:, 2])
                | (faces[:, 0] == faces[:, 2])
            ):
                raise FieldError("Degenerate face with repeated vertex index")
        object.__setattr__(self, "vertices", vertices)
        object.__setattr__(self, "faces", faces)

    @classmethod
    def empty(cls) -> "TriMesh":
        """Return a mesh with no vertices and no faces."""
        return cls(vertices=np.zeros((0, 3)), faces=np.zeros((0, 3), dtype=np.int64))

    @functools.cached_property
    def surface(self) -> trimesh.Trimesh:
        """The same mesh as an unprocessed ``trimesh.Trimesh`` (vertex order kept)."""
        return trimesh.Trimesh(vertices=self.vertices, faces=self.faces, process=False)

    def euler_characteristic(self) -> int:
        """``V - E + F``."""
        if not len(self.faces):
            return 0
        return int(self.surface.euler_number)

    def is_watertight(self) -> bool:
        """Whether every edge is shared by exactly two faces."""
        return bool(len(self.faces)) and bool(self.surface.is_watertight)

    def signed_volume(self) -> float:
        """Enclosed volume; positive when faces are oriented outward."""
        if not len(self.faces):
            return 0.0
        return float(self.surface.volume)


def warp_mesh(mesh: TriMesh, displacement: VectorField) -> TriMesh:
    """Move every vertex by the interpolated displacement; faces are kept."""
    if not len(mesh.vertices):
        return mesh
    moved = mesh.vertices + sample_vector(displacement, mesh.vertices)
    return TriMesh(vertices=moved, faces=mesh.faces)
