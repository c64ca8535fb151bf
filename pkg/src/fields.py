#!/usr/bin/env python3
# Copyright 2026 darc-atlas contributors
# See LICENSE file for licensing details.

"""Grid geometry, dense field containers and finite differences.

Volumes are stored as numpy arrays indexed ``[x, y, z]``. The linear (file) order is
x-fastest, ``x + nx * (y + ny * z)``, which is numpy's Fortran order for that shape.
All displacement and velocity components are in voxel units; spacing is metadata only.
"""

import dataclasses
import logging
from typing import Iterable, List, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

MIN_DIM = 4
LINEAR_ORDER = "F"


class FieldError(ValueError):
    """Exception raised when a field operation receives invalid input."""

    def __init__(self, msg: str):
        """Initialize a new instance of the FieldError exception.

        Args:
            msg (str): Explanation of the error.
        """
        super().__init__(msg)
        self.msg = msg


def _readonly(array: np.ndarray) -> np.ndarray:
    view = array.view()
    view.flags.writeable = False
    return view


@dataclasses.dataclass(frozen=True)
class Grid:
    """Regular 3D voxel grid."""

    dims: Tuple[int, int, int]
    spacing: Tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        """Validate the grid geometry."""
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        if len(dims) != 3 or len(spacing) != 3:
            raise FieldError(f"Grid needs 3 dims and 3 spacings, got {self.dims}, {self.spacing}")
        if any(d < MIN_DIM for d in dims):
            raise FieldError(f"Every grid dimension must be >= {MIN_DIM}, got {dims}")
        if any(not np.isfinite(s) or s <= 0 for s in spacing):
            raise FieldError(f"Grid spacing must be positive, got {spacing}")
        if dims[0] * dims[1] * dims[2] > np.iinfo(np.intp).max // 8:
            raise FieldError(f"Grid {dims} is too large to address")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)

    @property
    def voxel_count(self) -> int:
        """Number of voxels in the grid."""
        return self.dims[0] * self.dims[1] * self.dims[2]

    @property
    def normalized_scale(self) -> Tuple[float, float, float]:
        """Voxels per normalized unit along each axis, so the grid spans [-1, 1]."""
        return tuple((d - 1) / 2.0 for d in self.dims)  # type: ignore[return-value]


@dataclasses.dataclass(frozen=True)
class ScalarVolume:
    """One scalar 3D image on a grid."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        """Validate shape and finiteness, then freeze the values."""
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != self.grid.dims:
            raise FieldError(f"Values of shape {values.shape} do not match grid {self.grid.dims}")
        if not np.all(np.isfinite(values)):
            raise FieldError("Scalar volume contains non-finite values")
        object.__setattr__(self, "values", _readonly(values))

    @classmethod
    def from_array(cls, array, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> "ScalarVolume":
        """Wrap an ``[x, y, z]`` array, deriving the grid from its shape."""
        array = np.asarray(array, dtype=np.float64)
        grid = Grid(dims=array.shape, spacing=tuple(spacing))  # type: ignore[arg-type]
        return cls(grid=grid, values=array)

    @classmethod
    def from_flat(cls, grid: Grid, flat) -> "ScalarVolume":
        """Build a volume from an x-fastest linear sequence."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != grid.voxel_count:
            raise FieldError(f"Expected {grid.voxel_count} values, got {flat.size}")
        return cls(grid=grid, values=flat.reshape(grid.dims, order=LINEAR_ORDER))

    @classmethod
    def zeros(cls, grid: Grid) -> "ScalarVolume":
        """Return an all-zero volume."""
        return cls(grid=grid, values=np.zeros(grid.dims))

    def flat(self) -> np.ndarray:
        """Return the values in x-fastest linear order."""
        return self.values.ravel(order=LINEAR_ORDER)


@dataclasses.dataclass(frozen=True)
class VectorField:
    """Three-channel displacement or velocity field in voxel units."""

    grid: Grid
    values: np.ndarray

    def __post_init__(self):
        """Validate shape and finiteness, then freeze the values."""
        values = np.asarray(self.values, dtype=np.float64)
        if values.shape != (3, *self.grid.dims):
            raise FieldError(
                f"Vector values of shape {values.shape} do not match grid {self.grid.dims}"
            )
        if not np.all(np.isfinite(values)):
            raise FieldError("Vector field contains non-finite values")
        object.__setattr__(self, "values", _readonly(values))

    @classmethod
    def from_array(cls, array, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> "VectorField":
        """Wrap a ``[c, x, y, z]`` array, deriving the grid from its shape."""
        array = np.asarray(array, dtype=np.float64)
        grid = Grid(dims=array.shape[1:], spacing=tuple(spacing))  # type: ignore[arg-type]
        return cls(grid=grid, values=array)

    @classmethod
    def zeros(cls, grid: Grid) -> "VectorField":
        """Return the identity displacement."""
        return cls(grid=grid, values=np.zeros((3, *grid.dims)))

    @classmethod
    def constant(cls, grid: Grid, vector: Sequence[float]) -> "VectorField":
        """Return a field equal to ``vector`` at every voxel."""
        values = np.empty((3, *grid.dims))
        for channel, component in enumerate(vector):
            values[channel] = component
        return cls(grid=grid, values=values)

    def channel(self, index: int) -> ScalarVolume:
        """Return one component as a scalar volume."""
        return ScalarVolume(grid=self.grid, values=self.values[index])

    def flat(self) -> np.ndarray:
        """Return the field flattened channel-major, each channel x-fastest."""
        return np.concatenate([c.ravel(order=LINEAR_ORDER) for c in self.values])

    @classmethod
    def from_flat(cls, grid: Grid, flat) -> "VectorField":
        """Inverse of :meth:`flat`."""
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != 3 * grid.voxel_count:
            raise FieldError(f"Expected {3 * grid.voxel_count} values, got {flat.size}")
        channels = flat.reshape(3, grid.voxel_count)
        return cls(
            grid=grid,
            values=np.stack([c.reshape(grid.dims, order=LINEAR_ORDER) for c in channels]),
        )

    def __neg__(self) -> "VectorField":
        """Return the negated field."""
        return VectorField(grid=self.grid, values=-self.values)


@dataclasses.dataclass(frozen=True)
class LabelVolume:
    """Integer label map; 0 is background."""

    grid: Grid
    labels: np.ndarray

    def __post_init__(self):
        """Validate shape and label ids, then freeze the labels."""
        labels = np.asarray(self.labels)
        if labels.shape != self.grid.dims:
            raise FieldError(f"Labels of shape {labels.shape} do not match grid {self.grid.dims}")
        if not np.issubdtype(labels.dtype, np.integer):
            if not np.all(np.mod(labels, 1) == 0):
                raise FieldError("Label ids must be integers")
        labels = labels.astype(np.int64)
        if labels.size and labels.min() < 0:
            raise FieldError("Label ids must be non-negative")
        object.__setattr__(self, "labels", _readonly(labels))

    @classmethod
    def from_array(cls, array, spacing: Sequence[float] = (1.0, 1.0, 1.0)) -> "LabelVolume":
        """Wrap an ``[x, y, z]`` integer array."""
        array = np.asarray(array)
        grid = Grid(dims=array.shape, spacing=tuple(spacing))  # type: ignore[arg-type]
        return cls(grid=grid, labels=array)

    def label_set(self) -> List[int]:
        """Return the sorted label ids present, background included."""
        return [int(label) for label in np.unique(self.labels)]

    def mask(self, label: int) -> np.ndarray:
        """Return the boolean mask of one label."""
        return self.labels == label


Field = Union[ScalarVolume, VectorField, LabelVolume]


def check_same_grid(*fields: Field) -> Grid:
    """Return the shared grid or reject the inputs."""
    grids = {f.grid for f in fields}
    if len(grids) != 1:
        raise FieldError(f"Grid mismatch: {sorted(g.dims for g in grids)}")
    return fields[0].grid


def field_lincomb(a: float, f: VectorField, b: float, g: VectorField) -> VectorField:
    """Return ``a * f + b * g`` componentwise."""
    grid = check_same_grid(f, g)
    return VectorField(grid=grid, values=a * f.values + b * g.values)


def gradient_arrays(values: np.ndarray) -> List[np.ndarray]:
    """Finite-difference derivatives along x, y, z of an ``[x, y, z]`` array.

    Central differences inside, one-sided differences on the boundary faces.
    """
    return [np.gradient(values, axis=axis, edge_order=1) for axis in range(3)]


def gradient_adjoint(upstream: np.ndarray, axis: int) -> np.ndarray:
    """Apply the transpose of the ``gradient_arrays`` stencil along one axis."""
    g = np.moveaxis(upstream, axis, 0)
    out = np.zeros_like(g)
    out[0] -= g[0]
    out[1] += g[0]
    out[2:] += 0.5 * g[1:-1]
    out[:-2] -= 0.5 * g[1:-1]
    out[-1] += g[-1]
    out[-2] -= g[-1]
    return np.moveaxis(out, 0, axis)


def spatial_gradient(volume: ScalarVolume) -> Tuple[ScalarVolume, ScalarVolume, ScalarVolume]:
    """Return d/dx, d/dy, d/dz of a scalar volume (or one vector channel)."""
    dx, dy, dz = gradient_arrays(volume.values)
    return (
        ScalarVolume(grid=volume.grid, values=dx),
        ScalarVolume(grid=volume.grid, values=dy),
        ScalarVolume(grid=volume.grid, values=dz),
    )


def reduce_mean_vector(field: VectorField) -> Tuple[float, float, float]:
    """Per-channel mean over all voxels, accumulated pairwise."""
    means = [float(np.mean(channel, dtype=np.float64)) for channel in field.values]
    return means[0], means[1], means[2]


def mean_broadcast(field: VectorField) -> VectorField:
    """Return the constant field equal to the per-channel mean of ``field``."""
    return VectorField.constant(field.grid, reduce_mean_vector(field))


def stack_values(fields: Iterable[Field]) -> np.ndarray:
    """Stack the arrays of same-grid fields along a new leading axis."""
    fields = list(fields)
    if not fields:
        raise FieldError("Cannot stack an empty list of fields")
    check_same_grid(*fields)
    if isinstance(fields[0], LabelVolume):
        return np.stack([f.labels for f in fields])  # type: ignore[union-attr]
    return np.stack([f.values for f in fields])  # type: ignore[union-attr]
