#!/usr/bin/env python3
# Copyright 2026 darc-atlas contributors
# See LICENSE file for licensing details.

"""Statistical shape model over velocity fields, iso-surface meshes and synthesis metrics."""

import dataclasses
import logging
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.linalg import eigh
from scipy.spatial import cKDTree
from scipy.spatial.distance import jensenshannon
from skimage import measure

from fields import FieldError, Grid, LabelVolume, ScalarVolume, VectorField, check_same_grid
from transform import DEFAULT_EXP_STEPS, TriMesh, exp_velocity, warp_mesh

logger = logging.getLogger(__name__)

# Gram eigenvalues below this fraction of the largest are treated as zero variance.
RELATIVE_EIGEN_TOL = 1e-10
JSD_RESOLUTION = 32


def _gram_pca(samples: np.ndarray, p: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Mean, ``(p, d)`` orthonormal components and variances of ``(n, d)`` samples.

    Diagonalizes the ``n x n`` Gram matrix of the centered samples. Directions without
    variance are completed to an orthonormal set and get eigenvalue zero.
    """
    n, d = samples.shape
    if n < 2:
        raise FieldError(f"PCA needs at least 2 samples, got {n}")
    if not 1 <= p <= n - 1:
        raise FieldError(f"Number of components must be in [1, {n - 1}], got {p}")
    mean = samples.mean(axis=0)
    centered = samples - mean
    gram = centered @ centered.T
    values, vectors = eigh(gram)
    values = values[::-1][:p]
    vectors = vectors[:, ::-1][:, :p]

    tol = RELATIVE_EIGEN_TOL * max(float(values[0]), 0.0)
    components = np.zeros((p, d))
    eigenvalues = np.zeros(p)
    kept = 0
    for value, vector in zip(values, vectors.T):
        if value <= tol or value <= 0.0:
            break
        direction = centered.T @ vector
        components[kept] = direction / np.linalg.norm(direction)
        eigenvalues[kept] = value / (n - 1)
        kept += 1

    axis = 0
    while kept < p:
        candidate = np.zeros(d)
        candidate[axis] = 1.0
        candidate -= components[:kept].T @ (components[:kept] @ candidate)
        norm = np.linalg.norm(candidate)
        if norm > 0.5:
            components[kept] = candidate / norm
            kept += 1
        axis += 1
    return mean, components, eigenvalues


@dataclasses.dataclass(frozen=True)
class PcaModel:
    """Mean velocity, principal directions (rows) and their variances."""

    grid: Grid
    mean_velocity: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray

    def __post_init__(self):
        """Validate sizes."""
        d = 3 * self.grid.voxel_count
        if self.mean_velocity.shape != (d,) or self.components.shape[1:] != (d,):
            raise FieldError(f"PCA vectors must have length {d}")
        if self.eigenvalues.shape != (len(self.components),):
            raise FieldError("One eigenvalue per component is required")
        if np.any(self.eigenvalues < 0) or np.any(np.diff(self.eigenvalues) > 0):
            raise FieldError("Eigenvalues must be non-negative and sorted descending")

    @property
    def p(self) -> int:
        """Number of retained components."""
        return len(self.eigenvalues)

    def field(self, flat: np.ndarray) -> VectorField:
        """Unflatten a vector of the model space into a velocity field."""
        return VectorField.from_flat(self.grid, flat)

    def mean_field(self) -> VectorField:
        """Return the mean velocity as a field."""
        return self.field(self.mean_velocity)


def fit_pca(velocities: Sequence[VectorField], p: int) -> PcaModel:
    """Fit ``p`` principal modes to the training velocities."""
    if len(velocities) < 2:
        raise FieldError(f"PCA needs at least 2 velocity fields, got {len(velocities)}")
    grid = check_same_grid(*velocities)
    samples = np.stack([v.flat() for v in velocities])
    mean, components, eigenvalues = _gram_pca(samples, p)
    logger.info(
        "Fitted %d modes to %d velocities; leading variance %.6g",
        p,
        len(velocities),
        eigenvalues[0],
    )
    return PcaModel(grid=grid, mean_velocity=mean, components=components, eigenvalues=eigenvalues)


def project(model: PcaModel, velocity: VectorField) -> np.ndarray:
    """Coordinates of ``velocity - mean`` along each component."""
    check_same_grid(velocity, model.mean_field())
    return model.components @ (velocity.flat() - model.mean_velocity)


def reconstruct(model: PcaModel, coefficients: Sequence[float]) -> VectorField:
    """Return ``mean + sum_j coefficients[j] * U_j``."""
    alpha = np.asarray(coefficients, dtype=np.float64)
    if alpha.shape != (model.p,):
        raise FieldError(f"Expected {model.p} coefficients, got {alpha.shape}")
    return model.field(model.mean_velocity + alpha @ model.components)


def sample_pca(
    model: PcaModel,
    seed: Union[int, np.random.Generator, None],
    steps: int = DEFAULT_EXP_STEPS,
) -> Tuple[VectorField, VectorField]:
    """Draw a velocity with coefficient variances ``eigenvalues``; returns it and its ``Exp``."""
    rng = np.random.default_rng(seed)
    alpha = rng.standard_normal(model.p) * np.sqrt(model.eigenvalues)
    velocity = reconstruct(model, alpha)
    return velocity, exp_velocity(velocity, steps)


def mode_shape(model: PcaModel, j: int, t: float) -> VectorField:
    """Velocity ``t`` standard deviations along mode ``j`` (1-based) from the mean."""
    if not 1 <= j <= model.p:
        raise FieldError(f"Mode index must be in [1, {model.p}], got {j}")
    alpha = np.zeros(model.p)
    alpha[j - 1] = t * np.sqrt(model.eigenvalues[j - 1])
    return reconstruct(model, alpha)


@dataclasses.dataclass(frozen=True)
class MeshPcaModel:
    """Point distribution model over corresponding meshes sharing one face list."""

    faces: np.ndarray
    mean_vertices: np.ndarray
    components: np.ndarray
    eigenvalues: np.ndarray

    def mesh(self, flat: np.ndarray) -> TriMesh:
        """Return the mesh with flattened vertex coordinates ``flat``."""
        return TriMesh(vertices=flat.reshape(-1, 3), faces=self.faces)


def fit_mesh_pca(meshes: Sequence[TriMesh], p: int) -> MeshPcaModel:
    """PCA on the vertex coordinates of meshes in point-wise correspondence."""
    if len(meshes) < 2:
        raise FieldError(f"Mesh PCA needs at least 2 meshes, got {len(meshes)}")
    faces = meshes[0].faces
    for mesh in meshes[1:]:
        if mesh.vertices.shape != meshes[0].vertices.shape or not np.array_equal(
            mesh.faces, faces
        ):
            raise FieldError("Mesh PCA needs meshes sharing vertex count and face list")
    samples = np.stack([m.vertices.ravel() for m in meshes])
    mean, components, eigenvalues = _gram_pca(samples, p)
    return MeshPcaModel(
        faces=faces, mean_vertices=mean, components=components, eigenvalues=eigenvalues
    )


def mesh_mode(model: MeshPcaModel, j: int, t: float) -> TriMesh:
    """Mesh ``t`` standard deviations along mode ``j`` (1-based)."""
    if not 1 <= j <= len(model.eigenvalues):
        raise FieldError(f"Mode index must be in [1, {len(model.eigenvalues)}], got {j}")
    offset = t * np.sqrt(model.eigenvalues[j - 1]) * model.components[j - 1]
    return model.mesh(model.mean_vertices + offset)


def marching_cubes(
    volume: Union[ScalarVolume, LabelVolume],
    iso: float,
    label: Optional[int] = None,
    value_range: Optional[Tuple[float, float]] = None,
) -> TriMesh:
    """Extract the closed, outward-oriented iso-surface of a volume in voxel coordinates.

    Label volumes are binarized (``label`` if given, else any foreground) and have value
    range ``(0, 1)``. Scalar volumes use ``value_range`` or their own min and max. ``iso``
    must lie strictly inside the range; a volume that never reaches ``iso`` yields an
    empty mesh.
    """
    if isinstance(volume, LabelVolume):
        mask = volume.labels == label if label is not None else volume.labels > 0
        values = mask.astype(np.float64)
        low, high = 0.0, 1.0
    else:
        values = np.asarray(volume.values)
        low, high = value_range or (float(values.min()), float(values.max()))
    if not low < iso < high:
        raise FieldError(f"Iso value {iso} is not strictly inside the value range [{low}, {high}]")
    if values.max() <= iso:
        return TriMesh.empty()

    # a border below iso closes surfaces that touch the volume boundary
    padded = np.pad(values, 1, mode="constant", constant_values=min(low, float(values.min())))
    vertices, faces, _, _ = measure.marching_cubes(padded, level=iso, allow_degenerate=False)
    mesh = TriMesh(vertices=vertices.astype(np.float64) - 1.0, faces=faces)
    if mesh.signed_volume() < 0:
        mesh = TriMesh(vertices=mesh.vertices, faces=mesh.faces[:, ::-1])
    return mesh


def mesh_distance(a: TriMesh, b: TriMesh, correspondence: bool = False) -> float:
    """Symmetric mean vertex-to-nearest-vertex distance.

    With ``correspondence`` and equal vertex counts, the mean distance between
    same-index vertices is returned instead.
    """
    if not len(a.vertices) or not len(b.vertices):
        raise FieldError("Cannot measure the distance to an empty mesh")
    if correspondence and len(a.vertices) == len(b.vertices):
        return float(np.mean(np.linalg.norm(a.vertices - b.vertices, axis=1)))
    a_to_b, _ = cKDTree(b.vertices).query(a.vertices)
    b_to_a, _ = cKDTree(a.vertices).query(b.vertices)
    return 0.5 * (float(np.mean(a_to_b)) + float(np.mean(b_to_a)))


def distance_matrix(
    rows: Sequence[TriMesh], cols: Sequence[TriMesh], correspondence: bool = False
) -> np.ndarray:
    """Pairwise :func:`mesh_distance` between two mesh lists."""
    return np.array([[mesh_distance(r, c, correspondence) for c in cols] for r in rows])


def _occupancy(meshes: Sequence[TriMesh], low: np.ndarray, extent: np.ndarray) -> np.ndarray:
    grid = np.zeros((JSD_RESOLUTION,) * 3)
    for mesh in meshes:
        cells = np.floor((mesh.vertices - low) / extent * JSD_RESOLUTION).astype(np.intp)
        cells = np.unique(np.clip(cells, 0, JSD_RESOLUTION - 1), axis=0)
        grid[cells[:, 0], cells[:, 1], cells[:, 2]] += 1.0
    return grid.ravel() / len(meshes)


def shape_jsd(generated: Sequence[TriMesh], real: Sequence[TriMesh]) -> float:
    """Jensen-Shannon divergence (nats) between the mean vertex-occupancy grids of two sets."""
    points = np.concatenate([m.vertices for m in [*generated, *real]])
    low = points.min(axis=0)
    extent = points.max(axis=0) - low
    extent[extent <= 0] = 1.0
    p = _occupancy(generated, low, extent)
    q = _occupancy(real, low, extent)
    return float(jensenshannon(p, q)) ** 2


def one_nn_accuracy(
    generated: Sequence[TriMesh], real: Sequence[TriMesh], correspondence: bool = False
) -> float:
    """Leave-one-out 1-NN classification accuracy of generated versus real."""
    union = [*generated, *real]
    labels = np.array([1] * len(generated) + [0] * len(real))
    distances = distance_matrix(union, union, correspondence)
    np.fill_diagonal(distances, np.inf)
    nearest = np.argmin(distances, axis=1)
    return float(np.mean(labels[nearest] == labels))


@dataclasses.dataclass(frozen=True)
class SynthesisReport:
    """Distribution-level comparison of a generated mesh set with a real one."""

    specificity: float
    coverage: float
    mmd: float
    jsd: float
    one_nna: float

    def as_row(self) -> dict:
        """Return the report as a CSV row mapping."""
        return dataclasses.asdict(self)


def synthesis_metrics(
    generated: Sequence[TriMesh], real: Sequence[TriMesh], correspondence: bool = False
) -> SynthesisReport:
    """Specificity, coverage, minimum matching distance, shape JSD and 1-NN accuracy."""
    if not generated or not real:
        raise FieldError("Synthesis metrics need non-empty generated and real sets")
    cross = distance_matrix(generated, real, correspondence)
    report = SynthesisReport(
        specificity=float(np.mean(cross.min(axis=1))),
        coverage=len(np.unique(np.argmin(cross, axis=1))) / len(real),
        mmd=float(np.mean(cross.min(axis=0))),
        jsd=shape_jsd(generated, real),
        one_nna=one_nn_accuracy(generated, real, correspondence),
    )
    logger.info(
        "Synthesis metrics over %d generated and %d real meshes: %s",
        len(generated),
        len(real),
        report,
    )
    return report


def warp_meshes(mesh: TriMesh, deformations: Sequence[VectorField]) -> List[TriMesh]:
    """Carry one atlas-space mesh into the space of every deformation."""
    return [warp_mesh(mesh, phi) for phi in deformations]
