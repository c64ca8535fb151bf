# Copyright 2026 darc-atlas contributors
# See LICENSE file for licensing details.

import numpy as np
import pytest

from fields import FieldError, Grid, LabelVolume, ScalarVolume, VectorField
from shapegen import (
    fit_mesh_pca,
    fit_pca,
    marching_cubes,
    mesh_distance,
    mesh_mode,
    mode_shape,
    one_nn_accuracy,
    project,
    reconstruct,
    sample_pca,
    shape_jsd,
    synthesis_metrics,
    warp_meshes,
)
from synthetic import smooth_random_velocity
from transform import TriMesh, exp_velocity, folding_fraction

TINY = Grid(dims=(4, 4, 4))


def ball(grid: Grid, radius: float) -> LabelVolume:
    coords = np.indices(grid.dims, dtype=np.float64)
    center = (np.asarray(grid.dims, dtype=np.float64) - 1.0) / 2.0
    distance = np.sqrt(sum((coords[a] - center[a]) ** 2 for a in range(3)))
    return LabelVolume(grid=grid, labels=(distance <= radius).astype(int))


def jittered_tetrahedra(rng: np.random.Generator, count: int, scale: float = 0.2):
    base = np.array([[4.0, 4.0, 4.0], [6.0, 4.0, 4.0], [4.0, 6.0, 4.0], [4.0, 4.0, 6.0]])
    faces = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return [
        TriMesh(vertices=base + rng.normal(scale=scale, size=base.shape), faces=faces)
        for _ in range(count)
    ]


class TestFitPca:
    def test_given_random_fields_when_fit_then_matches_dense_covariance_eigensolve(self):
        rng = np.random.default_rng(0)
        fields = [
            VectorField(grid=TINY, values=rng.standard_normal((3, 4, 4, 4))) for _ in range(6)
        ]

        model = fit_pca(fields, 5)

        samples = np.stack([f.flat() for f in fields])
        covariance = np.cov(samples, rowvar=False)
        values, vectors = np.linalg.eigh(covariance)
        values, vectors = values[::-1][:5], vectors[:, ::-1][:, :5]
        assert np.allclose(model.eigenvalues, values, rtol=1e-6)
        for j in range(5):
            assert abs(float(model.components[j] @ vectors[:, j])) == pytest.approx(1.0, abs=1e-6)

    def test_given_opposite_fields_when_fit_then_single_component_along_the_field(self):
        w = np.random.default_rng(1).standard_normal((3, 4, 4, 4))
        fields = [VectorField(grid=TINY, values=w), VectorField(grid=TINY, values=-w)]

        model = fit_pca(fields, 1)

        flat_unit = VectorField(grid=TINY, values=w).flat() / np.linalg.norm(w)
        assert abs(float(model.components[0] @ flat_unit)) == pytest.approx(1.0)
        assert model.eigenvalues[0] == pytest.approx(2.0 * np.sum(w * w))
        assert np.allclose(model.mean_velocity, 0.0)

    def test_given_all_components_when_training_field_reconstructed_then_exact(self):
        rng = np.random.default_rng(2)
        fields = [smooth_random_velocity(rng, Grid(dims=(8, 8, 8)), 2.0, 1.0) for _ in range(5)]
        model = fit_pca(fields, 4)

        for field in fields:
            rebuilt = reconstruct(model, project(model, field))
            error = np.linalg.norm(rebuilt.values - field.values) / np.linalg.norm(field.values)
            assert error < 1e-4

    def test_given_identical_fields_when_fit_then_zero_variance_with_orthonormal_components(
        self,
    ):
        field = VectorField(grid=TINY, values=np.ones((3, 4, 4, 4)))

        model = fit_pca([field, field, field], 2)

        assert np.all(model.eigenvalues == 0.0)
        assert np.allclose(model.components @ model.components.T, np.eye(2))

    @pytest.mark.parametrize("p", [0, 3])
    def test_given_component_count_out_of_range_when_fit_then_field_error_is_raised(self, p):
        fields = [VectorField.zeros(TINY), VectorField.constant(TINY, (1.0, 0.0, 0.0))] * 2

        with pytest.raises(FieldError):
            fit_pca(fields[:3], p)


class TestSampling:
    @pytest.fixture()
    def model(self):
        rng = np.random.default_rng(3)
        grid = Grid(dims=(12, 12, 12))
        return fit_pca([smooth_random_velocity(rng, grid, 3.0, 1.0) for _ in range(6)], 3)

    def test_given_same_seed_when_sampled_twice_then_identical_fields(self, model):
        first, _ = sample_pca(model, 42)
        second, _ = sample_pca(model, 42)

        assert np.array_equal(first.values, second.values)

    def test_given_model_when_hundred_deformations_sampled_then_all_folding_free(self, model):
        rng = np.random.default_rng(4)

        for _ in range(100):
            _, deformation = sample_pca(model, rng)
            assert folding_fraction(deformation) == 0.0

    def test_given_zero_offset_when_mode_shape_then_mean_velocity(self, model):
        assert np.allclose(mode_shape(model, 1, 0.0).values, model.mean_field().values)

    def test_given_mode_sweep_when_projected_then_coordinate_is_t_standard_deviations(self, model):
        coordinates = project(model, mode_shape(model, 2, -1.5))

        assert coordinates[1] == pytest.approx(-1.5 * np.sqrt(model.eigenvalues[1]))
        assert coordinates[0] == pytest.approx(0.0, abs=1e-9)

    @pytest.mark.parametrize("j", [0, 4])
    def test_given_mode_index_out_of_range_when_mode_shape_then_field_error_is_raised(
        self, model, j
    ):
        with pytest.raises(FieldError):
            mode_shape(model, j, 1.0)


class TestMeshPca:
    def test_given_scaled_meshes_when_fit_then_first_mode_varies_size(self):
        base = jittered_tetrahedra(np.random.default_rng(5), 1, scale=0.0)[0]
        center = base.vertices.mean(axis=0)
        meshes = [
            TriMesh(vertices=center + s * (base.vertices - center), faces=base.faces)
            for s in (0.8, 0.9, 1.0, 1.1, 1.2)
        ]

        model = fit_mesh_pca(meshes, 2)

        small = mesh_mode(model, 1, -1.0).signed_volume()
        large = mesh_mode(model, 1, 1.0).signed_volume()
        assert abs(large - small) > 0.0
        assert np.allclose(mesh_mode(model, 1, 0.0).vertices, base.vertices)

    def test_given_meshes_without_correspondence_when_fit_then_field_error_is_raised(self):
        meshes = jittered_tetrahedra(np.random.default_rng(6), 2)
        other = TriMesh(vertices=meshes[1].vertices, faces=meshes[1].faces[:, ::-1])

        with pytest.raises(FieldError):
            fit_mesh_pca([meshes[0], other], 1)


class TestMarchingCubes:
    def test_given_ball_labels_when_meshed_then_watertight_sphere_oriented_outward(self):
        mesh = marching_cubes(ball(Grid(dims=(16, 16, 16)), 5.0), 0.5)

        assert mesh.is_watertight()
        assert mesh.euler_characteristic() == 2
        assert mesh.signed_volume() > 0

    def test_given_ball_touching_border_when_meshed_then_surface_is_closed(self):
        mesh = marching_cubes(ball(Grid(dims=(8, 8, 8)), 4.5), 0.5)

        assert mesh.is_watertight()
        assert mesh.vertices.min() >= -0.5

    def test_given_scalar_ball_when_meshed_then_vertices_in_voxel_coordinates(self):
        labels = ball(Grid(dims=(16, 16, 16)), 5.0)
        volume = ScalarVolume(grid=labels.grid, values=labels.labels.astype(float))

        mesh = marching_cubes(volume, 0.5)

        center = mesh.vertices.mean(axis=0)
        assert np.allclose(center, 7.5, atol=0.25)

    def test_given_empty_labels_when_meshed_then_empty_mesh(self):
        mesh = marching_cubes(LabelVolume(grid=TINY, labels=np.zeros(TINY.dims, dtype=int)), 0.5)

        assert len(mesh.vertices) == 0
        assert len(mesh.faces) == 0

    def test_given_iso_outside_value_range_when_meshed_then_field_error_is_raised(self):
        with pytest.raises(FieldError):
            marching_cubes(ball(Grid(dims=(8, 8, 8)), 2.0), 1.5)

    def test_given_sampled_deformations_when_mesh_warped_then_counts_preserved(self):
        grid = Grid(dims=(16, 16, 16))
        mesh = marching_cubes(ball(grid, 5.0), 0.5)
        rng = np.random.default_rng(7)
        deformations = [
            exp_velocity(smooth_random_velocity(rng, grid, 3.0, 1.5)) for _ in range(5)
        ]

        for warped in warp_meshes(mesh, deformations):
            assert warped.vertices.shape == mesh.vertices.shape
            assert np.array_equal(warped.faces, mesh.faces)


class TestSynthesisMetrics:
    def test_given_identical_sets_when_evaluated_then_perfect_scores(self):
        meshes = jittered_tetrahedra(np.random.default_rng(8), 6)

        report = synthesis_metrics(meshes, meshes, correspondence=True)

        assert report.specificity == 0.0
        assert report.mmd == 0.0
        assert report.coverage == 1.0
        assert report.jsd == pytest.approx(0.0, abs=1e-12)

    def test_given_translated_mesh_when_distance_with_correspondence_then_shift_length(self):
        mesh = jittered_tetrahedra(np.random.default_rng(9), 1)[0]
        moved = TriMesh(vertices=mesh.vertices + [0.0, 3.0, 4.0], faces=mesh.faces)

        assert mesh_distance(mesh, moved, correspondence=True) == pytest.approx(5.0)
        assert mesh_distance(mesh, mesh) == 0.0

    def test_given_empty_mesh_when_distance_then_field_error_is_raised(self):
        mesh = jittered_tetrahedra(np.random.default_rng(10), 1)[0]

        with pytest.raises(FieldError):
            mesh_distance(mesh, TriMesh.empty())

    def test_given_exchangeable_sets_when_one_nn_accuracy_then_near_one_half(self):
        rng = np.random.default_rng(11)
        meshes = jittered_tetrahedra(rng, 40)

        scores = []
        for _ in range(20):
            order = rng.permutation(len(meshes))
            generated = [meshes[i] for i in order[:20]]
            real = [meshes[i] for i in order[20:]]
            scores.append(one_nn_accuracy(generated, real, correspondence=True))

        assert 0.4 <= float(np.mean(scores)) <= 0.6

    def test_given_disjoint_sets_when_compared_then_bounded_scores(self):
        rng = np.random.default_rng(12)
        generated = jittered_tetrahedra(rng, 5)
        real = [
            TriMesh(vertices=m.vertices + 10.0, faces=m.faces) for m in jittered_tetrahedra(rng, 5)
        ]

        report = synthesis_metrics(generated, real, correspondence=True)

        assert report.specificity > 0.0
        assert report.mmd > 0.0
        assert 0.0 <= report.coverage <= 1.0
        assert 0.0 <= report.jsd <= np.log(2.0) + 1e-12
        assert report.one_nna == 1.0

    def test_given_no_meshes_when_evaluated_then_field_error_is_raised(self):
        with pytest.raises(FieldError):
            synthesis_metrics([], jittered_tetrahedra(np.random.default_rng(13), 2))

    def test_given_same_set_when_jsd_then_zero(self):
        meshes = jittered_tetrahedra(np.random.default_rng(14), 3)

        assert shape_jsd(meshes, meshes) == pytest.approx(0.0, abs=1e-12)

    def test_given_same_vertices_with_other_faces_when_jsd_then_zero(self):
        meshes = jittered_tetrahedra(np.random.default_rng(15), 3)
        rewound = [TriMesh(vertices=m.vertices, faces=m.faces[:, ::-1]) for m in meshes]

        assert shape_jsd(meshes, rewound) == pytest.approx(0.0, abs=1e-12)

    def test_given_disjoint_vertex_clouds_when_jsd_then_log_two(self):
        near = jittered_tetrahedra(np.random.default_rng(16), 2, scale=0.0)
        far = [TriMesh(vertices=m.vertices + 50.0, faces=m.faces) for m in near]

        assert shape_jsd(near, far) == pytest.approx(np.log(2.0))
