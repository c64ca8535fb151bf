# Copyright 2026 darc-atlas contributors
# See LICENSE file for licensing details.

import numpy as np
import pytest

from fields import FieldError, Grid, LabelVolume, ScalarVolume, VectorField
from synthetic import smooth_random_velocity
from transform import (
    TriMesh,
    compose,
    exp_velocity,
    folding_fraction,
    jacobian_determinant,
    sample_trilinear,
    warp_labels_nn,
    warp_mesh,
    warp_volume,
)

GRID = Grid(dims=(8, 8, 8))


def tetrahedron() -> TriMesh:
    """Unit corner tetrahedron with outward faces."""
    vertices = np.array([[1.0, 1.0, 1.0], [2.0, 1.0, 1.0], [1.0, 2.0, 1.0], [1.0, 1.0, 2.0]])
    faces = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return TriMesh(vertices=vertices, faces=faces)


def linear_displacement(grid: Grid, slope: float) -> VectorField:
    """Displacement ``u_x = slope * x``, zero in y and z."""
    values = np.zeros((3, *grid.dims))
    values[0] = slope * np.indices(grid.dims)[0]
    return VectorField(grid=grid, values=values)


class TestSampling:
    def test_given_trilinear_polynomial_when_sampled_at_interior_point_then_exact(self):
        x, y, z = np.indices(GRID.dims, dtype=np.float64)

        def poly(x, y, z):
            return 1.0 + 2.0 * x - y + 0.5 * z + 0.3 * x * y - 0.2 * y * z + x * y * z

        volume = ScalarVolume(grid=GRID, values=poly(x, y, z))

        for point in [(1.25, 3.5, 2.75), (5.9, 0.1, 6.4), (3.0, 3.0, 3.0)]:
            assert sample_trilinear(volume, point) == pytest.approx(poly(*point), rel=1e-12)

    def test_given_point_outside_grid_when_sampled_then_border_value_is_used(self):
        x = np.indices(GRID.dims, dtype=np.float64)[0]
        volume = ScalarVolume(grid=GRID, values=x)

        assert sample_trilinear(volume, (-3.0, 2.0, 2.0)) == 0.0
        assert sample_trilinear(volume, (40.0, 2.0, 2.0)) == 7.0

    def test_given_non_finite_point_when_sampled_then_field_error_is_raised(self):
        with pytest.raises(FieldError):
            sample_trilinear(ScalarVolume.zeros(GRID), (np.nan, 1.0, 1.0))


class TestWarp:
    def test_given_zero_displacement_when_warped_then_volume_unchanged(self):
        values = np.random.default_rng(0).random(GRID.dims)
        volume = ScalarVolume(grid=GRID, values=values)

        warped = warp_volume(volume, VectorField.zeros(GRID))

        assert np.array_equal(warped.values, values)

    def test_given_unit_shift_when_warped_then_values_pulled_from_next_voxel(self):
        x = np.indices(GRID.dims, dtype=np.float64)[0]
        volume = ScalarVolume(grid=GRID, values=x)

        warped = warp_volume(volume, VectorField.constant(GRID, (1.0, 0.0, 0.0)))

        assert np.allclose(warped.values[:-1], x[:-1] + 1.0)
        assert np.allclose(warped.values[-1], 7.0)

    def test_given_labels_when_warped_by_fractional_shift_then_only_existing_ids_appear(self):
        labels = np.zeros(GRID.dims, dtype=int)
        labels[2:6, 2:6, 2:6] = 4
        labels[3:5, 3:5, 3:5] = 9

        warped = warp_labels_nn(
            LabelVolume(grid=GRID, labels=labels), VectorField.constant(GRID, (0.4, -0.6, 0.2))
        )

        assert set(warped.label_set()) <= {0, 4, 9}
        assert warped.labels[3, 4, 3] == labels[3, 3, 3]


class TestCompose:
    def test_given_zero_inner_or_outer_when_composed_then_other_field_is_returned(self):
        u = smooth_random_velocity(np.random.default_rng(1), GRID, 2.0, 1.0)
        zero = VectorField.zeros(GRID)

        assert np.allclose(compose(zero, u).values, u.values)
        assert np.allclose(compose(u, zero).values, u.values)

    def test_given_two_constants_when_composed_then_translations_add(self):
        c = VectorField.constant(GRID, (0.5, -1.0, 2.0))
        d = VectorField.constant(GRID, (1.5, 0.25, -0.5))

        result = compose(c, d)

        assert np.allclose(result.values, VectorField.constant(GRID, (2.0, -0.75, 1.5)).values)


class TestExpVelocity:
    def test_given_zero_steps_when_exponentiated_then_velocity_returned_unchanged(self):
        v = smooth_random_velocity(np.random.default_rng(2), GRID, 2.0, 1.5)

        assert np.array_equal(exp_velocity(v, 0).values, v.values)

    def test_given_negative_steps_when_exponentiated_then_field_error_is_raised(self):
        with pytest.raises(FieldError):
            exp_velocity(VectorField.zeros(GRID), -1)

    def test_given_constant_velocity_when_exponentiated_then_same_constant_displacement(self):
        v = VectorField.constant(GRID, (0.75, -0.5, 1.0))

        assert np.allclose(exp_velocity(v).values, v.values)

    def test_given_smooth_velocity_when_exp_composed_with_inverse_then_residual_is_small(self):
        grid = Grid(dims=(24, 24, 24))
        v = smooth_random_velocity(np.random.default_rng(3), grid, 3.0, 2.0)

        residual = compose(exp_velocity(v), exp_velocity(-v))

        assert float(np.mean(np.linalg.norm(residual.values, axis=0))) < 0.1
        assert folding_fraction(exp_velocity(v)) == 0.0


class TestJacobian:
    def test_given_zero_displacement_when_jacobian_then_one_everywhere(self):
        assert np.allclose(jacobian_determinant(VectorField.zeros(GRID)).values, 1.0)

    def test_given_constant_displacement_when_jacobian_then_one_everywhere(self):
        field = VectorField.constant(GRID, (3.0, -1.0, 2.0))

        assert np.allclose(jacobian_determinant(field).values, 1.0)

    def test_given_pure_stretch_when_jacobian_then_one_and_a_half(self):
        det = jacobian_determinant(linear_displacement(GRID, 0.5))

        assert np.allclose(det.values[1:-1, 1:-1, 1:-1], 1.5)

    def test_given_identity_when_folding_fraction_then_zero_percent(self):
        assert folding_fraction(VectorField.zeros(GRID)) == 0.0

    def test_given_reflecting_stretch_when_folding_fraction_then_every_voxel_folds(self):
        assert folding_fraction(linear_displacement(GRID, -2.0)) == 100.0


class TestTriMesh:
    def test_given_tetrahedron_when_inspected_then_closed_with_euler_two(self):
        mesh = tetrahedron()

        assert mesh.is_watertight()
        assert mesh.euler_characteristic() == 2
        assert mesh.signed_volume() == pytest.approx(1.0 / 6.0)

    def test_given_inverted_winding_when_volume_measured_then_negative(self):
        mesh = tetrahedron()
        inverted = TriMesh(vertices=mesh.vertices, faces=mesh.faces[:, ::-1])

        assert inverted.signed_volume() == pytest.approx(-1.0 / 6.0)
        assert inverted.is_watertight()

    def test_given_tetrahedron_missing_a_face_when_inspected_then_open_with_euler_one(self):
        mesh = tetrahedron()
        opened = TriMesh(vertices=mesh.vertices, faces=mesh.faces[:3])

        assert not opened.is_watertight()
        assert opened.euler_characteristic() == 1

    def test_given_empty_mesh_when_inspected_then_not_watertight_and_zero_volume(self):
        mesh = TriMesh.empty()

        assert not mesh.is_watertight()
        assert mesh.euler_characteristic() == 0
        assert mesh.signed_volume() == 0.0

    def test_given_tetrahedron_when_converted_then_trimesh_keeps_vertex_order(self):
        mesh = tetrahedron()

        assert np.array_equal(mesh.surface.vertices, mesh.vertices)
        assert np.array_equal(mesh.surface.faces, mesh.faces)

    def test_given_repeated_vertex_in_face_when_mesh_created_then_field_error_is_raised(self):
        with pytest.raises(FieldError):
            TriMesh(vertices=np.zeros((3, 3)), faces=np.array([[0, 1, 1]]))

    def test_given_face_index_out_of_range_when_mesh_created_then_field_error_is_raised(self):
        with pytest.raises(FieldError):
            TriMesh(vertices=np.zeros((3, 3)), faces=np.array([[0, 1, 3]]))

    def test_given_zero_displacement_when_mesh_warped_then_mesh_unchanged(self):
        mesh = tetrahedron()

        warped = warp_mesh(mesh, VectorField.zeros(GRID))

        assert np.array_equal(warped.vertices, mesh.vertices)
        assert np.array_equal(warped.faces, mesh.faces)

    def test_given_translation_along_z_when_mesh_warped_then_vertices_shift_by_two(self):
        mesh = tetrahedron()

        warped = warp_mesh(mesh, VectorField.constant(GRID, (0.0, 0.0, 2.0)))

        assert np.allclose(warped.vertices, mesh.vertices + [0.0, 0.0, 2.0])
        assert np.array_equal(warped.faces, mesh.faces)

    def test_given_smooth_deformation_when_mesh_warped_then_counts_and_orientation_kept(self):
        mesh = tetrahedron()
        phi = exp_velocity(smooth_random_velocity(np.random.default_rng(4), GRID, 2.0, 0.5))

        warped = warp_mesh(mesh, phi)

        assert warped.vertices.shape == mesh.vertices.shape
        assert np.array_equal(warped.faces, mesh.faces)
        assert warped.signed_volume() > 0
