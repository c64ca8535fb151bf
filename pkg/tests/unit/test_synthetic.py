# Copyright 2026 darc-atlas contributors
# See LICENSE file for licensing details.

import numpy as np
import pytest

from fields import FieldError, Grid
from synthetic import ellipsoid_phantom, gen_synthetic_population, smooth_random_velocity
from transform import exp_velocity, folding_fraction, warp_labels_nn, warp_volume

DIMS = (16, 16, 16)


class TestPhantom:
    def test_given_grid_when_phantom_built_then_three_nested_labels_over_background(self):
        image, labels = ellipsoid_phantom(Grid(dims=(24, 24, 24)))

        assert labels.label_set() == [0, 1, 2, 3]
        assert 0.0 <= image.values.min() and image.values.max() <= 1.0
        assert image.values[12, 12, 12] > image.values[12, 12, 3]

    def test_given_phantom_when_mirrored_along_x_then_labels_differ(self):
        _, labels = ellipsoid_phantom(Grid(dims=(24, 24, 24)))

        assert not np.array_equal(labels.labels, labels.labels[::-1])


class TestSmoothRandomVelocity:
    def test_given_amplitude_when_generated_then_largest_norm_equals_amplitude(self):
        v = smooth_random_velocity(np.random.default_rng(0), Grid(dims=DIMS), 2.0, 2.5)

        assert float(np.max(np.linalg.norm(v.values, axis=0))) == pytest.approx(2.5)

    def test_given_zero_amplitude_when_generated_then_zero_field(self):
        v = smooth_random_velocity(np.random.default_rng(0), Grid(dims=DIMS), 2.0, 0.0)

        assert np.all(v.values == 0.0)


class TestPopulation:
    def test_given_same_seed_when_generated_twice_then_identical_populations(self):
        first = gen_synthetic_population(seed=3, n=2, dims=DIMS)
        second = gen_synthetic_population(seed=3, n=2, dims=DIMS)

        for a, b in zip(first.images, second.images):
            assert np.array_equal(a.values, b.values)
        for a, b in zip(first.velocities, second.velocities):
            assert np.array_equal(a.values, b.values)

    def test_given_population_when_generated_then_subjects_are_template_warped_by_exp_v(self):
        population = gen_synthetic_population(seed=4, n=3, dims=DIMS, deform_amp=2.0)

        for image, labels, v, phi in zip(
            population.images, population.labels, population.velocities, population.deformations
        ):
            assert np.array_equal(phi.values, exp_velocity(v).values)
            assert np.array_equal(image.values, warp_volume(population.template, phi).values)
            assert np.array_equal(
                labels.labels, warp_labels_nn(population.template_labels, phi).labels
            )
            assert folding_fraction(phi) == 0.0

    def test_given_single_subject_when_generated_then_field_error_is_raised(self):
        with pytest.raises(FieldError):
            gen_synthetic_population(seed=0, n=1, dims=DIMS)

    def test_given_grid_below_minimum_when_generated_then_field_error_is_raised(self):
        with pytest.raises(FieldError):
            gen_synthetic_population(seed=0, n=2, dims=(8, 16, 16))

    def test_given_non_positive_smoothing_when_generated_then_field_error_is_raised(self):
        with pytest.raises(FieldError):
            gen_synthetic_population(seed=0, n=2, dims=DIMS, deform_sigma=0.0)
