# Copyright 2026 darc-atlas contributors
# See LICENSE file for licensing details.

import pytest
import yaml

from darc_config import (
    DarcConfigInvalidError,
    LossConfig,
    Metric,
    OptimConfig,
    RunConfig,
    RunManifest,
)


class TestLossConfig:
    @pytest.mark.parametrize(
        "metric,expected_lambda", [("mse", 0.5), ("l1", 0.5), ("ncc", 8.0), ("ssim", 8.0)]
    )
    def test_given_metric_without_lambda_when_created_then_metric_default_lambda(
        self, metric, expected_lambda
    ):
        assert LossConfig(metric=metric).lam == expected_lambda

    def test_given_explicit_lambda_when_created_then_kept(self):
        assert LossConfig(**{"metric": "ncc", "lambda": 1.5}).lam == 1.5

    def test_given_upper_case_metric_when_created_then_normalized(self):
        cfg = LossConfig(metric="SSIM")

        assert cfg.metric == Metric.SSIM
        assert not cfg.closed_form

    def test_given_closed_form_metric_when_created_then_closed_form(self):
        assert LossConfig(metric="l1").closed_form


class TestRunConfig:
    def test_given_empty_mapping_when_built_then_defaults(self):
        run = RunConfig.from_mapping({})

        assert run.loss.metric == "mse"
        assert run.optim.outer_iters == 10
        assert run.optim.inner_iters == 300
        assert run.optim.exp_steps == 7

    def test_given_kebab_keys_when_built_then_routed_to_both_models(self):
        run = RunConfig.from_mapping(
            {"metric": "ncc", "ncc-window": 5, "learn-rate": 0.05, "outer-iters": 3}
        )

        assert run.loss.ncc_window == 5
        assert run.optim.learn_rate == 0.05
        assert run.optim.outer_iters == 3

    def test_given_even_window_when_built_then_config_invalid_error_names_field(self):
        with pytest.raises(DarcConfigInvalidError) as excinfo:
            RunConfig.from_mapping({"ncc-window": 4})

        assert excinfo.value.msg == "The following configurations are not valid: ['ncc-window']"

    def test_given_negative_lambda_when_built_then_config_invalid_error_is_raised(self):
        with pytest.raises(DarcConfigInvalidError) as excinfo:
            RunConfig.from_mapping({"lambda": -1.0})

        assert "'lambda'" in excinfo.value.msg

    def test_given_unknown_key_when_built_then_config_invalid_error_is_raised(self):
        with pytest.raises(DarcConfigInvalidError) as excinfo:
            RunConfig.from_mapping({"momentum": 0.9})

        assert "'momentum'" in excinfo.value.msg

    def test_given_yaml_file_and_overrides_when_loaded_then_non_none_overrides_win(
        self, tmp_path
    ):
        path = tmp_path / "config.yaml"
        path.write_text(yaml.safe_dump({"metric": "ssim", "learn-rate": 0.05, "seed": 3}))
        run = RunConfig.from_yaml(str(path), {"seed": 9, "learn-rate": None, "lambda": 2.0})

        assert run.loss.metric == "ssim"
        assert run.loss.lam == 2.0
        assert run.optim.learn_rate == 0.05
        assert run.optim.seed == 9

    def test_given_non_mapping_yaml_when_loaded_then_config_invalid_error_is_raised(
        self, tmp_path
    ):
        path = tmp_path / "config.yaml"
        path.write_text("- 1\n- 2\n")

        with pytest.raises(DarcConfigInvalidError):
            RunConfig.from_yaml(str(path))

    def test_given_run_config_when_echoed_then_kebab_case_keys(self):
        values = RunConfig.from_mapping({"metric": "l1"}).as_mapping()

        assert values["metric"] == "l1"
        assert values["lambda"] == 0.5
        assert values["learn-rate"] == OptimConfig().learn_rate
        assert values["regularize-on"] == "deformation"


class TestRunManifest:
    def test_given_manifest_when_written_and_read_then_equal(self, tmp_path):
        manifest = RunManifest(
            command="gen",
            seed=0,
            arguments={"n": 8},
            outputs=["b.yaml", "a.yaml"],
        )
        path = str(tmp_path / "manifest.yaml")

        manifest.write(path)

        assert RunManifest.read(path) == manifest
        with open(path) as f:
            assert "tool-version" in yaml.safe_load(f)
