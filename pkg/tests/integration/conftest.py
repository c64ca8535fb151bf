#!/usr/bin/env python3
# Copyright 2026 darc-atlas contributors
# See LICENSE file for licensing details.

import os

import pytest


def pytest_addoption(parser: pytest.Parser) -> None:
    """Add options to the pytest command line.

    This is a pytest hook that is called when the pytest command line is being parsed.

    Args:
      parser: The pytest command line parser.
    """
    parser.addoption(
        "--output_dir",
        action="store",
        default=None,
        help="Directory that keeps the pipeline outputs for inspection",
    )


def pytest_configure(config: pytest.Config) -> None:
    """Validate the options provided by the user.

    This is a pytest hook that is called after command line options have been parsed.

    Args:
      config: The pytest configuration object.
    """
    output_dir = config.getoption("--output_dir")
    if output_dir and not os.path.isdir(output_dir):
        pytest.exit(f"The output directory does not exist: {output_dir}")


@pytest.fixture(scope="module")
def workdir(request: pytest.FixtureRequest, tmp_path_factory: pytest.TempPathFactory) -> str:
    """Per-module directory for pipeline outputs."""
    output_dir = request.config.getoption("--output_dir")
    name = request.module.__name__.rsplit(".", 1)[-1]
    if output_dir:
        path = os.path.join(output_dir, name)
        os.makedirs(path, exist_ok=True)
        return path
    return str(tmp_path_factory.mktemp(name))
