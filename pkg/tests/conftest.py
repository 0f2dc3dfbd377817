"""Shared fixtures for the test suite."""

import pathlib

import pytest

SCENARIO_DIR = pathlib.Path(__file__).resolve().parents[1] / "scenarios"


@pytest.fixture
def scenario_dir() -> pathlib.Path:
    return SCENARIO_DIR
