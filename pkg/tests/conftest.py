"""
Pytest configuration and shared fixtures for smokeseg tests.
"""

import os
from collections.abc import Iterator
from fractions import Fraction
from pathlib import Path
from unittest.mock import patch

import numpy as np
import pytest

from src.images import RgbaImage, RgbImage
from src.io_formats import save_image
from src.models import NetConfig


@pytest.fixture(autouse=True)
def mock_env_vars() -> Iterator[None]:
    """Automatically pin runtime settings for all tests."""
    with patch.dict(
        os.environ,
        {
            "SMOKESEG_LOG_LEVEL": "WARNING",
            "SMOKESEG_LOG_FORMAT": "text",
            "SMOKESEG_METRICS_CONSOLE": "0",
        },
    ):
        os.environ.pop("SMOKESEG_CONFIG", None)
        yield


@pytest.fixture
def rng() -> np.random.Generator:
    """Seeded generator so every test is reproducible."""
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config() -> NetConfig:
    """Width 1/16: 4-channel first block, fast enough for per-test forward passes."""
    return NetConfig(width_scale=Fraction(1, 16), seed=7)


def make_rgb(rng: np.random.Generator, height: int, width: int) -> RgbImage:
    return RgbImage(rng.integers(0, 256, size=(height, width, 3), dtype=np.uint8))


def make_rgba(rng: np.random.Generator, height: int, width: int) -> RgbaImage:
    return RgbaImage(rng.integers(0, 256, size=(height, width, 4), dtype=np.uint8))


@pytest.fixture
def background_dir(tmp_path: Path, rng: np.random.Generator) -> Path:
    """Four random RGB backgrounds of assorted sizes."""
    directory = tmp_path / "backgrounds"
    for i, (h, w) in enumerate([(32, 32), (40, 60), (64, 48), (32, 32)]):
        save_image(make_rgb(rng, h, w), directory / f"bg_{i}.png")
    return directory


@pytest.fixture
def smoke_dir(tmp_path: Path, rng: np.random.Generator) -> Path:
    """Three random RGBA smokes at 32x32."""
    directory = tmp_path / "smokes"
    for i in range(3):
        save_image(make_rgba(rng, 32, 32), directory / f"smoke_{i}.png")
    return directory
