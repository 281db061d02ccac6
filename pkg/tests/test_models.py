"""
Tests for the pydantic configuration and report models
"""

from fractions import Fraction

import pytest
from pydantic import ValidationError

from src.models import (
    VARIANTS,
    CompositeRecord,
    DataConfig,
    EvalReport,
    FusionMode,
    ImageScore,
    NetConfig,
    TrainConfig,
    round_half_up,
)


class TestNetConfig:
    """Test cases for NetConfig"""

    @pytest.mark.parametrize(("raw", "expected"), [("1/8", Fraction(1, 8)), (0.25, Fraction(1, 4)), (1, Fraction(1))])
    def test_width_scale_parsing(self, raw, expected):
        assert NetConfig(width_scale=raw).width_scale == expected

    @pytest.mark.parametrize("raw", [0, "3/2", -1, "abc", True, "1/0"])
    def test_width_scale_rejected(self, raw):
        with pytest.raises(ValidationError):
            NetConfig(width_scale=raw)

    def test_width_scale_serializes_as_fraction_string(self):
        assert NetConfig(width_scale="1/16").model_dump()["width_scale"] == "1/16"

    @pytest.mark.parametrize("name", VARIANTS)
    def test_variant_names_round_trip(self, name):
        """Test that each named variant reports its own name"""
        assert NetConfig.variant(name).variant_name == name

    @pytest.mark.parametrize(
        ("flags", "expected"),
        [
            ({"use_path2": False}, "minus_r"),
            ({"use_path2": False, "fusion_mode": "deconv_add"}, "minus_r+deconv_add"),
            ({"skips_path2": False, "fusion_mode": "deconv_add"}, "minus_rs+deconv_add"),
            ({"skips_path1": False}, "custom(use_path2=True, skips_path1=False, skips_path2=True)"),
        ],
    )
    def test_variant_name_reflects_every_flag(self, flags, expected):
        """Test that the name follows the path and skip flags, not only the fusion mode"""
        assert NetConfig(**flags).variant_name == expected

    def test_variant_overrides(self):
        config = NetConfig.variant("deconv_add", width_scale="1/4", seed=9)
        assert config.fusion_mode is FusionMode.DECONV_ADD
        assert config.seed == 9

    def test_unknown_variant(self):
        with pytest.raises(ValueError, match="Unknown variant"):
            NetConfig.variant("minus_everything")

    def test_frozen_and_strict(self):
        with pytest.raises(ValidationError):
            NetConfig(depth=3)
        config = NetConfig()
        with pytest.raises(ValidationError):
            config.seed = 4

    def test_round_half_up(self):
        assert round_half_up(Fraction(1, 2)) == 1
        assert round_half_up(Fraction(5, 2)) == 3
        assert round_half_up(Fraction(7, 3)) == 2


class TestTrainConfig:
    """Test cases for TrainConfig"""

    def test_defaults(self):
        config = TrainConfig()
        assert (config.learning_rate, config.momentum, config.weight_decay) == (0.001, 0.9, 1e-5)
        assert config.loss_normalization == "mean_per_pixel"

    def test_needs_stopping_rule(self):
        with pytest.raises(ValidationError, match="epochs or max_steps"):
            TrainConfig(epochs=None, max_steps=None)

    @pytest.mark.parametrize(
        "fields",
        [{"momentum": 1.0}, {"weight_decay": -1}, {"aux_loss_weights": (-0.1, 0)}, {"learning_rate": float("nan")}],
    )
    def test_rejects(self, fields):
        with pytest.raises(ValidationError):
            TrainConfig(**fields)


class TestDataModels:
    """Test cases for DataConfig, CompositeRecord and reports"""

    @pytest.mark.parametrize("threshold", [0, 1, 1.2])
    def test_gt_threshold_open_interval(self, threshold):
        with pytest.raises(ValidationError):
            DataConfig(gt_threshold=threshold)

    def test_record_beta_range(self):
        with pytest.raises(ValidationError):
            CompositeRecord(background="b", composite="c", mask="m", beta=0)

    def test_report_count_checked(self):
        """Test that n must equal the number of per-image scores"""
        with pytest.raises(ValidationError, match="per_image"):
            EvalReport(n=2, miou=1.0, mmse=0.0, per_image=[ImageScore(name="a", iou=1.0, mse=0.0)])
