"""
Pydantic V2 Models for smokeseg configuration and reports

Provides type-safe validation for every configuration document the pipeline
reads or writes: network, training, data synthesis, evaluation, and the
combined CLI config file. Unknown keys are rejected everywhere.
"""

import math
from enum import Enum
from fractions import Fraction
from typing import Annotated, Any, Literal

from pydantic import (
    BaseModel,
    BeforeValidator,
    ConfigDict,
    Field,
    PlainSerializer,
    field_validator,
    model_validator,
)

# =============================================================================
# BASE MODELS - Reusable patterns
# =============================================================================


class StrictModel(BaseModel):
    """Base model: unknown keys rejected, NaN/Inf rejected."""

    model_config = ConfigDict(extra="forbid", allow_inf_nan=False)


def _parse_fraction(value: Any) -> Fraction:
    """Accept Fraction, int, float or a string such as "1/8" or "0.125"."""
    if isinstance(value, Fraction):
        return value
    if isinstance(value, bool):
        raise ValueError("width_scale must be a number or a fraction string")
    if isinstance(value, int | float):
        return Fraction(str(value))
    if isinstance(value, str):
        try:
            return Fraction(value.strip())
        except (ValueError, ZeroDivisionError) as e:
            raise ValueError(f"cannot parse {value!r} as a rational number") from e
    raise ValueError("width_scale must be a number or a fraction string")


Rational = Annotated[
    Fraction,
    BeforeValidator(_parse_fraction),
    PlainSerializer(str, return_type=str),
]


def round_half_up(value: Fraction) -> int:
    return math.floor(value + Fraction(1, 2))


# =============================================================================
# NETWORK
# =============================================================================


class FusionMode(str, Enum):
    """How decoders merge resampled trunk features with skip features."""

    UPSAMPLE_CONCAT = "upsample_concat"
    DECONV_ADD = "deconv_add"


VARIANTS = ("full", "minus_rs", "minus_r", "minus_r_cs", "deconv_add")

# (use_path2, skips_path1, skips_path2) -> variant, for upsample-concat fusion
_VARIANT_BY_FLAGS = {
    (True, True, True): "full",
    (True, True, False): "minus_rs",
    (False, True, False): "minus_r",
    (False, False, False): "minus_r_cs",
}


class NetConfig(StrictModel):
    """Architecture switches for the two-path network and its ablation variants."""

    model_config = ConfigDict(extra="forbid", frozen=True, arbitrary_types_allowed=True)

    width_scale: Rational = Field(default=Fraction(1), description="Multiplier on every channel count")
    use_path2: bool = Field(default=True, description="Build the shallow refinement path")
    skips_path1: bool = Field(default=True, description="Skip encoder blocks 4, 3 into decoder blocks 6, 7")
    skips_path2: bool = Field(default=True, description="Skip encoder blocks 2, 1 into decoder blocks 4, 5")
    fusion_mode: FusionMode = Field(default=FusionMode.UPSAMPLE_CONCAT)
    seed: int = Field(default=0, ge=0, lt=2**64, description="Initialization seed")

    @field_validator("width_scale")
    @classmethod
    def check_width_scale(cls, v: Fraction) -> Fraction:
        """Width scale lies in (0, 1] and keeps at least one channel in the widest-rounded layer."""
        if not 0 < v <= 1:
            raise ValueError(f"width_scale must lie in (0, 1], got {v}")
        if round_half_up(64 * v) < 1:
            raise ValueError(f"width_scale {v} rounds 64 channels down to zero")
        return v

    def channels(self, base: int) -> int:
        """Scaled channel count: round half up, floor at 1."""
        return max(1, round_half_up(base * self.width_scale))

    @property
    def variant_name(self) -> str:
        """Name of the ablation variant these flags build; unnamed combinations spell out their flags."""
        # path 2 skips are meaningless without path 2
        flags = (self.use_path2, self.skips_path1, self.skips_path2 and self.use_path2)
        base = _VARIANT_BY_FLAGS.get(flags)
        if base is None:
            base = f"custom(use_path2={flags[0]}, skips_path1={flags[1]}, skips_path2={flags[2]})"
        if self.fusion_mode is FusionMode.DECONV_ADD:
            return "deconv_add" if base == "full" else f"{base}+deconv_add"
        return base

    @classmethod
    def variant(cls, name: str, **overrides: Any) -> "NetConfig":
        """
        Build a named ablation variant.

        Args:
            name: one of full, minus_rs, minus_r, minus_r_cs, deconv_add
            overrides: other NetConfig fields (width_scale, seed)
        """
        flags: dict[str, dict[str, Any]] = {
            "full": {},
            "minus_rs": {"skips_path2": False},
            "minus_r": {"use_path2": False, "skips_path2": False},
            "minus_r_cs": {"use_path2": False, "skips_path1": False, "skips_path2": False},
            "deconv_add": {"fusion_mode": FusionMode.DECONV_ADD},
        }
        if name not in flags:
            raise ValueError(f"Unknown variant {name!r}; expected one of {', '.join(VARIANTS)}")
        return cls(**{**flags[name], **overrides})


# =============================================================================
# TRAINING
# =============================================================================


class TrainConfig(StrictModel):
    """Optimizer and loop settings. Defaults follow the fixed-rate SGD recipe."""

    learning_rate: float = Field(default=0.001, ge=0)
    momentum: float = Field(default=0.9, ge=0, lt=1)
    weight_decay: float = Field(default=1e-5, ge=0, description="lambda of the L2 weight term")
    batch_size: int = Field(default=4, ge=1)
    epochs: int | None = Field(default=10, ge=0)
    max_steps: int | None = Field(default=None, ge=0)
    loss_normalization: Literal["sum", "mean_per_pixel"] = "mean_per_pixel"
    aux_loss_weights: tuple[float, float] = Field(default=(0.0, 0.0), description="(coarse, fine) loss weights")
    seed: int = Field(default=0, ge=0)
    checkpoint_every: int = Field(default=0, ge=0, description="Steps between checkpoints; 0 keeps only first/last")
    log_every: int = Field(default=10, ge=1)
    eval_every_epoch: bool = False
    record_wall_time: bool = Field(default=False, description="Fill the seconds column of history.csv")

    @field_validator("aux_loss_weights")
    @classmethod
    def check_aux_weights(cls, v: tuple[float, float]) -> tuple[float, float]:
        if any(w < 0 for w in v):
            raise ValueError("aux_loss_weights must be non-negative")
        return v

    @model_validator(mode="after")
    def check_stopping_rule(self) -> "TrainConfig":
        if self.epochs is None and self.max_steps is None:
            raise ValueError("either epochs or max_steps must be set")
        return self


# =============================================================================
# DATA SYNTHESIS
# =============================================================================


class SmokeGenParams(StrictModel):
    """Procedural pure-smoke generator settings (fractal value noise under a radial plume)."""

    octaves: int = Field(default=5, ge=1)
    lacunarity: float = Field(default=2.0, gt=0)
    gain: float = Field(default=0.5, gt=0)
    base_frequency: float = Field(default=4.0, gt=0, description="Lattice cells across the image at octave 0")
    plume_center: tuple[float, float] = Field(default=(0.5, 0.55), description="(x, y) in normalized coordinates")
    plume_radius: float = Field(default=0.45, gt=0)
    base_gray: float = Field(default=0.85, ge=0, le=1)
    seed: int = Field(default=0, ge=0)


class DataConfig(StrictModel):
    """Compositing defaults."""

    gt_threshold: float = Field(default=0.1, gt=0, lt=1)
    beta_min: float = Field(default=0.25, gt=0, le=1)
    height: int = Field(default=256, ge=16)
    width: int = Field(default=256, ge=16)
    workers: int = Field(default=1, ge=1)
    val_fraction: float = Field(default=0.0, ge=0, lt=1)
    smoke: SmokeGenParams = Field(default_factory=SmokeGenParams)


class CompositeRecord(StrictModel):
    """One manifest line: every input of a composite, paths relative to the manifest directory."""

    background: str
    smoke: str | None = None
    beta: float | None = Field(default=None, gt=0, le=1)
    gt_threshold: float = Field(default=0.1, gt=0, lt=1)
    seed: int = Field(default=0, ge=0)
    composite: str
    mask: str
    skipped: str | None = Field(default=None, description="Reason the record was not built")


# =============================================================================
# EVALUATION
# =============================================================================


class EvalConfig(StrictModel):
    """Evaluation and detection thresholds."""

    pixel_threshold: int = Field(default=50, ge=0, description="Smoke pixels a frame must exceed")
    raw: bool = Field(default=False, description="Keep probability maps instead of binarizing")


class ImageScore(BaseModel):
    """Per-image metric pair."""

    name: str
    iou: float = Field(ge=0, le=1)
    mse: float = Field(ge=0, le=1)


class EvalReport(BaseModel):
    """Dataset-level mIoU and mMse with the per-image breakdown."""

    label: str = "prediction"
    n: int = Field(ge=1)
    miou: float = Field(ge=0, le=1)
    mmse: float = Field(ge=0, le=1)
    per_image: list[ImageScore]

    @model_validator(mode="after")
    def check_means(self) -> "EvalReport":
        if len(self.per_image) != self.n:
            raise ValueError(f"per_image has {len(self.per_image)} entries, expected n={self.n}")
        return self


# =============================================================================
# CLI CONFIG FILE
# =============================================================================


class CliConfig(StrictModel):
    """The reproducible configuration document: one section per module."""

    net: NetConfig = Field(default_factory=NetConfig)
    train: TrainConfig = Field(default_factory=TrainConfig)
    data: DataConfig = Field(default_factory=DataConfig)
    eval: EvalConfig = Field(default_factory=EvalConfig)


# =============================================================================
# TRAINING HISTORY
# =============================================================================


class HistoryRow(BaseModel):
    """One optimizer step; `seconds` is None unless wall time recording is on."""

    step: int = Field(ge=1)
    data_loss: float = Field(ge=0, allow_inf_nan=False)
    full_loss: float = Field(ge=0, allow_inf_nan=False)
    seconds: float | None = None


class EpochRow(BaseModel):
    """Training-set scores after an epoch."""

    epoch: int = Field(ge=1)
    step: int = Field(ge=0)
    miou: float = Field(ge=0, le=1)
    mmse: float = Field(ge=0, le=1)
