"""
Metrics - Segmentation scores and the pixel-count smoke detector

All metrics operate on binarized masks. On {0, 1} values the mean squared
error equals the fraction of disagreeing pixels. IoU over an empty union
(both masks without smoke) is defined as 1.0.

A frame is classified as smoke when its predicted mask has strictly more
than `pixel_threshold` smoke pixels. Frame indices are 1-based.
"""

import logging
from collections.abc import Sequence
from dataclasses import dataclass
from enum import Enum

import numpy as np

from src.images import BinaryMask
from src.models import EvalReport, ImageScore
from src.observability import record_frame

logger = logging.getLogger("smokeseg.metrics")

MaskPair = tuple[BinaryMask, BinaryMask]


class MaskShapeError(ValueError):
    """Raised when a prediction and its ground truth differ in size."""


class EmptyEvaluationError(ValueError):
    """Raised when a mean is requested over zero images."""


def _check_pair(pr: BinaryMask, gt: BinaryMask) -> None:
    if pr.shape != gt.shape:
        raise MaskShapeError(f"prediction is {pr.shape} but ground truth is {gt.shape}")


def iou(pr: BinaryMask, gt: BinaryMask) -> float:
    """|PR and GT| / |PR or GT| over smoke pixels; 1.0 when both are empty."""
    _check_pair(pr, gt)
    p, g = pr.labels.astype(bool), gt.labels.astype(bool)
    union = int(np.count_nonzero(p | g))
    if union == 0:
        return 1.0
    return int(np.count_nonzero(p & g)) / union


def mse_image(pr: BinaryMask, gt: BinaryMask) -> float:
    """Mean squared per-pixel difference (the disagreement fraction on binary masks)."""
    _check_pair(pr, gt)
    diff = pr.labels.astype(np.int64) - gt.labels.astype(np.int64)
    return int(np.sum(diff * diff)) / diff.size


def _mean(pairs: Sequence[MaskPair], metric: str) -> float:
    if not pairs:
        raise EmptyEvaluationError(f"{metric} needs at least one (prediction, ground truth) pair")
    fn = iou if metric == "mIoU" else mse_image
    return sum(fn(pr, gt) for pr, gt in pairs) / len(pairs)


def miou(pairs: Sequence[MaskPair]) -> float:
    return _mean(pairs, "mIoU")


def mmse(pairs: Sequence[MaskPair]) -> float:
    return _mean(pairs, "mMse")


def evaluate(pairs: Sequence[tuple[str, BinaryMask, BinaryMask]], label: str = "prediction") -> EvalReport:
    """
    Score named (name, prediction, ground truth) triples.

    Returns:
        EvalReport whose aggregates are the arithmetic means of the per-image scores

    Raises:
        EmptyEvaluationError: On an empty input
        MaskShapeError: Naming the first mismatched image
    """
    if not pairs:
        raise EmptyEvaluationError("nothing to evaluate")
    scores = []
    for name, pr, gt in pairs:
        try:
            scores.append(ImageScore(name=name, iou=iou(pr, gt), mse=mse_image(pr, gt)))
        except MaskShapeError as e:
            raise MaskShapeError(f"{name}: {e}") from e
    n = len(scores)
    report = EvalReport(
        label=label,
        n=n,
        miou=sum(s.iou for s in scores) / n,
        mmse=sum(s.mse for s in scores) / n,
        per_image=scores,
    )
    logger.info(f"{label}: mIoU {report.miou:.4f}, mMse {report.mmse:.4f} over {n} images")
    return report


# =============================================================================
# DETECTION
# =============================================================================


class FrameClass(str, Enum):
    SMOKE = "smoke"
    NON_SMOKE = "non_smoke"


def detect_frame(pr: BinaryMask, pixel_threshold: int) -> FrameClass:
    """Smoke iff the mask has strictly more than `pixel_threshold` smoke pixels."""
    if pixel_threshold < 0:
        raise ValueError(f"pixel_threshold must be >= 0, got {pixel_threshold}")
    return FrameClass.SMOKE if pr.count() > pixel_threshold else FrameClass.NON_SMOKE


@dataclass
class DetectionResult:
    """Per-frame classes, the first smoke frame (1-based) and false alarms against labels."""

    classes: list[FrameClass]
    first_smoke_frame: int | None
    false_alarms: int | None = None


def detect_sequence(
    frames: Sequence[BinaryMask],
    pixel_threshold: int,
    labels: Sequence[FrameClass] | None = None,
) -> DetectionResult:
    """
    Classify an ordered frame sequence.

    Args:
        frames: Predicted masks in temporal order
        pixel_threshold: Smoke-pixel count a frame must exceed
        labels: Optional ground-truth class per frame; enables the false-alarm count

    Raises:
        ValueError: If labels are given with a different length than frames
    """
    if labels is not None and len(labels) != len(frames):
        raise ValueError(f"{len(labels)} labels for {len(frames)} frames")

    classes = []
    for frame in frames:
        cls = detect_frame(frame, pixel_threshold)
        record_frame(cls is FrameClass.SMOKE)
        classes.append(cls)

    first = next((i for i, c in enumerate(classes, start=1) if c is FrameClass.SMOKE), None)
    false_alarms = None
    if labels is not None:
        false_alarms = sum(
            1 for c, lbl in zip(classes, labels, strict=True) if c is FrameClass.SMOKE and lbl is FrameClass.NON_SMOKE
        )
    return DetectionResult(classes=classes, first_smoke_frame=first, false_alarms=false_alarms)
