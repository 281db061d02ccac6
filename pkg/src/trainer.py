"""
Trainer - Cross-entropy loss, SGD with momentum, and the training loop

Loss on a predicted probability map p against a binary ground truth g:

    L = -sum_i (g_i log p_i + (1 - g_i) log(1 - p_i)) + lambda * ||W||^2

The data term is divided by n*h*w under `mean_per_pixel` normalization.
||W||^2 sums squared convolution weights only (biases excluded). Weight
decay is applied by the optimizer:

    v <- momentum * v + (grad + 2 * lambda * w)     (weights)
    v <- momentum * v + grad                        (biases)
    w <- w - lr * v

so the backward pass only carries the data term; `full_loss` in the history
adds lambda * ||W||^2 for monitoring.

The loss attaches to the fused map. Non-zero `aux_loss_weights` add
weighted data terms on the coarse and fine maps, seeded into one backward pass.
"""

import logging
import math
import time
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from src.autograd.tensor import Param, Tensor, backward_many
from src.images import BinaryMask, RgbImage
from src.io_formats import load_image, read_manifest, save_checkpoint, write_csv
from src.metrics import evaluate
from src.models import EpochRow, EvalReport, HistoryRow, TrainConfig
from src.observability import record_train_step
from src.smokenet import SPATIAL_MULTIPLE, SmokeNet

logger = logging.getLogger("smokeseg.trainer")

PROB_FLOOR = 1e-7
HISTORY_HEADER = ("step", "data_loss", "full_loss", "seconds")
EPOCHS_HEADER = ("epoch", "step", "miou", "mmse")


class LossInputError(ValueError):
    """Raised when the ground truth is not binary or does not match the prediction."""


class MissingGradientError(RuntimeError):
    """Raised when the optimizer runs before a backward pass populated every gradient."""


class DatasetRecordError(ValueError):
    """Raised for an unusable training record; the message names the record."""


# =============================================================================
# LOSS
# =============================================================================


def data_term(pred: Tensor, gt: np.ndarray, normalization: str = "mean_per_pixel") -> tuple[float, np.ndarray]:
    """
    Binary cross-entropy of `pred` against `gt`, and its gradient w.r.t. `pred`.

    Raises:
        LossInputError: If gt's shape differs from pred's or gt holds values other than 0 and 1
    """
    if gt.shape != pred.shape:
        raise LossInputError(f"ground truth shape {gt.shape} does not match prediction {pred.shape}")
    if not np.all((gt == 0) | (gt == 1)):
        raise LossInputError("ground truth must be binary (0 or 1)")

    p = np.clip(pred.data.astype(np.float64), PROB_FLOOR, 1.0 - PROB_FLOOR)
    g = gt.astype(np.float64)
    loss = -float(np.sum(g * np.log(p) + (1.0 - g) * np.log(1.0 - p)))
    grad = (1.0 - g) / (1.0 - p) - g / p
    if normalization == "mean_per_pixel":
        loss /= p.size
        grad /= p.size
    return loss, grad.astype(pred.dtype)


def weight_penalty(params: Sequence[Param], weight_decay: float) -> float:
    """lambda * sum of squared weights (rank > 1 parameters only)."""
    return weight_decay * sum(float(np.sum(np.square(p.value, dtype=np.float64))) for p in params if p.is_weight)


def bce_loss(
    pred: Tensor,
    gt: np.ndarray,
    params: Sequence[Param],
    weight_decay: float,
    normalization: str = "mean_per_pixel",
) -> tuple[float, np.ndarray]:
    """Full loss (data term + weight penalty) and dL/dpred."""
    loss, grad = data_term(pred, gt, normalization)
    return loss + weight_penalty(params, weight_decay), grad


# =============================================================================
# OPTIMIZER
# =============================================================================


def sgd_step(params: Sequence[Param], config: TrainConfig) -> None:
    """
    One momentum-SGD update with coupled L2 decay on weights; gradients are zeroed afterwards.

    Raises:
        MissingGradientError: Naming the first parameter without a gradient
    """
    missing = next((p.name for p in params if p.grad is None), None)
    if missing is not None:
        raise MissingGradientError(f"{missing} has no gradient; run a backward pass before sgd_step")

    for p in params:
        assert p.grad is not None
        update = p.grad + (2.0 * config.weight_decay) * p.value if p.is_weight else p.grad
        p.momentum *= config.momentum
        p.momentum += update
        p.value -= config.learning_rate * p.momentum
        p.zero_grad()


def binarize(pred: Tensor | np.ndarray | BinaryMask) -> BinaryMask:
    """Strictly greater than 0.5 is smoke; accepts an (h, w) map or a single-image tensor."""
    if isinstance(pred, BinaryMask):
        values: np.ndarray = pred.labels
    else:
        values = pred.data if isinstance(pred, Tensor) else np.asarray(pred)
    values = values.reshape(values.shape[-2:]) if values.ndim > 2 else values
    return BinaryMask.from_bool(values > 0.5)


def binarize_batch(pred: Tensor) -> list[BinaryMask]:
    return [BinaryMask.from_bool(pred.data[i, 0] > 0.5) for i in range(pred.shape[0])]


# =============================================================================
# DATA
# =============================================================================


@dataclass
class TrainingSet:
    """Composites as (N, 3, h, w) float32 in [0, 1] and masks as (N, 1, h, w) float32."""

    names: list[str]
    images: np.ndarray
    masks: np.ndarray

    def __len__(self) -> int:
        return len(self.names)


def load_training_set(manifest: Path) -> TrainingSet:
    """
    Load every non-skipped record of a manifest.

    Raises:
        DatasetRecordError: Naming the record whose image and mask differ in size,
            whose size is not a multiple of 16, or whose size differs from the first record
    """
    manifest = Path(manifest)
    base = manifest.parent
    records = [r for r in read_manifest(manifest) if not r.skipped]
    if not records:
        raise DatasetRecordError(f"{manifest}: no usable records")

    names, images, masks = [], [], []
    for record in records:
        image = load_image(base / record.composite, "rgb")
        mask = load_image(base / record.mask, "mask")
        assert isinstance(image, RgbImage) and isinstance(mask, BinaryMask)
        size = (image.height, image.width)
        if mask.shape != size:
            raise DatasetRecordError(f"{record.composite}: image is {size} but mask {record.mask} is {mask.shape}")
        if size[0] % SPATIAL_MULTIPLE or size[1] % SPATIAL_MULTIPLE:
            raise DatasetRecordError(f"{record.composite}: size {size} is not a multiple of {SPATIAL_MULTIPLE}")
        if images and images[0].shape[1:] != (size[0], size[1]):
            raise DatasetRecordError(f"{record.composite}: size {size} differs from {names[0]}")
        names.append(record.composite)
        images.append(image.chw())
        masks.append(mask.labels.astype(np.float32)[None])

    return TrainingSet(names, np.stack(images), np.stack(masks))


def evaluate_set(net: SmokeNet, data: TrainingSet, batch_size: int = 4, label: str = "train") -> EvalReport:
    """Binarized fused predictions scored against the set's masks."""
    triples = []
    for start in range(0, len(data), batch_size):
        fused = net.forward(data.images[start : start + batch_size]).fused
        for offset, pr in enumerate(binarize_batch(fused)):
            i = start + offset
            triples.append((data.names[i], pr, BinaryMask.from_bool(data.masks[i, 0] > 0.5)))
    return evaluate(triples, label=label)


# =============================================================================
# LOOP
# =============================================================================


@dataclass
class TrainHistory:
    steps: list[HistoryRow] = field(default_factory=list)
    epochs: list[EpochRow] = field(default_factory=list)
    checkpoints: list[Path] = field(default_factory=list)


def _total_steps(config: TrainConfig, steps_per_epoch: int) -> int:
    budgets = []
    if config.epochs is not None:
        budgets.append(config.epochs * steps_per_epoch)
    if config.max_steps is not None:
        budgets.append(config.max_steps)
    return min(budgets)


def _format(value: float | None) -> str:
    return "" if value is None else repr(float(value))


def train(
    net: SmokeNet,
    data: TrainingSet | Path,
    config: TrainConfig,
    out_dir: Path,
) -> TrainHistory:
    """
    Train `net` in place.

    Batches are consecutive slices of a per-epoch permutation drawn from
    `config.seed`. A checkpoint is written before the first step, every
    `checkpoint_every` steps, and after the last step.

    Args:
        net: Network to train (its parameters are updated in place)
        data: A loaded TrainingSet or a manifest path
        config: Optimizer and loop settings
        out_dir: Receives checkpoints, history.csv and (optionally) epochs.csv

    Returns:
        TrainHistory with one row per step
    """
    dataset = data if isinstance(data, TrainingSet) else load_training_set(data)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    steps_per_epoch = math.ceil(len(dataset) / config.batch_size)
    total = _total_steps(config, steps_per_epoch)
    rng = np.random.default_rng(config.seed)
    history = TrainHistory()
    coarse_weight, fine_weight = config.aux_loss_weights

    def checkpoint(step: int) -> None:
        path = out_dir / f"ckpt_{step:06d}.dssn"
        save_checkpoint(net, path)
        history.checkpoints.append(path)

    logger.info(
        f"Training {net.config.variant_name} on {len(dataset)} images: {total} steps, "
        f"batch {config.batch_size}, lr {config.learning_rate}"
    )
    checkpoint(0)

    order: np.ndarray = np.arange(0)
    for step in range(1, total + 1):
        slot = (step - 1) % steps_per_epoch
        if slot == 0:
            order = rng.permutation(len(dataset))
        batch = order[slot * config.batch_size : (slot + 1) * config.batch_size]
        started = time.perf_counter()

        with record_train_step(step) as observe:
            bundle = net.forward(dataset.images[batch])
            targets = dataset.masks[batch]
            loss, grad = data_term(bundle.fused, targets, config.loss_normalization)
            seeds = [(bundle.fused, grad)]
            for weight, head in ((coarse_weight, bundle.coarse), (fine_weight, bundle.fine)):
                if weight > 0 and head is not None:
                    aux_loss, aux_grad = data_term(head, targets, config.loss_normalization)
                    loss += weight * aux_loss
                    seeds.append((head, (weight * aux_grad).astype(aux_grad.dtype)))
            if not math.isfinite(loss):
                raise FloatingPointError(f"step {step}: non-finite loss")

            net.zero_grad()
            backward_many(seeds)
            full = loss + weight_penalty(net.params, config.weight_decay)
            sgd_step(net.params, config)
            observe(loss)

        seconds = time.perf_counter() - started if config.record_wall_time else None
        history.steps.append(HistoryRow(step=step, data_loss=loss, full_loss=full, seconds=seconds))
        if step % config.log_every == 0 or step == total:
            logger.info(f"step {step}/{total}: data loss {loss:.6f}, full loss {full:.6f}")

        if config.checkpoint_every and step % config.checkpoint_every == 0 and step != total:
            checkpoint(step)

        if config.eval_every_epoch and (slot == steps_per_epoch - 1 or step == total):
            report = evaluate_set(net, dataset, config.batch_size)
            epoch = (step - 1) // steps_per_epoch + 1
            history.epochs.append(EpochRow(epoch=epoch, step=step, miou=report.miou, mmse=report.mmse))

    if total > 0:
        checkpoint(total)

    write_csv(
        out_dir / "history.csv",
        HISTORY_HEADER,
        ([r.step, _format(r.data_loss), _format(r.full_loss), _format(r.seconds)] for r in history.steps),
    )
    if config.eval_every_epoch:
        write_csv(
            out_dir / "epochs.csv",
            EPOCHS_HEADER,
            ([r.epoch, r.step, _format(r.miou), _format(r.mmse)] for r in history.epochs),
        )
    return history
