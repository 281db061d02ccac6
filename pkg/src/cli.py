"""
smokeseg command line

Subcommands:
    gen-smoke   procedural pure-smoke RGBA images plus a params sidecar
    composite   composites, masks and a manifest from background/smoke directories
    train       SGD training from a manifest; checkpoints and history.csv
    segment     fused (and optionally coarse/fine) maps for input images
    eval        mIoU / mMse of one or more prediction directories
    detect      frame-level smoke detection over a directory of frames
    gradcheck   finite-difference checks of every kernel (and whole networks)
    describe    spatial trace and parameter counts for a network config

Exit codes: 0 success, 1 validation error, 2 runtime error, 3 check failure.
Every subcommand echoes its resolved configuration before acting.
"""

import functools
import json
import logging
from collections.abc import Callable, Sequence
from contextlib import nullcontext
from fractions import Fraction
from pathlib import Path
from typing import Any, TypeVar

import click
import numpy as np
from pydantic import ValidationError

from src import __version__
from src.autograd import KERNEL_NAMES, inject_adjoint_fault
from src.autograd.gradcheck import DEFAULT_TOLERANCE, check_kernels
from src.compositor import (
    MANIFEST_NAME,
    VAL_MANIFEST_NAME,
    build_dataset,
    gen_pure_smoke,
    list_images,
    plan_records,
    split_records,
)
from src.config import ConfigError, dump_config, format_validation_error, load_cli_config
from src.images import BinaryMask, ImageError, RgbImage, quantize
from src.io_formats import ManifestError, import_npz_weights, load_checkpoint, load_image, save_image, write_csv
from src.metrics import FrameClass, MaskShapeError, detect_sequence, evaluate
from src.models import CliConfig, EvalReport, NetConfig
from src.observability import configure_logging, record_gradcheck, shutdown_metrics
from src.reporting import StatusLabels, eval_table, gradcheck_table, parameter_table, summary_block, trace_table
from src.smokenet import InputShapeError, SmokeNet, build_network, grad_check_network, spatial_trace
from src.trainer import DatasetRecordError, binarize, train

logger = logging.getLogger("smokeseg.cli")

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_RUNTIME = 2
EXIT_CHECK = 3

GRADCHECK_NETWORK_SCALE = Fraction(1, 16)
GRADCHECK_NETWORK_VARIANTS = ("full", "deconv_add")


class CheckFailedError(Exception):
    """A check ran to completion and reported failure."""


class PairingError(ValueError):
    """Prediction and ground-truth directories do not hold the same file names."""


VALIDATION_ERRORS: tuple[type[Exception], ...] = (
    ValidationError,
    ConfigError,
    ManifestError,
    DatasetRecordError,
    MaskShapeError,
    PairingError,
    InputShapeError,
    click.BadParameter,
)

F = TypeVar("F", bound=Callable[..., Any])


def handled(command_name: str) -> Callable[[F], F]:
    """
    Wrap a subcommand with consistent error handling and logging.

    Validation failures exit 1, failed checks exit 3, anything else exits 2
    after logging the traceback.
    """

    def decorator(fn: F) -> F:
        @functools.wraps(fn)
        def wrapper(*args: Any, **kwargs: Any) -> Any:
            ctx = click.get_current_context()
            log = logging.getLogger(f"smokeseg.cli.{command_name}")
            log.info(f"Executing {command_name}")
            try:
                code = fn(*args, **kwargs)
            except VALIDATION_ERRORS as e:
                message = format_validation_error(e) if isinstance(e, ValidationError) else str(e)
                log.warning(f"{command_name} validation failed", extra={"error": message})
                click.echo(f"{StatusLabels.ERR} {command_name} validation failed: {message}", err=True)
                ctx.exit(EXIT_VALIDATION)
            except CheckFailedError as e:
                click.echo(f"{StatusLabels.FAIL} {command_name}: {e}", err=True)
                ctx.exit(EXIT_CHECK)
            except Exception as e:
                log.exception(f"{command_name} failed with unexpected error")
                click.echo(f"{StatusLabels.ERR} {command_name} failed: {e!s}", err=True)
                ctx.exit(EXIT_RUNTIME)
            if code:
                ctx.exit(code)
            log.info(f"{command_name} completed successfully")
            return EXIT_OK

        return wrapper  # type: ignore[return-value]

    return decorator


# =============================================================================
# SHARED OPTIONS
# =============================================================================


class SizeType(click.ParamType):
    """HxW, e.g. 256x256."""

    name = "HxW"

    def convert(self, value: Any, param: click.Parameter | None, ctx: click.Context | None) -> tuple[int, int]:
        if isinstance(value, tuple):
            return value
        try:
            h, w = (int(part) for part in str(value).lower().split("x"))
        except ValueError:
            self.fail(f"{value!r} is not of the form HxW", param, ctx)
        if h < 1 or w < 1:
            self.fail(f"{value!r} must have positive height and width", param, ctx)
        return h, w


def config_option(fn: F) -> F:
    return click.option(
        "--config",
        "config_path",
        type=click.Path(exists=True, dir_okay=False, path_type=Path),
        default=None,
        help="JSON config file (defaults to SMOKESEG_CONFIG, then built-in defaults)",
    )(fn)


def _resolve(config_path: Path | None, **overrides: dict[str, Any]) -> CliConfig:
    """Load the config file and apply per-section flag overrides, revalidating the result."""
    config = load_cli_config(config_path)
    if any(overrides.values()):
        document = config.model_dump(mode="json")
        for section, values in overrides.items():
            document[section].update({k: v for k, v in values.items() if v is not None})
        config = CliConfig.model_validate(document)
    return config


def _echo_config(config: Any, **flags: Any) -> None:
    click.echo(f"{StatusLabels.CFG} resolved configuration:")
    if config is not None:
        click.echo(dump_config(config))
    if flags:
        click.echo(json.dumps({k: str(v) if isinstance(v, Path) else v for k, v in flags.items()}, default=str))


# =============================================================================
# GROUP
# =============================================================================


@click.group(name="smokeseg")
@click.version_option(__version__, prog_name="smokeseg")
@click.option("--log-level", default=None, help="Override SMOKESEG_LOG_LEVEL")
@click.option("--log-format", type=click.Choice(["text", "json"]), default=None, help="Override SMOKESEG_LOG_FORMAT")
def cli(log_level: str | None, log_format: str | None) -> None:
    """Two-path smoke segmentation: data synthesis, training, evaluation and detection."""
    configure_logging(log_level.upper() if log_level else None, log_format)


# =============================================================================
# DATA
# =============================================================================


@cli.command("gen-smoke")
@click.option("--count", type=click.IntRange(min=0), required=True)
@click.option("--size", type=SizeType(), default=None, help="HxW (defaults to data.height x data.width)")
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Base seed; image i uses seed ^ i")
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@config_option
@handled("gen-smoke")
def gen_smoke_cmd(
    count: int, size: tuple[int, int] | None, seed: int | None, out_dir: Path, config_path: Path | None
) -> int:
    """Write COUNT procedural RGBA smoke images and a params.json sidecar."""
    config = _resolve(config_path)
    params = config.data.smoke if seed is None else config.data.smoke.model_copy(update={"seed": seed})
    height, width = size or (config.data.height, config.data.width)
    _echo_config(params, count=count, size=f"{height}x{width}", out=out_dir)

    out_dir.mkdir(parents=True, exist_ok=True)
    files = []
    for index in range(count):
        image_seed = params.seed ^ index
        name = f"smoke_{index:06d}.png"
        save_image(gen_pure_smoke(params.model_copy(update={"seed": image_seed}), width, height), out_dir / name)
        files.append({"file": name, "seed": image_seed})

    sidecar = {"height": height, "width": width, "params": params.model_dump(mode="json"), "files": files}
    (out_dir / "params.json").write_text(json.dumps(sidecar, indent=2) + "\n", encoding="utf-8")
    click.echo(f"{StatusLabels.OK} wrote {count} smoke images to {out_dir}")
    return EXIT_OK


@cli.command("composite")
@click.option("--backgrounds", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option(
    "--smokes",
    type=click.Path(exists=True, file_okay=False, path_type=Path),
    default=None,
    help="Pure RGBA smoke images; omit to generate them procedurally",
)
@click.option("--count", type=click.IntRange(min=0), required=True)
@click.option("--seed", type=click.IntRange(min=0), default=0)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--val-fraction", type=click.FloatRange(0.0, 1.0, max_open=True), default=None)
@click.option("--workers", type=click.IntRange(min=1), default=None)
@config_option
@handled("composite")
def composite_cmd(
    backgrounds: Path,
    smokes: Path | None,
    count: int,
    seed: int,
    out_dir: Path,
    val_fraction: float | None,
    workers: int | None,
    config_path: Path | None,
) -> int:
    """Blend smoke over backgrounds; write composites, masks and manifest.jsonl."""
    config = _resolve(config_path, data={"val_fraction": val_fraction, "workers": workers})
    _echo_config(config.data, backgrounds=backgrounds, smokes=smokes, count=count, seed=seed, out=out_dir)

    background_files = list_images(backgrounds)
    if not background_files:
        raise click.BadParameter(f"{backgrounds} contains no images", param_hint="--backgrounds")
    smoke_files = list_images(smokes) if smokes is not None else []
    if smokes is not None and not smoke_files:
        raise click.BadParameter(f"{smokes} contains no images", param_hint="--smokes")

    out_dir.mkdir(parents=True, exist_ok=True)
    records = plan_records(background_files, smoke_files, count, seed, config.data, out_dir)
    splits = [(records, MANIFEST_NAME)]
    if config.data.val_fraction > 0:
        train_records, val_records = split_records(records, config.data.val_fraction, seed)
        splits = [(train_records, MANIFEST_NAME), (val_records, VAL_MANIFEST_NAME)]

    for subset, manifest_name in splits:
        built = build_dataset(subset, config.data.smoke, out_dir, config.data, manifest_name)
        skipped = [r for r in built if r.skipped]
        for record in skipped:
            click.echo(f"{StatusLabels.SKIP} {record.composite}: {record.skipped}")
        click.echo(f"{StatusLabels.OK} {manifest_name}: {len(built) - len(skipped)} written, {len(skipped)} skipped")
    return EXIT_OK


# =============================================================================
# TRAINING
# =============================================================================


@cli.command("train")
@config_option
@click.option("--data", "manifest", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--max-steps", type=click.IntRange(min=0), default=None)
@click.option("--seed", type=click.IntRange(min=0), default=None, help="Overrides train.seed")
@click.option("--init", "init_checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--weights", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None, help=".npz")
@handled("train")
def train_cmd(
    config_path: Path | None,
    manifest: Path,
    out_dir: Path,
    max_steps: int | None,
    seed: int | None,
    init_checkpoint: Path | None,
    weights: Path | None,
) -> int:
    """Train a network on MANIFEST; checkpoints and history.csv go to OUT."""
    config = _resolve(config_path, train={"max_steps": max_steps, "seed": seed})
    _echo_config(config, data=manifest, out=out_dir, init=init_checkpoint, weights=weights)

    net = load_checkpoint(init_checkpoint) if init_checkpoint else build_network(config.net)
    if weights is not None:
        import_npz_weights(net, weights)

    history = train(net, manifest, config.train, out_dir)
    facts: dict[str, Any] = {"steps": len(history.steps), "checkpoints": len(history.checkpoints)}
    if history.steps:
        facts["final data loss"] = f"{history.steps[-1].data_loss:.6f}"
    if history.epochs:
        facts["final train mIoU"] = f"{history.epochs[-1].miou:.4f}"
    click.echo(summary_block(f"Training finished in {out_dir}", facts))
    return EXIT_OK


# =============================================================================
# INFERENCE
# =============================================================================


def _to_gray(prob: np.ndarray, raw: bool) -> np.ndarray | BinaryMask:
    return quantize(prob) if raw else binarize(prob)


def _load_input(path: Path) -> RgbImage:
    image = load_image(path, "rgb")
    assert isinstance(image, RgbImage)
    return image


def _predict_masks(net: SmokeNet, frames: Sequence[Path]) -> list[BinaryMask]:
    return [binarize(net.forward(_load_input(f).chw()[None]).fused) for f in frames]


@cli.command("segment")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option(
    "--input", "inputs", type=click.Path(exists=True, dir_okay=False, path_type=Path), multiple=True, required=True
)
@click.option("--out", "out_dir", type=click.Path(file_okay=False, path_type=Path), required=True)
@click.option("--raw/--binary", default=None, help="Keep probability maps (default: eval.raw)")
@click.option("--emit-paths", is_flag=True, help="Also write <stem>_coarse.png and <stem>_fine.png")
@config_option
@handled("segment")
def segment_cmd(
    checkpoint: Path,
    inputs: tuple[Path, ...],
    out_dir: Path,
    raw: bool | None,
    emit_paths: bool,
    config_path: Path | None,
) -> int:
    """Segment each --input image; a size violation fails that file only."""
    config = _resolve(config_path, eval={"raw": raw})
    _echo_config(config.eval, checkpoint=checkpoint, inputs=[str(p) for p in inputs], emit_paths=emit_paths)
    net = load_checkpoint(checkpoint)
    out_dir.mkdir(parents=True, exist_ok=True)

    failures = 0
    for path in inputs:
        try:
            bundle = net.forward(_load_input(path).chw()[None])
        except (InputShapeError, ImageError, OSError) as e:
            failures += 1
            logger.warning(f"Skipping {path}: {e}")
            click.echo(f"{StatusLabels.ERR} {path}: {e}", err=True)
            continue
        outputs = {"": bundle.fused}
        if emit_paths:
            outputs["_coarse"] = bundle.coarse
            if bundle.fine is not None:
                outputs["_fine"] = bundle.fine
        for suffix, tensor in outputs.items():
            save_image(_to_gray(tensor.data[0, 0], config.eval.raw), out_dir / f"{path.stem}{suffix}.png")
        click.echo(f"{StatusLabels.OK} {path.name} -> {path.stem}.png")

    if failures:
        click.echo(f"{StatusLabels.WARN} {failures} of {len(inputs)} inputs failed", err=True)
        return EXIT_RUNTIME
    return EXIT_OK


def _pair(pred_dir: Path, gt_dir: Path) -> list[tuple[str, BinaryMask, BinaryMask]]:
    preds = {p.name: p for p in list_images(pred_dir)}
    gts = {p.name: p for p in list_images(gt_dir)}
    missing_gt = sorted(set(preds) - set(gts))
    missing_pred = sorted(set(gts) - set(preds))
    if missing_gt or missing_pred:
        raise PairingError(
            f"unmatched files between {pred_dir} and {gt_dir}: "
            f"no ground truth for {missing_gt or '[]'}; no prediction for {missing_pred or '[]'}"
        )
    pairs = []
    for name in sorted(preds):
        pr, gt = load_image(preds[name], "mask"), load_image(gts[name], "mask")
        assert isinstance(pr, BinaryMask) and isinstance(gt, BinaryMask)
        pairs.append((name, pr, gt))
    return pairs


@cli.command("eval")
@click.option(
    "--pred", "pred_dirs", type=click.Path(exists=True, file_okay=False, path_type=Path), multiple=True, required=True
)
@click.option("--label", "labels", multiple=True, help="One name per --pred, in order")
@click.option("--gt", "gt_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--out", "out_path", type=click.Path(dir_okay=False, path_type=Path), required=True)
@handled("eval")
def eval_cmd(pred_dirs: tuple[Path, ...], labels: tuple[str, ...], gt_dir: Path, out_path: Path) -> int:
    """Score prediction masks against ground truth; JSON report plus a text table."""
    if labels and len(labels) != len(pred_dirs):
        raise click.BadParameter(f"{len(labels)} labels for {len(pred_dirs)} --pred directories", param_hint="--label")
    names = list(labels) or [p.name for p in pred_dirs]
    _echo_config(None, pred=[str(p) for p in pred_dirs], label=names, gt=gt_dir, out=out_path)

    reports: list[EvalReport] = [evaluate(_pair(d, gt_dir), label=n) for d, n in zip(pred_dirs, names, strict=True)]

    out_path.parent.mkdir(parents=True, exist_ok=True)
    if len(reports) == 1:
        out_path.write_text(reports[0].model_dump_json(indent=2) + "\n", encoding="utf-8")
    else:
        out_path.write_text(json.dumps([r.model_dump(mode="json") for r in reports], indent=2) + "\n", encoding="utf-8")
    click.echo(eval_table(reports))
    return EXIT_OK


def _read_labels(path: Path, expected: int) -> list[FrameClass]:
    """One label per line: smoke/non_smoke or 1/0; blank lines ignored."""
    aliases = {
        "1": FrameClass.SMOKE,
        "smoke": FrameClass.SMOKE,
        "0": FrameClass.NON_SMOKE,
        "non_smoke": FrameClass.NON_SMOKE,
    }
    labels = []
    for number, line in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        token = line.strip().lower()
        if not token:
            continue
        if token not in aliases:
            raise click.BadParameter(f"{path}:{number}: unknown label {line.strip()!r}", param_hint="--labels")
        labels.append(aliases[token])
    if len(labels) != expected:
        raise click.BadParameter(f"{path} has {len(labels)} labels for {expected} frames", param_hint="--labels")
    return labels


@cli.command("detect")
@click.option("--checkpoint", type=click.Path(exists=True, dir_okay=False, path_type=Path), required=True)
@click.option("--frames", "frames_dir", type=click.Path(exists=True, file_okay=False, path_type=Path), required=True)
@click.option("--pixel-threshold", type=click.IntRange(min=0), default=None, help="Defaults to eval.pixel_threshold")
@click.option("--labels", "labels_path", type=click.Path(exists=True, dir_okay=False, path_type=Path), default=None)
@click.option("--out", "out_path", type=click.Path(dir_okay=False, path_type=Path), default=None, help="Per-frame CSV")
@config_option
@handled("detect")
def detect_cmd(
    checkpoint: Path,
    frames_dir: Path,
    pixel_threshold: int | None,
    labels_path: Path | None,
    out_path: Path | None,
    config_path: Path | None,
) -> int:
    """Classify each frame (lexicographic order) as smoke or non-smoke."""
    config = _resolve(config_path, eval={"pixel_threshold": pixel_threshold})
    _echo_config(config.eval, checkpoint=checkpoint, frames=frames_dir, labels=labels_path)

    frames = list_images(frames_dir)
    labels = _read_labels(labels_path, len(frames)) if labels_path else None
    net = load_checkpoint(checkpoint)
    masks = _predict_masks(net, frames)
    result = detect_sequence(masks, config.eval.pixel_threshold, labels)

    for index, (frame, mask, cls) in enumerate(zip(frames, masks, result.classes, strict=True), start=1):
        label = StatusLabels.SMOKE if cls is FrameClass.SMOKE else StatusLabels.CLEAR
        click.echo(f"{label} frame {index} {frame.name}: {mask.count()} smoke pixels")
    if out_path is not None:
        write_csv(
            out_path,
            ("frame", "file", "smoke_pixels", "class"),
            (
                [i, f.name, m.count(), c.value]
                for i, (f, m, c) in enumerate(zip(frames, masks, result.classes, strict=True), start=1)
            ),
        )

    facts: dict[str, Any] = {
        "frames": len(frames),
        "smoke detected at frame": result.first_smoke_frame if result.first_smoke_frame is not None else "none",
    }
    if result.false_alarms is not None:
        facts["false alarms"] = result.false_alarms
    click.echo(summary_block("Detection", facts))
    return EXIT_OK


# =============================================================================
# DIAGNOSTICS
# =============================================================================


@cli.command("gradcheck")
@click.option("--full", is_flag=True, help="Also check whole networks at width 1/16 on a 16x16 input")
@click.option("--seed", type=click.IntRange(min=0), default=0)
@click.option("--max-entries", type=click.IntRange(min=1), default=4, help="Entries sampled per network tensor")
@click.option("--mutate", type=click.Choice(KERNEL_NAMES), default=None, hidden=True)
@handled("gradcheck")
def gradcheck_cmd(full: bool, seed: int, max_entries: int, mutate: str | None) -> int:
    """Compare analytic adjoints with central differences; exit 3 over tolerance."""
    _echo_config(None, full=full, seed=seed, max_entries=max_entries, tolerance=DEFAULT_TOLERANCE, mutate=mutate)

    with inject_adjoint_fault(mutate) if mutate else nullcontext():
        results = check_kernels(seed)
        if full:
            for variant in GRADCHECK_NETWORK_VARIANTS:
                config = NetConfig.variant(variant, width_scale=GRADCHECK_NETWORK_SCALE, seed=seed)
                results.append(grad_check_network(config, seed=seed, max_entries_per_tensor=max_entries))

    for result in results:
        record_gradcheck(result.target, result.max_relative_error, result.passed())
    click.echo(gradcheck_table(results))

    failed = [r.target for r in results if not r.passed()]
    if failed:
        raise CheckFailedError(f"relative error above {DEFAULT_TOLERANCE:g} for {', '.join(failed)}")
    click.echo(f"{StatusLabels.OK} {len(results)} gradient checks passed")
    return EXIT_OK


@cli.command("describe")
@config_option
@click.option("--size", type=SizeType(), default=None, help="Input HxW for the trace (defaults to data size)")
@handled("describe")
def describe_cmd(config_path: Path | None, size: tuple[int, int] | None) -> int:
    """Print the layer-by-layer spatial trace and parameter counts."""
    config = _resolve(config_path)
    height, width = size or (config.data.height, config.data.width)
    _echo_config(config.net, size=f"{height}x{width}")

    net = build_network(config.net)
    click.echo(trace_table(spatial_trace(config.net, height, width)))
    click.echo()
    click.echo(parameter_table(net.parameter_report()))
    return EXIT_OK


# =============================================================================
# ENTRY POINT
# =============================================================================


def main(argv: Sequence[str] | None = None) -> int:
    """Console entry point; maps click's own usage errors onto exit code 1."""
    try:
        result = cli.main(args=list(argv) if argv is not None else None, prog_name="smokeseg", standalone_mode=False)
    except click.UsageError as e:
        click.echo(f"{StatusLabels.ERR} {e.format_message()}", err=True)
        return EXIT_VALIDATION
    except click.ClickException as e:
        click.echo(f"{StatusLabels.ERR} {e.format_message()}", err=True)
        return EXIT_RUNTIME
    except click.Abort:
        return EXIT_RUNTIME
    finally:
        shutdown_metrics()
    return result if isinstance(result, int) else EXIT_OK


if __name__ == "__main__":
    raise SystemExit(main())
