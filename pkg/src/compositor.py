"""
Compositor - Synthetic smoke dataset generation

A composite blends a pure-smoke RGBA image over an RGB background with a
concentration factor beta:

    I_c = (1 - a) * B_c + a * S_c,   a = alpha * beta

computed in float64 on [0, 1] values and quantized once (round half up). The
ground-truth mask depends on the smoke image alone: 1 where alpha exceeds the
threshold. Backgrounds of another size are center-cropped to the smoke's
aspect ratio and bilinearly resized.

Pure smoke can come from files or from the procedural generator (fractal
value noise under a radial plume, grayscale color).
"""

import logging
import os
from collections.abc import Sequence
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from src.images import BinaryMask, ImageError, RgbaImage, RgbImage, quantize
from src.io_formats import load_image, save_image, write_manifest
from src.models import CompositeRecord, DataConfig, SmokeGenParams
from src.noise import fbm, radial_plume
from src.observability import record_dataset_record

logger = logging.getLogger("smokeseg.compositor")

MANIFEST_NAME = "manifest.jsonl"
VAL_MANIFEST_NAME = "val_manifest.jsonl"


class CompositeError(ValueError):
    """Raised for mismatched dimensions or out-of-range beta/threshold."""


# =============================================================================
# BLENDING
# =============================================================================


def blend(background: RgbImage, smoke_rgb: RgbImage, coverage: np.ndarray) -> RgbImage:
    """
    Per-pixel convex combination (1 - a) * B + a * S for a coverage map a in [0, 1].

    Raises:
        CompositeError: If the three inputs differ in height or width
    """
    size = (background.height, background.width)
    if (smoke_rgb.height, smoke_rgb.width) != size or coverage.shape != size:
        raise CompositeError(
            f"dimension mismatch: background {size}, smoke {(smoke_rgb.height, smoke_rgb.width)}, "
            f"coverage {coverage.shape}"
        )
    a = coverage[:, :, None]
    return RgbImage(quantize((1.0 - a) * background.unit() + a * smoke_rgb.unit()))


def composite(background: RgbImage, smoke: RgbaImage, beta: float) -> RgbImage:
    """
    Blend `smoke` over `background` at concentration `beta` in (0, 1].

    Raises:
        CompositeError: On beta outside (0, 1] or a dimension mismatch
    """
    if not 0.0 < beta <= 1.0:
        raise CompositeError(f"beta must lie in (0, 1], got {beta}")
    return blend(background, smoke.rgb, smoke.alpha * beta)


def ground_truth(smoke: RgbaImage, gt_threshold: float) -> BinaryMask:
    """Mask of pixels whose alpha strictly exceeds `gt_threshold` in (0, 1)."""
    if not 0.0 < gt_threshold < 1.0:
        raise CompositeError(f"gt_threshold must lie in (0, 1), got {gt_threshold}")
    return BinaryMask.from_bool(smoke.alpha > gt_threshold)


def fit_background(background: RgbImage, width: int, height: int) -> RgbImage:
    """Center-crop to the target aspect ratio, then bilinear-resize to (width, height)."""
    bw, bh = background.width, background.height
    if (bw, bh) == (width, height):
        return background

    # crop extent rounded half up: floor(x + 1/2) == (2x + 1) // 2 on rationals
    if bw * height > bh * width:
        crop_w, crop_h = max(1, (2 * bh * width + height) // (2 * height)), bh
    else:
        crop_w, crop_h = bw, max(1, (2 * bw * height + width) // (2 * width))
    left, top = (bw - crop_w) // 2, (bh - crop_h) // 2

    img = Image.fromarray(np.ascontiguousarray(background.pixels))
    img = img.crop((left, top, left + crop_w, top + crop_h))
    img = img.resize((width, height), Image.Resampling.BILINEAR)
    return RgbImage(np.asarray(img, dtype=np.uint8))


# =============================================================================
# PROCEDURAL SMOKE
# =============================================================================


def gen_pure_smoke(params: SmokeGenParams, width: int, height: int) -> RgbaImage:
    """
    Deterministic grayscale smoke.

    alpha = fbm(noise) * plume falloff; rgb = base_gray * (0.75 + 0.25 * noise).
    """
    rng = np.random.default_rng(params.seed)
    density = fbm(
        height,
        width,
        octaves=params.octaves,
        base_frequency=params.base_frequency,
        lacunarity=params.lacunarity,
        gain=params.gain,
        rng=rng,
    )
    alpha = density * radial_plume(height, width, params.plume_center, params.plume_radius)
    gray = params.base_gray * (0.75 + 0.25 * density)

    pixels = np.empty((height, width, 4), dtype=np.uint8)
    pixels[:, :, :3] = quantize(gray)[:, :, None]
    pixels[:, :, 3] = quantize(alpha)
    return RgbaImage(pixels)


# =============================================================================
# DATASET
# =============================================================================


def list_images(directory: Path) -> list[Path]:
    """Image files in a directory, sorted by name."""
    suffixes = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}
    return sorted(p for p in Path(directory).iterdir() if p.is_file() and p.suffix.lower() in suffixes)


def plan_records(
    backgrounds: Sequence[Path],
    smokes: Sequence[Path],
    count: int,
    seed: int,
    data: DataConfig,
    out_dir: Path,
) -> list[CompositeRecord]:
    """
    Draw `count` (background, smoke) pairs with replacement.

    Per-record seeds are `seed ^ index`. With no smoke files every record gets
    a procedurally generated smoke. Beta is left unset and drawn at build time.
    """
    if not backgrounds:
        raise CompositeError("no background images to composite onto")
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    records = []
    for index in range(count):
        background = backgrounds[int(rng.integers(len(backgrounds)))]
        smoke = smokes[int(rng.integers(len(smokes)))] if smokes else None
        stem = f"{index:06d}"
        records.append(
            CompositeRecord(
                background=os.path.relpath(background, out_dir),
                smoke=os.path.relpath(smoke, out_dir) if smoke is not None else None,
                gt_threshold=data.gt_threshold,
                seed=seed ^ index,
                composite=f"composites/{stem}.png",
                mask=f"masks/{stem}.png",
            )
        )
    return records


@dataclass
class _BuildContext:
    out_dir: Path
    template: SmokeGenParams
    beta_min: float
    height: int
    width: int


def _build_one(record: CompositeRecord, ctx: _BuildContext) -> CompositeRecord:
    """Produce one composite/mask pair; returns the record with beta and smoke filled in."""
    rng = np.random.default_rng(record.seed)
    beta = record.beta if record.beta is not None else float(rng.uniform(ctx.beta_min, 1.0))

    smoke_ref = record.smoke
    if smoke_ref is None:
        smoke = gen_pure_smoke(ctx.template.model_copy(update={"seed": record.seed}), ctx.width, ctx.height)
        smoke_ref = f"smokes/{Path(record.composite).stem}.png"
        save_image(smoke, ctx.out_dir / smoke_ref)
    else:
        loaded = load_image(ctx.out_dir / smoke_ref, "rgba")
        assert isinstance(loaded, RgbaImage)
        smoke = loaded

    background = load_image(ctx.out_dir / record.background, "rgb")
    assert isinstance(background, RgbImage)
    background = fit_background(background, smoke.width, smoke.height)

    save_image(composite(background, smoke, beta), ctx.out_dir / record.composite)
    save_image(ground_truth(smoke, record.gt_threshold), ctx.out_dir / record.mask)
    return record.model_copy(update={"beta": beta, "smoke": smoke_ref, "skipped": None})


def _build_or_skip(record: CompositeRecord, ctx: _BuildContext) -> CompositeRecord:
    try:
        built = _build_one(record, ctx)
    except (OSError, ImageError, CompositeError) as e:
        reason = f"{type(e).__name__}: {e}"
        logger.warning(f"Skipping record {record.composite}: {reason}")
        record_dataset_record(written=False)
        return record.model_copy(update={"skipped": reason})
    record_dataset_record(written=True)
    return built


def build_dataset(
    records: Sequence[CompositeRecord],
    template: SmokeGenParams,
    out_dir: Path,
    data: DataConfig | None = None,
    manifest_name: str = MANIFEST_NAME,
) -> list[CompositeRecord]:
    """
    Write composites, masks and the manifest for `records`.

    Paths in the records are relative to `out_dir`, which is also where the
    manifest goes. Unreadable inputs skip the record with a logged reason;
    the manifest keeps the line with a `skipped` key. Records are independent
    and processed on `data.workers` threads; output order follows input order.

    Returns:
        The resolved records (beta drawn when unset, generated smoke paths filled in)
    """
    data = data or DataConfig()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ctx = _BuildContext(out_dir, template, data.beta_min, data.height, data.width)

    if data.workers > 1 and len(records) > 1:
        with ThreadPoolExecutor(max_workers=data.workers) as pool:
            resolved = list(pool.map(lambda r: _build_or_skip(r, ctx), records))
    else:
        resolved = [_build_or_skip(r, ctx) for r in records]

    write_manifest(resolved, out_dir / manifest_name)
    skipped = sum(1 for r in resolved if r.skipped)
    logger.info(f"Built {len(resolved) - skipped} composites in {out_dir} ({skipped} skipped)")
    return resolved


def split_records(
    records: Sequence[CompositeRecord], val_fraction: float, seed: int
) -> tuple[list[CompositeRecord], list[CompositeRecord]]:
    """
    Deterministic train/validation split.

    round_half_up(len * val_fraction) records chosen by a seeded permutation
    go to validation; both halves keep their original order.
    """
    n_val = int(np.floor(len(records) * val_fraction + 0.5))
    chosen = set(np.random.default_rng(seed).permutation(len(records))[:n_val].tolist())
    train = [r for i, r in enumerate(records) if i not in chosen]
    val = [r for i, r in enumerate(records) if i in chosen]
    return train, val
