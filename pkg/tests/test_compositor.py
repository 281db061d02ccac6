"""
Tests for blending, ground truth, procedural smoke and dataset building
"""

import math
from pathlib import Path

import numpy as np
import pytest

from src.compositor import (
    MANIFEST_NAME,
    CompositeError,
    blend,
    build_dataset,
    composite,
    fit_background,
    gen_pure_smoke,
    ground_truth,
    list_images,
    plan_records,
    split_records,
)
from src.images import BinaryMask, RgbaImage, RgbImage, quantize
from src.io_formats import load_image, read_manifest, save_image
from src.models import CompositeRecord, DataConfig, SmokeGenParams
from src.noise import fbm, radial_plume
from tests.conftest import make_rgb, make_rgba


def scalar_composite(background: int, smoke: int, alpha: int, beta: float) -> int:
    """One channel of one pixel: (1 - a) * B + a * S with a = alpha * beta, rounded half up."""
    a = alpha / 255.0 * beta
    value = (1.0 - a) * (background / 255.0) + a * (smoke / 255.0)
    return math.floor(min(max(value, 0.0), 1.0) * 255.0 + 0.5)


def _solid_rgb(value: int, h: int = 4, w: int = 4) -> RgbImage:
    return RgbImage(np.full((h, w, 3), value, dtype=np.uint8))


def _solid_rgba(value: int, alpha: int, h: int = 4, w: int = 4) -> RgbaImage:
    pixels = np.full((h, w, 4), value, dtype=np.uint8)
    pixels[:, :, 3] = alpha
    return RgbaImage(pixels)


class TestBlending:
    """Test cases for composite and blend"""

    def test_transparent_smoke_leaves_background(self, rng):
        """Test that alpha 0 reproduces the background exactly"""
        background = make_rgb(rng, 8, 8)
        smoke = make_rgba(rng, 8, 8)
        clear = RgbaImage(np.concatenate([smoke.pixels[:, :, :3], np.zeros((8, 8, 1), np.uint8)], axis=2))
        np.testing.assert_array_equal(composite(background, clear, 0.7).pixels, background.pixels)

    def test_opaque_full_strength_is_smoke(self, rng):
        """Test that alpha 1 with beta 1 reproduces the smoke color exactly"""
        background = make_rgb(rng, 8, 8)
        smoke = RgbaImage(np.concatenate([make_rgb(rng, 8, 8).pixels, np.full((8, 8, 1), 255, np.uint8)], axis=2))
        np.testing.assert_array_equal(composite(background, smoke, 1.0).pixels, smoke.rgb.pixels)

    def test_half_concentration(self):
        """Test that 100 under opaque 200 at beta 0.5 gives 150"""
        result = composite(_solid_rgb(100), _solid_rgba(200, 255), 0.5)
        assert np.all(result.pixels == 150)

    def test_scalar_oracle_on_random_pixels(self, rng):
        """Test 500 random pixels against a per-pixel scalar recomputation"""
        background, smoke = make_rgb(rng, 40, 50), make_rgba(rng, 40, 50)
        beta = float(rng.uniform(0.05, 1.0))
        result = composite(background, smoke, beta).pixels
        rows, cols = rng.integers(0, 40, 500), rng.integers(0, 50, 500)
        for y, x in zip(rows.tolist(), cols.tolist(), strict=True):
            for c in range(3):
                expected = scalar_composite(
                    int(background.pixels[y, x, c]), int(smoke.pixels[y, x, c]), int(smoke.pixels[y, x, 3]), beta
                )
                assert result[y, x, c] == expected, (y, x, c)

    def test_smoke_share_grows_with_beta(self, rng):
        """Test that raising beta moves every pixel toward the smoke color and raises the smoke share"""
        background, smoke = make_rgb(rng, 16, 16), make_rgba(rng, 16, 16)
        b = background.pixels.astype(int)
        s = smoke.rgb.pixels.astype(int)
        previous_step, previous_share = np.zeros_like(b), -1.0
        for beta in (0.1, 0.3, 0.5, 0.7, 0.9, 1.0):
            step = np.abs(composite(background, smoke, beta).pixels.astype(int) - b)
            share = step.sum() / np.abs(s - b).sum()
            assert np.all(step >= previous_step)
            assert share > previous_share
            previous_step, previous_share = step, share

    def test_blend_follows_coverage_map(self, rng):
        """Test that coverage 0 keeps the background and coverage 1 takes the smoke color"""
        background, smoke = make_rgb(rng, 6, 6), make_rgb(rng, 6, 6)
        coverage = np.indices((6, 6)).sum(axis=0) % 2
        result = blend(background, smoke, coverage.astype(np.float64)).pixels
        np.testing.assert_array_equal(result[coverage == 0], background.pixels[coverage == 0])
        np.testing.assert_array_equal(result[coverage == 1], smoke.pixels[coverage == 1])

    def test_result_between_inputs(self, rng):
        """Test that every channel stays between background and smoke"""
        background, smoke = make_rgb(rng, 8, 8), make_rgba(rng, 8, 8)
        result = composite(background, smoke, 0.8).pixels.astype(int)
        low = np.minimum(background.pixels, smoke.rgb.pixels).astype(int)
        high = np.maximum(background.pixels, smoke.rgb.pixels).astype(int)
        assert np.all(result >= low) and np.all(result <= high)

    @pytest.mark.parametrize("beta", [0.0, -0.1, 1.01])
    def test_beta_range(self, beta):
        with pytest.raises(CompositeError, match="beta"):
            composite(_solid_rgb(0), _solid_rgba(0, 0), beta)

    def test_dimension_mismatch(self):
        """Test that background and smoke of different sizes are rejected"""
        with pytest.raises(CompositeError, match="dimension mismatch"):
            composite(_solid_rgb(0, 4, 4), _solid_rgba(0, 0, 4, 5), 0.5)


class TestGroundTruth:
    """Test cases for ground_truth"""

    def test_threshold_is_strict(self):
        """Test that alpha equal to the threshold is not smoke"""
        pixels = np.zeros((1, 4, 4), dtype=np.uint8)
        pixels[0, :, 3] = [0, 51, 52, 255]
        mask = ground_truth(RgbaImage(pixels), 0.2)
        assert mask.labels.tolist() == [[0, 0, 1, 1]]

    @pytest.mark.parametrize("threshold", [0.05, 0.1, 0.3, 0.5, 0.9])
    def test_matches_alpha_comparison(self, rng, threshold):
        smoke = make_rgba(rng, 16, 16)
        mask = ground_truth(smoke, threshold)
        np.testing.assert_array_equal(mask.labels, (smoke.alpha > threshold).astype(np.uint8))

    def test_independent_of_beta(self, rng):
        """Test that the mask only depends on the smoke image"""
        smoke = make_rgba(rng, 8, 8)
        a = ground_truth(smoke, 0.1)
        composite(make_rgb(rng, 8, 8), smoke, 0.3)
        np.testing.assert_array_equal(a.labels, ground_truth(smoke, 0.1).labels)

    @pytest.mark.parametrize("threshold", [0.0, 1.0, -0.5])
    def test_threshold_range(self, threshold):
        with pytest.raises(CompositeError, match="gt_threshold"):
            ground_truth(_solid_rgba(0, 0), threshold)


class TestFitBackground:
    """Test cases for fit_background"""

    def test_same_size_untouched(self, rng):
        background = make_rgb(rng, 32, 32)
        assert fit_background(background, 32, 32) is background

    @pytest.mark.parametrize(("h", "w"), [(40, 60), (64, 48), (10, 10)])
    def test_output_size(self, rng, h, w):
        """Test that any background is fitted to the requested size"""
        fitted = fit_background(make_rgb(rng, h, w), 32, 16)
        assert (fitted.height, fitted.width) == (16, 32)

    def test_center_crop(self):
        """Test that a wide background loses its left and right margins"""
        pixels = np.zeros((32, 64, 3), dtype=np.uint8)
        pixels[:, 16:48] = 200
        fitted = fit_background(RgbImage(pixels), 32, 32)
        assert np.all(fitted.pixels == 200)


class TestProceduralSmoke:
    """Test cases for gen_pure_smoke"""

    def test_deterministic(self):
        """Test that the same params give identical bytes"""
        params = SmokeGenParams(seed=11)
        a = gen_pure_smoke(params, 48, 32)
        b = gen_pure_smoke(params, 48, 32)
        np.testing.assert_array_equal(a.pixels, b.pixels)
        assert (a.height, a.width) == (32, 48)

    def test_seed_changes_output(self):
        a = gen_pure_smoke(SmokeGenParams(seed=1), 32, 32)
        b = gen_pure_smoke(SmokeGenParams(seed=2), 32, 32)
        assert not np.array_equal(a.pixels, b.pixels)

    def test_gray_with_plume_shaped_alpha(self):
        """Test equal color channels and alpha concentrated around the plume"""
        smoke = gen_pure_smoke(SmokeGenParams(seed=3, plume_radius=0.3), 64, 64)
        rgb = smoke.rgb.pixels
        assert np.array_equal(rgb[..., 0], rgb[..., 1]) and np.array_equal(rgb[..., 1], rgb[..., 2])
        assert smoke.alpha[0, 0] == 0.0
        assert smoke.alpha[30:40, 28:36].mean() > 0.1

    @pytest.mark.parametrize("gain", [0.3, 0.5, 0.9, 1.5])
    def test_alpha_within_unit_range_over_seeds(self, gain):
        """Test that the unquantized coverage stays in [0, 1] for 50 seeds per gain"""
        for seed in range(50):
            params = SmokeGenParams(seed=seed, gain=gain)
            rng = np.random.default_rng(seed)
            density = fbm(24, 24, octaves=5, base_frequency=4.0, lacunarity=2.0, gain=gain, rng=rng)
            coverage = density * radial_plume(24, 24, params.plume_center, params.plume_radius)
            assert 0.0 <= coverage.min() and coverage.max() <= 1.0
            smoke = gen_pure_smoke(params, 24, 24)
            np.testing.assert_array_equal(smoke.pixels[:, :, 3], quantize(coverage))
            assert smoke.alpha.max() > 0.0

    def test_neighbouring_seeds_differ(self):
        """Test that 100 seed pairs each differ in at least 1% of pixels"""
        for k in range(100):
            a = gen_pure_smoke(SmokeGenParams(seed=2 * k), 32, 32).pixels
            b = gen_pure_smoke(SmokeGenParams(seed=2 * k + 1), 32, 32).pixels
            changed = np.any(a != b, axis=2).mean()
            assert changed >= 0.01, (2 * k, changed)


class TestPlanning:
    """Test cases for list_images, plan_records and split_records"""

    def test_list_images_sorted(self, background_dir):
        (background_dir / "notes.txt").write_text("x")
        assert [p.name for p in list_images(background_dir)] == ["bg_0.png", "bg_1.png", "bg_2.png", "bg_3.png"]

    def test_plan(self, background_dir, smoke_dir, tmp_path):
        """Test record count, seed derivation and relative paths"""
        out = tmp_path / "out"
        records = plan_records(list_images(background_dir), list_images(smoke_dir), 5, 9, DataConfig(), out)
        assert len(records) == 5
        assert [r.seed for r in records] == [9 ^ i for i in range(5)]
        assert records[2].composite == "composites/000002.png"
        assert records[2].mask == "masks/000002.png"
        assert (out / records[0].background).resolve().parent == background_dir.resolve()
        assert all(r.beta is None for r in records)

    def test_plan_deterministic(self, background_dir, smoke_dir, tmp_path):
        args = (list_images(background_dir), list_images(smoke_dir), 6, 4, DataConfig(), tmp_path)
        assert plan_records(*args) == plan_records(*args)

    def test_plan_without_smokes(self, background_dir, tmp_path):
        records = plan_records(list_images(background_dir), [], 3, 0, DataConfig(), tmp_path)
        assert all(r.smoke is None for r in records)

    def test_plan_needs_backgrounds(self, tmp_path):
        with pytest.raises(CompositeError, match="no background"):
            plan_records([], [], 3, 0, DataConfig(), tmp_path)

    def test_split(self):
        """Test split sizes, disjointness and determinism"""
        records = [CompositeRecord(background="b.png", composite=f"c{i}.png", mask=f"m{i}.png") for i in range(10)]
        train, val = split_records(records, 0.25, seed=3)
        assert len(val) == 3 and len(train) == 7
        assert {r.composite for r in train}.isdisjoint({r.composite for r in val})
        assert split_records(records, 0.25, seed=3) == (train, val)
        assert split_records(records, 0.0, seed=3) == (records, [])


class TestBuildDataset:
    """Test cases for build_dataset"""

    def _plan(self, background_dir: Path, smoke_dir: Path | None, out: Path, count: int = 4) -> list[CompositeRecord]:
        smokes = list_images(smoke_dir) if smoke_dir else []
        return plan_records(list_images(background_dir), smokes, count, 21, DataConfig(), out)

    def test_empty(self, tmp_path):
        """Test that no records still writes an empty manifest"""
        assert build_dataset([], SmokeGenParams(), tmp_path) == []
        assert (tmp_path / MANIFEST_NAME).read_text() == ""

    def test_writes_pairs_and_manifest(self, background_dir, smoke_dir, tmp_path):
        """Test that every record yields a composite and mask of the smoke's size"""
        out = tmp_path / "out"
        resolved = build_dataset(self._plan(background_dir, smoke_dir, out), SmokeGenParams(), out)
        assert read_manifest(out / MANIFEST_NAME) == resolved
        for record in resolved:
            assert record.skipped is None
            assert record.beta is not None and 0.25 <= record.beta <= 1.0
            image = load_image(out / record.composite, "rgb")
            mask = load_image(out / record.mask, "mask")
            assert isinstance(image, RgbImage) and isinstance(mask, BinaryMask)
            assert (image.height, image.width) == mask.shape == (32, 32)

    def test_rerun_is_byte_identical(self, background_dir, smoke_dir, tmp_path):
        """Test that building the same plan twice gives identical files"""
        outputs = []
        for name in ("a", "b"):
            out = tmp_path / name
            records = self._plan(background_dir, smoke_dir, out)
            build_dataset(records, SmokeGenParams(), out, DataConfig(workers=2))
            outputs.append(sorted((p.relative_to(out), p.read_bytes()) for p in out.rglob("*.png")))
        assert outputs[0] == outputs[1]

    def test_generated_smoke(self, background_dir, tmp_path):
        """Test that records without a smoke file get a generated one saved beside the composites"""
        out = tmp_path / "out"
        data = DataConfig(height=32, width=48)
        resolved = build_dataset(self._plan(background_dir, None, out, count=2), SmokeGenParams(), out, data)
        for record in resolved:
            assert record.smoke == f"smokes/{Path(record.composite).stem}.png"
            smoke = load_image(out / record.smoke, "rgba")
            assert isinstance(smoke, RgbaImage)
            assert (smoke.height, smoke.width) == (32, 48)

    def test_unreadable_input_skips_record(self, background_dir, smoke_dir, tmp_path):
        """Test that a missing background skips only its record"""
        out = tmp_path / "out"
        records = self._plan(background_dir, smoke_dir, out, count=3)
        records[1] = records[1].model_copy(update={"background": "../missing.png"})
        resolved = build_dataset(records, SmokeGenParams(), out)
        assert [r.skipped is None for r in resolved] == [True, False, True]
        assert not (out / records[1].composite).exists()
        assert "skipped" in (out / MANIFEST_NAME).read_text().splitlines()[1]

    def test_solid_color_oracle(self, tmp_path):
        """Test a fixed-beta record against the closed-form composite"""
        save_image(_solid_rgb(100, 32, 32), tmp_path / "bg.png")
        save_image(_solid_rgba(200, 255, 32, 32), tmp_path / "smoke.png")
        record = CompositeRecord(
            background="bg.png", smoke="smoke.png", beta=0.5, composite="c.png", mask="m.png"
        )
        (resolved,) = build_dataset([record], SmokeGenParams(), tmp_path)
        image = load_image(tmp_path / "c.png", "rgb")
        mask = load_image(tmp_path / "m.png", "mask")
        assert isinstance(image, RgbImage) and isinstance(mask, BinaryMask)
        assert np.all(image.pixels == 150)
        assert mask.count() == 32 * 32
        assert resolved.beta == 0.5

    def test_sampled_oracle_over_hundred_records(self, rng, smoke_dir, tmp_path):
        """Test sampled pixels of 100 built records against the scalar blend and threshold"""
        backgrounds = tmp_path / "square_backgrounds"
        for i in range(3):
            save_image(make_rgb(rng, 32, 32), backgrounds / f"bg_{i}.png")
        out = tmp_path / "out"
        records = plan_records(list_images(backgrounds), list_images(smoke_dir), 100, 5, DataConfig(), out)
        resolved = build_dataset(records, SmokeGenParams(), out, DataConfig(workers=4))
        assert len(resolved) == 100 and all(r.skipped is None for r in resolved)

        for record in resolved:
            assert record.beta is not None and record.smoke is not None
            background = load_image(out / record.background, "rgb")
            smoke = load_image(out / record.smoke, "rgba")
            image = load_image(out / record.composite, "rgb")
            mask = load_image(out / record.mask, "mask")
            assert isinstance(background, RgbImage) and isinstance(smoke, RgbaImage)
            assert isinstance(image, RgbImage) and isinstance(mask, BinaryMask)
            for y, x in rng.integers(0, 32, (5, 2)).tolist():
                alpha = int(smoke.pixels[y, x, 3])
                for c in range(3):
                    expected = scalar_composite(
                        int(background.pixels[y, x, c]), int(smoke.pixels[y, x, c]), alpha, record.beta
                    )
                    assert image.pixels[y, x, c] == expected, (record.composite, y, x, c)
                assert mask.labels[y, x] == int(alpha / 255.0 > record.gt_threshold)
