import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from PIL import Image

from planktomae.imaging import (BackgroundModel, ConfigurationError, DatasetStats, compute_dataset_stats,
                                estimate_background, eval_transform, pad_to_square, preprocess, read_image,
                                sample_crop_box, to_grayscale, to_working, train_augment, write_png)

UNIT = DatasetStats(0.0, 1.0)


def _framed(h, w, border_values, inner=0):
    """Image whose border pixels, in scan order, take ``border_values``."""
    img = np.full((h, w), inner, np.uint8)
    mask = np.zeros((h, w), bool)
    mask[0, :] = mask[-1, :] = mask[:, 0] = mask[:, -1] = True
    img[mask] = border_values
    return img


class TestBackground:
    def test_uniform_border(self):
        bg = estimate_background(_framed(10, 12, 200, inner=3))
        assert bg == BackgroundModel((200,), (0.0,))

    def test_ninety_ten_border(self):
        n = 2 * 20 + 2 * 18  # border pixels of a 20x20 image
        values = np.full(n, 10, np.uint8)
        values[::10] = 250
        bg = estimate_background(_framed(20, 20, values))
        assert bg.mode_color == (10,) and bg.noise_std == (0.0,)

    def test_single_pixel(self):
        assert estimate_background(np.array([[77]], np.uint8)) == BackgroundModel((77,), (0.0,))

    def test_nearest_fifth_ties_broken_by_scan_order(self):
        # 36 border pixels -> the 7 nearest to the mode: six 50s, then the first 49 (a 51 ties but comes later)
        values = np.array([50] * 6 + [49] * 5 + [51] * 5 + [60] * 5 + [70] * 5 + [80] * 5 + [90] * 5, np.uint8)
        bg = estimate_background(_framed(10, 10, values))
        assert bg.mode_color == (50,)
        assert bg.noise_std[0] == pytest.approx(np.std([50] * 6 + [49]), rel=1e-12)

    def test_rgb_per_channel(self):
        img = np.zeros((6, 6, 3), np.uint8)
        img[..., 0], img[..., 1], img[..., 2] = 10, 20, 30
        assert estimate_background(img).mode_color == (10, 20, 30)


class TestPadToSquare:
    def test_white_landscape_image(self):
        img = np.full((50, 100), 255, np.uint8)
        out = pad_to_square(img, estimate_background(img), np.random.default_rng(0))
        assert out.shape == (100, 100) and np.all(out == 255)

    def test_square_unchanged(self):
        img = np.random.default_rng(0).integers(0, 256, (9, 9), dtype=np.uint8)
        np.testing.assert_array_equal(pad_to_square(img, BackgroundModel((0,), (3.0,)), np.random.default_rng(1)), img)

    def test_noise_fill_statistics(self):
        img = np.full((32, 64), 10, np.uint8)
        out = pad_to_square(img, BackgroundModel((10,), (5.0,)), np.random.default_rng(0))
        padding = np.concatenate([out[:16].ravel(), out[48:].ravel()])
        assert padding.size == 2048
        assert abs(padding.mean() - 10) < 1.0

    def test_constant_fill_without_noise(self):
        img = np.zeros((4, 8), np.uint8)
        out = pad_to_square(img, BackgroundModel((9,), (5.0,)), None, noise=False)
        assert np.all(out[:2] == 9) and np.all(out[6:] == 9)

    @settings(max_examples=40, deadline=None)
    @given(arrays(np.uint8, st.tuples(st.integers(1, 20), st.integers(1, 20))), st.integers(0, 1000))
    def test_content_preserved_and_square(self, img, seed):
        out = preprocess(img, np.random.default_rng(seed))
        h, w = img.shape
        side = max(h, w)
        assert out.shape == (side, side)
        top, left = (side - h) // 2, (side - w) // 2
        np.testing.assert_array_equal(out[top:top + h, left:left + w], img)

    def test_rectangular_crop_flag(self):
        img = np.arange(48, dtype=np.uint8).reshape(6, 8)
        out = preprocess(img, np.random.default_rng(0), box=(2, 1, 6, 5))
        np.testing.assert_array_equal(out, img[1:5, 2:6])


class TestGrayscale:
    def test_gray_is_identity(self):
        img = np.random.default_rng(0).integers(0, 256, (5, 7), dtype=np.uint8)
        np.testing.assert_array_equal(to_grayscale(img), img)

    def test_equal_channels_map_to_themselves(self):
        g = np.random.default_rng(1).integers(0, 256, (5, 7), dtype=np.uint8)
        np.testing.assert_array_equal(to_grayscale(np.stack([g, g, g], axis=-1)), g)

    def test_luma_weights(self):
        px = np.array([[[255, 0, 0], [0, 255, 0], [0, 0, 255]]], np.uint8)
        np.testing.assert_array_equal(to_grayscale(px), [[76, 150, 29]])


class TestTransforms:
    def _img(self, seed=0, size=40):
        return np.random.default_rng(seed).integers(0, 256, (size, size), dtype=np.uint8)

    def test_degenerate_augment_is_full_image(self):
        img = self._img()
        a = train_augment(img, 32, (1.0, 1.0), UNIT, np.random.default_rng(0), working_size=32, flip_prob=0.0)
        np.testing.assert_array_equal(a[0], to_working(img, 32))

    def test_degenerate_augment_equals_eval(self):
        img = self._img(1)
        a = train_augment(img, 32, (1.0, 1.0), UNIT, np.random.default_rng(5), working_size=32, flip_prob=0.0)
        np.testing.assert_array_equal(a, eval_transform(img, 32, UNIT, working_size=32))

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 10_000), st.floats(0.1, 1.0))
    def test_output_shape(self, seed, lo):
        out = train_augment(self._img(2), 24, (lo, 1.0), UNIT, np.random.default_rng(seed), working_size=36)
        assert out.shape == (1, 24, 24) and out.dtype == np.float32

    def test_constant_mean_image_standardizes_to_zero(self):
        img = np.full((20, 20), 51, np.uint8)
        stats = DatasetStats(51 / 255, 0.2)
        out = train_augment(img, 16, (0.4, 1.0), stats, np.random.default_rng(0), working_size=20)
        np.testing.assert_allclose(out, 0.0, atol=1e-6)

    def test_eval_bitwise_repeatable(self):
        img = self._img(3, 50)
        assert eval_transform(img, 32, UNIT, 36).tobytes() == eval_transform(img, 32, UNIT, 36).tobytes()

    def test_center_crop_symmetric(self):
        img = np.zeros((36, 36), np.uint8)
        img[2:34, 2:34] = 255
        out = eval_transform(img, 32, UNIT, working_size=36)[0]
        assert np.all(out == 1.0)

    def test_crop_box_fallback_is_center_square(self):
        box = sample_crop_box(20, 30, (1.0, 1.0), (4.0, 5.0), np.random.default_rng(0))
        assert box == (5, 0, 25, 20)

    def test_crop_scale_validated(self):
        with pytest.raises(ValueError):
            sample_crop_box(10, 10, (0.0, 1.0), (0.75, 1.33), np.random.default_rng(0))

    def test_seeded_augment_repeatable(self):
        img = self._img(4)
        a = train_augment(img, 16, (0.4, 1.0), UNIT, np.random.default_rng(9), working_size=36)
        b = train_augment(img, 16, (0.4, 1.0), UNIT, np.random.default_rng(9), working_size=36)
        assert a.tobytes() == b.tobytes()


def _two_pass(images, working_size):
    pixels = np.concatenate([to_working(i, working_size).astype(np.float64).ravel() for i in images])
    mean = pixels.sum() / pixels.size
    return mean, np.sqrt(((pixels - mean) ** 2).sum() / pixels.size)


class TestDatasetStats:
    def test_constant_dataset_rejected(self):
        with pytest.raises(ConfigurationError):
            compute_dataset_stats([np.full((8, 8), 128, np.uint8)] * 3, 16)

    def test_empty_rejected(self):
        with pytest.raises(ConfigurationError):
            compute_dataset_stats([], 16)

    def test_single_image_matches_two_pass(self):
        img = np.random.default_rng(0).integers(0, 256, (20, 20), dtype=np.uint8)
        stats = compute_dataset_stats([img], 20)
        mean, std = _two_pass([img], 20)
        assert stats.mean == pytest.approx(mean, abs=1e-12) and stats.std == pytest.approx(std, abs=1e-12)

    def test_many_images_match_two_pass(self):
        rng = np.random.default_rng(1)
        images = [rng.integers(0, 256, (int(rng.integers(5, 30)),) * 2, dtype=np.uint8) for _ in range(30)]
        stats = compute_dataset_stats(images, 24)
        mean, std = _two_pass(images, 24)
        assert abs(stats.mean - mean) < 1e-6 and abs(stats.std - std) < 1e-6

    def test_order_independent(self):
        rng = np.random.default_rng(2)
        images = [rng.integers(0, 256, (16, 16), dtype=np.uint8) for _ in range(10)]
        a, b = compute_dataset_stats(images, 16), compute_dataset_stats(images[::-1], 16)
        assert abs(a.mean - b.mean) < 1e-6 and abs(a.std - b.std) < 1e-6

    def test_json_round_trip(self):
        s = DatasetStats(0.123456789012, 0.5)
        assert DatasetStats.from_json(s.to_json()) == s

    def test_nonpositive_std_rejected(self):
        with pytest.raises(ConfigurationError):
            DatasetStats(0.5, 0.0)


class TestFiles:
    def test_png_round_trip(self, tmp_path):
        img = np.random.default_rng(0).integers(0, 256, (7, 9), dtype=np.uint8)
        write_png(tmp_path / "a.png", img)
        np.testing.assert_array_equal(read_image(tmp_path / "a.png"), img)

    @pytest.mark.parametrize("ext,shape", [("pgm", (6, 5)), ("ppm", (6, 5, 3))])
    def test_netpbm(self, tmp_path, ext, shape):
        img = np.random.default_rng(1).integers(0, 256, shape, dtype=np.uint8)
        Image.fromarray(img).save(tmp_path / f"a.{ext}")
        np.testing.assert_array_equal(read_image(tmp_path / f"a.{ext}"), img)

    def test_write_rejects_float(self, tmp_path):
        with pytest.raises(TypeError):
            write_png(tmp_path / "b.png", np.zeros((2, 2)))
