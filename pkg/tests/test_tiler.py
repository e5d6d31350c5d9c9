import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tilegan.image import CropSpec, ImageBuffer, from_tensor, to_tensor
from tilegan.memtrack import TRACKER
from tilegan.model import GanModel, identity_architecture, paper_architecture, translate
from tilegan.sampler import parse_crop_records
from tilegan.tensor import Tensor, no_grad
from tilegan.tiler import (
    BlendAccumulator,
    accumulate,
    plan_for_image,
    plan_grid,
    translate_full,
    translate_image,
    translate_parallel,
)


def random_image(rng, w, h):
    return ImageBuffer(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))


def brute_force_counts(width, height, tiles):
    counts = np.zeros((height, width), dtype=np.int64)
    for y in range(height):
        for x in range(width):
            counts[y, x] = sum(t.x0 <= x < t.x0 + t.w and t.y0 <= y < t.y0 + t.h for t in tiles)
    return counts


@pytest.fixture(scope="module")
def tiny():
    return GanModel(paper_architecture(base_channels=2), seed=5)


@pytest.fixture(scope="module")
def identity():
    return GanModel(identity_architecture())


class TestPlanGrid:
    def test_hand_enumerated_offsets(self):
        grid = plan_grid(300, 200, 128, 128, 64, 64)
        assert grid.x_offsets == [0, 64, 128, 172]
        assert grid.y_offsets == [0, 64, 72]
        assert len(grid.tiles) == 12

    @pytest.mark.parametrize("stride", [1, 7, 32])
    def test_tile_equals_image(self, stride):
        grid = plan_grid(32, 32, 32, 32, stride, stride)
        assert grid.tiles == [CropSpec(0, 0, 32, 32)]

    def test_exact_fit_adds_no_clamped_tile(self):
        assert plan_grid(256, 128, 128, 128, 64, 64).x_offsets == [0, 64, 128]

    def test_coverage_random_geometries(self, rng):
        for _ in range(1000):
            W, H = int(rng.integers(1, 60)), int(rng.integers(1, 60))
            tw, th = int(rng.integers(1, W + 1)), int(rng.integers(1, H + 1))
            sx, sy = int(rng.integers(1, tw + 1)), int(rng.integers(1, th + 1))
            grid = plan_grid(W, H, tw, th, sx, sy)
            covered = np.zeros((H, W), dtype=bool)
            for t in grid.tiles:
                t.validate(W, H)
                covered[t.y0 : t.y0 + t.h, t.x0 : t.x0 + t.w] = True
            assert covered.all()
            assert grid.x_offsets[-1] + tw == W and grid.y_offsets[-1] + th == H

    @pytest.mark.parametrize("args", [(100, 100, 101, 10, 5, 5), (100, 100, 10, 10, 11, 5),
                                      (100, 100, 10, 10, 0, 5), (100, 100, 0, 10, 1, 1)])
    def test_preconditions(self, args):
        with pytest.raises(ValueError):
            plan_grid(*args)

    def test_export_uses_crop_record_format(self):
        grid = plan_grid(300, 200, 128, 128, 64, 64)
        records = parse_crop_records(grid.export())
        assert [spec for _, spec in records] == grid.tiles

    def test_small_image_fallback(self):
        grid, undersized = plan_for_image(100, 300, 128, 128, 64, 64)
        assert undersized and grid.tiles == [CropSpec(0, 0, 100, 300)]
        assert plan_for_image(128, 128, 128, 128, 64, 64)[1] is False


class TestBlend:
    def test_weights_equal_brute_force_counts(self, rng):
        for _ in range(20):
            W, H = int(rng.integers(8, 30)), int(rng.integers(8, 30))
            tw, th = int(rng.integers(1, W + 1)), int(rng.integers(1, H + 1))
            grid = plan_grid(W, H, tw, th, int(rng.integers(1, tw + 1)), int(rng.integers(1, th + 1)))
            acc = accumulate(lambda x: x, None, random_image(rng, W, H), grid)
            np.testing.assert_array_equal(acc.weight, brute_force_counts(W, H, grid.tiles))

    def test_two_constant_tiles_average_to_half(self):
        grid = plan_grid(12, 8, 8, 8, 4, 4)
        assert len(grid.tiles) == 2
        outputs = iter([0.0, 1.0])

        def stub(x):
            return Tensor(np.full(x.dims, next(outputs)))

        avg = accumulate(stub, None, ImageBuffer(np.zeros((8, 12, 3), np.uint8)), grid).average()
        assert np.all(avg[:, :4] == 0.0)
        assert np.all(avg[:, 4:8] == 0.5)
        assert np.all(avg[:, 8:] == 1.0)

    def test_uncovered_pixels_rejected(self):
        acc = BlendAccumulator(4, 4)
        acc.add(CropSpec(0, 0, 2, 4), np.zeros((4, 2, 3)))
        with pytest.raises(ValueError, match="not covered"):
            acc.average()

    def test_tile_shape_checked(self):
        with pytest.raises(ValueError):
            BlendAccumulator(4, 4).add(CropSpec(0, 0, 2, 2), np.zeros((2, 3, 3)))


class TestTranslateImage:
    @settings(max_examples=30, deadline=None)
    @given(st.integers(8, 48), st.integers(8, 48), st.data())
    def test_identity_within_one(self, identity, W, H, data):
        tw, th = data.draw(st.integers(1, W)), data.draw(st.integers(1, H))
        grid = plan_grid(W, H, tw, th, data.draw(st.integers(1, tw)), data.draw(st.integers(1, th)))
        img = ImageBuffer(np.random.default_rng(W * 100 + H).integers(0, 256, (H, W, 3), dtype=np.uint8))
        out = translate_image(identity, "ab", img, grid)
        assert np.abs(out.pixels.astype(int) - img.pixels.astype(int)).max() <= 1

    def test_single_tile_equals_direct_translate(self, tiny, rng):
        img = random_image(rng, 32, 24)
        grid = plan_grid(32, 24, 32, 24, 32, 24)
        with no_grad():
            direct = from_tensor(translate(tiny, "ab", to_tensor(img)))
        assert translate_image(tiny, "ab", img, grid) == direct

    def test_native_divisibility(self, tiny, rng):
        grid = plan_grid(40, 40, 20, 20, 10, 10)
        with pytest.raises(ValueError, match="divisible by 8"):
            translate_image(tiny, "ab", random_image(rng, 40, 40), grid)

    def test_rescale_mode_any_tile_size(self, tiny, rng):
        grid = plan_grid(50, 30, 21, 13, 10, 7)
        out = translate_image(tiny, "ba", random_image(rng, 50, 30), grid, ("rescale", 16, 16))
        assert (out.width, out.height) == (50, 30)

    def test_rescale_identity_on_constant_image(self, identity):
        img = ImageBuffer(np.full((30, 50, 3), 77, np.uint8))
        out = translate_image(identity, "ab", img, plan_grid(50, 30, 21, 13, 10, 7), ("rescale", 8, 8))
        assert out == img

    def test_small_image_goes_through_rescale(self, tiny, rng):
        out = translate_full(tiny, "ab", random_image(rng, 20, 12), tile=(32, 32), stride=(16, 16))
        assert (out.width, out.height) == (20, 12)

    def test_grid_image_mismatch(self, identity, rng):
        with pytest.raises(ValueError, match="grid is for"):
            translate_image(identity, "ab", random_image(rng, 20, 20), plan_grid(30, 20, 10, 10, 5, 5))

    def test_bad_scale_mode(self, identity, rng):
        with pytest.raises(ValueError):
            translate_image(identity, "ab", random_image(rng, 8, 8), plan_grid(8, 8, 8, 8, 8, 8), "stretch")

    def test_bad_direction(self, tiny, rng):
        with pytest.raises(ValueError):
            translate_image(tiny, "xy", random_image(rng, 16, 16), plan_grid(16, 16, 16, 16, 8, 8))

    def test_order_invariance(self, tiny, rng):
        img = random_image(rng, 48, 40)
        grid = plan_grid(48, 40, 16, 16, 8, 8)
        forward = accumulate(tiny, "ab", img, grid)
        grid.tiles = list(np.random.default_rng(0).permutation(np.array(grid.tiles, dtype=object)))
        shuffled = accumulate(tiny, "ab", img, grid)
        np.testing.assert_array_equal(forward.weight, shuffled.weight)
        np.testing.assert_allclose(forward.sum, shuffled.sum, rtol=0, atol=1e-12)
        assert forward.to_image() == shuffled.to_image()


class TestParallel:
    @pytest.mark.parametrize("workers", [1, 2, 8])
    def test_byte_equal_to_sequential(self, tiny, rng, workers):
        img = random_image(rng, 72, 56)
        grid = plan_grid(72, 56, 16, 16, 8, 8)
        sequential = translate_image(tiny, "ab", img, grid)
        parallel = translate_parallel(tiny, "ab", img, grid, workers)
        assert parallel.pixels.tobytes() == sequential.pixels.tobytes()

    def test_rescale_mode_parallel(self, tiny, rng):
        img = random_image(rng, 40, 40)
        grid = plan_grid(40, 40, 15, 15, 5, 5)
        mode = ("rescale", 8, 8)
        assert translate_parallel(tiny, "ba", img, grid, 3, mode) == translate_image(tiny, "ba", img, grid, mode)

    def test_workers_validated(self, tiny, rng):
        with pytest.raises(ValueError):
            translate_parallel(tiny, "ab", random_image(rng, 16, 16), plan_grid(16, 16, 16, 16, 8, 8), 0)


def tiled_peak(model, size, workers=1):
    img = ImageBuffer(np.full((size, size, 3), 100, np.uint8))
    grid = plan_grid(size, size, 32, 32, 32, 32)
    TRACKER.reset_peak()
    base = TRACKER.current
    translate_parallel(model, "ab", img, grid, workers)
    return TRACKER.peak - base


def test_tiled_peak_independent_of_image_size(tiny):
    peaks = [tiled_peak(tiny, s) for s in (64, 256, 512)]
    assert max(peaks) - min(peaks) <= 0.01 * min(peaks)


def test_parallel_peak_bounded_by_workers(tiny):
    single = tiled_peak(tiny, 128)
    assert tiled_peak(tiny, 128, workers=2) <= 2 * single * 1.01
