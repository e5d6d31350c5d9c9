import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from PIL import Image

from oracles import bilinear_pixel
from tilegan.image import (
    CropSpec,
    ImageBuffer,
    ImageError,
    crop,
    crop_rescale,
    from_tensor,
    load_image,
    rescale,
    save_image,
    to_tensor,
)
from tilegan.tensor import Tensor


def random_image(rng, w, h):
    return ImageBuffer(rng.integers(0, 256, size=(h, w, 3), dtype=np.uint8))


@pytest.fixture
def gradient_png(tmp_path):
    x = np.linspace(0, 255, 64).astype(np.uint8)
    arr = np.stack([np.tile(x, (32, 1))] * 3, axis=-1)
    path = tmp_path / "gradient.png"
    Image.fromarray(arr).save(path)
    return path


class TestLoadSave:
    def test_single_white_pixel(self, tmp_path):
        path = tmp_path / "white.png"
        Image.new("RGB", (1, 1), (255, 255, 255)).save(path)
        img = load_image(path)
        assert (img.width, img.height) == (1, 1)
        assert img.pixels.tolist() == [[[255, 255, 255]]]

    def test_header_dims(self, gradient_png):
        img = load_image(gradient_png)
        assert (img.width, img.height) == (64, 32)

    def test_roundtrip_byte_exact(self, tmp_path, rng):
        img = random_image(rng, 37, 23)
        save_image(img, tmp_path / "r.png")
        assert load_image(tmp_path / "r.png") == img

    def test_gray_promoted_and_alpha_dropped(self, tmp_path):
        Image.new("L", (2, 2), 77).save(tmp_path / "g.png")
        assert np.all(load_image(tmp_path / "g.png").pixels == 77)
        Image.new("RGBA", (2, 2), (1, 2, 3, 4)).save(tmp_path / "a.png")
        assert load_image(tmp_path / "a.png").pixels[0, 0].tolist() == [1, 2, 3]

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_image(tmp_path / "nope.png")

    def test_sixteen_bit_rejected(self, tmp_path):
        Image.fromarray(np.full((4, 4), 40000, dtype=np.uint16)).save(tmp_path / "deep.png")
        with pytest.raises(ImageError, match="bit depth"):
            load_image(tmp_path / "deep.png")

    def test_corrupt_stream(self, tmp_path, gradient_png):
        blob = gradient_png.read_bytes()
        (tmp_path / "bad.png").write_bytes(blob[: len(blob) // 2])
        with pytest.raises(ImageError):
            load_image(tmp_path / "bad.png")

    def test_save_leaves_no_temp_files(self, tmp_path, rng):
        save_image(random_image(rng, 4, 4), tmp_path / "o.png")
        assert [p.name for p in tmp_path.iterdir()] == ["o.png"]


class TestCrop:
    def test_identity(self, rng):
        img = random_image(rng, 9, 5)
        assert crop(img, CropSpec(0, 0, 9, 5)) == img

    def test_checkerboard_flip(self):
        px = np.array([[[0] * 3, [255] * 3], [[255] * 3, [0] * 3]], dtype=np.uint8)
        out = crop(ImageBuffer(px), CropSpec(0, 0, 2, 2, flip_h=True))
        np.testing.assert_array_equal(out.pixels, px[:, ::-1])

    def test_against_index_oracle(self, rng):
        img = random_image(rng, 31, 17)
        for _ in range(200):
            w, h = rng.integers(1, 32), rng.integers(1, 18)
            spec = CropSpec(int(rng.integers(0, 32 - w)), int(rng.integers(0, 18 - h)), int(w), int(h),
                            bool(rng.integers(2)), bool(rng.integers(2)))
            out = crop(img, spec)
            for j in range(spec.h):
                for i in range(spec.w):
                    si = spec.w - 1 - i if spec.flip_h else i
                    sj = spec.h - 1 - j if spec.flip_v else j
                    assert out.pixels[j, i].tolist() == img.pixels[spec.y0 + sj, spec.x0 + si].tolist()

    @pytest.mark.parametrize("spec", [CropSpec(-1, 0, 2, 2), CropSpec(0, 0, 11, 2), CropSpec(9, 4, 2, 2), CropSpec(0, 0, 0, 1)])
    def test_out_of_bounds(self, rng, spec):
        with pytest.raises(ImageError):
            crop(random_image(rng, 10, 5), spec)

    @settings(max_examples=100, deadline=None)
    @given(st.data())
    def test_composition(self, data):
        W, H = data.draw(st.integers(1, 20)), data.draw(st.integers(1, 20))
        img = ImageBuffer(np.arange(W * H * 3, dtype=np.uint64).reshape(H, W, 3).astype(np.uint8))

        def spec_in(w_max, h_max):
            w = data.draw(st.integers(1, w_max))
            h = data.draw(st.integers(1, h_max))
            return CropSpec(data.draw(st.integers(0, w_max - w)), data.draw(st.integers(0, h_max - h)), w, h,
                            data.draw(st.booleans()), data.draw(st.booleans()))

        outer = spec_in(W, H)
        inner = spec_in(outer.w, outer.h)
        assert crop(crop(img, outer), inner) == crop(img, outer.then(inner))


class TestRescale:
    def test_constant_stays_constant(self):
        img = ImageBuffer(np.full((13, 7, 3), 100, dtype=np.uint8))
        for tw, th in [(1, 1), (3, 20), (64, 5), (7, 13)]:
            assert np.all(rescale(img, tw, th).pixels == 100)

    def test_same_dims_identity(self, rng):
        img = random_image(rng, 8, 6)
        assert rescale(img, 8, 6) == img

    def test_four_to_two_hand_oracle(self):
        src = np.arange(16, dtype=np.uint8).reshape(4, 4, 1).repeat(3, axis=2) * 10
        out = rescale(ImageBuffer(src), 2, 2).pixels[..., 0]
        # half-pixel centres put each output sample between two source rows/cols
        hand = np.array([[(0 + 10 + 40 + 50) / 4, (20 + 30 + 60 + 70) / 4],
                         [(80 + 90 + 120 + 130) / 4, (100 + 110 + 140 + 150) / 4]])
        assert np.abs(out.astype(int) - hand).max() <= 1

    def test_general_bilinear_oracle(self, rng):
        img = random_image(rng, 11, 7)
        out = rescale(img, 5, 9)
        for oy in range(9):
            for ox in range(5):
                expected = bilinear_pixel(img.pixels, 5, 9, ox, oy)
                assert np.abs(out.pixels[oy, ox].astype(float) - expected).max() <= 0.5 + 1e-9

    @settings(max_examples=50, deadline=None)
    @given(st.integers(2, 40), st.integers(1, 40), st.integers(0, 200), st.integers(0, 255))
    def test_monotone_ramp_no_overshoot(self, n_in, n_out, lo, span):
        hi = min(255, lo + span)
        ramp = np.linspace(lo, hi, n_in).round().astype(np.uint8)
        img = ImageBuffer(np.repeat(ramp[None, :, None], 3, axis=2))
        out = rescale(img, n_out, 1).pixels[0, :, 0].astype(int)
        assert out.min() >= ramp.min() and out.max() <= ramp.max()
        assert np.all(np.diff(out) >= 0)

    def test_crop_rescale_matches_two_step(self, rng):
        img = random_image(rng, 40, 30)
        for _ in range(100):
            w, h = int(rng.integers(1, 41)), int(rng.integers(1, 31))
            spec = CropSpec(int(rng.integers(0, 41 - w)), int(rng.integers(0, 31 - h)), w, h,
                            bool(rng.integers(2)), bool(rng.integers(2)))
            tw, th = int(rng.integers(1, 20)), int(rng.integers(1, 20))
            assert crop_rescale(img, spec, tw, th) == rescale(crop(img, spec), tw, th)


class TestTensorConversion:
    def test_endpoints(self):
        t = to_tensor(ImageBuffer(np.array([[[0, 255, 0]]], dtype=np.uint8)))
        assert t.dims == (1, 1, 1, 3)
        assert t.data.ravel().tolist() == [-1.0, 1.0, -1.0]

    def test_exhaustive_roundtrip(self):
        values = np.arange(256, dtype=np.uint8).reshape(16, 16, 1).repeat(3, axis=2)
        img = ImageBuffer(values)
        assert from_tensor(to_tensor(img)) == img

    def test_clamp(self):
        out = from_tensor(Tensor(np.array([2.0, -3.0, 0.0]).reshape(1, 1, 1, 3)))
        assert out.pixels.ravel().tolist() == [255, 0, 128]

    def test_channel_mismatch(self):
        with pytest.raises(ImageError):
            from_tensor(Tensor(np.zeros((1, 2, 2, 4))))
        with pytest.raises(ImageError):
            from_tensor(Tensor(np.zeros((2, 2, 2, 3))))
