"""Full-resolution 8-bit RGB images: I/O, cropping, bilinear rescaling, tensor conversion."""

from __future__ import annotations

import io
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .checkpoint import write_atomic
from .tensor import Tensor

N_COLOR = 3


class ImageError(ValueError):
    pass


@dataclass(frozen=True)
class ImageBuffer:
    """Immutable (height, width, 3) uint8 pixels."""

    pixels: np.ndarray

    def __post_init__(self):
        p = self.pixels
        if p.dtype != np.uint8 or p.ndim != 3 or p.shape[2] != N_COLOR:
            raise ImageError(f"ImageBuffer needs uint8 (h, w, 3) pixels, got {p.dtype} {p.shape}")
        if p.shape[0] < 1 or p.shape[1] < 1:
            raise ImageError("image dims must be >= 1")
        if p.flags.writeable:
            p = np.ascontiguousarray(p).copy()
            p.flags.writeable = False
            object.__setattr__(self, "pixels", p)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def n_pixels(self) -> int:
        return self.width * self.height

    def __eq__(self, other):
        return isinstance(other, ImageBuffer) and np.array_equal(self.pixels, other.pixels)

    __hash__ = None


@dataclass(frozen=True)
class CropSpec:
    x0: int
    y0: int
    w: int
    h: int
    flip_h: bool = False
    flip_v: bool = False

    def validate(self, width: int, height: int) -> None:
        if self.w < 1 or self.h < 1:
            raise ImageError(f"crop extent must be >= 1, got {self.w}x{self.h}")
        if self.x0 < 0 or self.y0 < 0 or self.x0 + self.w > width or self.y0 + self.h > height:
            raise ImageError(f"crop {self} out of bounds for a {width}x{height} image")

    def flags(self) -> str:
        return ("h" if self.flip_h else "") + ("v" if self.flip_v else "") or "-"

    def then(self, inner: "CropSpec") -> "CropSpec":
        """The single crop equal to applying ``self`` and then ``inner`` to its result."""
        inner.validate(self.w, self.h)
        x0 = self.x0 + (self.w - inner.x0 - inner.w if self.flip_h else inner.x0)
        y0 = self.y0 + (self.h - inner.y0 - inner.h if self.flip_v else inner.y0)
        return CropSpec(x0, y0, inner.w, inner.h, self.flip_h != inner.flip_h, self.flip_v != inner.flip_v)


# -- I/O ----------------------------------------------------------------------


def load_image(path) -> ImageBuffer:
    """Decode an 8-bit PNG (or anything Pillow reads) to RGB; gray is promoted, alpha dropped."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"image not found: {path}")
    Image.MAX_IMAGE_PIXELS = None
    try:
        with Image.open(path) as im:
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I", "F") or (im.format == "PNG" and im.info.get("bits", 8) > 8):
                raise ImageError(f"{path}: unsupported bit depth (mode {mode}); only 8-bit images are accepted")
            im.load()
            if mode != "RGB":
                im = im.convert("RGB")
            pixels = np.asarray(im, dtype=np.uint8)
    except ImageError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageError(f"{path}: cannot decode image ({exc})") from exc
    return ImageBuffer(pixels)


def encode_png(img: ImageBuffer) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(img.pixels), mode="RGB").save(buf, format="PNG")
    return buf.getvalue()


def save_image(img: ImageBuffer, path) -> None:
    """Write PNG atomically (temp file in the same directory, then rename)."""
    path = Path(path)
    if path.parent and not path.parent.exists():
        os.makedirs(path.parent, exist_ok=True)
    write_atomic(path, encode_png(img))


# -- geometry -----------------------------------------------------------------


def crop(img: ImageBuffer, spec: CropSpec) -> ImageBuffer:
    spec.validate(img.width, img.height)
    out = img.pixels[spec.y0 : spec.y0 + spec.h, spec.x0 : spec.x0 + spec.w]
    if spec.flip_h:
        out = out[:, ::-1]
    if spec.flip_v:
        out = out[::-1]
    return ImageBuffer(np.ascontiguousarray(out))


def _axis_taps(n_in: int, n_out: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Half-pixel-centre bilinear taps: source indices i0, i1 and weight of i1."""
    if n_in == n_out:
        idx = np.arange(n_out)
        return idx, idx, np.zeros(n_out)
    s = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
    s = np.clip(s, 0.0, n_in - 1)
    i0 = np.floor(s).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, s - i0


def _bilinear(src: np.ndarray, rows: tuple, cols: tuple) -> np.ndarray:
    r0, r1, fy = rows
    c0, c1, fx = cols
    fx = fx[None, :, None]
    fy = fy[:, None, None]
    top = src[r0][:, c0] * (1 - fx) + src[r0][:, c1] * fx
    bot = src[r1][:, c0] * (1 - fx) + src[r1][:, c1] * fx
    return top * (1 - fy) + bot * fy


def _quantize(values: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(values + 0.5), 0, 255).astype(np.uint8)


def rescale(img: ImageBuffer, target_w: int, target_h: int) -> ImageBuffer:
    if target_w < 1 or target_h < 1:
        raise ImageError(f"target dims must be >= 1, got {target_w}x{target_h}")
    if (target_w, target_h) == (img.width, img.height):
        return img
    rows = _axis_taps(img.height, target_h)
    cols = _axis_taps(img.width, target_w)
    return ImageBuffer(_quantize(_bilinear(img.pixels.astype(np.float64), rows, cols)))


def crop_rescale(img: ImageBuffer, spec: CropSpec, target_w: int, target_h: int) -> ImageBuffer:
    """``rescale(crop(img, spec), target_w, target_h)`` without materialising the crop.

    Taps are computed in crop coordinates exactly as :func:`rescale` would and
    then mapped through the offset and flips, so results are byte-identical.
    """
    spec.validate(img.width, img.height)
    r0, r1, fy = _axis_taps(spec.h, target_h)
    c0, c1, fx = _axis_taps(spec.w, target_w)

    def rmap(i):
        return spec.y0 + (spec.h - 1 - i if spec.flip_v else i)

    def cmap(i):
        return spec.x0 + (spec.w - 1 - i if spec.flip_h else i)

    rows = np.unique(np.concatenate([rmap(r0), rmap(r1)]))
    cols = np.unique(np.concatenate([cmap(c0), cmap(c1)]))
    sub = img.pixels[rows][:, cols].astype(np.float64)
    out = _bilinear(
        sub,
        (np.searchsorted(rows, rmap(r0)), np.searchsorted(rows, rmap(r1)), fy),
        (np.searchsorted(cols, cmap(c0)), np.searchsorted(cols, cmap(c1)), fx),
    )
    return ImageBuffer(_quantize(out))


def resize_float(arr: np.ndarray, target_w: int, target_h: int) -> np.ndarray:
    """Bilinear resize of an (h, w, c) float array with the same taps as :func:`rescale`."""
    h, w = arr.shape[:2]
    if (target_w, target_h) == (w, h):
        return arr.astype(np.float64)
    return _bilinear(arr.astype(np.float64), _axis_taps(h, target_h), _axis_taps(w, target_w))


# -- tensor conversion ------------------------------------------------------------


def pixels_to_unit(pixels: np.ndarray) -> np.ndarray:
    return pixels.astype(np.float64) / 127.5 - 1.0


def to_tensor(img: ImageBuffer) -> Tensor:
    """Map 0..255 to [-1, 1]; result dims (1, h, w, 3)."""
    return Tensor(pixels_to_unit(img.pixels)[None])


def unit_to_pixels(values: np.ndarray) -> np.ndarray:
    """Clamp to [-1, 1] and map back to 0..255, rounding half away from zero."""
    v = (np.clip(values.astype(np.float64), -1.0, 1.0) + 1.0) * 127.5
    return _quantize(v)


def from_tensor(t: Tensor) -> ImageBuffer:
    b, h, w, c = t.dims
    if c != N_COLOR or b != 1:
        raise ImageError(f"from_tensor needs dims (1, h, w, 3), got {t.dims}")
    return ImageBuffer(unit_to_pixels(t.data[0]))
