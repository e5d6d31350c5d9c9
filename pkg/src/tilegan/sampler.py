"""Random zoomed subsample extraction for training batches.

Randomness comes from numpy's Philox4x64 counter-based generator, seeded with
a 64-bit integer. Per crop the draws happen in a fixed order: image index
(``integers(n_images)``), width, height, x0, y0, then one ``integers(2)`` per
enabled flip (horizontal before vertical). Replaying a seed with the same
images and config therefore reproduces every crop on any platform.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .image import N_COLOR, CropSpec, ImageBuffer, crop_rescale, pixels_to_unit
from .tensor import Tensor


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(int(seed) & 0xFFFFFFFFFFFFFFFF))


def rng_state(rng: np.random.Generator) -> dict:
    """JSON-safe snapshot of the generator's position."""
    state = rng.bit_generator.state

    def plain(v):
        if isinstance(v, dict):
            return {k: plain(x) for k, x in v.items()}
        if isinstance(v, np.ndarray):
            return {"__array__": v.dtype.str, "values": [int(x) for x in v]}
        if isinstance(v, np.integer):
            return int(v)
        return v

    return plain(state)


def restore_rng(state: dict) -> np.random.Generator:
    def arrays(v):
        if isinstance(v, dict):
            if "__array__" in v:
                return np.array(v["values"], dtype=np.dtype(v["__array__"]))
            return {k: arrays(x) for k, x in v.items()}
        return v

    bitgen = np.random.Philox()
    bitgen.state = arrays(state)
    return np.random.Generator(bitgen)


def count_subsamples(x_full: int, y_full: int, x_batch: int, y_batch: int) -> int:
    """Number of distinct subsample positions, (x_full - x_batch) * (y_full - y_batch)."""
    for name, v in (("x_full", x_full), ("y_full", y_full), ("x_batch", x_batch), ("y_batch", y_batch)):
        if int(v) != v or v < 1:
            raise ValueError(f"{name} must be a positive integer, got {v!r}")
    if x_batch > x_full or y_batch > y_full:
        raise ValueError(f"batch {x_batch}x{y_batch} exceeds image {x_full}x{y_full}")
    return (int(x_full) - int(x_batch)) * (int(y_full) - int(y_batch))


@dataclass
class SamplerConfig:
    x_batch: int
    y_batch: int
    batch_size: int = 1
    min_crop: tuple[int, int] | None = None  # (w, h); defaults to (x_batch, y_batch)
    max_crop: tuple[int, int] | None = None  # (w, h); defaults to the full image
    allow_flip_h: bool = True
    allow_flip_v: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.x_batch < 1 or self.y_batch < 1:
            raise ValueError("x_batch and y_batch must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")

    def crop_range(self, img: ImageBuffer) -> tuple[int, int, int, int]:
        """(min_w, max_w, min_h, max_h) of crop side lengths for ``img``."""
        if self.x_batch > img.width or self.y_batch > img.height:
            raise ValueError(
                f"subsample size {self.x_batch}x{self.y_batch} exceeds image {img.width}x{img.height}"
            )
        lo_w, lo_h = self.min_crop or (self.x_batch, self.y_batch)
        hi_w, hi_h = self.max_crop or (img.width, img.height)
        hi_w, hi_h = min(hi_w, img.width), min(hi_h, img.height)
        lo_w, lo_h = max(lo_w, 1), max(lo_h, 1)
        if lo_w > hi_w or lo_h > hi_h:
            raise ValueError(f"empty zoom range {lo_w}..{hi_w} x {lo_h}..{hi_h}")
        return lo_w, hi_w, lo_h, hi_h


@dataclass
class TrainingBatch:
    tensor: Tensor
    provenance: list[tuple[int, CropSpec]] = field(default_factory=list)


def draw_crop(img: ImageBuffer, cfg: SamplerConfig, rng: np.random.Generator) -> CropSpec:
    lo_w, hi_w, lo_h, hi_h = cfg.crop_range(img)
    w = int(rng.integers(lo_w, hi_w + 1))
    h = int(rng.integers(lo_h, hi_h + 1))
    x0 = int(rng.integers(0, img.width - w + 1))
    y0 = int(rng.integers(0, img.height - h + 1))
    flip_h = bool(rng.integers(2)) if cfg.allow_flip_h else False
    flip_v = bool(rng.integers(2)) if cfg.allow_flip_v else False
    return CropSpec(x0, y0, w, h, flip_h, flip_v)


def next_batch(domain: list[ImageBuffer], cfg: SamplerConfig, rng: np.random.Generator) -> TrainingBatch:
    """Draw ``cfg.batch_size`` crops, downscale each to x_batch x y_batch and stack them.

    Tensor dims are (b, y_batch, x_batch, 3) with values in [-1, 1].
    """
    if not domain:
        raise ValueError("domain has no images")
    for img in domain:
        cfg.crop_range(img)
    pixels = np.empty((cfg.batch_size, cfg.y_batch, cfg.x_batch, N_COLOR), dtype=np.uint8)
    provenance = []
    for i in range(cfg.batch_size):
        idx = int(rng.integers(len(domain)))
        spec = draw_crop(domain[idx], cfg, rng)
        pixels[i] = crop_rescale(domain[idx], spec, cfg.x_batch, cfg.y_batch).pixels
        provenance.append((idx, spec))
    return TrainingBatch(Tensor(pixels_to_unit(pixels)), provenance)


class Sampler:
    """Owns one domain's images, config and RNG stream."""

    def __init__(self, images: list[ImageBuffer], cfg: SamplerConfig, rng: np.random.Generator | None = None):
        if not images:
            raise ValueError("domain has no images")
        for img in images:
            cfg.crop_range(img)
        self.images = images
        self.cfg = cfg
        self.rng = rng if rng is not None else make_rng(cfg.seed)

    def next_batch(self) -> TrainingBatch:
        return next_batch(self.images, self.cfg, self.rng)

    def state(self) -> dict:
        return rng_state(self.rng)

    def restore(self, state: dict) -> None:
        self.rng = restore_rng(state)


# -- crop record text format ------------------------------------------------------

RECORD_HEADER = "image_id,x0,y0,w,h,flags"


def format_crop_records(records: list[tuple[int, CropSpec]]) -> str:
    lines = [RECORD_HEADER]
    for image_id, s in records:
        lines.append(f"{image_id},{s.x0},{s.y0},{s.w},{s.h},{s.flags()}")
    return "\n".join(lines) + "\n"


def parse_crop_records(text: str) -> list[tuple[int, CropSpec]]:
    out = []
    for line in text.splitlines():
        line = line.strip()
        if not line or line == RECORD_HEADER:
            continue
        image_id, x0, y0, w, h, flags = line.split(",")
        out.append((int(image_id), CropSpec(int(x0), int(y0), int(w), int(h), "h" in flags, "v" in flags)))
    return out
