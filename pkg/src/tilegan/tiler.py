"""Whole-image translation through overlapping tiles with per-pixel averaging.

Tiles are translated independently by the frozen generator; results are merged
in grid order by a single reducer, so the output does not depend on the number
of workers. Only one tile's activations (per worker) are alive at a time, which
bounds tracked memory by the tile size rather than the image size.
"""

from __future__ import annotations

from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Union

import numpy as np

from .image import N_COLOR, CropSpec, ImageBuffer, crop, crop_rescale, pixels_to_unit, resize_float, unit_to_pixels
from .model import GanModel, translate
from .sampler import format_crop_records
from .tensor import Tensor, no_grad

Translator = Callable[[Tensor], Tensor]
ScaleMode = Union[str, tuple]


def _axis_offsets(full: int, tile: int, stride: int) -> list[int]:
    last = full - tile
    offsets = list(range(0, last + 1, stride))
    if offsets[-1] != last:
        offsets.append(last)
    return offsets


@dataclass
class TileGrid:
    width: int
    height: int
    tile_w: int
    tile_h: int
    stride_x: int
    stride_y: int
    x_offsets: list[int]
    y_offsets: list[int]
    tiles: list[CropSpec] = field(default_factory=list)

    def export(self) -> str:
        return format_crop_records([(0, t) for t in self.tiles])

    def coverage(self) -> np.ndarray:
        counts = np.zeros((self.height, self.width), dtype=np.int64)
        for t in self.tiles:
            counts[t.y0 : t.y0 + t.h, t.x0 : t.x0 + t.w] += 1
        return counts


def plan_grid(x_full: int, y_full: int, tile_w: int, tile_h: int, stride_x: int, stride_y: int) -> TileGrid:
    """Offsets 0, s, 2s, ... plus a final offset clamped to ``full - tile`` when needed."""
    if not (1 <= tile_w <= x_full and 1 <= tile_h <= y_full):
        raise ValueError(f"tile {tile_w}x{tile_h} does not fit image {x_full}x{y_full}")
    if not (1 <= stride_x <= tile_w and 1 <= stride_y <= tile_h):
        raise ValueError(f"stride ({stride_x}, {stride_y}) must be in [1, tile dims] to cover the image")
    xs = _axis_offsets(x_full, tile_w, stride_x)
    ys = _axis_offsets(y_full, tile_h, stride_y)
    tiles = [CropSpec(x, y, tile_w, tile_h) for y in ys for x in xs]
    return TileGrid(x_full, y_full, tile_w, tile_h, stride_x, stride_y, xs, ys, tiles)


def plan_for_image(width: int, height: int, tile_w: int, tile_h: int, stride_x: int, stride_y: int) -> tuple[TileGrid, bool]:
    """Grid for an image of any size; ``True`` when the image is smaller than a tile.

    An undersized image becomes a single whole-image tile that must be run in
    rescale mode at the tile resolution.
    """
    if width < tile_w or height < tile_h:
        tile = CropSpec(0, 0, width, height)
        return TileGrid(width, height, width, height, width, height, [0], [0], [tile]), True
    return plan_grid(width, height, tile_w, tile_h, stride_x, stride_y), False


class BlendAccumulator:
    """Per-pixel running sums and covering-tile counts."""

    def __init__(self, width: int, height: int):
        self.sum = np.zeros((height, width, N_COLOR), dtype=np.float64)
        self.weight = np.zeros((height, width), dtype=np.float64)

    def add(self, spec: CropSpec, values: np.ndarray) -> None:
        if values.shape != (spec.h, spec.w, N_COLOR):
            raise ValueError(f"tile values have shape {values.shape}, expected {(spec.h, spec.w, N_COLOR)}")
        self.sum[spec.y0 : spec.y0 + spec.h, spec.x0 : spec.x0 + spec.w] += values
        self.weight[spec.y0 : spec.y0 + spec.h, spec.x0 : spec.x0 + spec.w] += 1.0

    def average(self) -> np.ndarray:
        if self.weight.min() < 1:
            raise ValueError("some pixels are not covered by any tile")
        return self.sum / self.weight[..., None]

    def to_image(self) -> ImageBuffer:
        return ImageBuffer(unit_to_pixels(self.average()))


def _translator(model, direction: str | None) -> Translator:
    if isinstance(model, GanModel):
        if direction not in ("ab", "ba"):
            raise ValueError(f"direction must be 'ab' or 'ba', got {direction!r}")
        return lambda x: translate(model, direction, x)
    if callable(model):
        return model
    raise TypeError(f"expected a GanModel or a callable, got {type(model).__name__}")


def _parse_scale(scale_mode: ScaleMode) -> tuple[int, int] | None:
    if scale_mode == "native" or scale_mode is None:
        return None
    if isinstance(scale_mode, tuple) and len(scale_mode) == 3 and scale_mode[0] == "rescale":
        _, xb, yb = scale_mode
        if xb < 1 or yb < 1:
            raise ValueError("rescale target must be positive")
        return int(xb), int(yb)
    raise ValueError(f"scale_mode must be 'native' or ('rescale', x_batch, y_batch), got {scale_mode!r}")


def _check_native(model, grid: TileGrid) -> None:
    factor = model.translate_factor() if isinstance(model, GanModel) else 1
    for t in grid.tiles:
        if t.w % factor or t.h % factor:
            raise ValueError(f"native-mode tiles must have dims divisible by {factor}, got {t.w}x{t.h}")


def translate_tile(fn: Translator, img: ImageBuffer, spec: CropSpec, target: tuple[int, int] | None) -> np.ndarray:
    """Translate one tile and return float values in [-1, 1] at the tile's own extent."""
    if target is None:
        pixels = crop(img, spec).pixels
    else:
        pixels = crop_rescale(img, spec, *target).pixels
    with no_grad():
        x = Tensor(pixels_to_unit(pixels)[None])
        y = fn(x)
        if y.dims[0] != 1 or y.dims[3] != N_COLOR:
            raise ValueError(f"generator returned dims {y.dims}")
        values = y.data[0].astype(np.float64)
        del x, y
    if target is not None:
        values = resize_float(values, spec.w, spec.h)
    elif values.shape[:2] != (spec.h, spec.w):
        raise ValueError(f"generator changed tile size from {spec.w}x{spec.h} to {values.shape[1]}x{values.shape[0]}")
    return values


def accumulate(model, direction: str | None, img: ImageBuffer, grid: TileGrid,
               scale_mode: ScaleMode = "native", workers: int = 1) -> BlendAccumulator:
    """Translate every tile and merge the results in grid order."""
    if workers < 1:
        raise ValueError("workers must be >= 1")
    if (grid.width, grid.height) != (img.width, img.height):
        raise ValueError(f"grid is for {grid.width}x{grid.height}, image is {img.width}x{img.height}")
    target = _parse_scale(scale_mode)
    if target is None:
        _check_native(model, grid)
    fn = _translator(model, direction)
    acc = BlendAccumulator(img.width, img.height)
    if workers == 1:
        for spec in grid.tiles:
            acc.add(spec, translate_tile(fn, img, spec, target))
        return acc
    window = 2 * workers
    with ThreadPoolExecutor(max_workers=workers) as pool:
        pending: deque = deque()
        for spec in grid.tiles:
            pending.append((spec, pool.submit(translate_tile, fn, img, spec, target)))
            if len(pending) >= window:
                done_spec, fut = pending.popleft()
                acc.add(done_spec, fut.result())
        while pending:
            done_spec, fut = pending.popleft()
            acc.add(done_spec, fut.result())
    return acc


def translate_image(model, direction: str | None, img: ImageBuffer, grid: TileGrid,
                    scale_mode: ScaleMode = "native") -> ImageBuffer:
    """Sequential tiled translation of a full-resolution image."""
    return accumulate(model, direction, img, grid, scale_mode, workers=1).to_image()


def translate_parallel(model, direction: str | None, img: ImageBuffer, grid: TileGrid, workers: int,
                       scale_mode: ScaleMode = "native") -> ImageBuffer:
    """Same output as :func:`translate_image`, with tiles evaluated on a thread pool."""
    return accumulate(model, direction, img, grid, scale_mode, workers=workers).to_image()


def translate_full(model, direction: str, img: ImageBuffer, tile: tuple[int, int] = (128, 128),
                   stride: tuple[int, int] = (64, 64), scale_mode: ScaleMode = "native",
                   workers: int = 1) -> ImageBuffer:
    """Plan a grid for ``img`` (falling back to one rescaled tile for small images) and translate."""
    grid, undersized = plan_for_image(img.width, img.height, tile[0], tile[1], stride[0], stride[1])
    if undersized:
        scale_mode = ("rescale", tile[0], tile[1])
    return accumulate(model, direction, img, grid, scale_mode, workers).to_image()
