"""Peak-memory experiments on tracked tensor bytes.

Two experiments are provided: a whole-image sweep, where the peak grows with
the number of pixels, and tiled translation, where the peak is set by the tile
size alone. Reports are plain comma-separated text with ``#`` summary lines.
"""

from __future__ import annotations

import gc
from dataclasses import dataclass, field

import numpy as np

from . import ops
from .image import ImageBuffer
from .memtrack import TRACKER, MemoryCapExceeded, MemTracker, UntrackedAllocation
from .model import GanModel, translate
from .tensor import Tensor, backward, no_grad, verify_tracking, zero_grads
from .tiler import plan_for_image, translate_full

WORKLOADS = ("inference", "forward", "forward+backward")
GIB = 2**30
# GPU memory sizes drawn as limit lines in the published memory plot
GPU_LIMITS = {"4GB": 4 * GIB, "11GB": 11 * GIB}


@dataclass
class MemReport:
    workload: str
    input_dims: tuple[int, int, int, int]
    input_pixels: int
    input_bytes: int
    peak_bytes: int
    samples: list[tuple[str, int]] = field(default_factory=list)

    def check(self) -> None:
        if any(b > self.peak_bytes for _, b in self.samples):
            raise AssertionError("a phase sample exceeds the reported peak")
        if self.peak_bytes < self.input_bytes:
            raise AssertionError("peak is below the input tensor size")


def tracked_run(model: GanModel, workload: str, input_dims: tuple[int, int, int, int], direction: str = "ab",
                seed: int = 0, cap: int | None = None, tracker: MemTracker = TRACKER) -> MemReport:
    """Run one generator pass and report tracked bytes relative to the live bytes before it.

    ``inference`` runs without building a graph (activations freed as soon as
    they are consumed), ``forward`` keeps the autodiff graph as training does,
    and ``forward+backward`` also back-propagates a mean loss to the generator.
    Raises :class:`MemoryCapExceeded` if ``cap`` (absolute live bytes) is hit,
    and :class:`UntrackedAllocation` if bytes are left behind afterwards.
    """
    if workload not in WORKLOADS:
        raise ValueError(f"workload must be one of {WORKLOADS}, got {workload!r}")
    dims = tuple(int(d) for d in input_dims)
    data = np.random.default_rng(seed).uniform(-1, 1, size=dims)
    gc.collect()
    baseline = tracker.current
    first_sample = len(tracker.samples)
    tracker.reset_peak()
    params = model.generator_parameters()
    try:
        with tracker.capped(cap):
            with tracker.phase("input"):
                x = Tensor(data)
            input_bytes = x.nbytes
            if workload == "inference":
                with no_grad():
                    y = translate(model, direction, x, tracker)
                del y
            else:
                y = translate(model, direction, x, tracker)
                if workload == "forward+backward":
                    loss = ops.mean_all(y)
                    del y
                    with tracker.phase("backward"):
                        backward(loss)
                    del loss
                else:
                    del y
            del x
        peak = tracker.peak - baseline
        samples = [(label, b - baseline) for label, b in tracker.samples[first_sample:]]
    finally:
        zero_grads(params.values())
        del tracker.samples[first_sample:]
        gc.collect()
    if tracker.current != baseline:
        raise UntrackedAllocation(f"{tracker.current - baseline} tracked bytes still live after the run")
    verify_tracking()
    b, h, w, _ = dims
    report = MemReport(workload, dims, b * h * w, input_bytes, peak, samples)
    report.check()
    return report


# -- whole-image sweep -----------------------------------------------------------


@dataclass
class LinearFit:
    slope: float
    intercept: float
    r2: float

    def predict(self, pixels: float) -> float:
        return self.slope * pixels + self.intercept

    def pixels_at(self, nbytes: float) -> float | None:
        """Pixel count at which the fitted peak reaches ``nbytes``; None if the fit is not increasing."""
        if self.slope <= 0:
            return None
        return (nbytes - self.intercept) / self.slope


def linear_fit(x, y) -> LinearFit | None:
    """Least-squares line with R^2; None when fewer than two distinct x values."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(np.unique(x)) < 2:
        return None
    slope, intercept = np.polyfit(x, y, 1)
    residual = y - (slope * x + intercept)
    ss_res = float(residual @ residual)
    ss_tot = float(((y - y.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0 else 1.0 - ss_res / ss_tot
    return LinearFit(float(slope), float(intercept), r2)


@dataclass
class SweepRow:
    size: int
    pixels: int
    peak_bytes: int | None  # None when the run hit the cap
    predicted_bytes: float | None = None
    exceeds_cap: bool = False

    @property
    def aborted(self) -> bool:
        return self.peak_bytes is None


@dataclass
class SweepReport:
    workload: str
    rows: list[SweepRow]
    fit: LinearFit | None
    cap: int | None = None
    limits: dict[str, float | None] = field(default_factory=dict)

    def format(self) -> str:
        lines = ["size,pixels,peak_bytes,status,predicted_bytes,exceeds_cap"]
        for r in self.rows:
            peak = "" if r.aborted else str(r.peak_bytes)
            pred = "" if r.predicted_bytes is None else f"{r.predicted_bytes:.1f}"
            lines.append(f"{r.size},{r.pixels},{peak},{'aborted' if r.aborted else 'ok'},{pred},{int(r.exceeds_cap)}")
        lines.append(f"# workload {self.workload}")
        if self.fit is None:
            lines.append("# fit undefined (fewer than two completed sizes)")
        else:
            lines.append(f"# fit slope={self.fit.slope!r} intercept={self.fit.intercept!r} r2={self.fit.r2!r}")
        if self.cap is not None:
            lines.append(f"# cap bytes={self.cap}")
        for name, px in self.limits.items():
            lines.append(f"# limit {name} pixels={'' if px is None else repr(px)}")
        return "\n".join(lines) + "\n"


def parse_sweep_report(text: str) -> SweepReport:
    rows, fit, cap, limits, workload = [], None, None, {}, ""
    for line in text.splitlines():
        if not line or line.startswith("size,"):
            continue
        if line.startswith("#"):
            words = line[1:].split()
            if words[0] == "workload":
                workload = words[1]
            elif words[0] == "fit" and words[1] != "undefined":
                kv = dict(w.split("=") for w in words[1:])
                fit = LinearFit(float(kv["slope"]), float(kv["intercept"]), float(kv["r2"]))
            elif words[0] == "cap":
                cap = int(words[1].split("=")[1])
            elif words[0] == "limit":
                value = words[2].split("=")[1]
                limits[words[1]] = float(value) if value else None
            continue
        size, pixels, peak, status, pred, exceeds = line.split(",")
        rows.append(SweepRow(int(size), int(pixels), int(peak) if status == "ok" else None,
                             float(pred) if pred else None, exceeds == "1"))
    return SweepReport(workload, rows, fit, cap, limits)


def memory_sweep(model: GanModel, sizes: list[int], workload: str = "forward", cap: int | None = None,
                 limits: dict[str, int] | None = None, direction: str = "ab") -> SweepReport:
    """Whole-image generator pass at each square size, plus a linear fit of peak vs pixels.

    ``cap`` bounds the tracked bytes of each run; a run that hits it is kept
    as an aborted row instead of stopping the sweep. Rows whose fitted peak is
    above the cap (or that aborted) are marked ``exceeds_cap``. ``limits``
    maps names to byte budgets whose crossing pixel counts are reported.
    """
    if not sizes:
        raise ValueError("sizes must not be empty")
    factor = model.translate_factor()
    for s in sizes:
        if int(s) != s or s < 1 or s % factor:
            raise ValueError(f"size {s} must be a positive multiple of {factor}")
    limits = GPU_LIMITS if limits is None else limits
    rows = []
    for s in sizes:
        s = int(s)
        absolute_cap = None if cap is None else TRACKER.current + cap
        try:
            peak = tracked_run(model, workload, (1, s, s, 3), direction, cap=absolute_cap).peak_bytes
        except MemoryCapExceeded:
            peak = None
            gc.collect()
        rows.append(SweepRow(s, s * s, peak))
    done = [r for r in rows if not r.aborted]
    fit = linear_fit([r.pixels for r in done], [r.peak_bytes for r in done])
    for r in rows:
        if fit is not None:
            r.predicted_bytes = fit.predict(r.pixels)
        over = r.predicted_bytes is not None and cap is not None and r.predicted_bytes > cap
        r.exceeds_cap = r.aborted or over
    crossing = {name: (fit.pixels_at(b) if fit else None) for name, b in limits.items()}
    return SweepReport(workload, rows, fit, cap, crossing)


# -- tiled translation -------------------------------------------------------------


def synthetic_image(size: int, seed: int = 0) -> ImageBuffer:
    return ImageBuffer(np.random.default_rng(seed).integers(0, 256, size=(size, size, 3), dtype=np.uint8))


def tiled_peak(model: GanModel, img: ImageBuffer, tile: tuple[int, int] = (128, 128),
               stride: tuple[int, int] = (64, 64), workers: int = 1, direction: str = "ab") -> int:
    """Tracked high-water mark (above the bytes live before the call) of a tiled translation."""
    gc.collect()
    baseline = TRACKER.current
    TRACKER.reset_peak()
    translate_full(model, direction, img, tile, stride, workers=workers)
    peak = TRACKER.peak - baseline
    gc.collect()
    if TRACKER.current != baseline:
        raise UntrackedAllocation(f"{TRACKER.current - baseline} tracked bytes still live after tiling")
    return peak


@dataclass
class ComparisonRow:
    size: int
    pixels: int
    tiles: int
    whole_peak: int | None
    tiled_peak: int


def compare_tiled_whole(model: GanModel, sizes: list[int], tile: tuple[int, int] = (128, 128),
                        stride: tuple[int, int] = (64, 64), cap: int | None = None) -> list[ComparisonRow]:
    """Inference peaks of whole-image vs tiled translation at each square size."""
    rows = []
    for s in sizes:
        try:
            absolute_cap = None if cap is None else TRACKER.current + cap
            whole = tracked_run(model, "inference", (1, s, s, 3), cap=absolute_cap).peak_bytes
        except MemoryCapExceeded:
            whole = None
            gc.collect()
        grid, _ = plan_for_image(s, s, tile[0], tile[1], stride[0], stride[1])
        rows.append(ComparisonRow(s, s * s, len(grid.tiles), whole, tiled_peak(model, synthetic_image(s), tile, stride)))
    return rows


def format_comparison(rows: list[ComparisonRow]) -> str:
    lines = ["size,pixels,tiles,whole_peak_bytes,tiled_peak_bytes"]
    for r in rows:
        whole = "" if r.whole_peak is None else str(r.whole_peak)
        lines.append(f"{r.size},{r.pixels},{r.tiles},{whole},{r.tiled_peak}")
    return "\n".join(lines) + "\n"


def parse_comparison(text: str) -> list[ComparisonRow]:
    rows = []
    for line in text.splitlines()[1:]:
        if line:
            size, pixels, tiles, whole, tiled = line.split(",")
            rows.append(ComparisonRow(int(size), int(pixels), int(tiles), int(whole) if whole else None, int(tiled)))
    return rows
