"""Command-line entry point: ``tilegan train | translate | profile | info``.

Each command reads an optional JSON config (unknown keys rejected); command
line flags override values from the file. Exit codes: 0 success, 2 usage or
configuration error, 3 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from . import __version__

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("tilegan")


class ConfigError(Exception):
    """Invalid configuration, flag combination, or input path (exit code 2)."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TrainSettings(_Strict):
    domain_a: list[Path]
    domain_b: list[Path]
    out: Path = Path("run")
    iterations: int = Field(1000, ge=1)
    batch_size: int = Field(8, ge=1)
    x_batch: int = Field(128, ge=1)
    y_batch: int = Field(128, ge=1)
    allow_flip_h: bool = True
    allow_flip_v: bool = True
    base_channels: int = Field(64, ge=1)
    w_gan: float = Field(1.0, ge=0)
    w_cycle: float = Field(10.0, ge=0)
    lr: float = Field(1e-4, ge=0)
    beta1: float = Field(0.5, ge=0, lt=1)
    beta2: float = Field(0.999, ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    checkpoint_interval: Optional[int] = Field(None, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)

    @field_validator("domain_a", "domain_b", mode="before")
    @classmethod
    def _one_or_many(cls, v):
        return [v] if isinstance(v, str) else v


class TranslateSettings(_Strict):
    checkpoint: Path
    input: Path
    output: Path
    tile: tuple[int, int] = (128, 128)
    stride: tuple[int, int] = (64, 64)
    scale_mode: Literal["native", "rescale"] = "native"
    workers: int = Field(1, ge=1)
    direction: Literal["ab", "ba"] = "ab"


class ProfileSettings(_Strict):
    checkpoint: Optional[Path] = None
    sizes: list[int] = [128, 256, 512]
    workload: Literal["inference", "forward", "forward+backward"] = "forward"
    cap: Optional[int] = Field(None, ge=1)
    tile: tuple[int, int] = (128, 128)
    stride: tuple[int, int] = (64, 64)
    base_channels: int = Field(64, ge=1)
    seed: int = Field(0, ge=0, lt=2**64)
    out: Path = Path("profile")


# -- helpers -------------------------------------------------------------------


def _read_config(path: Optional[str]) -> tuple[dict, Path]:
    if path is None:
        return {}, Path.cwd()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{p}: top level must be a JSON object")
    return data, p.resolve().parent


def _settings(cls, values: dict):
    try:
        return cls(**values)
    except ValidationError as exc:
        problems = "; ".join(
            f"{'.'.join(str(x) for x in err['loc']) or '<root>'}: {err['msg']}" for err in exc.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}") from None


def _merge(config: dict, **overrides) -> dict:
    merged = dict(config)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    return merged


def _resolve(base: Path, p: Path) -> Path:
    return p if p.is_absolute() else base / p


def _require_file(path: Path, key: str) -> None:
    if not path.is_file():
        raise ConfigError(f"{key}: file not found: {path}")


def megapixels(width: int, height: int) -> str:
    """Total pixels in millions, rounded half-up to two decimals."""
    mpx = Decimal(width * height) / Decimal(10**6)
    return str(mpx.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


# -- commands ------------------------------------------------------------------


def cmd_train(args) -> int:
    from .image import load_image
    from .trainer import TrainConfig, train

    config, base = _read_config(args.config)
    s = _settings(TrainSettings, _merge(config, seed=args.seed, out=args.out))
    paths_a = [_resolve(base, p) for p in s.domain_a]
    paths_b = [_resolve(base, p) for p in s.domain_b]
    if not paths_a or not paths_b:
        raise ConfigError("domain_a and domain_b must each list at least one image")
    for key, paths in (("domain_a", paths_a), ("domain_b", paths_b)):
        for p in paths:
            _require_file(p, key)
    fields = s.model_dump(exclude={"domain_a", "domain_b", "out"})
    try:
        cfg = TrainConfig(**fields)
        images_a = [load_image(p) for p in paths_a]
        images_b = [load_image(p) for p in paths_b]
        for key, images in (("domain_a", images_a), ("domain_b", images_b)):
            for img in images:
                if img.width < cfg.x_batch or img.height < cfg.y_batch:
                    raise ConfigError(f"{key}: image {img.width}x{img.height} is smaller than the "
                                      f"{cfg.x_batch}x{cfg.y_batch} subsample")
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    out = s.out if args.out is not None else _resolve(base, s.out)
    final, records = train(cfg, images_a, images_b, out)
    print(final)
    return EXIT_OK


def cmd_translate(args) -> int:
    from .image import load_image, save_image
    from .model import load_model
    from .tiler import translate_full

    config, base = _read_config(args.config)
    values = _merge(config, checkpoint=args.checkpoint, input=args.input, output=args.output or args.out,
                    tile=args.tile, stride=args.stride, scale_mode=args.scale_mode, workers=args.workers,
                    direction=args.direction)
    for key in ("checkpoint", "input", "output"):
        if key not in values:
            raise ConfigError(f"missing {key} (give it as an argument or in the config file)")
    s = _settings(TranslateSettings, values)
    checkpoint = _resolve(base, s.checkpoint)
    src = _resolve(base, s.input)
    dst = _resolve(base, s.output)
    _require_file(checkpoint / "manifest.json", "checkpoint")
    _require_file(src, "input")
    tw, th = s.tile
    sx, sy = s.stride
    if min(tw, th, sx, sy) < 1 or sx > tw or sy > th:
        raise ConfigError(f"tile {tw}x{th} with stride {sx}x{sy}: need 1 <= stride <= tile")
    try:
        model = load_model(checkpoint)
        img = load_image(src)
    except (ValueError, OSError) as exc:
        raise ConfigError(str(exc)) from None
    mode = "native" if s.scale_mode == "native" else ("rescale", tw, th)
    factor = model.translate_factor()
    if mode == "native" and img.width >= tw and img.height >= th and (tw % factor or th % factor):
        raise ConfigError(f"tile: native mode needs tile dims divisible by {factor}, got {tw}x{th}")
    if args.seed is not None:
        log.info("--seed has no effect on translation (the generator is deterministic)")
    out = translate_full(model, s.direction, img, (tw, th), (sx, sy), mode, s.workers)
    save_image(out, dst)
    print(dst)
    return EXIT_OK


def cmd_profile(args) -> int:
    from .memprof import compare_tiled_whole, format_comparison, memory_sweep
    from .model import GanModel, load_model, paper_architecture

    config, base = _read_config(args.config)
    sizes = None
    if args.sizes is not None:
        try:
            sizes = [int(x) for x in args.sizes.split(",") if x.strip()]
        except ValueError:
            raise ConfigError(f"sizes: expected comma-separated integers, got {args.sizes!r}") from None
    s = _settings(ProfileSettings, _merge(config, checkpoint=args.checkpoint, sizes=sizes, workload=args.workload,
                                          cap=args.cap, tile=args.tile, stride=args.stride,
                                          base_channels=args.base_channels, seed=args.seed, out=args.out))
    if not s.sizes:
        raise ConfigError("sizes: at least one size is required")
    if s.checkpoint is not None:
        ckpt = _resolve(base, s.checkpoint)
        _require_file(ckpt / "manifest.json", "checkpoint")
        try:
            model = load_model(ckpt)
        except (ValueError, OSError) as exc:
            raise ConfigError(str(exc)) from None
    else:
        model = GanModel(paper_architecture(s.base_channels), seed=s.seed)
    factor = model.translate_factor()
    bad = [n for n in s.sizes if n < 1 or n % factor]
    if bad:
        raise ConfigError(f"sizes: {bad} are not positive multiples of {factor}")
    sweep = memory_sweep(model, s.sizes, s.workload, s.cap)
    if all(r.aborted for r in sweep.rows):
        print(f"error: every size exceeded the cap of {s.cap} bytes", file=sys.stderr)
        return EXIT_RUNTIME
    comparison = compare_tiled_whole(model, s.sizes, s.tile, s.stride, s.cap)
    out = s.out if args.out is not None else _resolve(base, s.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "memory_sweep.csv").write_text(sweep.format())
    (out / "tiled_vs_whole.csv").write_text(format_comparison(comparison))
    sys.stdout.write(sweep.format())
    print(out / "memory_sweep.csv")
    return EXIT_OK


def cmd_info(args) -> int:
    from .image import ImageError, load_image
    from .sampler import count_subsamples

    path = Path(args.image)
    try:
        img = load_image(path)
    except (FileNotFoundError, ImageError) as exc:
        raise ConfigError(str(exc)) from None
    bw, bh = args.batch
    print(f"width: {img.width}")
    print(f"height: {img.height}")
    print(f"megapixels: {megapixels(img.width, img.height)}")
    if img.width >= bw and img.height >= bh:
        print(f"subsamples_{bw}x{bh}: {count_subsamples(img.width, img.height, bw, bh)}")
    else:
        print(f"subsamples_{bw}x{bh}: 0 (image smaller than the subsample)")
    return EXIT_OK


# -- argument parsing ------------------------------------------------------------


def _shared(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="PATH", help="JSON file with settings for this command")
    parser.add_argument("--seed", metavar="U64", type=int, help="random seed (overrides the config)")
    parser.add_argument("--out", metavar="PATH", help="output location (overrides the config)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tilegan", description="Unpaired translation of very large images "
                                     "by training on random subsamples and translating in overlapping tiles.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", required=True)

    p = sub.add_parser("train", help="train a model on two image domains",
                       description="Train both generators and discriminators; prints the final checkpoint path.")
    _shared(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("translate", help="translate a full-resolution image tile by tile",
                       description="Translate an image with a trained checkpoint and write a PNG.")
    p.add_argument("checkpoint", nargs="?", help="checkpoint directory")
    p.add_argument("input", nargs="?", help="source image")
    p.add_argument("output", nargs="?", help="destination PNG (default: --out)")
    _shared(p)
    p.add_argument("--tile", nargs=2, type=int, metavar=("W", "H"), help="tile size (default 128 128)")
    p.add_argument("--stride", nargs=2, type=int, metavar=("SX", "SY"), help="tile stride (default 64 64)")
    p.add_argument("--scale-mode", choices=("native", "rescale"), help="run tiles at native size or rescaled")
    p.add_argument("--workers", type=int, metavar="N", help="parallel tile workers (default 1)")
    p.add_argument("--direction", choices=("ab", "ba"), help="translation direction (default ab)")
    p.set_defaults(func=cmd_translate)

    p = sub.add_parser("profile", help="measure peak tensor memory vs image size",
                       description="Whole-image memory sweep with a linear fit, plus a tiled-vs-whole comparison.")
    _shared(p)
    p.add_argument("--checkpoint", metavar="PATH", help="profile this checkpoint instead of a fresh model")
    p.add_argument("--sizes", metavar="LIST", help="comma-separated square sizes (default 128,256,512)")
    p.add_argument("--workload", choices=("inference", "forward", "forward+backward"),
                   help="pass to measure in the sweep (default forward)")
    p.add_argument("--cap", type=int, metavar="BYTES", help="abort sizes whose tracked bytes exceed this")
    p.add_argument("--tile", nargs=2, type=int, metavar=("W", "H"), help="tile size for the comparison")
    p.add_argument("--stride", nargs=2, type=int, metavar=("SX", "SY"), help="tile stride for the comparison")
    p.add_argument("--base-channels", type=int, metavar="N", help="width of a fresh model (default 64)")
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("info", help="print image dimensions and subsample count",
                       description="Print width, height, megapixels and the number of subsample positions.")
    p.add_argument("image", help="image file")
    p.add_argument("--batch", nargs=2, type=int, metavar=("W", "H"), default=(128, 128),
                   help="subsample size for the count (default 128 128)")
    _shared(p)
    p.set_defaults(func=cmd_info)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except KeyboardInterrupt:
        print("interrupted", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # noqa: BLE001 - any failure after validation is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
