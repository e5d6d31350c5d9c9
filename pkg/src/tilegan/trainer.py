"""Alternating discriminator/generator updates on random subsample batches."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import ops
from .checkpoint import load_adam, save_adam
from .image import ImageBuffer
from .memtrack import TRACKER
from .model import (
    Architecture,
    GanModel,
    LossWeights,
    discriminate,
    load_model,
    lsgan_disc_loss,
    lsgan_gen_loss,
    paper_architecture,
    read_manifest,
    save_model,
    translate,
)
from .optim import AdamState, adam_step
from .sampler import Sampler, SamplerConfig, TrainingBatch
from .tensor import Tensor, backward, zero_grads

log = logging.getLogger(__name__)

LOG_HEADER = "iteration,disc_loss,gen_loss,cycle_loss,ms,peak_bytes"


class NonFiniteLoss(FloatingPointError):
    def __init__(self, what: str, value: float, checkpoint: str | None = None):
        msg = f"{what} became non-finite ({value})"
        if checkpoint:
            msg += f"; last good checkpoint: {checkpoint}"
        else:
            msg += "; no checkpoint written yet"
        super().__init__(msg)
        self.what = what
        self.value = value
        self.checkpoint = checkpoint


@dataclass
class TrainConfig:
    iterations: int = 1000
    batch_size: int = 8
    x_batch: int = 128
    y_batch: int = 128
    allow_flip_h: bool = True
    allow_flip_v: bool = True
    base_channels: int = 64
    w_gan: float = 1.0
    w_cycle: float = 10.0
    lr: float = 1e-4
    beta1: float = 0.5
    beta2: float = 0.999
    eps: float = 1e-8
    checkpoint_interval: int | None = None  # None: only at exit
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.checkpoint_interval is not None and not 1 <= self.checkpoint_interval <= self.iterations:
            raise ValueError("checkpoint_interval must be between 1 and iterations")
        LossWeights(self.w_gan, self.w_cycle)

    def sampler_config(self, seed: int) -> SamplerConfig:
        return SamplerConfig(self.x_batch, self.y_batch, self.batch_size,
                             allow_flip_h=self.allow_flip_h, allow_flip_v=self.allow_flip_v, seed=seed)

    def adam(self) -> AdamState:
        return AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps)

    def derived_seeds(self) -> tuple[int, int, int]:
        """Model-init, domain-A sampler and domain-B sampler seeds from the run seed."""
        a, b, c = np.random.SeedSequence(self.seed).generate_state(3, np.uint64)
        return int(a), int(b), int(c)


@dataclass
class TrainLogRecord:
    iteration: int
    disc_loss: float
    gen_loss: float
    cycle_loss: float
    ms: float
    peak_bytes: int

    def csv(self) -> str:
        return f"{self.iteration},{self.disc_loss!r},{self.gen_loss!r},{self.cycle_loss!r},{self.ms:.1f},{self.peak_bytes}"


@dataclass
class OptimizerStates:
    gen: AdamState
    disc: AdamState


def _set_requires_grad(params: dict[str, Tensor], flag: bool) -> None:
    for p in params.values():
        p.requires_grad = flag


def _finite(value: float, what: str) -> float:
    if not math.isfinite(value):
        raise NonFiniteLoss(what, value)
    return value


def discriminator_step(model: GanModel, real_A: Tensor, real_B: Tensor, fake_A: Tensor, fake_B: Tensor,
                       opt: AdamState) -> float:
    """One Adam step of both discriminators on real vs. (already detached) fake images."""
    params = model.discriminator_parameters()
    loss = lsgan_disc_loss(
        discriminate(model, "A", real_A), discriminate(model, "A", fake_A),
        discriminate(model, "B", real_B), discriminate(model, "B", fake_B),
    )
    value = _finite(loss.item(), "disc_loss")
    backward(loss)
    del loss
    adam_step(params, opt)
    zero_grads(params.values())
    return value


def train_step(model: GanModel, batch_A: TrainingBatch, batch_B: TrainingBatch, opt: OptimizerStates,
               weights: LossWeights | None = None) -> TrainLogRecord:
    """Update D_A and D_B on detached fakes, then both generators on the adversarial + cycle objective."""
    weights = weights or LossWeights()
    real_A, real_B = batch_A.tensor, batch_B.tensor
    if real_A.dims != real_B.dims:
        raise ValueError(f"domain batches differ in dims: {real_A.dims} vs {real_B.dims}")
    start = time.perf_counter()
    TRACKER.reset_peak()
    base = TRACKER.current

    gen_params = model.generator_parameters()
    disc_params = model.discriminator_parameters()

    fake_B = translate(model, "ab", real_A)
    fake_A = translate(model, "ba", real_B)
    disc_loss = discriminator_step(model, real_A, real_B, fake_A.detach(), fake_B.detach(), opt.disc)

    _set_requires_grad(disc_params, False)
    try:
        gen_adv = lsgan_gen_loss(discriminate(model, "A", fake_A), discriminate(model, "B", fake_B))
        rec_A = translate(model, "ba", fake_B)
        rec_B = translate(model, "ab", fake_A)
        cyc = ops.mean_abs_error(rec_A, real_A) + ops.mean_abs_error(rec_B, real_B)
        del rec_A, rec_B, fake_A, fake_B
        total = gen_adv * weights.w_gan + cyc * weights.w_cycle
        gen_value = _finite(gen_adv.item(), "gen_loss")
        cyc_value = _finite(cyc.item(), "cycle_loss")
        del gen_adv, cyc
        backward(total)
        del total
    finally:
        _set_requires_grad(disc_params, True)
    adam_step(gen_params, opt.gen)
    zero_grads(gen_params.values())

    return TrainLogRecord(
        iteration=opt.gen.t,
        disc_loss=disc_loss,
        gen_loss=gen_value,
        cycle_loss=cyc_value,
        ms=(time.perf_counter() - start) * 1000.0,
        peak_bytes=TRACKER.peak - base,
    )


class Trainer:
    """Owns model, optimizer states and both domain samplers for one run."""

    def __init__(self, config: TrainConfig, images_A: list[ImageBuffer], images_B: list[ImageBuffer],
                 arch: Architecture | None = None):
        self.config = config
        model_seed, seed_A, seed_B = config.derived_seeds()
        self.arch = arch or paper_architecture(config.base_channels)
        self.model = GanModel(self.arch, seed=model_seed)
        self.sampler_A = Sampler(images_A, config.sampler_config(seed_A))
        self.sampler_B = Sampler(images_B, config.sampler_config(seed_B))
        self.opt = OptimizerStates(config.adam(), config.adam())
        self.weights = LossWeights(config.w_gan, config.w_cycle)
        self.iteration = 0
        self.last_checkpoint: str | None = None

    def step(self) -> TrainLogRecord:
        batch_A = self.sampler_A.next_batch()
        batch_B = self.sampler_B.next_batch()
        try:
            record = train_step(self.model, batch_A, batch_B, self.opt, self.weights)
        except NonFiniteLoss as exc:
            raise NonFiniteLoss(exc.what, exc.value, self.last_checkpoint) from None
        self.iteration += 1
        record.iteration = self.iteration
        return record

    def save(self, directory) -> Path:
        directory = Path(directory)
        extra = {
            "trainer": {
                "iteration": self.iteration,
                "config": asdict(self.config),
                "rng_A": self.sampler_A.state(),
                "rng_B": self.sampler_B.state(),
            }
        }
        save_model(self.model, directory, extra)
        save_adam(directory / "optimizer_gen.tgop", self.opt.gen)
        save_adam(directory / "optimizer_disc.tgop", self.opt.disc)
        self.last_checkpoint = str(directory)
        return directory

    @classmethod
    def resume(cls, directory, images_A: list[ImageBuffer], images_B: list[ImageBuffer]) -> "Trainer":
        directory = Path(directory)
        manifest = read_manifest(directory)
        state = manifest["trainer"]
        config = TrainConfig(**state["config"])
        trainer = cls(config, images_A, images_B, Architecture.from_dict(manifest["architecture"]))
        trainer.model = load_model(directory)
        trainer.opt = OptimizerStates(
            load_adam(directory / "optimizer_gen.tgop", config.adam()),
            load_adam(directory / "optimizer_disc.tgop", config.adam()),
        )
        trainer.sampler_A.restore(state["rng_A"])
        trainer.sampler_B.restore(state["rng_B"])
        trainer.iteration = state["iteration"]
        trainer.last_checkpoint = str(directory)
        return trainer


def checkpoint_dir(out_dir, iteration: int) -> Path:
    return Path(out_dir) / "checkpoints" / f"iter_{iteration:07d}"


def train(config: TrainConfig, images_A: list[ImageBuffer], images_B: list[ImageBuffer], out_dir,
          arch: Architecture | None = None, trainer: Trainer | None = None) -> tuple[Path, list[TrainLogRecord]]:
    """Run ``config.iterations`` steps, checkpointing at the interval and at exit.

    Returns the final checkpoint directory and the log records. The log is also
    written to ``out_dir/train_log.csv``.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    trainer = trainer or Trainer(config, images_A, images_B, arch)
    records: list[TrainLogRecord] = []
    log_path = out_dir / "train_log.csv"
    final: Path | None = None
    with open(log_path, "w") as fh:
        fh.write(LOG_HEADER + "\n")
        while trainer.iteration < config.iterations:
            record = trainer.step()
            records.append(record)
            fh.write(record.csv() + "\n")
            fh.flush()
            if record.iteration % 50 == 0 or record.iteration == 1:
                log.info("iter %d  D %.4f  G %.4f  cyc %.4f  %.0f ms", record.iteration,
                         record.disc_loss, record.gen_loss, record.cycle_loss, record.ms)
            if config.checkpoint_interval and trainer.iteration % config.checkpoint_interval == 0:
                final = trainer.save(checkpoint_dir(out_dir, trainer.iteration))
    if final is None or final != checkpoint_dir(out_dir, trainer.iteration):
        final = trainer.save(checkpoint_dir(out_dir, trainer.iteration))
    return final, records


def read_log(path) -> list[TrainLogRecord]:
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != LOG_HEADER:
        raise ValueError(f"{path} is not a training log")
    out = []
    for line in lines[1:]:
        it, d, g, c, ms, peak = line.split(",")
        out.append(TrainLogRecord(int(it), float(d), float(g), float(c), float(ms), int(peak)))
    return out
