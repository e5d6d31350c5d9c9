import numpy as np
import pytest

from tilegan.image import ImageBuffer
from tilegan.model import Architecture, GanModel, discriminate, lsgan_disc_loss, translate
from tilegan.nn import LayerSpec
from tilegan.optim import AdamState
from tilegan.sampler import Sampler, SamplerConfig
from tilegan.tensor import no_grad
from tilegan.trainer import (
    LOG_HEADER,
    NonFiniteLoss,
    OptimizerStates,
    TrainConfig,
    Trainer,
    checkpoint_dir,
    discriminator_step,
    read_log,
    train,
    train_step,
)


def toy_architecture():
    """Smallest model with every layer kind; works on 8x8 batches."""
    return Architecture(
        encoder=[LayerSpec("down_conv", 3, 4, "none", "leaky_relu", 2)],
        shared=[LayerSpec("residual", 3, 4, "instance", "relu", 1, True)],
        decoder=[LayerSpec("up_conv", 3, 3, "none", "tanh", 2)],
        discriminator=[LayerSpec("down_conv", 3, 4, "none", "leaky_relu", 2),
                       LayerSpec("down_conv", 1, 1, "none", "leaky_relu", 1)],
    )


def textured(rng, w, h, offset=0):
    return ImageBuffer(np.clip(rng.normal(120 + offset, 40, size=(h, w, 3)), 0, 255).astype(np.uint8))


@pytest.fixture
def domains(rng):
    return [textured(rng, 24, 20)], [textured(rng, 30, 16, offset=40)]


def toy_config(**kw):
    base = dict(iterations=3, batch_size=2, x_batch=8, y_batch=8, lr=1e-3, seed=7)
    base.update(kw)
    return TrainConfig(**base)


def weights_bytes(model):
    return {n: t.data.tobytes() for n, t in model.named_parameters().items()}


def records_without_time(records):
    return [(r.iteration, r.disc_loss, r.gen_loss, r.cycle_loss, r.peak_bytes) for r in records]


class TestTrainConfig:
    def test_defaults(self):
        cfg = TrainConfig()
        assert (cfg.w_gan, cfg.w_cycle) == (1.0, 10.0)
        assert (cfg.lr, cfg.beta1, cfg.beta2) == (1e-4, 0.5, 0.999)

    @pytest.mark.parametrize("kw", [dict(iterations=0), dict(iterations=5, checkpoint_interval=6),
                                    dict(checkpoint_interval=0), dict(w_gan=0.0, w_cycle=0.0)])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            TrainConfig(**kw)

    def test_derived_seeds_distinct_and_stable(self):
        a = TrainConfig(seed=3).derived_seeds()
        assert len(set(a)) == 3
        assert a == TrainConfig(seed=3).derived_seeds()
        assert a != TrainConfig(seed=4).derived_seeds()


class TestTrainStep:
    def make(self, domains, lr):
        images_A, images_B = domains
        cfg = toy_config(lr=lr)
        trainer = Trainer(cfg, images_A, images_B, toy_architecture())
        return trainer

    def test_zero_learning_rate_freezes_parameters(self, domains):
        trainer = self.make(domains, lr=0.0)
        before = weights_bytes(trainer.model)
        record = trainer.step()
        assert weights_bytes(trainer.model) == before
        assert np.isfinite([record.disc_loss, record.gen_loss, record.cycle_loss]).all()

    def test_one_adam_step_each(self, domains):
        trainer = self.make(domains, lr=1e-3)
        trainer.step()
        trainer.step()
        assert trainer.opt.gen.t == 2 and trainer.opt.disc.t == 2

    def test_record_fields(self, domains):
        record = self.make(domains, lr=1e-3).step()
        assert record.iteration == 1
        assert record.peak_bytes > 0 and record.ms > 0
        assert record.disc_loss >= 0 and record.gen_loss >= 0 and record.cycle_loss >= 0

    def test_disc_only_step_does_not_increase_loss(self, domains):
        images_A, images_B = domains
        model = GanModel(toy_architecture(), seed=1)
        real_A = Sampler(images_A, SamplerConfig(8, 8, batch_size=4, seed=1)).next_batch().tensor
        real_B = Sampler(images_B, SamplerConfig(8, 8, batch_size=4, seed=2)).next_batch().tensor
        with no_grad():
            fake_B = translate(model, "ab", real_A)
            fake_A = translate(model, "ba", real_B)

        def disc_loss():
            with no_grad():
                return lsgan_disc_loss(discriminate(model, "A", real_A), discriminate(model, "A", fake_A),
                                       discriminate(model, "B", real_B), discriminate(model, "B", fake_B)).item()

        opt = AdamState(lr=1e-4)
        for _ in range(3):
            before = disc_loss()
            reported = discriminator_step(model, real_A, real_B, fake_A, fake_B, opt)
            assert reported == pytest.approx(before, rel=1e-6)
            assert disc_loss() <= before

    def test_mismatched_batch_dims(self, domains):
        images_A, images_B = domains
        model = GanModel(toy_architecture())
        batch_A = Sampler(images_A, SamplerConfig(8, 8, seed=1)).next_batch()
        batch_B = Sampler(images_B, SamplerConfig(16, 8, seed=1)).next_batch()
        with pytest.raises(ValueError, match="differ"):
            train_step(model, batch_A, batch_B, OptimizerStates(AdamState(), AdamState()))

    def test_non_finite_loss_names_last_checkpoint(self, domains, tmp_path):
        trainer = self.make(domains, lr=1e-3)
        trainer.step()
        saved = trainer.save(tmp_path / "good")
        trainer.model.generator_parameters()["encoder_A.0.w"].data[...] = np.nan
        with pytest.raises(NonFiniteLoss, match=str(saved)) as info:
            trainer.step()
        assert info.value.checkpoint == str(saved)

    def test_non_finite_without_checkpoint(self, domains):
        trainer = self.make(domains, lr=1e-3)
        trainer.model.discriminator_parameters()["disc_A.0.b"].data[...] = np.inf
        with pytest.raises(NonFiniteLoss, match="no checkpoint"):
            trainer.step()


class TestTrain:
    def test_single_iteration(self, domains, tmp_path):
        final, records = train(toy_config(iterations=1), *domains, tmp_path, arch=toy_architecture())
        assert len(records) == 1
        assert final == checkpoint_dir(tmp_path, 1)
        assert [p.name for p in (tmp_path / "checkpoints").iterdir()] == ["iter_0000001"]
        assert sorted(p.name for p in final.iterdir()) == [
            "manifest.json", "optimizer_disc.tgop", "optimizer_gen.tgop", "weights.tgck"]

    def test_checkpoint_cadence_and_log(self, domains, tmp_path):
        final, records = train(toy_config(iterations=5, checkpoint_interval=2), *domains, tmp_path,
                               arch=toy_architecture())
        names = sorted(p.name for p in (tmp_path / "checkpoints").iterdir())
        assert names == ["iter_0000002", "iter_0000004", "iter_0000005"]
        text = (tmp_path / "train_log.csv").read_text().splitlines()
        assert text[0] == LOG_HEADER and len(text) == 6
        assert records_without_time(read_log(tmp_path / "train_log.csv")) == records_without_time(records)

    def test_seed_determinism(self, domains, tmp_path):
        cfg = toy_config(iterations=3)
        fa, ra = train(cfg, *domains, tmp_path / "a", arch=toy_architecture())
        fb, rb = train(cfg, *domains, tmp_path / "b", arch=toy_architecture())
        assert records_without_time(ra) == records_without_time(rb)
        assert (fa / "weights.tgck").read_bytes() == (fb / "weights.tgck").read_bytes()

    def test_different_seed_differs(self, domains, tmp_path):
        _, ra = train(toy_config(seed=1), *domains, tmp_path / "a", arch=toy_architecture())
        _, rb = train(toy_config(seed=2), *domains, tmp_path / "b", arch=toy_architecture())
        assert records_without_time(ra) != records_without_time(rb)

    def test_resume_matches_uninterrupted(self, domains, tmp_path):
        cfg = toy_config(iterations=4, checkpoint_interval=2)
        final, full = train(cfg, *domains, tmp_path / "full", arch=toy_architecture())
        trainer = Trainer.resume(checkpoint_dir(tmp_path / "full", 2), *domains)
        assert trainer.iteration == 2
        resumed_final, tail = train(cfg, *domains, tmp_path / "resumed", trainer=trainer)
        assert records_without_time(tail) == records_without_time(full[2:])
        for name in ("weights.tgck", "optimizer_gen.tgop", "optimizer_disc.tgop"):
            assert (resumed_final / name).read_bytes() == (final / name).read_bytes()

    def test_paper_architecture_narrow(self, domains, tmp_path):
        images_A, images_B = [ImageBuffer(np.full((40, 40, 3), 90, np.uint8))], [ImageBuffer(np.full((40, 40, 3), 200, np.uint8))]
        cfg = TrainConfig(iterations=1, batch_size=1, x_batch=16, y_batch=16, base_channels=2)
        _, records = train(cfg, images_A, images_B, tmp_path)
        assert len(records) == 1

    def test_batch_larger_than_image(self, tmp_path, rng):
        small = [textured(rng, 6, 6)]
        with pytest.raises(ValueError, match="exceeds"):
            train(toy_config(), small, small, tmp_path, arch=toy_architecture())


def test_peak_memory_independent_of_source_size(rng):
    """Peak tracked bytes depend on (b, x_batch, y_batch), not on the source image size."""
    peaks = []
    for size in (256, 4096):
        img = ImageBuffer(np.full((size, size, 3), 128, dtype=np.uint8))
        cfg = TrainConfig(iterations=2, batch_size=2, x_batch=16, y_batch=16, base_channels=2, seed=0)
        trainer = Trainer(cfg, [img], [img])
        trainer.step()
        peaks.append(trainer.step().peak_bytes)
    assert abs(peaks[0] - peaks[1]) <= 0.01 * peaks[0]
