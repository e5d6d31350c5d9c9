"""Two-domain translation model with a shared latent core.

    G_AB = decoder_B . shared . encoder_A
    G_BA = decoder_A . shared . encoder_B

The shared residual blocks are one :class:`~tilegan.nn.Stack` referenced by
both generators, so a gradient step through either direction moves the
weights the other direction sees.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import ops
from .nn import LayerSpec, Stack
from .tensor import Tensor

N_COLOR = 3
DOMAINS = ("A", "B")
DIRECTIONS = ("ab", "ba")


@dataclass
class Architecture:
    encoder: list[LayerSpec]
    shared: list[LayerSpec]
    decoder: list[LayerSpec]
    discriminator: list[LayerSpec]

    def to_dict(self) -> dict:
        return {
            "encoder": [s.to_dict() for s in self.encoder],
            "shared": [s.to_dict() for s in self.shared],
            "decoder": [s.to_dict() for s in self.decoder],
            "discriminator": [s.to_dict() for s in self.discriminator],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(**{k: [LayerSpec.from_dict(s) for s in d[k]] for k in ("encoder", "shared", "decoder", "discriminator")})


def paper_architecture(base_channels: int = 64, latent_channels: int | None = None) -> Architecture:
    """The generator/discriminator layer table, optionally narrowed.

    ``base_channels=64`` gives the published widths 64/128/256/512. Smaller
    bases scale every width proportionally for desk-scale experiments.
    """
    c1, c2, c3, c4 = (base_channels * m for m in (1, 2, 4, 8))
    if latent_channels is not None:
        c4 = latent_channels

    def down(k, n, stride=2, act="leaky_relu"):
        return LayerSpec("down_conv", k, n, "none", act, stride)

    def up(k, n, stride=2, act="leaky_relu"):
        return LayerSpec("up_conv", k, n, "none", act, stride)

    def res(n, shared=False):
        return LayerSpec("residual", 3, n, "instance", "relu", 1, shared)

    encoder = [down(7, c1, stride=1), down(3, c2), down(3, c3), down(3, c4)] + [res(c4) for _ in range(3)]
    shared = [res(c4, shared=True) for _ in range(2)]
    decoder = [res(c4) for _ in range(3)] + [up(3, c3), up(3, c2), up(3, c1), up(3, N_COLOR, stride=1, act="tanh")]
    disc = [down(3, c1), down(3, c2), down(3, c3), down(3, c4), down(1, 1, stride=1)]
    return Architecture(encoder, shared, decoder, disc)


def identity_architecture() -> Architecture:
    """Generators that return their input unchanged; discriminator is a single 1x1 conv."""
    return Architecture([], [], [], [LayerSpec("down_conv", 1, 1, "none", "none", 1)])


def constant_architecture() -> Architecture:
    """Generators made of one 1x1 conv each; set weights to 0 and bias to c for a constant output."""
    return Architecture([], [], [LayerSpec("down_conv", 1, N_COLOR, "none", "none", 1)],
                        [LayerSpec("down_conv", 1, 1, "none", "none", 1)])


@dataclass
class LossWeights:
    w_gan: float = 1.0
    w_cycle: float = 10.0

    def __post_init__(self):
        if self.w_gan < 0 or self.w_cycle < 0:
            raise ValueError("loss weights must be nonnegative")
        if self.w_gan == 0 and self.w_cycle == 0:
            raise ValueError("at least one loss weight must be positive")


class GanModel:
    def __init__(self, arch: Architecture, seed: int = 0, init: str = "random"):
        self.arch = arch
        rng = np.random.Generator(np.random.Philox(seed)) if init == "random" else None
        self.encoder_A = Stack(arch.encoder, N_COLOR, rng)
        self.encoder_B = Stack(arch.encoder, N_COLOR, rng)
        self.shared_core = Stack(arch.shared, self.encoder_A.out_channels, rng)
        self.decoder_A = Stack(arch.decoder, self.shared_core.out_channels, rng)
        self.decoder_B = Stack(arch.decoder, self.shared_core.out_channels, rng)
        if self.decoder_A.out_channels != N_COLOR:
            raise ValueError(f"generator must emit {N_COLOR} channels, got {self.decoder_A.out_channels}")
        self.disc_A = Stack(arch.discriminator, N_COLOR, rng)
        self.disc_B = Stack(arch.discriminator, N_COLOR, rng)

    # -- parameter views -----------------------------------------------------

    def generator_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.encoder_A.named_parameters("encoder_A"))
        out.update(self.encoder_B.named_parameters("encoder_B"))
        out.update(self.shared_core.named_parameters("shared"))
        out.update(self.decoder_A.named_parameters("decoder_A"))
        out.update(self.decoder_B.named_parameters("decoder_B"))
        return out

    def discriminator_parameters(self) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        out.update(self.disc_A.named_parameters("disc_A"))
        out.update(self.disc_B.named_parameters("disc_B"))
        return out

    def named_parameters(self) -> dict[str, Tensor]:
        return {**self.generator_parameters(), **self.discriminator_parameters()}

    def parameter_count(self) -> int:
        return sum(int(np.prod(t.dims)) for t in self.named_parameters().values())

    def generator_stacks(self, direction: str) -> tuple[Stack, Stack, Stack]:
        if direction == "ab":
            return self.encoder_A, self.shared_core, self.decoder_B
        if direction == "ba":
            return self.encoder_B, self.shared_core, self.decoder_A
        raise ValueError(f"direction must be 'ab' or 'ba', got {direction!r}")

    def translate_factor(self) -> int:
        return self.encoder_A.downsample_factor() * self.shared_core.downsample_factor()

    def discriminate_factor(self) -> int:
        return self.disc_A.downsample_factor()

    # -- persistence -----------------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {name: t.data for name, t in self.named_parameters().items()}

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        missing = set(params) - set(arrays)
        extra = set(arrays) - set(params)
        if missing or extra:
            raise ValueError(f"checkpoint does not match architecture: missing {sorted(missing)[:5]}, unexpected {sorted(extra)[:5]}")
        for name, t in params.items():
            if arrays[name].shape != t.dims:
                raise ValueError(f"{name}: checkpoint dims {arrays[name].shape} != model dims {t.dims}")
            t.data[...] = arrays[name]


def _check_image_tensor(x: Tensor, factor: int, what: str) -> None:
    b, h, w, c = x.dims
    if c != N_COLOR:
        raise ValueError(f"{what} expects {N_COLOR} channels, got {c}")
    if h % factor or w % factor:
        raise ValueError(f"{what} needs spatial dims divisible by {factor}, got {h}x{w}")


def translate(model: GanModel, direction: str, x: Tensor, tracker=None) -> Tensor:
    """Run G_AB (``direction='ab'``) or G_BA on an NHWC batch in [-1, 1]."""
    enc, core, dec = model.generator_stacks(direction)
    _check_image_tensor(x, model.translate_factor(), "translate")
    z = enc(x, tracker, "enc.")
    z = core(z, tracker, "shared.")
    return dec(z, tracker, "dec.")


def encode_latent(model: GanModel, direction: str, x: Tensor) -> Tensor:
    enc, core, _ = model.generator_stacks(direction)
    _check_image_tensor(x, model.translate_factor(), "encode_latent")
    return core(enc(x))


def discriminate(model: GanModel, domain: str, x: Tensor) -> Tensor:
    """Patch score map of the domain's discriminator."""
    if domain == "A":
        disc = model.disc_A
    elif domain == "B":
        disc = model.disc_B
    else:
        raise ValueError(f"domain must be 'A' or 'B', got {domain!r}")
    _check_image_tensor(x, model.discriminate_factor(), "discriminate")
    return disc(x)


def cycle_loss(model: GanModel, x_A: Tensor, x_B: Tensor) -> Tensor:
    """mean|G_BA(G_AB(x_A)) - x_A| + mean|G_AB(G_BA(x_B)) - x_B|."""
    rec_A = translate(model, "ba", translate(model, "ab", x_A))
    rec_B = translate(model, "ab", translate(model, "ba", x_B))
    return ops.mean_abs_error(rec_A, x_A) + ops.mean_abs_error(rec_B, x_B)


def lsgan_disc_loss(real_A: Tensor, fake_A: Tensor, real_B: Tensor, fake_B: Tensor) -> Tensor:
    """Average of the four squared-error terms: reals toward 1, fakes toward 0."""
    terms = (
        ops.mse_to_constant(real_A, 1.0)
        + ops.mse_to_constant(fake_A, 0.0)
        + ops.mse_to_constant(real_B, 1.0)
        + ops.mse_to_constant(fake_B, 0.0)
    )
    return terms * 0.25


def lsgan_gen_loss(fake_A: Tensor, fake_B: Tensor) -> Tensor:
    return (ops.mse_to_constant(fake_A, 1.0) + ops.mse_to_constant(fake_B, 1.0)) * 0.5


def gan_losses(model: GanModel, real_A: Tensor, real_B: Tensor, fake_A: Tensor, fake_B: Tensor) -> tuple[Tensor, Tensor]:
    """Least-squares adversarial losses (disc_loss, gen_loss) over both domains.

    Pass detached fakes when only the discriminator should receive gradients.
    """
    s_real_A = discriminate(model, "A", real_A)
    s_real_B = discriminate(model, "B", real_B)
    s_fake_A = discriminate(model, "A", fake_A)
    s_fake_B = discriminate(model, "B", fake_B)
    disc = lsgan_disc_loss(s_real_A, s_fake_A, s_real_B, s_fake_B)
    gen = lsgan_gen_loss(s_fake_A, s_fake_B)
    return disc, gen


# -- checkpoint directories -----------------------------------------------------

MANIFEST = "manifest.json"
WEIGHTS = "weights.tgck"


def save_model(model: GanModel, directory, extra: dict | None = None) -> Path:
    """Write ``manifest.json`` (layer specs plus ``extra``) and ``weights.tgck`` into ``directory``."""
    from .checkpoint import save_arrays, write_atomic

    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    manifest = {"format": "tilegan-checkpoint", "version": 1, "architecture": model.arch.to_dict()}
    if extra:
        manifest.update(extra)
    save_arrays(directory / WEIGHTS, model.state_arrays())
    write_atomic(directory / MANIFEST, (json.dumps(manifest, indent=1, sort_keys=True) + "\n").encode())
    return directory


def read_manifest(directory) -> dict:
    path = Path(directory) / MANIFEST
    if not path.is_file():
        raise FileNotFoundError(f"no checkpoint manifest at {path}")
    manifest = json.loads(path.read_text())
    if manifest.get("format") != "tilegan-checkpoint":
        raise ValueError(f"{path} is not a tilegan checkpoint manifest")
    return manifest


def load_model(directory) -> GanModel:
    from .checkpoint import load_arrays

    manifest = read_manifest(directory)
    model = GanModel(Architecture.from_dict(manifest["architecture"]), init="zeros")
    model.load_state_arrays(load_arrays(Path(directory) / WEIGHTS))
    return model
