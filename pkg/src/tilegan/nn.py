"""Parameterised layers built from :class:`LayerSpec` records."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from . import ops
from .tensor import Tensor

KINDS = ("down_conv", "up_conv", "residual", "activation")
NORMS = ("none", "instance")
ACTIVATIONS = ("leaky_relu", "relu", "tanh", "none")
INSTANCE_NORM_EPS = 1e-5


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    filter_size: int = 3
    out_channels: int = 0
    norm: str = "none"
    activation: str = "none"
    stride: int = 1
    shared: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.norm not in NORMS:
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind != "activation":
            if self.filter_size < 1 or self.filter_size % 2 == 0:
                raise ValueError(f"filter_size must be odd and positive, got {self.filter_size}")
            if self.out_channels < 1:
                raise ValueError(f"out_channels must be positive, got {self.out_channels}")
        if self.stride < 1:
            raise ValueError(f"stride must be positive, got {self.stride}")

    @property
    def padding(self) -> int:
        return self.filter_size // 2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def he_normal(rng: np.random.Generator, shape: tuple[int, int, int, int], fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


def _param(data, name: str) -> Tensor:
    return Tensor(data, requires_grad=True, name=name)


def residual_block(
    x: Tensor,
    w1: Tensor,
    b1: Tensor,
    gamma1: Tensor,
    beta1: Tensor,
    w2: Tensor,
    b2: Tensor,
    gamma2: Tensor,
    beta2: Tensor,
    eps: float = INSTANCE_NORM_EPS,
) -> Tensor:
    """x + IN(conv(relu(IN(conv(x)))))  with "same" padding and stride 1."""
    c = x.dims[3]
    if w1.dims[0] != c or w2.dims[0] != c:
        raise ValueError(f"residual block must preserve channels: input {c}, convs {w1.dims[0]}/{w2.dims[0]}")
    pad = w1.dims[1] // 2
    h = ops.conv2d(x, w1, b1, stride=1, padding=pad)
    h = ops.instance_norm(h, gamma1, beta1, eps)
    h = ops.relu(h)
    h = ops.conv2d(h, w2, b2, stride=1, padding=pad)
    h = ops.instance_norm(h, gamma2, beta2, eps)
    return ops.add(x, h)


class Layer:
    def __init__(self, spec: LayerSpec, in_channels: int, rng: np.random.Generator | None):
        self.spec = spec
        self.in_channels = in_channels
        self.params: dict[str, Tensor] = {}
        self._build(rng)

    @property
    def out_channels(self) -> int:
        return self.in_channels if self.spec.kind == "activation" else self.spec.out_channels

    def _init(self, rng, shape, fan_in):
        if rng is None:
            return np.zeros(shape)
        return he_normal(rng, shape, fan_in)

    def _build(self, rng) -> None:
        s, cin = self.spec, self.in_channels
        k, cout = s.filter_size, s.out_channels
        if s.kind == "down_conv":
            self.params["w"] = _param(self._init(rng, (cout, k, k, cin), k * k * cin), "w")
            self.params["b"] = _param(np.zeros((1, 1, 1, cout)), "b")
        elif s.kind == "up_conv":
            self.params["w"] = _param(self._init(rng, (cin, k, k, cout), k * k * cin), "w")
            self.params["b"] = _param(np.zeros((1, 1, 1, cout)), "b")
        elif s.kind == "residual":
            if cout != cin:
                raise ValueError(f"residual layer needs in == out channels, got {cin} -> {cout}")
            for i in (1, 2):
                self.params[f"w{i}"] = _param(self._init(rng, (cin, k, k, cin), k * k * cin), f"w{i}")
                self.params[f"b{i}"] = _param(np.zeros((1, 1, 1, cin)), f"b{i}")
                self.params[f"gamma{i}"] = _param(np.ones((1, 1, 1, cin)), f"gamma{i}")
                self.params[f"beta{i}"] = _param(np.zeros((1, 1, 1, cin)), f"beta{i}")
        if s.norm == "instance" and s.kind in ("down_conv", "up_conv"):
            self.params["gamma"] = _param(np.ones((1, 1, 1, cout)), "gamma")
            self.params["beta"] = _param(np.zeros((1, 1, 1, cout)), "beta")

    def __call__(self, x: Tensor) -> Tensor:
        s, p = self.spec, self.params
        if x.dims[3] != self.in_channels:
            raise ValueError(f"{s.kind} expects {self.in_channels} input channels, got {x.dims[3]}")
        if s.kind == "residual":
            return residual_block(
                x, p["w1"], p["b1"], p["gamma1"], p["beta1"], p["w2"], p["b2"], p["gamma2"], p["beta2"]
            )
        if s.kind == "down_conv":
            x = ops.conv2d(x, p["w"], p["b"], stride=s.stride, padding=s.padding)
        elif s.kind == "up_conv":
            x = ops.conv_transpose2d(x, p["w"], p["b"], stride=s.stride, padding=s.padding)
        if "gamma" in p:
            x = ops.instance_norm(x, p["gamma"], p["beta"], INSTANCE_NORM_EPS)
        return ops.activation(x, s.activation)

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        s = self.spec
        if s.kind == "down_conv":
            return (ops.conv_output_size(h, s.filter_size, s.stride, s.padding),
                    ops.conv_output_size(w, s.filter_size, s.stride, s.padding))
        if s.kind == "up_conv":
            return (ops.conv_transpose_output_size(h, s.filter_size, s.stride, s.padding, s.stride - 1),
                    ops.conv_transpose_output_size(w, s.filter_size, s.stride, s.padding, s.stride - 1))
        return h, w


class Stack:
    """An ordered run of layers; may be empty, in which case it is the identity."""

    def __init__(self, specs: list[LayerSpec], in_channels: int, rng: np.random.Generator | None = None):
        self.specs = list(specs)
        self.in_channels = in_channels
        self.layers: list[Layer] = []
        c = in_channels
        for spec in self.specs:
            layer = Layer(spec, c, rng)
            self.layers.append(layer)
            c = layer.out_channels
        self.out_channels = c

    def __call__(self, x: Tensor, tracker=None, prefix: str = "") -> Tensor:
        for i, layer in enumerate(self.layers):
            if tracker is None:
                x = layer(x)
            else:
                with tracker.phase(f"{prefix}{i}:{layer.spec.kind}"):
                    x = layer(x)
        return x

    def named_parameters(self, prefix: str) -> dict[str, Tensor]:
        out = {}
        for i, layer in enumerate(self.layers):
            for key, t in layer.params.items():
                out[f"{prefix}.{i}.{key}"] = t
        return out

    def downsample_factor(self) -> int:
        f = 1
        for spec in self.specs:
            if spec.kind == "down_conv":
                f *= spec.stride
        return f

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        for layer in self.layers:
            h, w = layer.output_hw(h, w)
        return h, w
