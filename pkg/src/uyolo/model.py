"""The uYOLO network: a fixed backbone of one strided convolution plus
seven depthwise-separable blocks, three max pools, and a two-layer
detection head.

The default 128x128 configuration traces to a 64x4x4 feature map
(flatten size 1024) and an output vector of length S*S*(N + B*5).
Larger-input variants swap the first kernel to 7 and widen two paddings;
the 88px variant shrinks the head.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import ops

# (in_channels, out_channels) of the seven depthwise-separable blocks;
# a max pool follows block 3 and block 7
DS_CHANNELS = ((64, 128), (128, 128), (128, 128), (128, 128), (128, 64), (64, 64), (64, 64))
DEFAULT_DS_PADDINGS = (0, 1, 0, 1, 0, 1, 0)
FIRST_CONV_FILTERS = 64


@dataclass
class UYoloConfig:
    """Architecture hyperparameters. S: grid side, B: boxes per cell,
    N: class count."""

    input_res: int = 128
    channels: int = 3
    S: int = 5
    B: int = 2
    N: int = 5
    first_conv_kernel: int = 4
    first_conv_stride: int = 2
    ds_paddings: tuple = DEFAULT_DS_PADDINGS
    head_width: int = 1024

    def __post_init__(self):
        if self.S < 1 or self.B < 1 or self.N < 1:
            raise ValueError(f"config: S={self.S}, B={self.B}, N={self.N} must all be >= 1")
        if self.input_res < 1 or self.channels < 1:
            raise ValueError("config: input_res and channels must be >= 1")
        if len(self.ds_paddings) != len(DS_CHANNELS):
            raise ValueError(f"config: expected {len(DS_CHANNELS)} ds_paddings")

    @property
    def output_length(self) -> int:
        return self.S * self.S * (self.N + self.B * 5)

    @property
    def cell_size(self) -> float:
        return self.input_res / self.S

    @classmethod
    def for_resolution(cls, input_res: int, **kwargs) -> "UYoloConfig":
        """Variant presets: >=256px uses a 7px first kernel and padding 2
        on the first two separable blocks; 88px shrinks the head to 256."""
        if input_res >= 256:
            kwargs.setdefault("first_conv_kernel", 7)
            pads = list(DEFAULT_DS_PADDINGS)
            pads[0] = pads[1] = 2
            kwargs.setdefault("ds_paddings", tuple(pads))
        elif input_res <= 88:
            kwargs.setdefault("head_width", 256)
        return cls(input_res=input_res, **kwargs)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["ds_paddings"] = list(self.ds_paddings)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "UYoloConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"config: unknown keys {sorted(unknown)}")
        d = dict(d)
        if "ds_paddings" in d:
            d["ds_paddings"] = tuple(d["ds_paddings"])
        return cls(**d)


@dataclass
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int
    padding: int
    groups: int
    weight: np.ndarray
    bias: np.ndarray
    kind: str = field(default="conv", init=False)

    @property
    def params(self):
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class Linear:
    in_features: int
    out_features: int
    weight: np.ndarray
    bias: np.ndarray
    kind: str = field(default="linear", init=False)

    @property
    def params(self):
        return {"weight": self.weight, "bias": self.bias}


@dataclass
class BatchNorm:
    num_features: int
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1
    kind: str = field(default="batchnorm", init=False)

    @property
    def params(self):
        return {
            "gamma": self.gamma,
            "beta": self.beta,
            "running_mean": self.running_mean,
            "running_var": self.running_var,
        }


@dataclass
class ReLU:
    kind: str = field(default="relu", init=False)
    params: dict = field(default_factory=dict, init=False)


@dataclass
class MaxPool:
    kernel: int
    kind: str = field(default="maxpool", init=False)
    params: dict = field(default_factory=dict, init=False)


@dataclass
class Flatten:
    kind: str = field(default="flatten", init=False)
    params: dict = field(default_factory=dict, init=False)


class ModelGraph:
    """Ordered layer list plus config. Immutable once built as far as
    inference is concerned; training, pruning and quantization mutate it
    and need exclusive access."""

    def __init__(self, config: UYoloConfig, layers: list, dtype=np.float32):
        self.config = config
        self.layers = layers
        self.dtype = np.dtype(dtype)
        self.masks: dict[int, np.ndarray] = {}

    def named_parameters(self):
        """Yields (name, array) for every parameter tensor, in layer order."""
        for i, layer in enumerate(self.layers):
            for attr, arr in layer.params.items():
                yield f"layers.{i}.{attr}", arr

    def get_parameter(self, name: str) -> np.ndarray:
        idx, attr = _parse_param_name(name)
        return getattr(self.layers[idx], attr)

    def set_parameter(self, name: str, value: np.ndarray) -> None:
        idx, attr = _parse_param_name(name)
        setattr(self.layers[idx], attr, value)

    def trainable_parameter_count(self) -> int:
        """Weights, biases and batchnorm affine parameters (running
        statistics excluded)."""
        total = 0
        for layer in self.layers:
            for attr, arr in layer.params.items():
                if attr not in ("running_mean", "running_var"):
                    total += arr.size
        return total

    def prunable_layers(self):
        """Indices of conv and linear layers (all are prunable)."""
        return [i for i, l in enumerate(self.layers) if l.kind in ("conv", "linear")]

    def copy(self) -> "ModelGraph":
        new_layers = []
        for layer in self.layers:
            c = dataclasses.replace(layer)
            for attr, arr in layer.params.items():
                setattr(c, attr, arr.copy())
            new_layers.append(c)
        m = ModelGraph(self.config, new_layers, self.dtype)
        m.masks = {i: mask.copy() for i, mask in self.masks.items()}
        return m

    def forward(self, x, training=False):
        return forward(self, x, training=training)


def _parse_param_name(name: str):
    _, idx, attr = name.split(".")
    return int(idx), attr


def _kaiming_uniform(rng, shape, fan_in, dtype, gain_scale=1.0):
    bound = gain_scale * np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def _make_conv(rng, cin, cout, k, stride, padding, groups, dtype):
    fan_in = (cin // groups) * k * k
    w = _kaiming_uniform(rng, (cout, cin // groups, k, k), fan_in, dtype)
    bb = 1.0 / np.sqrt(fan_in)
    b = rng.uniform(-bb, bb, size=cout).astype(dtype)
    return Conv2d(cin, cout, k, stride, padding, groups, w, b)


def _make_linear(rng, nin, nout, dtype, head=False):
    w = _kaiming_uniform(rng, (nout, nin), nin, dtype, gain_scale=0.1 if head else 1.0)
    if head:
        # start raw head outputs near mid-range so the [0,1]-clamped loss
        # sees live gradients from the first step
        b = np.full(nout, 0.5, dtype=dtype)
    else:
        bb = 1.0 / np.sqrt(nin)
        b = rng.uniform(-bb, bb, size=nout).astype(dtype)
    return Linear(nin, nout, w, b)


def _make_bn(n, dtype):
    return BatchNorm(
        n,
        np.ones(n, dtype=dtype),
        np.zeros(n, dtype=dtype),
        np.zeros(n, dtype=dtype),
        np.ones(n, dtype=dtype),
    )


def _ds_block(rng, cin, cout, padding, dtype):
    return [
        _make_conv(rng, cin, cin, 3, 1, padding, cin, dtype),
        _make_bn(cin, dtype),
        ReLU(),
        _make_conv(rng, cin, cout, 1, 1, 0, 1, dtype),
        _make_bn(cout, dtype),
        ReLU(),
    ]


def build_uyolo(config: UYoloConfig, seed: int = 0, dtype=np.float32) -> ModelGraph:
    """Instantiate the network for a config, with seeded Kaiming-uniform
    init. Raises if the spatial trace collapses before the head."""
    rng = np.random.default_rng(seed)
    dtype = np.dtype(dtype)
    layers = [
        _make_conv(
            rng, config.channels, FIRST_CONV_FILTERS, config.first_conv_kernel,
            config.first_conv_stride, 0, 1, dtype,
        ),
        _make_bn(FIRST_CONV_FILTERS, dtype),
        ReLU(),
        MaxPool(2),
    ]
    for i, (cin, cout) in enumerate(DS_CHANNELS):
        layers.extend(_ds_block(rng, cin, cout, config.ds_paddings[i], dtype))
        if i == 2 or i == 6:
            layers.append(MaxPool(2))
    layers.append(Flatten())

    model = ModelGraph(config, layers, dtype)
    trace = shape_trace(model)  # validates the backbone
    flat = trace[-1][0]
    layers.append(_make_linear(rng, flat, config.head_width, dtype))
    layers.append(_make_bn(config.head_width, dtype))
    layers.append(ReLU())
    layers.append(_make_linear(rng, config.head_width, config.output_length, dtype, head=True))
    return model


def layer_output_shape(layer, shape):
    """Output shape of one layer given its input shape (no batch dim)."""
    if layer.kind == "conv":
        c, h, w = shape
        if c != layer.in_channels:
            raise ValueError(f"trace: {c} channels into conv expecting {layer.in_channels}")
        ho = ops.conv_output_size(h, layer.kernel, layer.stride, layer.padding)
        wo = ops.conv_output_size(w, layer.kernel, layer.stride, layer.padding)
        return (layer.out_channels, ho, wo)
    if layer.kind == "maxpool":
        c, h, w = shape
        return (c, h // layer.kernel, w // layer.kernel)
    if layer.kind == "flatten":
        return (int(np.prod(shape)),)
    if layer.kind == "linear":
        if shape != (layer.in_features,):
            raise ValueError(f"trace: {shape} into linear expecting ({layer.in_features},)")
        return (layer.out_features,)
    return shape  # relu / batchnorm


def shape_trace(model: ModelGraph, input_shape=None) -> list:
    """Per-layer output shapes starting from the input shape. Raises with
    the offending layer index if any spatial size collapses to < 1."""
    cfg = model.config
    shape = input_shape or (cfg.channels, cfg.input_res, cfg.input_res)
    trace = [shape]
    for i, layer in enumerate(model.layers):
        shape = layer_output_shape(layer, shape)
        if any(s < 1 for s in shape):
            raise ValueError(f"shape trace collapses to {shape} at layer index {i}")
        trace.append(shape)
    return trace


def forward(model: ModelGraph, x: np.ndarray, training: bool = False) -> np.ndarray:
    """Run the network on one image [C,R,R] or a batch [B,C,R,R] of
    pixels in [0,1]; returns the raw head output (no final activation).

    training=True switches batchnorm to batch statistics and updates the
    stored running statistics in place.
    """
    cfg = model.config
    single = x.ndim == 3
    if single:
        x = x[None]
    expect = (cfg.channels, cfg.input_res, cfg.input_res)
    if x.shape[1:] != expect:
        raise ValueError(f"forward: input shape {x.shape[1:]} does not match {expect}")
    x = x.astype(model.dtype, copy=False)
    for layer in model.layers:
        x = _layer_forward(layer, x, training)
    return x[0] if single else x


def _layer_forward(layer, x, training):
    if layer.kind == "conv":
        return ops.conv2d(
            x, layer.weight, layer.bias,
            stride=layer.stride, padding=layer.padding, groups=layer.groups,
        )
    if layer.kind == "batchnorm":
        if training:
            y, _, new_mean, new_var = ops.batchnorm_train(
                x, layer.gamma, layer.beta, layer.running_mean, layer.running_var,
                eps=layer.eps, momentum=layer.momentum,
            )
            layer.running_mean = new_mean.astype(layer.running_mean.dtype)
            layer.running_var = new_var.astype(layer.running_var.dtype)
            return y
        return ops.batchnorm(
            x, layer.gamma, layer.beta, layer.running_mean, layer.running_var, eps=layer.eps
        )
    if layer.kind == "relu":
        return ops.relu(x)
    if layer.kind == "maxpool":
        return ops.maxpool2d(x, layer.kernel)
    if layer.kind == "flatten":
        return x.reshape(x.shape[0], -1)
    if layer.kind == "linear":
        return ops.linear(x, layer.weight, layer.bias)
    raise ValueError(f"unknown layer kind {layer.kind!r}")
