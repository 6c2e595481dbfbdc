"""Parameterized layers on top of the autodiff core."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from . import functional as F
from .tensor import ShapeError, Tensor, concat, mean, tanh, relu

LAYER_KINDS = ("linear", "bilstm", "lstm", "rnn", "conv", "instance_norm_2d", "time_avg_pool")


def glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> Tensor:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return Tensor(rng.uniform(-limit, limit, size=shape), requires_grad=True)


def zeros(*shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


class Module:
    """Container tracking parameters and submodules by attribute name."""

    def __init__(self):
        object.__setattr__(self, "_params", OrderedDict())
        object.__setattr__(self, "_modules", OrderedDict())

    def __setattr__(self, name, value):
        if isinstance(value, Tensor) and value.requires_grad:
            self._params[name] = value
        elif isinstance(value, Module):
            self._modules[name] = value
        object.__setattr__(self, name, value)

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, p in self._params.items():
            yield prefix + name, p
        for name, m in self._modules.items():
            yield from m.named_parameters(prefix + name + ".")

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, p.data.copy()) for n, p in self.named_parameters())

    def load_state_dict(self, state) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        if missing:
            raise KeyError(f"missing parameters: {sorted(missing)}")
        for name, p in own.items():
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != p.shape:
                raise ShapeError(f"parameter {name}: expected {p.shape}, got {arr.shape}")
            p.data = arr.copy()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


class ModuleList(Module):
    def __init__(self, modules=()):
        super().__init__()
        for i, m in enumerate(modules):
            setattr(self, str(i), m)

    def __iter__(self):
        return iter(self._modules.values())

    def __len__(self):
        return len(self._modules)

    def __getitem__(self, i: int) -> Module:
        return list(self._modules.values())[i]


class Linear(Module):
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator):
        super().__init__()
        self.weight = glorot(rng, (in_dim, out_dim), in_dim, out_dim)
        self.bias = zeros(out_dim)

    def forward(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class MLP(Module):
    """Stack of linear layers with an activation between (not after) them."""

    def __init__(self, dims, rng, activation: str = "tanh"):
        super().__init__()
        self.layers = ModuleList(Linear(a, b, rng) for a, b in zip(dims[:-1], dims[1:]))
        self.activation = activation

    def forward(self, x):
        n = len(self.layers)
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < n - 1:
                x = tanh(x) if self.activation == "tanh" else relu(x)
        return x


class LSTM(Module):
    """Single-direction, single-layer LSTM over (B, T, D)."""

    def __init__(self, in_dim: int, hidden: int, rng, reverse: bool = False):
        super().__init__()
        self.hidden = hidden
        self.reverse = reverse
        self.w_ih = glorot(rng, (in_dim, 4 * hidden), in_dim, hidden)
        self.w_hh = glorot(rng, (hidden, 4 * hidden), hidden, hidden)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget gate
        self.bias = Tensor(b, requires_grad=True)

    def forward(self, x):
        return F.lstm_sequence(x, self.w_ih, self.w_hh, self.bias, reverse=self.reverse)


class RNN(Module):
    """Vanilla tanh recurrent layer."""

    def __init__(self, in_dim: int, hidden: int, rng, reverse: bool = False):
        super().__init__()
        self.hidden = hidden
        self.reverse = reverse
        self.w_ih = glorot(rng, (in_dim, hidden), in_dim, hidden)
        self.w_hh = glorot(rng, (hidden, hidden), hidden, hidden)
        self.bias = zeros(hidden)

    def forward(self, x):
        return F.rnn_sequence(x, self.w_ih, self.w_hh, self.bias, reverse=self.reverse)


class StackedLSTM(Module):
    """Multi-layer LSTM; bidirectional layers concatenate forward and backward states."""

    def __init__(self, in_dim: int, hidden: int, num_layers: int, rng, bidirectional: bool = True):
        super().__init__()
        self.out_dim = hidden * (2 if bidirectional else 1)
        fwd, bwd = [], []
        d = in_dim
        for _ in range(num_layers):
            fwd.append(LSTM(d, hidden, rng))
            if bidirectional:
                bwd.append(LSTM(d, hidden, rng, reverse=True))
            d = self.out_dim
        self.fwd = ModuleList(fwd)
        self.bwd = ModuleList(bwd)

    def forward(self, x):
        bwd = list(self.bwd)
        for i, f in enumerate(self.fwd):
            x = concat([f(x), bwd[i](x)], axis=-1) if bwd else f(x)
        return x


class Conv1d(Module):
    def __init__(self, in_ch: int, out_ch: int, kernel: int, rng):
        super().__init__()
        self.weight = glorot(rng, (kernel, in_ch, out_ch), kernel * in_ch, kernel * out_ch)
        self.bias = zeros(out_ch)

    def forward(self, x):
        return F.conv1d(x, self.weight, self.bias)


class InstanceNorm(Module):
    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = zeros(channels)

    def forward(self, x):
        return F.instance_norm(x, self.gamma, self.beta, self.eps)


class TimeAvgPool(Module):
    """Average over the time axis, keeping it as length one: (B, T, H) -> (B, 1, H)."""

    def forward(self, x):
        return mean(x, axis=-2, keepdims=True)


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    input_dim: int = 0
    output_dim: int = 0
    hidden_size: int = 0
    layer_count: int = 1
    kernel: int = 5

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        needs = {
            "linear": ("input_dim", "output_dim"),
            "bilstm": ("input_dim", "hidden_size"),
            "lstm": ("input_dim", "hidden_size"),
            "rnn": ("input_dim", "hidden_size"),
            "conv": ("input_dim", "output_dim"),
            "instance_norm_2d": ("input_dim",),
            "time_avg_pool": (),
        }[self.kind]
        for field in needs:
            if getattr(self, field) <= 0:
                raise ValueError(f"{self.kind} layer needs positive {field}")
        if self.layer_count < 1:
            raise ValueError("layer_count must be >= 1")


def build_layer(spec: LayerSpec, rng_seed: int) -> Module:
    rng = np.random.default_rng(rng_seed)
    if spec.kind == "linear":
        return Linear(spec.input_dim, spec.output_dim, rng)
    if spec.kind == "bilstm":
        return StackedLSTM(spec.input_dim, spec.hidden_size, spec.layer_count, rng, bidirectional=True)
    if spec.kind == "lstm":
        return StackedLSTM(spec.input_dim, spec.hidden_size, spec.layer_count, rng, bidirectional=False)
    if spec.kind == "rnn":
        return RNN(spec.input_dim, spec.hidden_size, rng)
    if spec.kind == "conv":
        return Conv1d(spec.input_dim, spec.output_dim, spec.kernel, rng)
    if spec.kind == "instance_norm_2d":
        return InstanceNorm(spec.input_dim)
    return TimeAvgPool()
