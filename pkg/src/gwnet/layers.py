"""Graph convolution, dilated causal convolution, gated TCN and the spatial-temporal block.

All signals are 4-D tensors ``[batch, channels, nodes, time]``.
"""

from __future__ import annotations

import enum
import math
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigError, ContractError, DimensionError
from .graph import TransitionSet
from .tensor import (
    Tensor,
    add,
    bias_add,
    channel_mix,
    conv_time,
    mul,
    node_mix,
    pad_time,
    sigmoid,
    slice_time,
    tanh,
)


class AdjacencyMode(str, enum.Enum):
    IDENTITY = "identity-only"
    FORWARD = "forward-only"
    ADAPTIVE = "adaptive-only"
    FORWARD_BACKWARD = "forward-backward"
    FORWARD_BACKWARD_ADAPTIVE = "forward-backward-adaptive"

    @property
    def support_names(self) -> tuple[str, ...]:
        return _SUPPORTS[self]

    @property
    def needs_graph(self) -> bool:
        return "forward" in self.support_names

    @property
    def uses_adaptive(self) -> bool:
        return "adaptive" in self.support_names


_SUPPORTS = {
    AdjacencyMode.IDENTITY: ("identity",),
    AdjacencyMode.FORWARD: ("forward",),
    AdjacencyMode.ADAPTIVE: ("adaptive",),
    AdjacencyMode.FORWARD_BACKWARD: ("forward", "backward"),
    AdjacencyMode.FORWARD_BACKWARD_ADAPTIVE: ("forward", "backward", "adaptive"),
}


def _uniform(rng: np.random.Generator, fan_in: int, shape, name: str) -> Tensor:
    bound = 1.0 / math.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True, name=name)


class Conv1x1:
    """Channel projection ``x W + b`` applied at every node and timestep."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, name: str = "linear"):
        self.weight = _uniform(rng, c_in, (c_in, c_out), f"{name}.weight")
        self.bias = _uniform(rng, c_in, (c_out,), f"{name}.bias")

    def __call__(self, x: Tensor) -> Tensor:
        return bias_add(channel_mix(x, self.weight), self.bias)

    def parameters(self) -> Iterator[Tensor]:
        yield self.weight
        yield self.bias


class DilatedConv:
    """Causal convolution over time with kernel ``[C_out, C_in, K]`` and a per-channel bias."""

    def __init__(self, c_in: int, c_out: int, kernel_size: int, dilation: int,
                 rng: np.random.Generator, name: str = "conv"):
        if kernel_size < 1 or dilation < 1:
            raise ConfigError("kernel_size and dilation must be >= 1", key="dilations")
        self.dilation = dilation
        self.kernel_size = kernel_size
        fan_in = c_in * kernel_size
        self.weight = _uniform(rng, fan_in, (c_out, c_in, kernel_size), f"{name}.weight")
        self.bias = _uniform(rng, fan_in, (c_out,), f"{name}.bias")

    def __call__(self, x: Tensor, padded: bool = False) -> Tensor:
        return dilated_causal_conv(self, x, padded)

    def parameters(self) -> Iterator[Tensor]:
        yield self.weight
        yield self.bias


def dilated_causal_conv(conv: DilatedConv, x: Tensor, padded: bool = False) -> Tensor:
    """``y(t) = b + sum_s f(s) x(t - d*s)``.

    In padded mode the input is left-padded with zeros so the output keeps
    length ``L``; otherwise the output has length ``L - d*(K-1)``.
    """
    if padded:
        x = pad_time(x, conv.dilation * (conv.kernel_size - 1))
    return bias_add(conv_time(x, conv.weight, conv.dilation), conv.bias)


class GatedTcn:
    def __init__(self, c_in: int, c_out: int, kernel_size: int, dilation: int,
                 rng: np.random.Generator, name: str = "tcn"):
        self.filter_conv = DilatedConv(c_in, c_out, kernel_size, dilation, rng, f"{name}.filter")
        self.gate_conv = DilatedConv(c_in, c_out, kernel_size, dilation, rng, f"{name}.gate")

    def __call__(self, x: Tensor, padded: bool = False) -> Tensor:
        return gated_tcn_forward(self, x, padded)

    def parameters(self) -> Iterator[Tensor]:
        yield from self.filter_conv.parameters()
        yield from self.gate_conv.parameters()


def gated_tcn_forward(g: GatedTcn, x: Tensor, padded: bool = False) -> Tensor:
    """``tanh(filter(x)) * sigmoid(gate(x))``."""
    return mul(tanh(g.filter_conv(x, padded)), sigmoid(g.gate_conv(x, padded)))


def resolve_supports(mode: AdjacencyMode, transitions: TransitionSet | None,
                     adaptive: Tensor | None) -> list[Tensor | None]:
    """Support matrices in the order the mode lists them; ``None`` stands for the identity."""
    out: list[Tensor | None] = []
    for name in mode.support_names:
        if name == "identity":
            out.append(None)
        elif name == "adaptive":
            if adaptive is None:
                raise ConfigError(f"mode {mode.value} needs an adaptive adjacency matrix",
                                  key="adjacency_mode")
            out.append(adaptive)
        else:
            if transitions is None:
                raise ConfigError(f"mode {mode.value} needs a graph", key="adjacency_mode")
            m = transitions.forward if name == "forward" else transitions.backward
            if m is None:
                raise ConfigError(f"mode {mode.value} needs a backward transition matrix",
                                  key="adjacency_mode")
            out.append(Tensor(m))
    return out


class GcnLayer:
    """Diffusion graph convolution ``Z = sum_s sum_k S^k X W_{k,s}``.

    One ``[D_in, D_out]`` weight per support per power, including ``k = 0``
    where every support contributes its own identity term.
    """

    def __init__(self, c_in: int, c_out: int, k: int, mode: AdjacencyMode | str,
                 rng: np.random.Generator, name: str = "gcn"):
        if k < 0:
            raise ConfigError("diffusion step must be >= 0", key="gcn_k")
        self.mode = AdjacencyMode(mode)
        self.k = k
        self.weights: list[list[Tensor]] = [
            [_uniform(rng, c_in, (c_in, c_out), f"{name}.{s}.w{p}") for p in range(k + 1)]
            for s in self.mode.support_names
        ]

    @property
    def num_weights(self) -> int:
        return sum(len(w) for w in self.weights)

    def __call__(self, x: Tensor, supports: Sequence[Tensor | None]) -> Tensor:
        if len(supports) != len(self.weights):
            raise ContractError(f"expected {len(self.weights)} supports, got {len(supports)}")
        out = None
        for s, ws in zip(supports, self.weights):
            if s is not None and s.shape[0] != x.shape[2]:
                raise DimensionError(f"support of size {s.shape} does not match {x.shape[2]} nodes")
            h = x
            for power, w in enumerate(ws):
                if power > 0 and s is not None:
                    h = node_mix(s, h)
                term = channel_mix(h, w)
                out = term if out is None else add(out, term)
        return out

    def parameters(self) -> Iterator[Tensor]:
        for ws in self.weights:
            yield from ws


def gcn_forward(layer: GcnLayer, x: Tensor, transitions: TransitionSet | None = None,
                adaptive: Tensor | None = None) -> Tensor:
    return layer(x, resolve_supports(layer.mode, transitions, adaptive))


def dropout(x: Tensor, p: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout: kept units are scaled by ``1/(1-p)``."""
    if p <= 0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return mul(x, Tensor(keep))


class StLayer:
    """Gated TCN feeding a graph convolution, with residual and skip outputs."""

    def __init__(self, residual_channels: int, dilation_channels: int, skip_channels: int,
                 kernel_size: int, dilation: int, gcn_k: int, mode: AdjacencyMode | str,
                 rng: np.random.Generator, name: str = "layer", residual_in: int | None = None):
        c_in = residual_channels if residual_in is None else residual_in
        self.gated = GatedTcn(c_in, dilation_channels, kernel_size, dilation, rng, f"{name}.tcn")
        self.gcn = GcnLayer(dilation_channels, residual_channels, gcn_k, mode, rng, f"{name}.gcn")
        self.residual_proj = (Conv1x1(c_in, residual_channels, rng, f"{name}.residual")
                              if c_in != residual_channels else None)
        self.skip_proj = Conv1x1(residual_channels, skip_channels, rng, f"{name}.skip")

    def __call__(self, x: Tensor, supports: Sequence[Tensor | None], dropout_p: float = 0.0,
                 rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
        return st_layer_forward(self, x, supports, dropout_p, rng)

    def parameters(self) -> Iterator[Tensor]:
        yield from self.gated.parameters()
        yield from self.gcn.parameters()
        if self.residual_proj is not None:
            yield from self.residual_proj.parameters()
        yield from self.skip_proj.parameters()


def st_layer_forward(layer: StLayer, x: Tensor, supports: Sequence[Tensor | None],
                     dropout_p: float = 0.0,
                     rng: np.random.Generator | None = None) -> tuple[Tensor, Tensor]:
    """Return ``(output, skip)`` for one block.

    The residual input is truncated to the trailing timesteps of the
    (shorter) gated-TCN output before it is added.
    """
    h = layer.gcn(layer.gated(x), supports)
    if dropout_p > 0 and rng is not None:
        h = dropout(h, dropout_p, rng)
    res = x if layer.residual_proj is None else layer.residual_proj(x)
    res = slice_time(res, res.shape[-1] - h.shape[-1])
    return add(h, res), layer.skip_proj(h)


def receptive_field(kernel_size: int, dilations: Sequence[int]) -> int:
    if kernel_size < 1:
        raise ContractError("kernel_size must be >= 1")
    if not dilations:
        raise ContractError("dilations must be nonempty")
    return 1 + (kernel_size - 1) * sum(dilations)
