"""Full Graph WaveNet assembly, configuration files and checkpoints."""

from __future__ import annotations

import dataclasses
import os
import struct
import warnings
from dataclasses import dataclass, fields
from typing import Iterator

import numpy as np

from .errors import ConfigError, CorruptCheckpointError
from .graph import Graph, NodeEmbeddings, TransitionSet, adaptive_adjacency, build_transitions
from .layers import AdjacencyMode, Conv1x1, StLayer, receptive_field, resolve_supports
from .tensor import Tensor, add, pad_time, permute, relu, reshape, slice_time

CHECKPOINT_MAGIC = b"GWNETCKP"
CHECKPOINT_VERSION = 1


@dataclass
class ModelConfig:
    num_nodes: int
    num_layers: int = 8
    dilations: tuple[int, ...] = (1, 2, 1, 2, 1, 2, 1, 2)
    kernel_size: int = 2
    residual_channels: int = 32
    dilation_channels: int = 32
    skip_channels: int = 256
    end_channels: int = 512
    gcn_k: int = 2
    adjacency_mode: str = AdjacencyMode.FORWARD_BACKWARD_ADAPTIVE.value
    embed_dim: int = 10
    input_dim: int = 1
    output_dim: int = 1
    horizon: int = 12
    input_window: int = 12
    dropout_p: float = 0.3
    seed: int = 0

    def __post_init__(self):
        self.dilations = tuple(int(d) for d in self.dilations)
        try:
            self.adjacency_mode = AdjacencyMode(self.adjacency_mode).value
        except ValueError:
            raise ConfigError(f"unknown adjacency_mode {self.adjacency_mode!r}",
                              key="adjacency_mode") from None
        if len(self.dilations) != self.num_layers:
            raise ConfigError(f"{len(self.dilations)} dilations given for {self.num_layers} layers",
                              key="dilations")
        if any(d < 1 for d in self.dilations):
            raise ConfigError("dilations must be >= 1", key="dilations")
        for key in ("num_nodes", "num_layers", "kernel_size", "residual_channels",
                    "dilation_channels", "skip_channels", "end_channels", "embed_dim",
                    "input_dim", "output_dim", "horizon", "input_window"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1", key=key)
        if self.gcn_k < 0:
            raise ConfigError("gcn_k must be >= 0", key="gcn_k")
        if not 0.0 <= self.dropout_p < 1.0:
            raise ConfigError("dropout_p must lie in [0, 1)", key="dropout_p")

    @property
    def mode(self) -> AdjacencyMode:
        return AdjacencyMode(self.adjacency_mode)

    @property
    def receptive_field(self) -> int:
        return receptive_field(self.kernel_size, self.dilations)

    def to_text(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in dataclasses.asdict(self).items())

    @classmethod
    def from_dict(cls, values: dict[str, str]) -> "ModelConfig":
        """Build from string values, as read from a ``key = value`` file."""
        kwargs = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in values.items():
            if key not in types:
                raise ConfigError(f"unknown model config key {key!r}", key=key)
            kwargs[key] = _parse_value(key, types[key], raw)
        if "num_nodes" not in kwargs:
            raise ConfigError("num_nodes is required", key="num_nodes")
        if "dilations" in kwargs and "num_layers" not in kwargs:
            kwargs["num_layers"] = len(kwargs["dilations"])
        return cls(**kwargs)

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        return cls.from_dict(parse_kv(text))


MODEL_KEYS = frozenset(f.name for f in fields(ModelConfig))


def _format_value(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_value(key: str, typ, raw: str):
    raw = raw.strip()
    try:
        if typ in ("int", int):
            return int(raw)
        if typ in ("float", float):
            return float(raw)
        if "tuple" in str(typ):
            return tuple(int(x) for x in raw.split(",") if x.strip())
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}", key=key) from None


def parse_kv(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    out: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}",
                              key=line.split()[0])
        key, value = line.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def read_kv_file(path: str | os.PathLike) -> dict[str, str]:
    with open(path, encoding="utf-8") as fh:
        return parse_kv(fh.read())


class GraphWaveNet:
    """Input projection, stacked spatial-temporal layers and a two-layer output head.

    ``forward`` maps ``[B, D, N, S]`` inputs to ``[B, T, N, D_out]`` forecasts in
    one pass.
    """

    def __init__(self, cfg: ModelConfig, transitions: TransitionSet | None = None):
        mode = cfg.mode
        if mode.needs_graph and transitions is None:
            raise ConfigError(f"adjacency_mode {mode.value} requires a graph", key="adjacency_mode")
        self.config = cfg
        self.transitions = transitions if mode.needs_graph else None
        self.norm_mean: float | None = None
        self.norm_std: float | None = None

        rng = np.random.default_rng(cfg.seed)
        self.input_proj = Conv1x1(cfg.input_dim, cfg.residual_channels, rng, "input")
        self.layers = [
            StLayer(cfg.residual_channels, cfg.dilation_channels, cfg.skip_channels,
                    cfg.kernel_size, d, cfg.gcn_k, mode, rng, f"layer{i}")
            for i, d in enumerate(cfg.dilations)
        ]
        self.end_conv1 = Conv1x1(cfg.skip_channels, cfg.end_channels, rng, "end1")
        self.end_conv2 = Conv1x1(cfg.end_channels, cfg.horizon * cfg.output_dim, rng, "end2")
        self.embeddings = (NodeEmbeddings.init(cfg.num_nodes, cfg.embed_dim, rng)
                           if mode.uses_adaptive else None)
        self._dropout_rng = np.random.default_rng([cfg.seed, 1])

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        for p in self.input_proj.parameters():
            yield p.name, p
        for layer in self.layers:
            for p in layer.parameters():
                yield p.name, p
        for conv in (self.end_conv1, self.end_conv2):
            for p in conv.parameters():
                yield p.name, p
        if self.embeddings is not None:
            yield "emb_source", self.embeddings.source
            yield "emb_target", self.embeddings.target

    def parameters(self) -> list[Tensor]:
        return [p for _, p in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(p.size for p in self.parameters())

    def adaptive_matrix(self) -> Tensor | None:
        return None if self.embeddings is None else adaptive_adjacency(self.embeddings)

    def __call__(self, x: Tensor, train_mode: bool = False) -> Tensor:
        return self.forward(x, train_mode)

    def forward(self, x: Tensor, train_mode: bool = False) -> Tensor:
        cfg = self.config
        if x.ndim != 4 or x.shape[1] != cfg.input_dim or x.shape[2] != cfg.num_nodes:
            raise ConfigError(
                f"input shape {x.shape} does not match [B, {cfg.input_dim}, {cfg.num_nodes}, S]",
                key="num_nodes")
        rf = cfg.receptive_field
        length = x.shape[-1]
        if length < rf:
            x = pad_time(x, rf - length)
        elif length > rf:
            warnings.warn(f"input length {length} exceeds receptive field {rf}; "
                          f"only the last {rf} steps are used", stacklevel=2)
            x = slice_time(x, length - rf)

        _, skips = self.layer_outputs(x, train_mode)
        skip_sum = None
        for skip in skips:
            skip = slice_time(skip, skip.shape[-1] - 1)
            skip_sum = skip if skip_sum is None else add(skip_sum, skip)

        out = self.end_conv2(relu(self.end_conv1(relu(skip_sum))))
        b = out.shape[0]
        out = reshape(out, (b, cfg.horizon, cfg.output_dim, cfg.num_nodes))
        return permute(out, (0, 1, 3, 2))

    def layer_outputs(self, x: Tensor,
                      train_mode: bool = False) -> tuple[list[Tensor], list[Tensor]]:
        """Per-layer residual outputs and skips on ``x`` as given (no padding or trimming).

        Layer ``i`` output index ``j`` lines up with input time
        ``j + (x_len - out_len)``, which makes causality easy to probe.
        """
        supports = resolve_supports(self.config.mode, self.transitions, self.adaptive_matrix())
        p = self.config.dropout_p if train_mode else 0.0
        h = self.input_proj(x)
        outputs, skips = [], []
        for layer in self.layers:
            h, skip = layer(h, supports, p, self._dropout_rng)
            outputs.append(h)
            skips.append(skip)
        return outputs, skips

    def save(self, path: str | os.PathLike) -> None:
        save(self, path)


def build(cfg: ModelConfig, graph: Graph | None = None) -> GraphWaveNet:
    """Construct a model; graph-based modes need ``graph``."""
    mode = cfg.mode
    transitions = None
    if mode.needs_graph:
        if graph is None:
            raise ConfigError(f"adjacency_mode {mode.value} requires a graph", key="adjacency_mode")
        if graph.n != cfg.num_nodes:
            raise ConfigError(f"graph has {graph.n} nodes, config says {cfg.num_nodes}",
                              key="num_nodes")
        transitions = build_transitions(graph, cfg.gcn_k)
        if transitions.backward is None:
            # undirected: both diffusion directions coincide
            transitions = TransitionSet(transitions.forward, transitions.forward, cfg.gcn_k)
    return GraphWaveNet(cfg, transitions)


# --- checkpoints -------------------------------------------------------------
#
# little-endian: magic[8] | u32 version | u64 len | config text (utf-8)
#                | u64 n_floats | f8 parameters in registry order
#                | u64 n_supports | n_supports * (N*N) f8 transition matrices

def _checkpoint_header(m: GraphWaveNet) -> str:
    text = m.config.to_text()
    if m.norm_mean is not None:
        text += f"norm_mean = {m.norm_mean!r}\nnorm_std = {m.norm_std!r}\n"
    return text


def to_bytes(m: GraphWaveNet) -> bytes:
    header = _checkpoint_header(m).encode("utf-8")
    params = np.concatenate([p.data.reshape(-1) for p in m.parameters()]).astype("<f8")
    supports = []
    if m.transitions is not None:
        supports = [m.transitions.forward, m.transitions.backward]
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<I", CHECKPOINT_VERSION),
        struct.pack("<Q", len(header)), header,
        struct.pack("<Q", params.size), params.tobytes(),
        struct.pack("<Q", len(supports)),
    ]
    parts += [np.ascontiguousarray(s, dtype="<f8").tobytes() for s in supports]
    return b"".join(parts)


def save(m: GraphWaveNet, path: str | os.PathLike) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(m))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, fieldname: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CorruptCheckpointError(f"checkpoint truncated while reading {fieldname}",
                                         field=fieldname)
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, fieldname: str) -> int:
        return struct.unpack("<I", self.take(4, fieldname))[0]

    def u64(self, fieldname: str) -> int:
        return struct.unpack("<Q", self.take(8, fieldname))[0]


def from_bytes(buf: bytes) -> GraphWaveNet:
    r = _Reader(buf)
    if r.take(len(CHECKPOINT_MAGIC), "magic") != CHECKPOINT_MAGIC:
        raise CorruptCheckpointError("not a checkpoint (bad magic)", field="magic")
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CorruptCheckpointError(f"unsupported checkpoint version {version}", field="version")
    try:
        header = parse_kv(r.take(r.u64("config"), "config").decode("utf-8"))
        norm_mean = header.pop("norm_mean", None)
        norm_std = header.pop("norm_std", None)
        cfg = ModelConfig.from_dict(header)
    except (ConfigError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"bad config block: {exc}",
                                     field=getattr(exc, "key", None) or "config") from exc

    n_floats = r.u64("parameters")
    flat = np.frombuffer(r.take(8 * n_floats, "parameters"), dtype="<f8")
    n_supports = r.u64("supports")
    n = cfg.num_nodes
    mats = [np.frombuffer(r.take(8 * n * n, "supports"), dtype="<f8").reshape(n, n).copy()
            for _ in range(n_supports)]
    if r.pos != len(buf):
        raise CorruptCheckpointError("trailing bytes after checkpoint", field="supports")

    transitions = None
    if cfg.mode.needs_graph:
        if n_supports != 2:
            raise CorruptCheckpointError(f"mode {cfg.adjacency_mode} needs 2 supports, "
                                         f"found {n_supports}", field="supports")
        transitions = TransitionSet(mats[0], mats[1], cfg.gcn_k)
    m = GraphWaveNet(cfg, transitions)
    params = m.parameters()
    expected = sum(p.size for p in params)
    if expected != n_floats:
        raise CorruptCheckpointError(f"config implies {expected} parameters, file has {n_floats}",
                                     field="parameters")
    offset = 0
    for p in params:
        p.data = flat[offset:offset + p.size].reshape(p.shape).astype(np.float64)
        offset += p.size
    if norm_mean is not None:
        m.norm_mean, m.norm_std = float(norm_mean), float(norm_std)
    return m


def load(path: str | os.PathLike) -> GraphWaveNet:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
