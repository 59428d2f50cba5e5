"""Signal loading, chronological windowing and the synthetic diffusion generator."""

from __future__ import annotations

import math
import os
import struct
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np

from .errors import ParseError, ValidationError
from .graph import Graph, export_heatmap, row_normalize

BINARY_MAGIC = b"GWNETSIG"
BINARY_VERSION = 1
MISSING = 0.0


@dataclass
class SignalStore:
    """Readings ``values[t, n, d]`` plus a validity mask (``False`` = missing)."""

    values: np.ndarray
    mask: np.ndarray
    node_ids: list[str]
    timestamps: list[str] | None = None

    @property
    def num_steps(self) -> int:
        return self.values.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def num_features(self) -> int:
        return self.values.shape[2]

    @classmethod
    def from_values(cls, values, node_ids: Sequence[str] | None = None,
                    timestamps: Sequence[str] | None = None) -> "SignalStore":
        v = np.asarray(values, dtype=np.float64)
        if v.ndim == 2:
            v = v[:, :, None]
        if v.ndim != 3:
            raise ValidationError(f"signal values must be [T, N] or [T, N, D], got {v.shape}")
        ids = [str(i) for i in range(v.shape[1])] if node_ids is None else list(node_ids)
        return cls(v, v != MISSING, ids, None if timestamps is None else list(timestamps))


_TIME_HEADERS = {"", "time", "timestamp", "date", "datetime"}


def _load_csv(path: str) -> SignalStore:
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().rstrip("\r\n").split(",")
    if header == [""]:
        raise ParseError(f"{path}: empty file", path=path, line=1)
    has_time = header[0].strip().lower() in _TIME_HEADERS and len(header) > 1
    cols = range(1, len(header)) if has_time else range(len(header))
    _check_row_widths(path, len(header))
    try:
        values = np.loadtxt(path, delimiter=",", skiprows=1, usecols=cols,
                            dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise _locate_bad_cell(path, cols, exc) from exc
    stamps = None
    if has_time:
        stamps = np.loadtxt(path, delimiter=",", skiprows=1, usecols=0, dtype=str,
                            ndmin=1).tolist()
    node_ids = [h.strip() for h in header[1:]] if has_time else [h.strip() for h in header]
    return SignalStore.from_values(values.reshape(-1, len(node_ids)), node_ids, stamps)


def _check_row_widths(path: str, width: int) -> None:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if lineno == 1 or not line.strip():
                continue
            n = line.count(",") + 1
            if n != width:
                raise ParseError(f"{path} (line {lineno}): expected {width} fields, found {n}",
                                 path=path, line=lineno)


def _locate_bad_cell(path: str, cols, exc: ValueError) -> ParseError:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if lineno == 1 or not line.strip():
                continue
            cells = line.rstrip("\r\n").split(",")
            for c in cols:
                try:
                    float(cells[c])
                except ValueError:
                    return ParseError(f"{path} (line {lineno}): non-numeric cell {cells[c]!r}",
                                      path=path, line=lineno)
    return ParseError(f"{path}: {exc}", path=path)


def _load_binary(path: str) -> SignalStore:
    with open(path, "rb") as fh:
        buf = fh.read()
    head = len(BINARY_MAGIC) + 8 * 4
    if len(buf) < head or not buf.startswith(BINARY_MAGIC):
        raise ParseError(f"{path}: not a raw-binary signal file", path=path)
    version, t, n, d = struct.unpack_from("<4q", buf, len(BINARY_MAGIC))
    if version != BINARY_VERSION:
        raise ParseError(f"{path}: unsupported version {version}", path=path)
    count = t * n * d
    if len(buf) != head + 8 * count:
        raise ParseError(f"{path}: expected {count} values, file holds {(len(buf) - head) // 8}",
                         path=path)
    values = np.frombuffer(buf, dtype="<f8", count=count, offset=head).reshape(t, n, d)
    return SignalStore.from_values(values.astype(np.float64))


def load_signals(path: str | os.PathLike, fmt: str | None = None) -> SignalStore:
    """Load ``csv-wide`` or ``raw-binary`` signals; ``fmt=None`` sniffs the magic bytes.

    Readings of exactly ``0.0`` are flagged missing.
    """
    path = os.fspath(path)
    if fmt is None:
        with open(path, "rb") as fh:
            fmt = "raw-binary" if fh.read(len(BINARY_MAGIC)) == BINARY_MAGIC else "csv-wide"
    if fmt == "csv-wide":
        return _load_csv(path)
    if fmt == "raw-binary":
        return _load_binary(path)
    raise ValidationError(f"unknown signal format {fmt!r}")


def save_signals_binary(store: SignalStore, path: str | os.PathLike) -> None:
    t, n, d = store.values.shape
    with open(path, "wb") as fh:
        fh.write(BINARY_MAGIC)
        fh.write(struct.pack("<4q", BINARY_VERSION, t, n, d))
        fh.write(np.ascontiguousarray(store.values, dtype="<f8").tobytes())


def save_signals_csv(store: SignalStore, path: str | os.PathLike) -> None:
    if store.num_features != 1:
        raise ValidationError("csv-wide holds one feature per node")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(",".join(store.node_ids) + "\n")
        for row in store.values[:, :, 0]:
            fh.write(",".join(f"{v:.17g}" for v in row) + "\n")


# --- normalisation statistics ------------------------------------------------

@dataclass(frozen=True)
class NormStats:
    mean: float
    std: float

    @classmethod
    def fit(cls, values: np.ndarray, mask: np.ndarray | None = None,
            floor: float = 1e-8) -> "NormStats":
        """Population mean/std over valid entries, std floored at ``floor``."""
        v = np.asarray(values, dtype=np.float64)
        if mask is not None:
            v = v[np.asarray(mask, dtype=bool)]
        if v.size == 0:
            return cls(0.0, 1.0)
        return cls(float(v.mean()), max(float(v.std()), floor))


def normalize(x, stats: NormStats):
    return (np.asarray(x, dtype=np.float64) - stats.mean) / stats.std


def denormalize(y, stats: NormStats):
    return np.asarray(y, dtype=np.float64) * stats.std + stats.mean


# --- windowing ---------------------------------------------------------------

@dataclass
class Split:
    """Windows of one split; ``starts[i]`` is the first input index of sample ``i``."""

    name: str
    starts: np.ndarray
    lo: int
    hi: int
    series: np.ndarray = field(repr=False)
    mask: np.ndarray = field(repr=False)
    s: int = 12
    t: int = 12

    def __len__(self) -> int:
        return len(self.starts)

    @property
    def empty(self) -> bool:
        return len(self.starts) == 0

    def batch(self, idx) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Return ``x [B, D, N, S]``, ``y [B, T, N, D]`` and ``mask [B, T, N, D]``."""
        starts = self.starts[np.asarray(idx)]
        ix = starts[:, None] + np.arange(self.s)
        iy = starts[:, None] + self.s + np.arange(self.t)
        x = self.series[ix].transpose(0, 3, 2, 1)
        return np.ascontiguousarray(x), self.series[iy], self.mask[iy]

    def sample(self, i: int):
        x, y, m = self.batch([i])
        return x[0], y[0], m[0]

    def span(self, i: int) -> tuple[int, int]:
        """Inclusive range of raw time indices touched by sample ``i``."""
        start = int(self.starts[i])
        return start, start + self.s + self.t - 1


@dataclass
class WindowedDataset:
    train: Split
    val: Split
    test: Split
    norm: NormStats
    s: int
    t: int
    boundaries: tuple[int, int]

    def split(self, name: str) -> Split:
        return {"train": self.train, "val": self.val, "test": self.test}[name]


def split_boundaries(total: int, ratios: Sequence[float]) -> tuple[int, int]:
    fr = [Fraction(str(r)) for r in ratios]
    return math.floor(fr[0] * total), math.floor((fr[0] + fr[1]) * total)


def make_windows(store: SignalStore, s: int, t: int,
                 ratios: Sequence[float] = (0.7, 0.1, 0.2),
                 norm: NormStats | None = None) -> WindowedDataset:
    """Chronological split, then stride-1 windows inside each split.

    Windows never straddle a boundary. Normalisation statistics come from the
    training span only and are applied to the whole series. A training span too
    short for one window is an error; a short validation or test span just
    yields an empty split (with a warning). Passing ``norm`` reuses existing
    statistics, e.g. those stored with a trained model.
    """
    if s < 1 or t < 1:
        raise ValidationError("window lengths must be >= 1")
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValidationError(
            f"ratios must be three nonnegative numbers summing to 1, got {ratios}")
    total = store.num_steps
    b1, b2 = split_boundaries(total, ratios)
    if norm is None:
        norm = NormStats.fit(store.values[:b1], store.mask[:b1])
    series = normalize(store.values, norm)
    need = s + t
    splits = []
    for name, lo, hi, ratio in (("train", 0, b1, ratios[0]), ("val", b1, b2, ratios[1]),
                                ("test", b2, total, ratios[2])):
        count = max(0, hi - lo - need + 1)
        if ratio > 0 and count == 0:
            msg = f"{name} split spans {hi - lo} steps, too short for one window of {need}"
            if name == "train":
                raise ValidationError(msg)
            warnings.warn(msg + "; it will be empty", stacklevel=2)
        starts = np.arange(lo, lo + count, dtype=np.int64)
        splits.append(Split(name, starts, lo, hi, series, store.mask, s, t))
    return WindowedDataset(*splits, norm=norm, s=s, t=t, boundaries=(b1, b2))


# --- synthetic diffusion data ------------------------------------------------

@dataclass
class SyntheticSpec:
    n: int = 10
    edge_prob: float = 0.2
    noise_std: float = 0.01
    steps: int = 2000
    seed: int = 0
    true_graph: Graph | None = None


def random_directed_graph(n: int, edge_prob: float, rng: np.random.Generator) -> Graph:
    """Erdos-Renyi directed graph, patched so every node has at least one out-edge.

    Without the patch a node with no out-edges makes the dynamics substochastic
    and its series decays into pure noise.
    """
    a = (rng.random((n, n)) < edge_prob).astype(np.float64)
    np.fill_diagonal(a, 0.0)
    for i in np.flatnonzero(a.sum(axis=1) == 0):
        j = rng.integers(n - 1)
        a[i, j + (j >= i)] = 1.0
    return Graph.from_adjacency(a, directed=True)


def simulate_diffusion(transition: np.ndarray, x0: np.ndarray, steps: int, noise_std: float,
                       rng: np.random.Generator) -> np.ndarray:
    """Run ``x(t+1) = 0.9 P x(t) + 0.1 x(t) + noise`` and return ``[steps, N]``."""
    p = np.asarray(transition, dtype=np.float64)
    out = np.empty((steps, p.shape[0]))
    x = np.asarray(x0, dtype=np.float64).copy()
    for i in range(steps):
        out[i] = x
        # same as 0.9 P x + 0.1 x, written so fixed points of P are exact
        x = x + 0.9 * (p @ x - x)
        if noise_std > 0:
            x = x + rng.normal(0.0, noise_std, size=x.shape)
    return out


def generate_synthetic(spec: SyntheticSpec) -> tuple[SignalStore, Graph]:
    if not 0.0 < spec.edge_prob < 1.0:
        raise ValidationError(f"edge_prob must lie in (0, 1), got {spec.edge_prob}")
    if spec.noise_std < 0:
        raise ValidationError("noise_std must be >= 0")
    rng = np.random.default_rng(spec.seed)
    graph = spec.true_graph or random_directed_graph(spec.n, spec.edge_prob, rng)
    x0 = rng.normal(0.0, 1.0, size=graph.n)
    series = simulate_diffusion(row_normalize(graph.adjacency), x0, spec.steps, spec.noise_std, rng)
    return SignalStore.from_values(series), graph


def export_synthetic(store: SignalStore, graph: Graph, series_path, graph_path) -> None:
    save_signals_csv(store, series_path)
    export_heatmap(graph.adjacency, graph_path)


def edge_recovery_score(learned, truth: Graph, rng: np.random.Generator | None = None) -> float:
    """Fraction of true edges among the top-|E| off-diagonal entries of ``learned``.

    Ties are broken by position, or at random when ``rng`` is given.
    """
    m = np.asarray(getattr(learned, "data", learned), dtype=np.float64)
    if m.shape != truth.adjacency.shape:
        raise ValidationError(f"learned matrix {m.shape} vs graph {truth.adjacency.shape}")
    n = m.shape[0]
    true_edges = truth.edges()
    if not true_edges:
        return 1.0
    rows, cols = np.nonzero(~np.eye(n, dtype=bool))
    vals = m[rows, cols]
    tiebreak = rng.random(vals.size) if rng is not None else np.arange(vals.size)
    order = np.lexsort((tiebreak, -vals))[:len(true_edges)]
    hits = sum((int(rows[i]), int(cols[i])) in true_edges for i in order)
    return hits / len(true_edges)
