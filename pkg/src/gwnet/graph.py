"""Fixed graphs, diffusion transition matrices and the learnable adaptive adjacency."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, ParseError, ValidationError
from .tensor import Tensor, matmul, relu, softmax_rows, transpose


@dataclass(frozen=True)
class Graph:
    """A weighted graph on ``n`` nodes.

    The diagonal of ``adjacency`` is always zero: the identity term of the
    diffusion series already carries each node's own signal.
    """

    n: int
    adjacency: np.ndarray
    directed: bool

    @classmethod
    def from_adjacency(cls, adjacency, directed: bool | None = None) -> "Graph":
        a = np.array(adjacency, dtype=np.float64)
        if a.ndim != 2 or a.shape[0] != a.shape[1]:
            raise DimensionError(f"adjacency must be square, got shape {a.shape}")
        if not np.all(np.isfinite(a)):
            raise ValidationError("adjacency contains non-finite entries")
        if np.any(a < 0):
            raise ValidationError("adjacency contains negative entries")
        np.fill_diagonal(a, 0.0)
        if directed is None:
            directed = not np.array_equal(a, a.T)
        a.setflags(write=False)
        return cls(a.shape[0], a, bool(directed))

    @property
    def num_edges(self) -> int:
        return int(np.count_nonzero(self.adjacency))

    def edges(self) -> set[tuple[int, int]]:
        rows, cols = np.nonzero(self.adjacency)
        return set(zip(rows.tolist(), cols.tolist()))


@dataclass(frozen=True)
class TransitionSet:
    forward: np.ndarray
    backward: np.ndarray | None
    max_step: int


@dataclass
class NodeEmbeddings:
    """Source and target node embeddings behind the adaptive adjacency."""

    source: Tensor
    target: Tensor

    @property
    def dim(self) -> int:
        return self.source.shape[1]

    @classmethod
    def init(cls, n: int, dim: int = 10,
             rng: np.random.Generator | None = None) -> "NodeEmbeddings":
        rng = np.random.default_rng() if rng is None else rng
        source = Tensor(rng.uniform(0.0, 1.0, size=(n, dim)), requires_grad=True, name="emb_source")
        target = Tensor(rng.uniform(0.0, 1.0, size=(n, dim)), requires_grad=True, name="emb_target")
        return cls(source, target)


def row_normalize(a) -> np.ndarray:
    """Divide each row by its sum; all-zero rows stay zero."""
    a = np.asarray(a, dtype=np.float64)
    if np.any(a < 0):
        raise ValidationError("row_normalize: matrix has negative entries")
    sums = a.sum(axis=1, keepdims=True)
    safe = np.where(sums > 0, sums, 1.0)
    return np.where(sums > 0, a / safe, 0.0)


def build_transitions(g: Graph, k: int) -> TransitionSet:
    if k < 0:
        raise ValidationError(f"diffusion step must be >= 0, got {k}")
    fwd = row_normalize(g.adjacency)
    bwd = row_normalize(g.adjacency.T) if g.directed else None
    return TransitionSet(fwd, bwd, k)


def adaptive_adjacency(e: NodeEmbeddings) -> Tensor:
    """Row-stochastic ``softmax(relu(E1 @ E2^T))``, differentiable in both embeddings."""
    if e.source.shape != e.target.shape:
        raise DimensionError(f"embedding shapes differ: {e.source.shape} vs {e.target.shape}")
    return softmax_rows(relu(matmul(e.source, transpose(e.target))))


def gaussian_threshold_adjacency(dist, sigma: float | None = None, kappa: float = 0.1) -> Graph:
    """Thresholded Gaussian kernel ``exp(-d^2 / sigma^2)`` on a distance matrix.

    ``sigma`` defaults to the standard deviation of the off-diagonal distances.
    Weights below ``kappa`` and the diagonal are set to zero.
    """
    d = np.asarray(dist, dtype=np.float64)
    if d.ndim != 2 or d.shape[0] != d.shape[1]:
        raise DimensionError(f"distance matrix must be square, got shape {d.shape}")
    if np.any(d < 0):
        raise ValidationError("distances must be nonnegative")
    if sigma is None:
        off = d[~np.eye(d.shape[0], dtype=bool)]
        sigma = float(off.std()) if off.size else 1.0
    if not sigma > 0:
        raise ValidationError(f"sigma must be positive, got {sigma}")
    w = np.exp(-np.square(d / sigma))
    w[w < kappa] = 0.0
    return Graph.from_adjacency(w)


def read_matrix_csv(path: str | os.PathLike) -> np.ndarray:
    """Read an n×n matrix of comma-separated decimals."""
    try:
        m = np.loadtxt(path, delimiter=",", dtype=np.float64, ndmin=2)
    except ValueError as exc:
        raise ParseError(f"{path}: {exc}", path=str(path)) from exc
    if m.shape[0] != m.shape[1]:
        raise ParseError(f"{path}: expected a square matrix, got {m.shape[0]}x{m.shape[1]}",
                         path=str(path))
    return m


def load_graph(path: str | os.PathLike, kind: str = "adjacency",
               sigma: float | None = None, kappa: float = 0.1,
               directed: bool | None = None) -> Graph:
    """Load a graph from an adjacency CSV or, with ``kind="distance"``, a distance CSV."""
    m = read_matrix_csv(path)
    if kind == "distance":
        g = gaussian_threshold_adjacency(m, sigma, kappa)
        return g if directed is None else Graph.from_adjacency(g.adjacency, directed)
    if kind != "adjacency":
        raise ValidationError(f"unknown graph kind {kind!r}")
    return Graph.from_adjacency(m, directed)


def export_heatmap(m, path: str | os.PathLike, top_nodes: int | None = None) -> None:
    """Write a matrix as CSV, one row per line, 17 significant digits.

    ``top_nodes`` restricts the export to the leading ``k×k`` block.
    """
    a = m.data if isinstance(m, Tensor) else np.asarray(m, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValidationError("export_heatmap: matrix has non-finite entries")
    if top_nodes is not None:
        a = a[:top_nodes, :top_nodes]
    text = "".join(",".join(f"{v:.17g}" for v in row) + "\n" for row in a)
    try:
        with open(path, "w", encoding="ascii") as fh:
            fh.write(text)
    except OSError as exc:
        raise OSError(exc.errno, f"cannot write matrix to {path}: {exc.strerror}",
                      str(path)) from exc
