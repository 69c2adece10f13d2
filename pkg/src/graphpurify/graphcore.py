"""Graph containers, synthetic SBM data, dataset splits and edge-list I/O.

Adjacency matrices are dense ``uint8`` arrays; everything downstream works on
dense ``N x N`` matrices, which is fine for the N <= 500 graphs this package
targets.
"""
from __future__ import annotations

import csv
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class GraphFormatError(ValueError):
    """Raised when an edge-list or feature file cannot be parsed."""


def rng_stream(seed: int, *tags) -> np.random.Generator:
    """Independent generator keyed by ``(seed, *tags)``.

    Tags are hashed with crc32 so the same key always yields the same stream
    across processes and Python versions.
    """
    words = [int(seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, (int, np.integer)):
            words.append(int(tag) & 0xFFFFFFFF)
        else:
            words.append(zlib.crc32(str(tag).encode("utf-8")))
    return np.random.default_rng(np.random.SeedSequence(words))


def check_adjacency(adjacency: np.ndarray) -> np.ndarray:
    a = np.asarray(adjacency)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"adjacency must be square, got shape {a.shape}")
    if not np.isin(a, (0, 1)).all():
        raise ValueError("adjacency entries must be 0 or 1")
    if np.any(np.diag(a) != 0):
        raise ValueError("adjacency must have a zero diagonal (no self-loops)")
    if not np.array_equal(a, a.T):
        raise ValueError("adjacency must be symmetric")
    return a.astype(np.uint8)


@dataclass(frozen=True, eq=False)
class Graph:
    adjacency: np.ndarray
    features: np.ndarray
    node_labels: np.ndarray | None = None
    graph_label: int | None = None

    def __post_init__(self):
        adj = check_adjacency(self.adjacency)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim == 1:
            feats = feats[:, None]
        if feats.shape[0] != adj.shape[0]:
            raise ValueError(
                f"features have {feats.shape[0]} rows but the graph has {adj.shape[0]} nodes"
            )
        if not np.isfinite(feats).all():
            raise ValueError("features contain non-finite entries")
        labels = self.node_labels
        if labels is not None:
            labels = np.asarray(labels, dtype=np.int64)
            if labels.shape != (adj.shape[0],):
                raise ValueError("node_labels must have one entry per node")
        adj.setflags(write=False)
        feats.setflags(write=False)
        if labels is not None:
            labels.setflags(write=False)
        object.__setattr__(self, "adjacency", adj)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "node_labels", labels)
        if self.graph_label is not None:
            object.__setattr__(self, "graph_label", int(self.graph_label))

    @property
    def num_nodes(self) -> int:
        return self.adjacency.shape[0]

    @property
    def num_edges(self) -> int:
        return int(self.adjacency.sum()) // 2

    def with_adjacency(self, adjacency: np.ndarray) -> "Graph":
        """Same nodes, features and labels with a different edge set."""
        return Graph(adjacency, self.features, self.node_labels, self.graph_label)

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        same_labels = (
            (self.node_labels is None and other.node_labels is None)
            or (
                self.node_labels is not None
                and other.node_labels is not None
                and np.array_equal(self.node_labels, other.node_labels)
            )
        )
        return (
            np.array_equal(self.adjacency, other.adjacency)
            and np.array_equal(self.features, other.features)
            and same_labels
            and self.graph_label == other.graph_label
        )


@dataclass(frozen=True)
class EdgeStateVector:
    """Distribution over the two edge states (0 = absent, 1 = present)."""

    probabilities: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.probabilities, dtype=np.float64)
        if p.shape != (2,) or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError(f"not a probability vector over two states: {p}")
        object.__setattr__(self, "probabilities", p)

    def __getitem__(self, i):
        return self.probabilities[i]


@dataclass(frozen=True)
class DatasetSplit:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray
    ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)

    def __post_init__(self):
        parts = [np.asarray(p, dtype=np.int64) for p in (self.train, self.val, self.test)]
        merged = np.concatenate(parts)
        if len(np.unique(merged)) != len(merged):
            raise ValueError("split index sets overlap")
        for name, p in zip(("train", "val", "test"), parts):
            object.__setattr__(self, name, p)

    @property
    def sizes(self) -> tuple[int, int, int]:
        return len(self.train), len(self.val), len(self.test)


@dataclass(frozen=True)
class SbmConfig:
    """Stochastic block model parameters.

    ``feature_dim = 0`` gives normalized-degree features. A positive
    ``feature_dim`` draws Gaussian node features whose mean depends on the
    block (``feature_signal`` sets the separation), which node classifiers
    need because degree alone cannot tell equally sized blocks apart.
    """

    num_nodes: int
    num_blocks: int = 2
    intra_prob: float = 0.3
    inter_prob: float = 0.02
    seed: int = 0
    feature_dim: int = 0
    feature_signal: float = 1.0

    def __post_init__(self):
        if self.num_nodes < 1 or self.num_blocks < 1:
            raise ValueError("num_nodes and num_blocks must be positive")
        if self.num_nodes < self.num_blocks:
            raise ValueError(
                f"num_nodes ({self.num_nodes}) must be at least num_blocks ({self.num_blocks})"
            )
        if not 0.0 <= self.inter_prob < self.intra_prob <= 1.0:
            raise ValueError("need 0 <= inter_prob < intra_prob <= 1")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.feature_dim < 0:
            raise ValueError("feature_dim must be non-negative")


def degree_features(adjacency: np.ndarray) -> np.ndarray:
    """Node degree divided by the maximum degree, as an ``N x 1`` matrix."""
    deg = np.asarray(adjacency, dtype=np.float64).sum(axis=1)
    top = deg.max() if deg.size else 0.0
    if top == 0:
        return np.zeros((deg.shape[0], 1))
    return (deg / top)[:, None]


def block_assignment(num_nodes: int, num_blocks: int) -> np.ndarray:
    sizes = [len(c) for c in np.array_split(np.arange(num_nodes), num_blocks)]
    return np.repeat(np.arange(num_blocks), sizes)


def generate_sbm(config: SbmConfig) -> Graph:
    n = config.num_nodes
    labels = block_assignment(n, config.num_blocks)
    rng = rng_stream(config.seed, "sbm-edges")
    probs = np.where(labels[:, None] == labels[None, :], config.intra_prob, config.inter_prob)
    iu, ju = np.triu_indices(n, k=1)
    draws = rng.random(len(iu)) < probs[iu, ju]
    adj = np.zeros((n, n), dtype=np.uint8)
    adj[iu[draws], ju[draws]] = 1
    adj = adj | adj.T
    if config.feature_dim == 0:
        feats = degree_features(adj)
    else:
        frng = rng_stream(config.seed, "sbm-features")
        centers = frng.standard_normal((config.num_blocks, config.feature_dim))
        centers *= config.feature_signal / np.linalg.norm(centers, axis=1, keepdims=True)
        feats = centers[labels] + frng.standard_normal((n, config.feature_dim))
    return Graph(adj, feats, labels)


def edge_density(graphs) -> float:
    """Fraction of present entries among all off-diagonal node pairs."""
    if isinstance(graphs, Graph):
        graphs = [graphs]
    present = sum(g.num_edges for g in graphs)
    pairs = sum(g.num_nodes * (g.num_nodes - 1) // 2 for g in graphs)
    if pairs == 0:
        raise ValueError("no node pairs to measure density on")
    return present / pairs


def largest_remainder(n_items: int, ratios) -> list[int]:
    quotas = np.asarray(ratios, dtype=np.float64) * n_items
    sizes = np.floor(quotas).astype(int)
    short = n_items - sizes.sum()
    # stable sort keeps earlier parts first among equal remainders
    order = np.argsort(-(quotas - sizes), kind="stable")
    sizes[order[:short]] += 1
    return sizes.tolist()


def split_dataset(n_items: int, ratios=(0.8, 0.1, 0.1), seed: int = 0) -> DatasetSplit:
    if n_items <= 0:
        raise ValueError("cannot split an empty dataset")
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three non-negative numbers summing to 1, got {ratios}")
    sizes = largest_remainder(n_items, ratios)
    perm = rng_stream(seed, "split").permutation(n_items)
    a, b = sizes[0], sizes[0] + sizes[1]
    return DatasetSplit(np.sort(perm[:a]), np.sort(perm[a:b]), np.sort(perm[b:]), ratios)


def write_edge_list(graph: Graph, path) -> None:
    path = Path(path)
    iu, ju = np.nonzero(np.triu(graph.adjacency, k=1))
    lines = [f"nodes {graph.num_nodes}"]
    lines += [f"{i} {j}" for i, j in zip(iu.tolist(), ju.tolist())]
    if graph.node_labels is not None:
        lines.append("labels")
        lines += [str(int(v)) for v in graph.node_labels]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_edge_list(path, features: np.ndarray | None = None) -> Graph:
    """Parse the edge-list format.

    Without explicit ``features`` the graph gets normalized degree features.
    """
    path = Path(path)
    raw = path.read_text(encoding="utf-8").splitlines()
    rows = [(no, line.strip()) for no, line in enumerate(raw, start=1) if line.strip()]
    if not rows:
        raise GraphFormatError(f"{path}: empty file")
    no, head = rows[0]
    parts = head.split()
    if len(parts) != 2 or parts[0] != "nodes" or not parts[1].isdigit():
        raise GraphFormatError(f"{path}:{no}: expected header 'nodes <N>', got {head!r}")
    n = int(parts[1])
    adj = np.zeros((n, n), dtype=np.uint8)
    labels = None
    idx = 1
    while idx < len(rows):
        no, line = rows[idx]
        if line == "labels":
            break
        parts = line.split()
        try:
            i, j = (int(p) for p in parts)
        except ValueError:
            raise GraphFormatError(f"{path}:{no}: expected 'i j', got {line!r}") from None
        if i == j:
            raise GraphFormatError(f"{path}:{no}: self-loop {i}-{j} is not allowed")
        if not (0 <= i < n and 0 <= j < n):
            raise GraphFormatError(f"{path}:{no}: node index out of range for N={n}")
        adj[i, j] = adj[j, i] = 1
        idx += 1
    if idx < len(rows):
        body = rows[idx + 1:]
        if len(body) != n:
            raise GraphFormatError(f"{path}: expected {n} labels, found {len(body)}")
        try:
            labels = np.array([int(line) for _, line in body], dtype=np.int64)
        except ValueError:
            bad = next(no for no, line in body if not line.lstrip("-").isdigit())
            raise GraphFormatError(f"{path}:{bad}: label is not an integer") from None
    feats = degree_features(adj) if features is None else features
    return Graph(adj, feats, labels)


def write_features(features: np.ndarray, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        for row in np.asarray(features, dtype=np.float64):
            writer.writerow([repr(float(v)) for v in row])


def read_features(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    try:
        return np.array([[float(v) for v in row] for row in rows if row], dtype=np.float64)
    except ValueError as exc:
        raise GraphFormatError(f"{path}: {exc}") from None
