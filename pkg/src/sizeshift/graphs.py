"""Core graph containers: attributed graphs, datasets, and CSR adjacency.

Graphs are undirected and simple: edges are stored once as (u, v) with
u < v, self-loops are never stored, and node features are a dense
float64 matrix with one row per node. Instances are immutable after
construction and safe to share across threads.
"""

from __future__ import annotations

import weakref
from dataclasses import dataclass, field

import numpy as np


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class AttributedGraph:
    """An undirected simple graph with per-node features and a class label.

    Instances compare by identity (features are arrays), which also lets
    the CSR cache key on the object itself.
    """

    num_nodes: int
    edges: tuple  # of (u, v) pairs with u < v
    features: np.ndarray  # shape (num_nodes, d), float64
    label: int = 0
    graph_id: int = 0

    def __post_init__(self):
        canon = tuple(sorted((min(u, v), max(u, v)) for u, v in self.edges))
        object.__setattr__(self, "edges", canon)
        feat = _frozen(np.asarray(self.features, dtype=np.float64))
        if feat.ndim != 2:
            raise ValueError("features must be a 2-D matrix")
        object.__setattr__(self, "features", feat)

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class CsrAdjacency:
    """Compressed sparse row view of an undirected graph.

    column_indices within each row are strictly increasing, and the
    structure is symmetric: j appears in row i iff i appears in row j.
    """

    row_offsets: np.ndarray  # shape (n+1,), int64
    column_indices: np.ndarray  # int64
    degrees: np.ndarray = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "row_offsets", _frozen(np.asarray(self.row_offsets, dtype=np.int64)))
        object.__setattr__(self, "column_indices", _frozen(np.asarray(self.column_indices, dtype=np.int64)))
        object.__setattr__(self, "degrees", _frozen(np.diff(self.row_offsets)))

    @property
    def num_nodes(self) -> int:
        return len(self.row_offsets) - 1

    def neighbors(self, v: int) -> np.ndarray:
        return self.column_indices[self.row_offsets[v] : self.row_offsets[v + 1]]


@dataclass(frozen=True)
class GraphDataset:
    """An ordered collection of graphs sharing a feature space and label set."""

    name: str
    graphs: tuple
    num_classes: int
    feature_dim: int

    def __post_init__(self):
        object.__setattr__(self, "graphs", tuple(self.graphs))

    def __len__(self) -> int:
        return len(self.graphs)

    def sizes(self) -> np.ndarray:
        return np.array([g.num_nodes for g in self.graphs], dtype=np.int64)

    def labels(self) -> np.ndarray:
        return np.array([g.label for g in self.graphs], dtype=np.int64)


def validate_graph(g: AttributedGraph) -> list:
    """Check structural invariants, returning a list of violation messages.

    An empty list means the graph is well formed. Checks: endpoint range,
    self-loops, duplicate undirected edges, and feature row count.
    """
    violations = []
    seen = set()
    for u, v in g.edges:
        if not (0 <= u < g.num_nodes and 0 <= v < g.num_nodes):
            violations.append(f"endpoint out of range: ({u}, {v}) with n={g.num_nodes}")
            continue
        if u == v:
            violations.append(f"self-loop at node {u}")
            continue
        key = (min(u, v), max(u, v))
        if key in seen:
            violations.append(f"duplicate undirected edge ({key[0]}, {key[1]})")
        seen.add(key)
    if g.features.shape[0] != g.num_nodes:
        violations.append(
            f"feature rows ({g.features.shape[0]}) do not match num_nodes ({g.num_nodes})"
        )
    return violations


def build_csr(g: AttributedGraph) -> CsrAdjacency:
    """Build the CSR adjacency of a valid graph.

    Raises ValueError when the graph fails validate_graph.
    """
    violations = validate_graph(g)
    if violations:
        raise ValueError("invalid graph: " + "; ".join(violations))
    n = g.num_nodes
    if g.edges:
        e = np.asarray(g.edges, dtype=np.int64)
        src = np.concatenate([e[:, 0], e[:, 1]])
        dst = np.concatenate([e[:, 1], e[:, 0]])
    else:
        src = np.zeros(0, dtype=np.int64)
        dst = np.zeros(0, dtype=np.int64)
    order = np.lexsort((dst, src))
    src, dst = src[order], dst[order]
    offsets = np.zeros(n + 1, dtype=np.int64)
    np.add.at(offsets, src + 1, 1)
    offsets = np.cumsum(offsets)
    return CsrAdjacency(row_offsets=offsets, column_indices=dst)


_csr_cache = weakref.WeakKeyDictionary()


def build_csr_cached(g: AttributedGraph) -> CsrAdjacency:
    """build_csr memoized per graph instance (graphs are immutable)."""
    csr = _csr_cache.get(g)
    if csr is None:
        csr = build_csr(g)
        _csr_cache[g] = csr
    return csr
