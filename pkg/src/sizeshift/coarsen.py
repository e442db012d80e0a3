"""Graph coarsening: partitioners, contraction, and precomputed caches.

A coarsening with ratio r keeps max(1, floor(r * n)) super-nodes. Three
partitioners are provided behind one interface: heavy-edge matching,
spectral clustering on the normalized Laplacian, and k-means on
[features || degree]. Contraction joins super-nodes s_i, s_j (i != j)
whenever any original edge crosses the two subsets, and aggregates the
member feature rows with mean, max, or sum.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .graphs import AttributedGraph, build_csr

METHODS = ("heavy-edge", "sc", "kmeans")
AGGREGATIONS = ("mean", "max", "sum")


@dataclass(frozen=True)
class Partition:
    """Disjoint cover of a node set: assignment[v] is the cluster of v."""

    assignment: np.ndarray  # int64, length n
    num_clusters: int

    def __post_init__(self):
        a = np.ascontiguousarray(np.asarray(self.assignment, dtype=np.int64))
        a.setflags(write=False)
        object.__setattr__(self, "assignment", a)

    def validate(self, num_nodes: int):
        if len(self.assignment) != num_nodes:
            raise ValueError("partition length does not match node count")
        if self.num_clusters < 1:
            raise ValueError("partition needs at least one cluster")
        used = np.bincount(self.assignment, minlength=self.num_clusters)
        if self.assignment.min(initial=0) < 0 or self.assignment.max(initial=0) >= self.num_clusters:
            raise ValueError("cluster index out of range")
        if np.any(used == 0):
            raise ValueError("partition has empty clusters")


@dataclass(frozen=True)
class CoarsenedGraph:
    """A contracted graph plus the membership that produced it."""

    graph: AttributedGraph
    source_id: int
    ratio: float
    membership: Partition


@dataclass(frozen=True)
class CoarsenedDatasets:
    """Per-ratio coarsened copies aligned index-for-index with a dataset."""

    dataset_name: str
    ratios: tuple
    method: str
    aggregation: str
    seed: int
    per_ratio: dict  # ratio -> tuple of CoarsenedGraph

    def __post_init__(self):
        lengths = {len(v) for v in self.per_ratio.values()}
        if len(lengths) > 1:
            raise ValueError("per-ratio lists must all have the dataset length")


def _canonical_labels(assignment: np.ndarray) -> np.ndarray:
    """Relabel clusters in order of first appearance for determinism."""
    mapping = {}
    out = np.empty_like(assignment)
    for i, c in enumerate(assignment):
        if c not in mapping:
            mapping[c] = len(mapping)
        out[i] = mapping[c]
    return out


def contract_partition(g: AttributedGraph, p: Partition, agg: str = "mean") -> CoarsenedGraph:
    """Contract each partition subset to a super-node.

    Super-node features aggregate member rows; intra-cluster edges emit
    no self-loops and crossing-edge multiplicity is discarded.
    """
    if agg not in AGGREGATIONS:
        raise ValueError(f"unknown aggregation {agg!r}")
    p.validate(g.num_nodes)
    a = p.assignment
    k = p.num_clusters
    feats = np.zeros((k, g.feature_dim))
    if agg == "mean":
        np.add.at(feats, a, g.features)
        feats /= np.bincount(a, minlength=k)[:, None]
    elif agg == "sum":
        np.add.at(feats, a, g.features)
    else:
        feats.fill(-np.inf)
        np.maximum.at(feats, a, g.features)
    edges = {(int(min(a[u], a[v])), int(max(a[u], a[v]))) for u, v in g.edges if a[u] != a[v]}
    coarse = AttributedGraph(
        num_nodes=k,
        edges=tuple(sorted(edges)),
        features=feats,
        label=g.label,
        graph_id=g.graph_id,
    )
    return CoarsenedGraph(
        graph=coarse, source_id=g.graph_id, ratio=k / g.num_nodes, membership=p
    )


# -- k-means with deterministic empty-cluster repair --------------------


def _pairwise_sq_dist(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(axis=1)[:, None] + (c * c).sum(axis=1)[None, :] - 2.0 * (x @ c.T)
    np.maximum(d, 0.0, out=d)
    return d


def _kmeans(points: np.ndarray, k: int, rng: np.random.Generator, iters: int = 50) -> np.ndarray:
    """Lloyd iterations with k-means++ seeding.

    Empty clusters are repaired by moving the point farthest from its
    assigned centroid into the empty cluster (deterministic ties via
    first index).
    """
    n = len(points)
    if k > n:
        raise ValueError(f"k={k} exceeds number of points {n}")
    centers = np.empty((k, points.shape[1]))
    centers[0] = points[rng.integers(n)]
    d2 = ((points - centers[0]) ** 2).sum(axis=1)
    for c in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[c] = points[int(np.argmin(d2))]
        else:
            r = rng.random() * total
            centers[c] = points[int(np.searchsorted(np.cumsum(d2), r).clip(0, n - 1))]
        d2 = np.minimum(d2, ((points - centers[c]) ** 2).sum(axis=1))
    labels = None
    for it in range(iters):
        dist = _pairwise_sq_dist(points, centers)
        new_labels = dist.argmin(axis=1).astype(np.int64)
        counts = np.bincount(new_labels, minlength=k)
        for c in range(k):
            if counts[c] == 0:
                own = dist[np.arange(n), new_labels]
                candidates = np.where(counts[new_labels] > 1)[0]
                far = int(candidates[int(np.argmax(own[candidates]))])
                counts[new_labels[far]] -= 1
                new_labels[far] = c
                counts[c] = 1
        if labels is not None and np.array_equal(new_labels, labels):
            break
        labels = new_labels
        for c in range(k):
            centers[c] = points[labels == c].mean(axis=0)
    return labels


def kmeans_partition(g: AttributedGraph, k: int, seed: int = 0) -> Partition:
    """k-means on per-node vectors [features || degree]."""
    if not (1 <= k <= g.num_nodes):
        raise ValueError(f"k={k} out of range for n={g.num_nodes}")
    adj = build_csr(g)
    points = np.hstack([g.features, adj.degrees[:, None].astype(np.float64)])
    labels = _kmeans(points, k, np.random.default_rng(seed))
    return Partition(assignment=_canonical_labels(labels), num_clusters=k)


def spectral_cluster_partition(g: AttributedGraph, k: int, seed: int = 0) -> Partition:
    """k-means on the first k eigenvectors of the normalized Laplacian.

    L = I - D^{-1/2} A D^{-1/2}; rows of the eigenvector matrix for the
    k smallest eigenvalues are clustered. Isolated nodes contribute an
    identity row.
    """
    if not (1 <= k <= g.num_nodes):
        raise ValueError(f"k={k} out of range for n={g.num_nodes}")
    n = g.num_nodes
    adj_matrix = np.zeros((n, n))
    for u, v in g.edges:
        adj_matrix[u, v] = adj_matrix[v, u] = 1.0
    deg = adj_matrix.sum(axis=1)
    inv_sqrt = np.where(deg > 0, 1.0 / np.sqrt(np.maximum(deg, 1e-300)), 0.0)
    lap = np.eye(n) - inv_sqrt[:, None] * adj_matrix * inv_sqrt[None, :]
    _, vecs = np.linalg.eigh(lap)
    labels = _kmeans(np.ascontiguousarray(vecs[:, :k]), k, np.random.default_rng(seed))
    return Partition(assignment=_canonical_labels(labels), num_clusters=k)


def heavy_edge_partition(g: AttributedGraph, k: int, seed: int = 0) -> Partition:
    """Repeated maximal-matching contraction down to k clusters.

    Each round matches cluster pairs greedily by decreasing
    1/sqrt(deg(u) * deg(v)) on the current contracted graph (equal
    weights ordered by a seeded shuffle) and merges them until the
    cluster count reaches k. If no further matching is possible the
    smallest clusters are merged directly.
    """
    if not (1 <= k <= g.num_nodes):
        raise ValueError(f"k={k} out of range for n={g.num_nodes}")
    rng = np.random.default_rng(seed)
    assignment = np.arange(g.num_nodes, dtype=np.int64)
    count = g.num_nodes
    while count > k:
        coarse_edges = {
            (min(assignment[u], assignment[v]), max(assignment[u], assignment[v]))
            for u, v in g.edges
            if assignment[u] != assignment[v]
        }
        if not coarse_edges:
            break
        deg = np.zeros(count)
        for a, b in coarse_edges:
            deg[a] += 1
            deg[b] += 1
        pairs = sorted(coarse_edges)
        rng.shuffle(pairs)
        weights = [1.0 / np.sqrt(deg[a] * deg[b]) for a, b in pairs]
        order = np.argsort(-np.asarray(weights), kind="stable")
        matched = np.zeros(count, dtype=bool)
        merges = []
        for idx in order:
            a, b = pairs[idx]
            if matched[a] or matched[b]:
                continue
            matched[a] = matched[b] = True
            merges.append((a, b))
            if count - len(merges) == k:
                break
        if not merges:
            break
        remap = np.arange(count, dtype=np.int64)
        for a, b in merges:
            remap[b] = a
        assignment = _canonical_labels(remap[assignment])
        count -= len(merges)
    while count > k:
        sizes = np.bincount(assignment, minlength=count)
        smallest = np.argsort(sizes, kind="stable")[:2]
        remap = np.arange(count, dtype=np.int64)
        remap[smallest[1]] = smallest[0]
        assignment = _canonical_labels(remap[assignment])
        count -= 1
    return Partition(assignment=assignment, num_clusters=count)


_PARTITIONERS = {
    "heavy-edge": heavy_edge_partition,
    "sc": spectral_cluster_partition,
    "kmeans": kmeans_partition,
}


def coarsen(
    g: AttributedGraph, ratio: float, method: str = "heavy-edge", agg: str = "mean", seed: int = 0
) -> CoarsenedGraph:
    """Coarsen one graph to max(1, floor(ratio * n)) super-nodes."""
    if not (0.0 < ratio < 1.0):
        raise ValueError(f"ratio must lie in (0, 1), got {ratio}")
    if method not in _PARTITIONERS:
        raise ValueError(f"unknown coarsening method {method!r}")
    # the small slack guards floor() against float artifacts like 0.7*10=6.999...
    k = max(1, int(np.floor(ratio * g.num_nodes + 1e-9)))
    p = _PARTITIONERS[method](g, k, seed)
    contracted = contract_partition(g, p, agg)
    return CoarsenedGraph(
        graph=contracted.graph, source_id=g.graph_id, ratio=ratio, membership=p
    )


def _graph_seed(global_seed: int, graph_index: int) -> int:
    # schedule-independent per-graph stream
    return int(np.random.SeedSequence([global_seed, graph_index]).generate_state(1)[0])


def precompute_coarsened_datasets(
    ds, ratios, method: str = "heavy-edge", agg: str = "mean", seed: int = 0
) -> CoarsenedDatasets:
    """Coarsen every dataset graph at every ratio, deterministically.

    Per-graph seeds are derived from (seed, graph index) so results do
    not depend on evaluation order.
    """
    ratios = tuple(float(r) for r in ratios)
    for r in ratios:
        if not (0.0 < r < 1.0):
            raise ValueError(f"ratio must lie in (0, 1), got {r}")
    per_ratio = {}
    for r in ratios:
        per_ratio[r] = tuple(
            coarsen(g, r, method, agg, _graph_seed(seed, i)) for i, g in enumerate(ds.graphs)
        )
    return CoarsenedDatasets(
        dataset_name=ds.name,
        ratios=ratios,
        method=method,
        aggregation=agg,
        seed=seed,
        per_ratio=per_ratio,
    )


# -- binary cache -------------------------------------------------------

_CACHE_MAGIC = b"SSCO"
_CACHE_VERSION = 1


def _pack_str(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


def _read_str(buf: memoryview, pos: int):
    (n,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    return bytes(buf[pos : pos + n]).decode("utf-8"), pos + n


def cache_key(dataset_name: str, method: str, agg: str, ratios, seed: int) -> str:
    payload = "|".join(
        [dataset_name, method, agg, ",".join(repr(float(r)) for r in ratios), str(seed)]
    )
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()


def serialize_coarsened(cd: CoarsenedDatasets) -> bytes:
    """Deterministic binary encoding of a CoarsenedDatasets."""
    out = [
        _CACHE_MAGIC,
        struct.pack("<I", _CACHE_VERSION),
        _pack_str(cache_key(cd.dataset_name, cd.method, cd.aggregation, cd.ratios, cd.seed)),
        _pack_str(cd.dataset_name),
        _pack_str(cd.method),
        _pack_str(cd.aggregation),
        struct.pack("<q", cd.seed),
        struct.pack("<I", len(cd.ratios)),
    ]
    for r in cd.ratios:
        out.append(struct.pack("<d", r))
    num_graphs = len(next(iter(cd.per_ratio.values()))) if cd.per_ratio else 0
    out.append(struct.pack("<I", num_graphs))
    for r in cd.ratios:
        for cg in cd.per_ratio[r]:
            g = cg.graph
            out.append(struct.pack("<qdqq", cg.source_id, cg.ratio, g.label, g.num_nodes))
            member = cg.membership.assignment.astype(np.int64)
            out.append(struct.pack("<q", len(member)))
            out.append(member.tobytes())
            edges = np.asarray(g.edges, dtype=np.int64).reshape(-1, 2)
            out.append(struct.pack("<q", len(edges)))
            out.append(edges.tobytes())
            out.append(struct.pack("<qq", *g.features.shape))
            out.append(np.ascontiguousarray(g.features).tobytes())
    return b"".join(out)


def deserialize_coarsened(data: bytes) -> CoarsenedDatasets:
    buf = memoryview(data)
    if bytes(buf[:4]) != _CACHE_MAGIC:
        raise ValueError("not a coarsening cache file")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != _CACHE_VERSION:
        raise ValueError(f"unsupported cache version {version}")
    pos = 8
    _, pos = _read_str(buf, pos)  # key, recomputed on demand
    name, pos = _read_str(buf, pos)
    method, pos = _read_str(buf, pos)
    agg, pos = _read_str(buf, pos)
    (seed,) = struct.unpack_from("<q", buf, pos)
    pos += 8
    (num_ratios,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    ratios = []
    for _ in range(num_ratios):
        (r,) = struct.unpack_from("<d", buf, pos)
        pos += 8
        ratios.append(r)
    (num_graphs,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    per_ratio = {}
    for r in ratios:
        items = []
        for _ in range(num_graphs):
            source_id, ratio, label, n = struct.unpack_from("<qdqq", buf, pos)
            pos += 32
            (mlen,) = struct.unpack_from("<q", buf, pos)
            pos += 8
            member = np.frombuffer(buf, dtype=np.int64, count=mlen, offset=pos).copy()
            pos += 8 * mlen
            (elen,) = struct.unpack_from("<q", buf, pos)
            pos += 8
            edges = np.frombuffer(buf, dtype=np.int64, count=2 * elen, offset=pos).reshape(-1, 2)
            pos += 16 * elen
            rows, cols = struct.unpack_from("<qq", buf, pos)
            pos += 16
            feats = (
                np.frombuffer(buf, dtype=np.float64, count=rows * cols, offset=pos)
                .reshape(rows, cols)
                .copy()
            )
            pos += 8 * rows * cols
            graph = AttributedGraph(
                num_nodes=int(n),
                edges=tuple(map(tuple, edges.tolist())),
                features=feats,
                label=int(label),
                graph_id=int(source_id),
            )
            items.append(
                CoarsenedGraph(
                    graph=graph,
                    source_id=int(source_id),
                    ratio=ratio,
                    membership=Partition(assignment=member, num_clusters=int(n)),
                )
            )
        per_ratio[r] = tuple(items)
    return CoarsenedDatasets(
        dataset_name=name,
        ratios=tuple(ratios),
        method=method,
        aggregation=agg,
        seed=int(seed),
        per_ratio=per_ratio,
    )


def write_cache(path, cd: CoarsenedDatasets) -> None:
    data = serialize_coarsened(cd)
    with open(path, "wb") as fh:
        fh.write(data)


def read_cache(path) -> CoarsenedDatasets:
    with open(path, "rb") as fh:
        return deserialize_coarsened(fh.read())
