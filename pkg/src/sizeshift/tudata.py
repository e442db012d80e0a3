"""TUDataset text-format parsing and the size-shift train/val/test split.

Expected files inside a dataset directory (newline-terminated ASCII):
  {name}_A.txt               "i, j" edge lines, 1-based global node ids,
                             both directions present for undirected edges
  {name}_graph_indicator.txt line k holds the 1-based graph id of node k
  {name}_graph_labels.txt    line g holds the integer label of graph g
  {name}_node_labels.txt     optional, line k holds an integer node label
  {name}_node_attributes.txt optional, line k holds comma-separated reals

Node labels are one-hot encoded; when both labels and attributes exist
the features are the concatenation [one-hot labels | attributes]. Graph
labels are remapped to a contiguous [0, num_classes) range.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graphs import AttributedGraph, GraphDataset


class ParseError(Exception):
    """A malformed dataset file; message names the file and line."""


@dataclass(frozen=True)
class SizeSplit:
    """Train on the smallest half, test on the largest tenth.

    Train and validation graphs have size <= the 50th-percentile size,
    test graphs have size >= the 90th-percentile size, and validation is
    a seeded stratified 10% carve-out of the small pool. Graphs strictly
    between the thresholds are discarded.
    """

    train_ids: tuple
    val_ids: tuple
    test_ids: tuple
    seed: int
    small_threshold: float
    large_threshold: float
    percentile_low: int = 50
    percentile_high: int = 90
    val_fraction: float = 0.1

    def __post_init__(self):
        sets = [set(self.train_ids), set(self.val_ids), set(self.test_ids)]
        total = sum(len(s) for s in sets)
        if len(sets[0] | sets[1] | sets[2]) != total:
            raise ValueError("split id lists overlap")


def _read_lines(path: Path) -> list:
    if not path.exists():
        raise ParseError(f"missing mandatory file: {path}")
    text = path.read_text(encoding="ascii")
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return lines


def _parse_int(token: str, path: Path, lineno: int) -> int:
    try:
        return int(token.strip())
    except ValueError:
        raise ParseError(f"{path}:{lineno}: non-integer token {token.strip()!r}") from None


def parse_tudataset(directory, name: str) -> GraphDataset:
    """Parse one dataset directory into a GraphDataset.

    Edges are grouped per graph via the indicator file and converted to
    0-based per-graph node indices; directed input (an edge line without
    its reverse) and self-loops are rejected.
    """
    directory = Path(directory)
    ind_path = directory / f"{name}_graph_indicator.txt"
    indicator = [_parse_int(tok, ind_path, i + 1) for i, tok in enumerate(_read_lines(ind_path))]
    num_nodes_total = len(indicator)

    lab_path = directory / f"{name}_graph_labels.txt"
    raw_labels = [_parse_int(tok, lab_path, i + 1) for i, tok in enumerate(_read_lines(lab_path))]
    num_graphs = len(raw_labels)

    node_graph = np.empty(num_nodes_total, dtype=np.int64)
    for k, gid in enumerate(indicator):
        if not (1 <= gid <= num_graphs):
            raise ParseError(f"{ind_path}:{k + 1}: graph id {gid} out of range [1, {num_graphs}]")
        node_graph[k] = gid - 1
    counts = np.bincount(node_graph, minlength=num_graphs)
    if np.any(counts == 0):
        empty = int(np.argmin(counts)) + 1
        raise ParseError(f"{ind_path}: graph {empty} has no nodes")
    # local index of each node within its graph, in file order
    local_index = np.empty(num_nodes_total, dtype=np.int64)
    seen = np.zeros(num_graphs, dtype=np.int64)
    for k in range(num_nodes_total):
        g = node_graph[k]
        local_index[k] = seen[g]
        seen[g] += 1

    edge_path = directory / f"{name}_A.txt"
    directed = [set() for _ in range(num_graphs)]
    for lineno, line in enumerate(_read_lines(edge_path), start=1):
        parts = line.split(",")
        if len(parts) != 2:
            raise ParseError(f"{edge_path}:{lineno}: expected 'i, j', got {line!r}")
        i = _parse_int(parts[0], edge_path, lineno)
        j = _parse_int(parts[1], edge_path, lineno)
        if not (1 <= i <= num_nodes_total and 1 <= j <= num_nodes_total):
            raise ParseError(f"{edge_path}:{lineno}: node id out of range: {line.strip()!r}")
        gi, gj = node_graph[i - 1], node_graph[j - 1]
        if gi != gj:
            raise ParseError(f"{edge_path}:{lineno}: edge crosses graphs {gi + 1} and {gj + 1}")
        if i == j:
            raise ParseError(f"{edge_path}:{lineno}: self-loop on node {i}")
        directed[gi].add((int(local_index[i - 1]), int(local_index[j - 1])))
    per_graph_edges = []
    for g, dset in enumerate(directed):
        for u, v in dset:
            if (v, u) not in dset:
                raise ParseError(
                    f"{edge_path}: graph {g + 1} has directed edge ({u}, {v}) without its reverse"
                )
        per_graph_edges.append(sorted({(min(u, v), max(u, v)) for u, v in dset}))

    features = _node_features(directory, name, num_nodes_total)

    label_values = sorted(set(raw_labels))
    label_map = {v: i for i, v in enumerate(label_values)}

    graphs = []
    node_rows = [np.where(node_graph == g)[0] for g in range(num_graphs)]
    for g in range(num_graphs):
        rows = node_rows[g]
        order = np.argsort(local_index[rows], kind="stable")
        graphs.append(
            AttributedGraph(
                num_nodes=int(counts[g]),
                edges=tuple(per_graph_edges[g]),
                features=features[rows[order]],
                label=label_map[raw_labels[g]],
                graph_id=g,
            )
        )
    return GraphDataset(
        name=name,
        graphs=tuple(graphs),
        num_classes=len(label_values),
        feature_dim=features.shape[1],
    )


def _node_features(directory: Path, name: str, num_nodes: int) -> np.ndarray:
    lab_path = directory / f"{name}_node_labels.txt"
    attr_path = directory / f"{name}_node_attributes.txt"
    blocks = []
    if lab_path.exists():
        labels = [_parse_int(tok, lab_path, i + 1) for i, tok in enumerate(_read_lines(lab_path))]
        if len(labels) != num_nodes:
            raise ParseError(f"{lab_path}: {len(labels)} lines but {num_nodes} nodes")
        values = sorted(set(labels))
        index = {v: i for i, v in enumerate(values)}
        onehot = np.zeros((num_nodes, len(values)))
        onehot[np.arange(num_nodes), [index[v] for v in labels]] = 1.0
        blocks.append(onehot)
    if attr_path.exists():
        rows = []
        width = None
        for lineno, line in enumerate(_read_lines(attr_path), start=1):
            try:
                row = [float(tok) for tok in line.split(",")]
            except ValueError:
                raise ParseError(f"{attr_path}:{lineno}: non-numeric attribute {line!r}") from None
            if width is None:
                width = len(row)
            elif len(row) != width:
                raise ParseError(f"{attr_path}:{lineno}: expected {width} values, got {len(row)}")
            rows.append(row)
        if len(rows) != num_nodes:
            raise ParseError(f"{attr_path}: {len(rows)} lines but {num_nodes} nodes")
        blocks.append(np.asarray(rows))
    if not blocks:
        return np.ones((num_nodes, 1))
    return np.hstack(blocks)


def size_split(ds: GraphDataset, seed: int = 0) -> SizeSplit:
    """Split a dataset by graph size for size-generalization evaluation.

    Thresholds are the 50th and 90th percentiles of the graph sizes
    (linear interpolation); the test set never depends on the seed.
    """
    if len(ds) == 0:
        raise ValueError("cannot split an empty dataset")
    sizes = ds.sizes()
    small_thr = float(np.percentile(sizes, 50))
    large_thr = float(np.percentile(sizes, 90))
    if small_thr == large_thr:
        raise ValueError(
            f"degenerate dataset: 50th and 90th size percentiles coincide at {small_thr}"
        )
    pool = np.where(sizes <= small_thr)[0]
    test_ids = np.where(sizes >= large_thr)[0]
    num_val = int(np.floor(0.1 * len(pool) + 0.5))  # round half up, never banker's
    val_ids = _stratified_sample(pool, ds.labels()[pool], num_val, seed)
    val_set = set(val_ids)
    train_ids = [int(i) for i in pool if int(i) not in val_set]
    return SizeSplit(
        train_ids=tuple(train_ids),
        val_ids=tuple(int(i) for i in val_ids),
        test_ids=tuple(int(i) for i in test_ids),
        seed=seed,
        small_threshold=small_thr,
        large_threshold=large_thr,
    )


def _stratified_sample(pool: np.ndarray, labels: np.ndarray, total: int, seed: int) -> list:
    """Pick `total` ids from pool, proportional per class (largest remainder)."""
    rng = np.random.default_rng(seed)
    classes = sorted(set(int(c) for c in labels))
    per_class = {c: pool[labels == c] for c in classes}
    quotas = {c: total * len(per_class[c]) / len(pool) for c in classes}
    counts = {c: int(np.floor(quotas[c])) for c in classes}
    remainder = total - sum(counts.values())
    for c in sorted(classes, key=lambda c: (quotas[c] - counts[c], -len(per_class[c])), reverse=True):
        if remainder <= 0:
            break
        if counts[c] < len(per_class[c]):
            counts[c] += 1
            remainder -= 1
    picked = []
    for c in classes:
        ids = np.sort(per_class[c])
        take = min(counts[c], len(ids))
        picked.extend(int(i) for i in rng.permutation(ids)[:take])
    return sorted(picked)


def class_weights(ds: GraphDataset, ids) -> np.ndarray:
    """Inverse-frequency class weights over the given graph ids.

    weight_c = N / (num_classes * count_c); classes absent from ids get
    weight 0 and a warning.
    """
    ids = list(ids)
    if not ids:
        raise ValueError("class_weights needs a nonempty id list")
    labels = np.array([ds.graphs[i].label for i in ids])
    counts = np.bincount(labels, minlength=ds.num_classes)
    weights = np.zeros(ds.num_classes)
    for c in range(ds.num_classes):
        if counts[c] == 0:
            warnings.warn(f"class {c} absent from the given ids; weight set to 0")
        else:
            weights[c] = len(ids) / (ds.num_classes * counts[c])
    return weights
