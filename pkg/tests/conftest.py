"""Shared fixtures: random graph factories and an on-disk dataset writer."""

import os
from pathlib import Path

import numpy as np
import pytest

from sizeshift.graphs import AttributedGraph, GraphDataset


def make_random_graph(rng, n, edge_prob=0.3, d=3, label=0, gid=0, connected=True):
    """An undirected simple random graph with Gaussian features."""
    edges = set()
    for i in range(n):
        for j in range(i + 1, n):
            if rng.random() < edge_prob:
                edges.add((i, j))
    if connected:
        edges |= {(i, i + 1) for i in range(n - 1)}
    return AttributedGraph(
        num_nodes=n,
        edges=tuple(sorted(edges)),
        features=rng.normal(size=(n, d)),
        label=label,
        graph_id=gid,
    )


def make_size_shift_dataset(seed=0, num_small=40, num_large=8, d=3, name="SYNTH"):
    """Many small graphs plus a few much larger ones, two classes.

    Class 1 graphs get a feature offset so the labels are learnable.
    """
    rng = np.random.default_rng(seed)
    graphs = []
    sizes = list(rng.integers(5, 15, num_small)) + list(rng.integers(30, 45, num_large))
    for i, n in enumerate(sizes):
        label = i % 2
        g = make_random_graph(rng, int(n), 0.3, d, label, i)
        feats = g.features + 0.8 * label
        graphs.append(
            AttributedGraph(g.num_nodes, g.edges, feats, label, i)
        )
    return GraphDataset(name=name, graphs=tuple(graphs), num_classes=2, feature_dim=d)


def write_tudataset(directory: Path, name: str, graphs, node_labels=None, node_attrs=None):
    """Write graphs in the on-disk text format (1-based ids, both edge
    directions)."""
    directory.mkdir(parents=True, exist_ok=True)
    a_lines, ind_lines, lab_lines = [], [], []
    nl_lines, na_lines = [], []
    offset = 0
    for gi, g in enumerate(graphs):
        for v in range(g.num_nodes):
            ind_lines.append(str(gi + 1))
        for u, v in g.edges:
            a_lines.append(f"{offset + u + 1}, {offset + v + 1}")
            a_lines.append(f"{offset + v + 1}, {offset + u + 1}")
        lab_lines.append(str(g.label))
        if node_labels is not None:
            nl_lines.extend(str(x) for x in node_labels[gi])
        if node_attrs is not None:
            na_lines.extend(", ".join(repr(float(x)) for x in row) for row in node_attrs[gi])
        offset += g.num_nodes
    (directory / f"{name}_A.txt").write_text("\n".join(a_lines) + "\n")
    (directory / f"{name}_graph_indicator.txt").write_text("\n".join(ind_lines) + "\n")
    (directory / f"{name}_graph_labels.txt").write_text("\n".join(lab_lines) + "\n")
    if node_labels is not None:
        (directory / f"{name}_node_labels.txt").write_text("\n".join(nl_lines) + "\n")
    if node_attrs is not None:
        (directory / f"{name}_node_attributes.txt").write_text("\n".join(na_lines) + "\n")


def real_data_dir():
    """Directory holding real benchmark datasets, if the user provided one.

    Checked locations: $SIZESHIFT_DATA_DIR, then ./data. A dataset NAME
    is considered present when NAME/NAME_A.txt exists.
    """
    candidates = []
    env = os.environ.get("SIZESHIFT_DATA_DIR")
    if env:
        candidates.append(Path(env))
    candidates.append(Path("data"))
    for c in candidates:
        if c.is_dir():
            return c
    return None


def find_real_dataset(name: str):
    root = real_data_dir()
    if root is None:
        return None
    for base in (root / name, root):
        if (base / f"{name}_A.txt").exists():
            return base
    return None


@pytest.fixture(scope="session")
def synth_dataset():
    return make_size_shift_dataset(seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
