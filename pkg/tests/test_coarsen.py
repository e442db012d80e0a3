import itertools

import numpy as np
import pytest

from sizeshift.coarsen import (
    Partition,
    coarsen,
    contract_partition,
    deserialize_coarsened,
    heavy_edge_partition,
    kmeans_partition,
    precompute_coarsened_datasets,
    serialize_coarsened,
    spectral_cluster_partition,
)
from sizeshift.graphs import AttributedGraph, GraphDataset

from conftest import make_random_graph

PARTITIONERS = (heavy_edge_partition, spectral_cluster_partition, kmeans_partition)


def crossing_edges(g, assignment):
    """Brute-force super-edge oracle: scan every original edge."""
    return {
        (int(min(assignment[u], assignment[v])), int(max(assignment[u], assignment[v])))
        for u, v in g.edges
        if assignment[u] != assignment[v]
    }


# -- contraction ---------------------------------------------------------


def test_contract_triangle_merge():
    g = AttributedGraph(3, ((0, 1), (1, 2), (0, 2)), np.array([[1.0], [3.0], [5.0]]))
    cg = contract_partition(g, Partition(np.array([0, 0, 1]), 2), "mean")
    assert cg.graph.num_nodes == 2
    assert cg.graph.edges == ((0, 1),)
    assert np.allclose(cg.graph.features, [[2.0], [5.0]])


def test_contract_path_two_halves():
    g = AttributedGraph(4, ((0, 1), (1, 2), (2, 3)), np.ones((4, 1)))
    cg = contract_partition(g, Partition(np.array([0, 0, 1, 1]), 2), "sum")
    assert cg.graph.num_nodes == 2
    assert cg.graph.edges == ((0, 1),)
    assert np.allclose(cg.graph.features, [[2.0], [2.0]])


@pytest.mark.parametrize("agg", ["mean", "max", "sum"])
def test_contract_identity_partition(agg, rng):
    g = make_random_graph(rng, 9, 0.4, 3)
    cg = contract_partition(g, Partition(np.arange(9), 9), agg)
    assert cg.graph.num_nodes == 9
    assert cg.graph.edges == g.edges
    assert np.allclose(cg.graph.features, g.features)


def test_contract_rejects_bad_partition():
    g = AttributedGraph(3, ((0, 1),), np.ones((3, 1)))
    with pytest.raises(ValueError):
        contract_partition(g, Partition(np.array([0, 0, 2]), 3), "mean")  # empty cluster 1
    with pytest.raises(ValueError):
        contract_partition(g, Partition(np.array([0, 0]), 1), "mean")  # wrong length


def test_contract_max_aggregation(rng):
    g = make_random_graph(rng, 6, 0.5, 2)
    p = Partition(np.array([0, 0, 1, 1, 1, 2]), 3)
    cg = contract_partition(g, p, "max")
    for c, members in ((0, [0, 1]), (1, [2, 3, 4]), (2, [5])):
        assert np.allclose(cg.graph.features[c], g.features[members].max(axis=0))


# -- partitioners --------------------------------------------------------


def test_spectral_two_triangles_matches_min_ncut_oracle():
    edges = ((0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5))
    g = AttributedGraph(6, edges, np.ones((6, 1)))

    def ncut(mask):
        vol = [0.0, 0.0]
        cut = 0.0
        deg = np.zeros(6)
        for u, v in edges:
            deg[u] += 1
            deg[v] += 1
        for side in (0, 1):
            vol[side] = sum(deg[v] for v in range(6) if mask[v] == side)
        for u, v in edges:
            if mask[u] != mask[v]:
                cut += 1
        if 0 in vol:
            return np.inf
        return cut / vol[0] + cut / vol[1]

    best = min(
        (tuple(mask) for mask in itertools.product((0, 1), repeat=6) if 0 < sum(mask) < 6),
        key=ncut,
    )
    p = spectral_cluster_partition(g, 2, seed=0)
    groups = frozenset(frozenset(np.where(p.assignment == c)[0]) for c in range(2))
    oracle = frozenset(
        frozenset(i for i in range(6) if best[i] == s) for s in (0, 1)
    )
    assert groups == oracle  # the two components


def test_spectral_extreme_k():
    g = AttributedGraph(4, ((0, 1), (1, 2), (2, 3)), np.ones((4, 1)))
    assert spectral_cluster_partition(g, 4, 0).assignment.tolist() == [0, 1, 2, 3]
    assert spectral_cluster_partition(g, 1, 0).num_clusters == 1
    with pytest.raises(ValueError):
        spectral_cluster_partition(g, 5, 0)


def test_kmeans_separated_features_matches_optimal():
    g = AttributedGraph(4, ((0, 1), (1, 2), (2, 3)), np.array([[0.0], [0.0], [10.0], [10.0]]))

    def cost(mask):
        pts = np.hstack([g.features, np.array([[1.0], [2.0], [2.0], [1.0]])])
        total = 0.0
        for side in (0, 1):
            sel = pts[[i for i in range(4) if mask[i] == side]]
            if len(sel) == 0:
                return np.inf
            total += ((sel - sel.mean(axis=0)) ** 2).sum()
        return total

    best = min(
        (tuple(mask) for mask in itertools.product((0, 1), repeat=4)),
        key=cost,
    )
    p = kmeans_partition(g, 2, seed=0)
    groups = frozenset(frozenset(np.where(p.assignment == c)[0]) for c in range(2))
    oracle = frozenset(frozenset(i for i in range(4) if best[i] == s) for s in (0, 1))
    assert groups == oracle


def test_kmeans_constant_features_uses_degree():
    # star: center degree 3, leaves degree 1; constant features
    g = AttributedGraph(4, ((0, 1), (0, 2), (0, 3)), np.ones((4, 1)))
    p = kmeans_partition(g, 2, seed=0)
    groups = frozenset(frozenset(np.where(p.assignment == c)[0]) for c in range(2))
    assert groups == frozenset({frozenset({0}), frozenset({1, 2, 3})})


def test_kmeans_extreme_k(rng):
    g = make_random_graph(rng, 5, 0.4, 2)
    assert kmeans_partition(g, 5, 0).assignment.tolist() == [0, 1, 2, 3, 4]
    with pytest.raises(ValueError):
        kmeans_partition(g, 6, 0)


def test_heavy_edge_single_edge_k1():
    g = AttributedGraph(2, ((0, 1),), np.ones((2, 1)))
    p = heavy_edge_partition(g, 1, seed=0)
    assert p.assignment.tolist() == [0, 0]


def test_heavy_edge_path4_two_pairs():
    g = AttributedGraph(4, ((0, 1), (1, 2), (2, 3)), np.ones((4, 1)))
    for seed in range(5):
        p = heavy_edge_partition(g, 2, seed=seed)
        assert sorted(np.bincount(p.assignment).tolist()) == [2, 2]


def test_heavy_edge_identity_k_n(rng):
    g = make_random_graph(rng, 7, 0.4, 2)
    assert heavy_edge_partition(g, 7, 0).assignment.tolist() == list(range(7))


def test_heavy_edge_disconnected_fallback():
    g = AttributedGraph(5, (), np.ones((5, 1)))  # no edges at all
    p = heavy_edge_partition(g, 2, seed=0)
    p.validate(5)
    assert p.num_clusters == 2


# -- coarsen and the node-count contract ----------------------------------


def test_coarsen_floor_counts():
    rng = np.random.default_rng(0)
    g20 = make_random_graph(rng, 20, 0.2, 2)
    assert coarsen(g20, 0.5).graph.num_nodes == 10
    g15 = make_random_graph(rng, 15, 0.2, 2)
    assert coarsen(g15, 0.9).graph.num_nodes == 13
    g3 = make_random_graph(rng, 3, 0.9, 2)
    assert coarsen(g3, 0.1).graph.num_nodes == 1


def test_coarsen_rejects_bad_ratio(rng):
    g = make_random_graph(rng, 5, 0.5, 2)
    for r in (0.0, 1.0, 1.2, -0.1):
        with pytest.raises(ValueError):
            coarsen(g, r)


@pytest.mark.parametrize("method", ["heavy-edge", "sc", "kmeans"])
def test_coarsening_contract_random_graphs(method):
    rng = np.random.default_rng(11)
    for trial in range(15):
        n = int(rng.integers(2, 40))
        g = make_random_graph(rng, n, 0.25, 3, gid=trial, connected=False)
        for ratio in (0.1, 0.3, 0.5, 0.7, 0.9):
            cg = coarsen(g, ratio, method, "sum", seed=trial)
            expected = max(1, int(np.floor(ratio * n + 1e-9)))
            assert cg.graph.num_nodes == expected
            cg.membership.validate(n)
            assert set(cg.graph.edges) == crossing_edges(g, cg.membership.assignment)
            assert np.allclose(
                cg.graph.features.sum(axis=0), g.features.sum(axis=0), atol=1e-9
            )


def test_precompute_alignment_and_determinism(rng):
    graphs = tuple(
        make_random_graph(rng, int(rng.integers(4, 12)), 0.3, 2, label=i % 2, gid=i)
        for i in range(12)
    )
    ds = GraphDataset("T", graphs, 2, 2)
    cd1 = precompute_coarsened_datasets(ds, (0.8, 0.9), "heavy-edge", "mean", seed=3)
    cd2 = precompute_coarsened_datasets(ds, (0.8, 0.9), "heavy-edge", "mean", seed=3)
    assert set(cd1.per_ratio) == {0.8, 0.9}
    for r in (0.8, 0.9):
        assert len(cd1.per_ratio[r]) == 12
        for i, cg in enumerate(cd1.per_ratio[r]):
            assert cg.source_id == i
            assert cg.graph.label == graphs[i].label
    assert serialize_coarsened(cd1) == serialize_coarsened(cd2)
    cd3 = precompute_coarsened_datasets(ds, (0.8, 0.9), "heavy-edge", "mean", seed=4)
    assert serialize_coarsened(cd1) != serialize_coarsened(cd3)


def test_cache_round_trip(rng):
    graphs = tuple(
        make_random_graph(rng, int(rng.integers(3, 9)), 0.4, 2, label=i % 2, gid=i)
        for i in range(5)
    )
    ds = GraphDataset("T", graphs, 2, 2)
    cd = precompute_coarsened_datasets(ds, (0.5,), "kmeans", "max", seed=1)
    blob = serialize_coarsened(cd)
    restored = deserialize_coarsened(blob)
    assert serialize_coarsened(restored) == blob
    for a, b in zip(cd.per_ratio[0.5], restored.per_ratio[0.5]):
        assert a.graph.edges == b.graph.edges
        assert np.array_equal(a.graph.features, b.graph.features)
        assert np.array_equal(a.membership.assignment, b.membership.assignment)
