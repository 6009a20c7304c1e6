import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from hierflow.feeder import Branch, Bus, Feeder
from hierflow.partition import (
    ClusterTree,
    FlowGraph,
    GranularityPolicy,
    Partition,
    check_cluster_tree,
    detect_communities,
    feeder_flow_graph,
    legalize_to_cluster_tree,
    map_equation_cost,
    partition_feeder,
    stationary_distribution,
)

from oracles import (
    canonical,
    exhaustive_minimum,
    map_equation_plogp,
    random_radial_feeder,
    set_partitions,
    small_graph_suite,
)

SUITE = small_graph_suite()


def _graph(w):
    return FlowGraph(tuple(range(len(w))), w)


def test_visit_rates_cycle_and_path():
    c4 = FlowGraph.from_edges(range(4), [(0, 1), (1, 2), (2, 3), (3, 0)])
    assert stationary_distribution(c4).tolist() == [0.25] * 4
    p3 = FlowGraph.from_edges(range(3), [(0, 1), (1, 2)])
    assert stationary_distribution(p3).tolist() == [0.25, 0.5, 0.25]


def test_visit_rates_weighted_star():
    g = FlowGraph.from_edges(range(4), [(0, 1, 1), (0, 2, 2), (0, 3, 3)])
    assert np.allclose(g.visit, [0.5, 1 / 12, 2 / 12, 3 / 12], atol=1e-15)


def test_disconnected_graph_rejected():
    with pytest.raises(ValueError, match="disconnected"):
        FlowGraph.from_edges(range(4), [(0, 1), (2, 3)])


def test_one_module_cycle_costs_two_bits():
    c4 = FlowGraph.from_edges(range(4), [(0, 1), (1, 2), (2, 3), (3, 0)])
    assert map_equation_cost(c4, Partition((0, 0, 0, 0))) == pytest.approx(2.0, abs=1e-12)


def test_singletons_not_better_on_clique():
    k4 = _graph(np.ones((4, 4)) - np.eye(4))
    assert map_equation_cost(k4, Partition((0, 1, 2, 3))) >= map_equation_cost(k4, Partition((0, 0, 0, 0)))
    # exhaustive: nothing beats one module on K4
    best, assign = exhaustive_minimum(k4.weights)
    assert canonical(assign) == (0, 0, 0, 0)


def test_bridge_split_beats_one_module():
    w = dict(SUITE)["two_triangles"]
    g = _graph(w)
    split = map_equation_cost(g, Partition((0, 0, 0, 1, 1, 1)))
    assert split < map_equation_cost(g, Partition((0,) * 6))
    best, assign = exhaustive_minimum(w)
    assert canonical(assign) == (0, 0, 0, 1, 1, 1)
    assert split == pytest.approx(best, abs=1e-12)


def test_two_five_cliques_recovered():
    w = np.zeros((10, 10))
    w[:5, :5] = 1
    w[5:, 5:] = 1
    np.fill_diagonal(w, 0)
    w[4, 5] = w[5, 4] = 1
    part = detect_communities(_graph(w), seed=0)
    assert part.assignment == (0,) * 5 + (1,) * 5
    # oracle: best over every bipartition
    costs = {}
    for mask in range(1, 2**9):
        a = tuple(0 if (k == 0 or not (mask >> (k - 1)) & 1) else 1 for k in range(10))
        costs[a] = map_equation_plogp(w, a)
    best = min(costs, key=costs.get)
    assert best == part.assignment


def test_k5_single_module():
    w = np.ones((5, 5)) - np.eye(5)
    assert detect_communities(_graph(w)).module_count == 1
    _, assign = exhaustive_minimum(w)
    assert canonical(assign) == (0,) * 5


@pytest.mark.parametrize("name, w", SUITE, ids=[n for n, _ in SUITE])
def test_detected_cost_equals_exhaustive_minimum(name, w):
    g = _graph(w)
    found = map_equation_cost(g, detect_communities(g, seed=0))
    best, _ = exhaustive_minimum(w)
    assert abs(found - best) <= 1e-9
    assert found <= map_equation_cost(g, Partition((0,) * len(w))) + 1e-12


@settings(max_examples=60, deadline=None)
@given(idx=st.integers(0, len(SUITE) - 1), data=st.data())
def test_cost_forms_agree(idx, data):
    w = SUITE[idx][1]
    a = data.draw(st.lists(st.integers(0, 3), min_size=len(w), max_size=len(w)))
    assert map_equation_cost(_graph(w), Partition(tuple(a))) == pytest.approx(map_equation_plogp(w, a), abs=1e-12)


def test_partition_enumeration_counts():
    # Bell numbers
    assert [sum(1 for _ in set_partitions(n)) for n in range(1, 8)] == [1, 2, 5, 15, 52, 203, 877]


def test_detection_deterministic(feeder36):
    g = feeder_flow_graph(feeder36)
    assert detect_communities(g, seed=3) == detect_communities(g, seed=3)


def test_feeder36_module_count(feeder36):
    part = detect_communities(feeder_flow_graph(feeder36), seed=0)
    # regression value fixed after the first run on the shipped asset;
    # legalization later folds the raw modules into five clusters
    assert 3 <= part.module_count <= 8
    assert part.module_count == 7


def test_multilevel_respects_max_size():
    # ring of five 6-cliques: top level finds the cliques, a size cap of 4 forces a second level
    n = 30
    w = np.zeros((n, n))
    for c in range(5):
        idx = range(6 * c, 6 * c + 6)
        for a in idx:
            for b in idx:
                if a != b:
                    w[a, b] = 1
        nxt = (6 * c + 6) % n
        w[6 * c + 5, nxt] = w[nxt, 6 * c + 5] = 1
    g = _graph(w)
    flat = detect_communities(g)
    assert flat.module_count == 5
    deep = detect_communities(g, max_levels=2, max_module_size=4)
    assert deep.module_count >= flat.module_count


def _chain(n):
    buses = [Bus("0", ("A",), "slack", 1.0)] + [Bus(str(k), ("A",), "load", 1.0) for k in range(1, n)]
    branches = [Branch.from_blocks(str(k - 1), str(k), np.diag([10 - 10j, 0, 0])) for k in range(1, n)]
    return Feeder(tuple(buses), tuple(branches), (), "0", 100.0)


def test_chain_split_head_and_layers():
    f = _chain(7)
    tree = legalize_to_cluster_tree(f, Partition((0, 0, 0, 0, 1, 1, 1)))
    assert len(tree) == 2
    assert tree[1].head == "4" and tree[1].parent_bus == "3"
    assert [c.layer for c in tree.clusters] == [0, 1]
    assert check_cluster_tree(f, tree) == []


def test_disconnected_module_is_split():
    f = _chain(7)
    tree = legalize_to_cluster_tree(f, Partition((0, 0, 1, 1, 0, 0, 0)))
    assert len(tree) == 3
    assert {c.nodes for c in tree.clusters} == {("0", "1"), ("2", "3"), ("4", "5", "6")}
    assert check_cluster_tree(f, tree) == []


def _ring():
    buses = [Bus("1", ("A",), "slack", 1.0)] + [Bus(str(k), ("A",), "load", 1.0) for k in range(2, 7)]
    y = np.diag([10 - 10j, 0, 0])
    pairs = [(1, 2), (2, 3), (3, 4), (4, 5), (5, 6), (6, 1)]
    return Feeder(tuple(buses), tuple(Branch.from_blocks(str(a), str(b), y) for a, b in pairs), (), "1", 100.0)


def test_modules_touching_twice_are_merged():
    f = _ring()
    # {1,2,3} and {4,5,6} meet on 3-4 and on 6-1
    tree = legalize_to_cluster_tree(f, Partition((0, 0, 0, 1, 1, 1)))
    assert len(tree) == 1
    assert check_cluster_tree(f, tree) == []


def test_cluster_cycle_is_merged():
    f = _ring()
    tree = legalize_to_cluster_tree(f, Partition((0, 0, 1, 1, 2, 2)))
    assert len(tree) == 1


def test_small_clusters_fold_into_parent():
    f = _chain(9)
    tree = legalize_to_cluster_tree(f, Partition((0, 0, 0, 0, 1, 1, 1, 1, 2)), GranularityPolicy(min_size=2, max_size=None))
    assert len(tree) == 2
    assert tree[1].nodes == ("4", "5", "6", "7", "8")


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), n=st.integers(2, 20), k=st.integers(1, 6), min_size=st.sampled_from([None, 2, 3]))
def test_legalize_always_sound(seed, n, k, min_size):
    rng = np.random.default_rng(seed)
    f = random_radial_feeder(rng, n)
    part = Partition(tuple(int(x) for x in rng.integers(0, k, size=n)))
    tree = legalize_to_cluster_tree(f, part, GranularityPolicy(min_size=min_size, max_size=None))
    assert check_cluster_tree(f, tree) == []
    assert sorted(b for c in tree.clusters for b in c.nodes) == sorted(f.bus_ids)


def test_feeder36_tree(feeder36):
    _, tree = partition_feeder(feeder36)
    assert check_cluster_tree(feeder36, tree) == []
    assert len(tree) >= 3 and tree.depth >= 2
    assert tree.top.head == feeder36.slack_bus
    assert sorted(len(c.nodes) for c in tree.clusters) == [5, 6, 7, 8, 10]


def test_tree_json_round_trip(feeder36):
    _, tree = partition_feeder(feeder36)
    again = ClusterTree.from_dict(json.loads(tree.dumps()))
    assert again == tree
    assert json.loads(tree.dumps())["bus_cluster"][feeder36.slack_bus] == 0


def test_skeleton_paths():
    tree = ClusterTree.skeleton([None, 0, 0, 2])
    assert sorted(tree.paths()) == [[0, 1], [0, 2, 3]]
    assert tree.layers() == [[0], [1, 2], [3]]
    with pytest.raises(ValueError):
        ClusterTree.skeleton([None, None])
