"""Map-equation community detection and legalization into a cluster tree.

The two-level map equation for an undirected random walk, with module exit
rates q_m, total exit rate q = sum(q_m) and node visit rates p_i, is

    L = q H(q_m / q) + sum_m (q_m + p_m) H({q_m, p_i in m} / (q_m + p_m))

which expands to the plogp form used by the search:

    L = plogp(q) - 2 sum plogp(q_m) - sum plogp(p_i) + sum plogp(q_m + p_m)
"""

from __future__ import annotations

import json
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Sequence

import networkx as nx
import numpy as np

from .feeder import Feeder

_EPS = 1e-12


def plogp(x: float) -> float:
    return x * math.log2(x) if x > 0 else 0.0


def entropy(weights: Sequence[float]) -> float:
    """Shannon entropy in bits of a non-negative weight vector (normalized here)."""
    w = np.asarray(weights, dtype=float)
    total = w.sum()
    if total <= 0:
        return 0.0
    p = w[w > 0] / total
    return float(-(p * np.log2(p)).sum())


@dataclass(frozen=True, eq=False)
class FlowGraph:
    """Undirected weighted graph with its random-walk visit rates."""

    nodes: tuple
    weights: np.ndarray  # symmetric, zero diagonal
    visit: np.ndarray = field(init=False)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (len(self.nodes), len(self.nodes)):
            raise ValueError("weight matrix shape does not match node count")
        if not np.allclose(w, w.T, rtol=0, atol=0):
            raise ValueError("weight matrix must be symmetric")
        if np.any(w < 0):
            raise ValueError("edge weights must be positive")
        object.__setattr__(self, "weights", w)
        object.__setattr__(self, "visit", stationary_distribution(self))

    @classmethod
    def from_edges(cls, nodes: Sequence, edges) -> "FlowGraph":
        """``edges`` is an iterable of (u, v) or (u, v, weight); repeats accumulate."""
        pos = {n: k for k, n in enumerate(nodes)}
        w = np.zeros((len(nodes), len(nodes)))
        for e in edges:
            u, v = e[0], e[1]
            wt = float(e[2]) if len(e) > 2 else 1.0
            if u == v:
                continue
            w[pos[u], pos[v]] += wt
            w[pos[v], pos[u]] += wt
        return cls(tuple(nodes), w)

    def __len__(self):
        return len(self.nodes)

    def neighbors(self, k: int) -> np.ndarray:
        return np.flatnonzero(self.weights[k])

    def is_connected(self) -> bool:
        n = len(self.nodes)
        if n == 0:
            return False
        seen = {0}
        todo = [0]
        while todo:
            u = todo.pop()
            for v in self.neighbors(u):
                if v not in seen:
                    seen.add(int(v))
                    todo.append(int(v))
        return len(seen) == n

    def subgraph(self, idx: Sequence[int]) -> "FlowGraph":
        idx = list(idx)
        return FlowGraph(tuple(self.nodes[k] for k in idx), self.weights[np.ix_(idx, idx)])


def stationary_distribution(g: FlowGraph) -> np.ndarray:
    """Visit rates of the undirected random walk: node strength over total strength."""
    if len(g.nodes) == 1:
        return np.ones(1)
    if not g.is_connected():
        raise ValueError("flow graph is disconnected")
    strength = g.weights.sum(axis=1)
    return strength / strength.sum()


@dataclass(frozen=True)
class Partition:
    assignment: tuple[int, ...]

    def __post_init__(self):
        relabel: dict[int, int] = {}
        for m in self.assignment:
            relabel.setdefault(m, len(relabel))
        object.__setattr__(self, "assignment", tuple(relabel[m] for m in self.assignment))

    @property
    def module_count(self) -> int:
        return len(set(self.assignment))

    def modules(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.module_count)]
        for k, m in enumerate(self.assignment):
            out[m].append(k)
        return out


def map_equation_cost(g: FlowGraph, part: Partition) -> float:
    """Two-level description length in bits, evaluated from the entropy form."""
    if len(part.assignment) != len(g.nodes):
        raise ValueError("partition does not cover the graph")
    p = g.visit
    total_w = g.weights.sum()
    flow = g.weights / total_w if total_w > 0 else g.weights
    mods = part.modules()
    if any(not m for m in mods):
        raise ValueError("empty module")
    exits = []
    for m in mods:
        inside = np.zeros(len(g.nodes), dtype=bool)
        inside[m] = True
        exits.append(float(flow[np.ix_(inside, ~inside)].sum()))
    q = sum(exits)
    cost = q * entropy(exits) if q > 0 else 0.0
    for m, q_m in zip(mods, exits):
        p_m = float(p[m].sum())
        cost += (q_m + p_m) * entropy([q_m] + list(p[m]))
    return cost


# ---------------------------------------------------------------------------
# search
# ---------------------------------------------------------------------------


class _Level:
    """A (possibly aggregated) network: supernode flows, inter-node flows, members."""

    def __init__(self, node_flow: np.ndarray, flow: np.ndarray, members: list[list[int]]):
        self.node_flow = node_flow
        self.flow = flow  # symmetric, zero diagonal; f_uv per direction
        self.out = flow.sum(axis=1)
        self.members = members
        self.nbrs = [np.flatnonzero(flow[u]) for u in range(len(node_flow))]

    def aggregate(self, mods: np.ndarray) -> "_Level":
        ids = sorted(set(mods.tolist()))
        remap = {m: k for k, m in enumerate(ids)}
        k = len(ids)
        s = np.zeros((k, len(mods)))
        for u, m in enumerate(mods):
            s[remap[m], u] = 1.0
        flow = s @ self.flow @ s.T
        np.fill_diagonal(flow, 0.0)
        members: list[list[int]] = [[] for _ in range(k)]
        for u, m in enumerate(mods):
            members[remap[m]].extend(self.members[u])
        return _Level(s @ self.node_flow, flow, members)


class _ModuleState:
    def __init__(self, level: _Level, mods: np.ndarray):
        self.level = level
        self.mods = mods.copy()
        n = len(mods)
        self.q = np.zeros(n)
        self.p = np.zeros(n)
        for u in range(n):
            self.p[mods[u]] += level.node_flow[u]
        for u in range(n):
            for v in level.nbrs[u]:
                if mods[v] != mods[u]:
                    self.q[mods[u]] += level.flow[u, v]
        self.q_total = float(self.q.sum())
        self.size = np.bincount(mods, minlength=n)

    def delta(self, u: int, a: int, b: int, f_ua: float, f_ub: float) -> float:
        lv = self.level
        qa, qb, pa, pb = self.q[a], self.q[b], self.p[a], self.p[b]
        qa2 = max(qa - lv.out[u] + 2 * f_ua, 0.0)
        qb2 = max(qb + lv.out[u] - 2 * f_ub, 0.0)
        pa2 = pa - lv.node_flow[u]
        pb2 = pb + lv.node_flow[u]
        qt2 = max(self.q_total - qa - qb + qa2 + qb2, 0.0)
        return (
            plogp(qt2)
            - plogp(self.q_total)
            - 2 * (plogp(qa2) + plogp(qb2) - plogp(qa) - plogp(qb))
            + plogp(qa2 + pa2)
            + plogp(qb2 + pb2)
            - plogp(qa + pa)
            - plogp(qb + pb)
        )

    def move(self, u: int, a: int, b: int, f_ua: float, f_ub: float) -> None:
        lv = self.level
        qa2 = max(self.q[a] - lv.out[u] + 2 * f_ua, 0.0)
        qb2 = max(self.q[b] + lv.out[u] - 2 * f_ub, 0.0)
        self.q_total += qa2 + qb2 - self.q[a] - self.q[b]
        self.q[a], self.q[b] = qa2, qb2
        self.p[a] -= lv.node_flow[u]
        self.p[b] += lv.node_flow[u]
        self.size[a] -= 1
        self.size[b] += 1
        self.mods[u] = b


def _local_moves(level: _Level, mods: np.ndarray, rng: np.random.Generator, max_passes: int = 200) -> tuple[np.ndarray, bool]:
    """Greedy single-node moves until no move lowers the cost."""
    st = _ModuleState(level, mods)
    n = len(mods)
    moved_any = False
    for _ in range(max_passes):
        moved = False
        for u in rng.permutation(n):
            a = st.mods[u]
            links: dict[int, float] = {}
            for v in level.nbrs[u]:
                m = st.mods[v]
                links[m] = links.get(m, 0.0) + level.flow[u, v]
            f_ua = links.get(a, 0.0)
            best_d, best_b = -1e-10, -1
            for b in sorted(links):
                if b == a:
                    continue
                d = st.delta(u, a, b, f_ua, links[b])
                if d < best_d:
                    best_d, best_b = d, b
            if st.size[a] > 1:
                empty = np.flatnonzero(st.size == 0)
                if empty.size:
                    b = int(empty[0])
                    d = st.delta(u, a, b, f_ua, 0.0)
                    if d < best_d:
                        best_d, best_b = d, b
            if best_b >= 0:
                st.move(u, a, best_b, f_ua, links.get(best_b, 0.0))
                moved = moved_any = True
        if not moved:
            break
    return st.mods, moved_any


def _flatten(level: _Level, mods: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros(n, dtype=int)
    for u, m in enumerate(mods):
        out[level.members[u]] = m
    return out


def _two_level_search(g: FlowGraph, rng: np.random.Generator) -> np.ndarray:
    n = len(g.nodes)
    total = g.weights.sum()
    base = _Level(g.visit.copy(), g.weights / total, [[k] for k in range(n)])
    assign = np.arange(n)
    best_cost = map_equation_cost(g, Partition(tuple(assign)))
    while True:
        # start at node level from the current assignment (fine tuning), then coarsen
        level = base
        mods, _ = _local_moves(level, assign.copy(), rng)
        while True:
            nxt = level.aggregate(mods)
            if len(nxt.node_flow) == len(level.node_flow):
                break
            level = nxt
            mods, moved = _local_moves(level, np.arange(len(level.node_flow)), rng)
            if not moved:
                break
        cand = _flatten(level, mods, n)
        cost = map_equation_cost(g, Partition(tuple(cand)))
        if cost < best_cost - 1e-10:
            assign, best_cost = cand, cost
        else:
            break
    return assign


def _best_two_level(g: FlowGraph, seed: int, trials: int) -> Partition:
    one = Partition((0,) * len(g.nodes))
    if len(g.nodes) <= 1:
        return one
    best, best_cost = one, map_equation_cost(g, one)
    rng = np.random.default_rng(seed)
    for _ in range(trials):
        cand = Partition(tuple(_two_level_search(g, rng).tolist()))
        cost = map_equation_cost(g, cand)
        if cost < best_cost - 1e-10:
            best, best_cost = cand, cost
    return best


def detect_communities(
    g: FlowGraph,
    max_levels: int = 1,
    *,
    seed: int = 0,
    trials: int = 10,
    max_module_size: int | None = None,
) -> Partition:
    """Minimize the two-level map equation; optionally sub-split large modules.

    With ``max_levels > 1`` every module larger than ``max_module_size`` is
    searched again as a network of its own, recursively, up to ``max_levels``
    levels deep. The returned partition is the finest level reached.
    """
    if not g.is_connected():
        raise ValueError("flow graph is disconnected")
    part = _best_two_level(g, seed, trials)
    if max_levels <= 1 or max_module_size is None:
        return part
    assign = list(part.assignment)
    next_id = part.module_count
    for mod in part.modules():
        if len(mod) <= max_module_size:
            continue
        sub_g = g.subgraph(mod)
        if not sub_g.is_connected():
            continue
        sub = detect_communities(
            sub_g, max_levels - 1, seed=seed, trials=trials, max_module_size=max_module_size
        )
        if sub.module_count > 1:
            for k, m in zip(mod, sub.assignment):
                if m > 0:
                    assign[k] = next_id + m - 1
            next_id += sub.module_count - 1
    return Partition(tuple(assign))


# ---------------------------------------------------------------------------
# feeder -> flow graph -> cluster tree
# ---------------------------------------------------------------------------


def feeder_flow_graph(f: Feeder) -> FlowGraph:
    """Buses as nodes; edge weight is |sum of the series block entries| per bus pair."""
    order = f.bus_order()
    blocks: dict[tuple[int, int], complex] = {}
    for br in f.branches:
        i, j = sorted((order[br.from_bus], order[br.to_bus]))
        blocks[(i, j)] = blocks.get((i, j), 0j) + complex(sum(br.series))
    w = np.zeros((len(f.buses), len(f.buses)))
    for (i, j), y in blocks.items():
        w[i, j] = w[j, i] = abs(y)
    return FlowGraph(tuple(f.bus_ids), w)


@dataclass(frozen=True)
class GranularityPolicy:
    """Cluster size band in buses; ``None`` disables that side."""

    min_size: int | None = 5
    max_size: int | None = 25
    max_levels: int = 2


@dataclass(frozen=True)
class Cluster:
    id: int
    nodes: tuple[str, ...]
    head: str  # bus in this cluster touching the parent (slack bus for the top)
    parent: int | None
    parent_bus: str | None  # parent-side endpoint of the head branch
    children: tuple[int, ...]
    layer: int


@dataclass(frozen=True)
class ClusterTree:
    clusters: tuple[Cluster, ...]

    @property
    def top(self) -> Cluster:
        return self.clusters[0]

    def __len__(self):
        return len(self.clusters)

    def __getitem__(self, cid: int) -> Cluster:
        return self.clusters[cid]

    def cluster_of(self) -> dict[str, int]:
        return {b: c.id for c in self.clusters for b in c.nodes}

    @property
    def depth(self) -> int:
        return max(c.layer for c in self.clusters) + 1

    def layers(self) -> list[list[int]]:
        out: list[list[int]] = [[] for _ in range(self.depth)]
        for c in self.clusters:
            out[c.layer].append(c.id)
        return out

    def bottom_up(self) -> list[list[int]]:
        return self.layers()[::-1]

    def paths(self) -> list[list[int]]:
        """Root-to-leaf cluster paths."""
        out = []

        def walk(cid, acc):
            acc = acc + [cid]
            kids = self.clusters[cid].children
            if not kids:
                out.append(acc)
            for k in kids:
                walk(k, acc)

        walk(0, [])
        return out

    def to_dict(self) -> dict:
        return {
            "bus_cluster": self.cluster_of(),
            "clusters": [
                {
                    "id": c.id,
                    "nodes": list(c.nodes),
                    "head": c.head,
                    "parent": c.parent,
                    "parent_bus": c.parent_bus,
                    "children": list(c.children),
                    "layer": c.layer,
                }
                for c in self.clusters
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterTree":
        return cls(
            tuple(
                Cluster(
                    c["id"],
                    tuple(c["nodes"]),
                    c["head"],
                    c["parent"],
                    c["parent_bus"],
                    tuple(c["children"]),
                    c["layer"],
                )
                for c in d["clusters"]
            )
        )

    @classmethod
    def skeleton(cls, parents: Sequence[int | None]) -> "ClusterTree":
        """Tree shape only (no buses), from each cluster's parent id; cluster 0 is the top."""
        if parents[0] is not None or any(p is None for p in parents[1:]):
            raise ValueError("cluster 0 must be the only root")
        depth = [0] * len(parents)
        for k in range(1, len(parents)):
            if parents[k] >= k:
                raise ValueError("parents must precede their children")
            depth[k] = depth[parents[k]] + 1
        return cls(
            tuple(
                Cluster(k, (), "", p, None, tuple(j for j, q in enumerate(parents) if q == k), depth[k])
                for k, p in enumerate(parents)
            )
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def _simple_graph(f: Feeder) -> nx.Graph:
    g = nx.Graph()
    g.add_nodes_from(f.bus_ids)
    g.add_edges_from((br.from_bus, br.to_bus) for br in f.branches)
    return g


def _boundary_edges(g: nx.Graph, owner: dict[str, int]) -> dict[tuple[int, int], list[tuple[str, str]]]:
    out: dict[tuple[int, int], list[tuple[str, str]]] = {}
    for u, v in g.edges():
        a, b = owner[u], owner[v]
        if a != b:
            key = (min(a, b), max(a, b))
            out.setdefault(key, []).append((u, v))
    return out


def check_cluster_tree(f: Feeder, tree: ClusterTree) -> list[str]:
    """Return every violated cluster-tree invariant (empty when sound)."""
    problems = []
    g = _simple_graph(f)
    seen: list[str] = []
    for c in tree.clusters:
        seen.extend(c.nodes)
        if not nx.is_connected(g.subgraph(c.nodes)):
            problems.append(f"cluster {c.id} is not connected")
        if c.head not in c.nodes:
            problems.append(f"cluster {c.id}: head {c.head} not in cluster")
    if sorted(seen) != sorted(f.bus_ids):
        problems.append("clusters do not partition the bus set")
        return problems
    owner = tree.cluster_of()
    top = [c for c in tree.clusters if c.parent is None]
    if len(top) != 1 or f.slack_bus not in top[0].nodes or top[0].layer != 0:
        problems.append("the slack cluster must be the unique top at layer 0")
    edges = _boundary_edges(g, owner)
    for c in tree.clusters:
        if c.parent is None:
            continue
        parent = tree[c.parent]
        key = (min(c.id, c.parent), max(c.id, c.parent))
        links = edges.get(key, [])
        if len(links) != 1:
            problems.append(f"cluster {c.id} attaches to its parent through {len(links)} branches")
        elif set(links[0]) != {c.head, c.parent_bus}:
            problems.append(f"cluster {c.id}: head branch does not match boundary edge")
        if c.layer != parent.layer + 1:
            problems.append(f"cluster {c.id}: layer is not parent layer + 1")
        if c.id not in parent.children:
            problems.append(f"cluster {c.id} missing from parent's children")
    for key in edges:
        a, b = key
        if tree[a].parent != b and tree[b].parent != a:
            problems.append(f"clusters {a} and {b} touch without a parent/child relation")
    return problems


def legalize_to_cluster_tree(
    f: Feeder, part: Partition, granularity_policy: GranularityPolicy | None = None
) -> ClusterTree:
    """Turn a bus partition into a cluster tree rooted at the slack cluster.

    Disconnected modules are split into components; clusters that touch
    through more than one bus pair, or that close a loop in the cluster
    graph, are merged; clusters under the minimum size are folded into
    their parent (a small top cluster absorbs its smallest child).
    """
    policy = granularity_policy or GranularityPolicy(min_size=None, max_size=None)
    if len(part.assignment) != len(f.buses):
        raise ValueError("partition does not cover every bus")
    order = f.bus_order()
    g = _simple_graph(f)

    groups: list[set[str]] = []
    for mod in part.modules():
        names = [f.buses[k].id for k in mod]
        for comp in nx.connected_components(g.subgraph(names)):
            groups.append(set(comp))

    def canon(gs: list[set[str]]) -> list[set[str]]:
        return sorted(gs, key=lambda s: min(order[b] for b in s))

    def owner_of(gs):
        return {b: k for k, s in enumerate(gs) for b in s}

    def merge(gs, ids):
        ids = sorted(set(ids))
        merged = set().union(*(gs[k] for k in ids))
        return canon([s for k, s in enumerate(gs) if k not in ids] + [merged])

    groups = canon(groups)
    while True:
        owner = owner_of(groups)
        edges = _boundary_edges(g, owner)
        multi = sorted(k for k, v in edges.items() if len(v) > 1)
        if multi:
            groups = merge(groups, multi[0])
            continue
        cg = nx.Graph()
        cg.add_nodes_from(range(len(groups)))
        cg.add_edges_from(edges)
        cycles = nx.cycle_basis(cg)
        if cycles:
            groups = merge(groups, min(cycles, key=lambda c: sorted(c)))
            continue
        break

    def orient(gs):
        owner = owner_of(gs)
        edges = _boundary_edges(g, owner)
        adj: dict[int, list[int]] = {k: [] for k in range(len(gs))}
        for a, b in edges:
            adj[a].append(b)
            adj[b].append(a)
        root = owner[f.slack_bus]
        parent = {root: None}
        depth = {root: 0}
        queue = deque([root])
        while queue:
            u = queue.popleft()
            for v in sorted(adj[u], key=lambda k: min(order[b] for b in gs[k])):
                if v not in parent:
                    parent[v] = u
                    depth[v] = depth[u] + 1
                    queue.append(v)
        return parent, depth, edges

    if policy.min_size:
        while len(groups) > 1:
            parent, depth, _ = orient(groups)
            small = [k for k in range(len(groups)) if len(groups[k]) < policy.min_size and parent[k] is not None]
            if small:
                k = min(small, key=lambda k: (len(groups[k]), -depth[k], min(order[b] for b in groups[k])))
                groups = merge(groups, [k, parent[k]])
                continue
            root = next(k for k in parent if parent[k] is None)
            if len(groups[root]) < policy.min_size:
                kids = [k for k in parent if parent[k] == root]
                k = min(kids, key=lambda k: (len(groups[k]), min(order[b] for b in groups[k])))
                groups = merge(groups, [k, root])
                continue
            break

    parent, depth, edges = orient(groups)
    # cluster ids: breadth-first from the slack cluster, ties by first bus
    ranked = sorted(range(len(groups)), key=lambda k: (depth[k], min(order[b] for b in groups[k])))
    new_id = {old: new for new, old in enumerate(ranked)}
    clusters = []
    for old in ranked:
        nodes = tuple(sorted(groups[old], key=order.__getitem__))
        p = parent[old]
        if p is None:
            head, parent_bus = f.slack_bus, None
        else:
            (u, v), = edges[(min(old, p), max(old, p))]
            head, parent_bus = (u, v) if u in groups[old] else (v, u)
        kids = tuple(sorted(new_id[k] for k in parent if parent[k] == old))
        clusters.append(
            Cluster(new_id[old], nodes, head, None if p is None else new_id[p], parent_bus, kids, depth[old])
        )
    return ClusterTree(tuple(clusters))


def partition_feeder(
    f: Feeder, policy: GranularityPolicy = GranularityPolicy(), seed: int = 0, trials: int = 10
) -> tuple[Partition, ClusterTree]:
    g = feeder_flow_graph(f)
    part = detect_communities(
        g, policy.max_levels, seed=seed, trials=trials, max_module_size=policy.max_size
    )
    return part, legalize_to_cluster_tree(f, part, policy)
