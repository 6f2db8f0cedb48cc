"""Spanning-tree extraction from query graphs (Kruskal on random weights)."""

from __future__ import annotations

import numpy as np

from .graph import Edge, Node, QueryGraph


class DisconnectedGraphError(ValueError):
    pass


class UnionFind:
    def __init__(self, items):
        self.parent = {x: x for x in items}
        self.rank = {x: 0 for x in items}

    def find(self, x):
        root = x
        while self.parent[root] != root:
            root = self.parent[root]
        while self.parent[x] != root:
            self.parent[x], x = root, self.parent[x]
        return root

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra == rb:
            return False
        if self.rank[ra] < self.rank[rb]:
            ra, rb = rb, ra
        self.parent[rb] = ra
        if self.rank[ra] == self.rank[rb]:
            self.rank[ra] += 1
        return True


def connected_components(q):
    """Node-id sets partitioned by reachability, ordered by smallest id."""
    uf = UnionFind(q.node_ids)
    for e in q.edges:
        uf.union(e.src, e.dst)
    groups = {}
    for i in q.node_ids:
        groups.setdefault(uf.find(i), set()).add(i)
    return sorted(groups.values(), key=min)


def is_tree(q):
    # parallel edges count separately, so a doubled pair is a cycle
    return len(q.edges) == q.n_nodes - 1 and len(connected_components(q)) == 1


def random_spanning_forest(q, seed):
    """Kruskal minimum spanning forest under i.i.d. Uniform(0, 1) edge weights."""
    rng = np.random.default_rng(seed)
    weights = rng.random(len(q.edges))
    uf = UnionFind(q.node_ids)
    keep = []
    for idx in np.argsort(weights, kind="stable"):
        e = q.edges[idx]
        if uf.union(e.src, e.dst):
            keep.append(int(idx))
    return q.with_edges(q.edges[i] for i in sorted(keep))


def random_spanning_tree(q, seed):
    """A random spanning tree of a connected query; edge labels are preserved."""
    if len(connected_components(q)) != 1:
        raise DisconnectedGraphError("query graph is not connected")
    return random_spanning_forest(q, seed)


def random_tree_query(n_nodes, rng, n_categories=4, n_relations=3):
    """Random labelled tree on nodes 1..n (each node attaches to an earlier one)."""
    nodes = [Node(i, int(rng.integers(n_categories))) for i in range(1, n_nodes + 1)]
    edges = []
    for i in range(2, n_nodes + 1):
        j = int(rng.integers(1, i))
        src, dst = (i, j) if rng.random() < 0.5 else (j, i)
        edges.append(Edge(src, dst, int(rng.integers(n_relations))))
    return QueryGraph(tuple(nodes), tuple(edges))
