"""Query graphs, candidate sets and the Scene-MRF built from them."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, gather, reshape

GENERIC = "object"


class InvalidQueryError(ValueError):
    """Raised with every violated query-graph invariant, not just the first."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(self.problems))


@dataclass(frozen=True)
class Node:
    id: int
    category: int
    generic: bool = False


@dataclass(frozen=True)
class Edge:
    src: int
    dst: int
    rel: int


@dataclass(frozen=True)
class QueryGraph:
    """Nodes labelled with object categories and edges labelled with relations.

    Node ids run 1..N. A node with ``generic=True`` stands for the wildcard
    "object" category and contributes no unary evidence.
    """

    nodes: tuple
    edges: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "edges", tuple(self.edges))

    @property
    def n_nodes(self):
        return len(self.nodes)

    @property
    def node_ids(self):
        return [n.id for n in self.nodes]

    def node(self, node_id):
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(node_id)

    def with_edges(self, edges):
        return QueryGraph(self.nodes, tuple(edges))

    def with_nodes(self, nodes):
        return QueryGraph(tuple(nodes), self.edges)

    def to_dict(self, vocab=None):
        def cat(n):
            if n.generic:
                return GENERIC
            return vocab.objects[n.category] if vocab else n.category

        def rel(e):
            return vocab.relations[e.rel] if vocab else e.rel

        return {
            "nodes": [{"id": n.id, "category": cat(n)} for n in self.nodes],
            "edges": [{"src": e.src, "dst": e.dst, "rel": rel(e)} for e in self.edges],
        }

    @classmethod
    def from_dict(cls, d, vocab=None):
        nodes = []
        for rec in d["nodes"]:
            c = rec["category"]
            if c == GENERIC:
                nodes.append(Node(int(rec["id"]), -1, True))
            elif isinstance(c, str):
                if vocab is None:
                    raise ValueError(f"category name {c!r} needs a vocabulary")
                nodes.append(Node(int(rec["id"]), vocab.object_id(c)))
            else:
                nodes.append(Node(int(rec["id"]), int(c)))
        edges = []
        for rec in d.get("edges", []):
            r = rec["rel"]
            if isinstance(r, str):
                if vocab is None:
                    raise ValueError(f"relation name {r!r} needs a vocabulary")
                r = vocab.relation_id(r)
            edges.append(Edge(int(rec["src"]), int(rec["dst"]), int(r)))
        return cls(tuple(nodes), tuple(edges))


def validate_query(q):
    """Raise :class:`InvalidQueryError` listing every invariant violation."""
    problems = []
    ids = [n.id for n in q.nodes]
    seen = set()
    for i in ids:
        if i in seen:
            problems.append(f"duplicate node id {i}")
        seen.add(i)
    if sorted(seen) != list(range(1, len(seen) + 1)):
        problems.append(f"node ids must be contiguous 1..N, got {sorted(seen)}")
    triples = set()
    for e in q.edges:
        for end in (e.src, e.dst):
            if end not in seen:
                problems.append(f"edge ({e.src},{e.dst},{e.rel}) has dangling endpoint {end}")
        if e.src == e.dst:
            problems.append(f"edge ({e.src},{e.dst},{e.rel}) is a self-loop")
        key = (e.src, e.dst, e.rel)
        if key in triples:
            problems.append(f"duplicate edge {key}")
        triples.add(key)
    if problems:
        raise InvalidQueryError(problems)


@dataclass(frozen=True)
class Vocabulary:
    objects: tuple
    relations: tuple

    def object_id(self, name):
        try:
            return self.objects.index(name)
        except ValueError:
            raise KeyError(f"unknown object category {name!r}") from None

    def relation_id(self, name):
        try:
            return self.relations.index(name)
        except ValueError:
            raise KeyError(f"unknown relation {name!r}") from None

    def to_dict(self):
        return {"objects": list(self.objects), "relations": list(self.relations)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["objects"]), tuple(d["relations"]))

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=1)
            fh.write("\n")


@dataclass(frozen=True, eq=False)
class CandidateSet:
    """Candidate boxes ``(cx, cy, w, h)`` in normalized coordinates plus features."""

    boxes: np.ndarray
    features: np.ndarray

    def __post_init__(self):
        boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, 4)
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2 or feats.shape[0] != boxes.shape[0]:
            raise ValueError("need exactly one feature vector per box")
        if not np.all(np.isfinite(feats)) or not np.all(np.isfinite(boxes)):
            raise ValueError("boxes and features must be finite")
        if np.any(boxes[:, :2] < 0) or np.any(boxes[:, :2] > 1):
            raise ValueError("box centers must lie in [0, 1]")
        if np.any(boxes[:, 2:] <= 0):
            raise ValueError("box widths and heights must be positive")
        object.__setattr__(self, "boxes", boxes)
        object.__setattr__(self, "features", feats)

    @property
    def n_boxes(self):
        return self.boxes.shape[0]

    def to_dict(self):
        return {"boxes": self.boxes.tolist(), "features": self.features.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["boxes"], dtype=np.float64), np.array(d["features"], dtype=np.float64))


@dataclass
class PairwiseFactor:
    src: int
    dst: int
    rel: int
    energy: Tensor  # rows index the src box, columns the dst box


@dataclass
class SceneMRF:
    """Variables (one per query node over ``n_boxes`` states) and energy factors."""

    n_boxes: int
    node_ids: list
    unary: dict  # node id -> Tensor (n_boxes,)
    pairwise: list = field(default_factory=list)
    generic: frozenset = frozenset()

    @property
    def n_nodes(self):
        return len(self.node_ids)

    def neighbors(self):
        adj = {i: [] for i in self.node_ids}
        for idx, f in enumerate(self.pairwise):
            adj[f.src].append((idx, f.dst))
            adj[f.dst].append((idx, f.src))
        return adj

    def components(self):
        adj = self.neighbors()
        seen, comps = set(), []
        for start in self.node_ids:
            if start in seen:
                continue
            comp, stack = [], [start]
            seen.add(start)
            while stack:
                u = stack.pop()
                comp.append(u)
                for _, v in adj[u]:
                    if v not in seen:
                        seen.add(v)
                        stack.append(v)
            comps.append(sorted(comp))
        return comps

    def is_tree(self):
        return len(self.pairwise) == self.n_nodes - 1 and len(self.components()) == 1

    def is_forest(self):
        return len(self.pairwise) == self.n_nodes - len(self.components())

    def subgraph(self, node_ids):
        keep = set(node_ids)
        return SceneMRF(
            self.n_boxes,
            [i for i in self.node_ids if i in keep],
            {i: self.unary[i] for i in self.node_ids if i in keep},
            [f for f in self.pairwise if f.src in keep and f.dst in keep],
            frozenset(i for i in self.generic if i in keep),
        )

    def without_edges(self):
        return SceneMRF(self.n_boxes, list(self.node_ids), dict(self.unary), [], self.generic)

    def unary_array(self, node_id):
        return self.unary[node_id].data

    def detached(self):
        """Copy holding plain (tape-free) tensors."""
        return SceneMRF(
            self.n_boxes,
            list(self.node_ids),
            {i: Tensor(t.data) for i, t in self.unary.items()},
            [PairwiseFactor(f.src, f.dst, f.rel, Tensor(f.energy.data)) for f in self.pairwise],
            self.generic,
        )


def _tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def build_scene_mrf(q, unary, pairwise):
    """Materialize the Scene-MRF of ``q`` from energy tables.

    ``unary`` is ``n_boxes x n_categories``; ``pairwise`` is
    ``n_boxes x n_boxes x n_relations`` with axis 0 indexing the edge's
    source node. Either may live on a tape; slices stay differentiable.
    """
    validate_query(q)
    unary, pairwise = _tensor(unary), _tensor(pairwise)
    if unary.ndim != 2:
        raise ValueError("unary table must be n_boxes x n_categories")
    n_boxes, n_cat = unary.shape
    if pairwise.ndim != 3 or pairwise.shape[:2] != (n_boxes, n_boxes):
        raise ValueError(f"pairwise table must be {n_boxes} x {n_boxes} x n_relations, got {pairwise.shape}")
    n_rel = pairwise.shape[2]

    factors = {}
    generic = set()
    for n in q.nodes:
        if n.generic:
            factors[n.id] = Tensor(np.zeros(n_boxes))
            generic.add(n.id)
            continue
        if not 0 <= n.category < n_cat:
            raise IndexError(f"node {n.id}: category {n.category} outside vocabulary of {n_cat}")
        factors[n.id] = reshape(gather(unary, 1, [n.category]), (n_boxes,))

    slices = {}
    pair = []
    for e in q.edges:
        if not 0 <= e.rel < n_rel:
            raise IndexError(f"edge ({e.src},{e.dst}): relation {e.rel} outside vocabulary of {n_rel}")
        if e.rel not in slices:
            slices[e.rel] = reshape(gather(pairwise, 2, [e.rel]), (n_boxes, n_boxes))
        pair.append(PairwiseFactor(e.src, e.dst, e.rel, slices[e.rel]))
    return SceneMRF(n_boxes, [n.id for n in q.nodes], factors, pair, frozenset(generic))


def mrf_from_arrays(node_ids, unary, pairwise, generic=()):
    """Direct constructor from ``{id: vector}`` and ``[(j, k, matrix)]`` arrays."""
    node_ids = list(node_ids)
    n_boxes = np.shape(_tensor(next(iter(unary.values()))).data)[0] if unary else np.shape(_tensor(pairwise[0][2]).data)[0]
    un = {}
    for i in node_ids:
        if i in unary and i not in generic:
            un[i] = _tensor(unary[i])
        else:
            un[i] = Tensor(np.zeros(n_boxes))
    pair = [PairwiseFactor(j, k, r, _tensor(m)) for r, (j, k, m) in enumerate(pairwise)]
    return SceneMRF(n_boxes, node_ids, un, pair, frozenset(generic))


def check_assignment(m, a):
    missing = [i for i in m.node_ids if i not in a]
    if missing:
        raise ValueError(f"assignment is missing nodes {missing}")
    for i in m.node_ids:
        if not 0 <= a[i] < m.n_boxes:
            raise IndexError(f"node {i}: box {a[i]} outside 0..{m.n_boxes - 1}")


def energy_of_assignment(m, a):
    """Unnormalized energy: selected unary entries plus selected pairwise entries."""
    check_assignment(m, a)
    total = 0.0
    for i in m.node_ids:
        total += float(m.unary[i].data[a[i]])
    for f in m.pairwise:
        total += float(f.energy.data[a[f.src], a[f.dst]])
    return total


def random_scene_mrf(q, n_boxes, rng, low=-3.0, high=3.0):
    """Scene-MRF over ``q`` with i.i.d. uniform energies; used by oracle suites."""
    unary = {n.id: rng.uniform(low, high, n_boxes) for n in q.nodes if not n.generic}
    pair = [(e.src, e.dst, rng.uniform(low, high, (n_boxes, n_boxes))) for e in q.edges]
    m = mrf_from_arrays(q.node_ids, unary, pair, generic={n.id for n in q.nodes if n.generic})
    for f, e in zip(m.pairwise, q.edges):
        f.rel = e.rel
    return m
