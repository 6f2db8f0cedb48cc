"""Synthetic grounding world: scenes of boxes, detector-like candidates and
query graphs with ground-truth assignments.

Scenes repeat every sampled category several times so a node's category
alone cannot pick its box. Candidate features carry a category label that
is wrong with probability ``label_noise`` plus the exact box geometry, so
relations (which are pure geometry) are the clean signal.

Boxes are ``(cx, cy, w, h)`` in normalized image coordinates with y
growing downwards.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, fields

import numpy as np

from .graph import CandidateSet, Edge, Node, QueryGraph, Vocabulary

RELATIONS = ("left of", "above", "on", "inside", "near", "overlaps")
CATEGORIES = ("cup", "table", "chair", "lamp", "book", "plant", "bottle", "bag")


class PlacementError(RuntimeError):
    pass


class QueryUnavailable(RuntimeError):
    pass


@dataclass(frozen=True)
class WorldConfig:
    min_objects: int = 6
    max_objects: int = 10
    n_categories: int = 8
    distractors: int = 2  # copies per sampled category
    min_size: float = 0.08
    max_size: float = 0.3
    inside_prob: float = 0.15
    jitter: float = 0.1
    n_spurious: int = 16
    label_noise: float = 0.3
    on_tolerance: float = 0.03
    near_radius: float = 0.08
    shuffle: bool = True
    max_retries: int = 200

    def __post_init__(self):
        if self.min_objects < 1 or self.max_objects < self.min_objects:
            raise ValueError("object count range must satisfy 1 <= min <= max")
        if self.distractors < 1 or self.n_categories < 1 or self.n_spurious < 0:
            raise ValueError("counts must be positive")
        if self.jitter < 0 or not 0 <= self.label_noise <= 1:
            raise ValueError("jitter must be >= 0 and label_noise in [0, 1]")
        if self.n_categories > len(CATEGORIES):
            raise ValueError(f"at most {len(CATEGORIES)} categories are named")

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown world config keys: {', '.join(unknown)}")
        return cls(**d)

    def vocabulary(self):
        return Vocabulary(CATEGORIES[: self.n_categories], RELATIONS)


@dataclass
class Scene:
    categories: list
    boxes: np.ndarray  # (n, 4)
    relations: list  # (j, k, rel) over 0-based object indices
    seed: int = 0

    def to_dict(self):
        return {
            "categories": list(self.categories),
            "boxes": self.boxes.tolist(),
            "relations": [list(r) for r in self.relations],
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            list(d["categories"]),
            np.array(d["boxes"], dtype=np.float64).reshape(-1, 4),
            [tuple(r) for r in d["relations"]],
            d.get("seed", 0),
        )


@dataclass
class GroundingItem:
    candidates: CandidateSet
    query: QueryGraph
    gt: dict  # node id -> candidate index
    gt_boxes: dict  # node id -> true (cx, cy, w, h)
    scene: Scene | None = None
    item_id: int = 0

    @property
    def n_relations(self):
        return len(self.query.edges)

    def to_dict(self):
        return {
            "id": self.item_id,
            "n_rels": self.n_relations,
            "query": self.query.to_dict(),
            "gt": {str(k): int(v) for k, v in sorted(self.gt.items())},
            "gt_boxes": {str(k): list(map(float, v)) for k, v in sorted(self.gt_boxes.items())},
            "candidates": self.candidates.to_dict(),
            "scene": None if self.scene is None else self.scene.to_dict(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            CandidateSet.from_dict(d["candidates"]),
            QueryGraph.from_dict(d["query"]),
            {int(k): int(v) for k, v in d["gt"].items()},
            {int(k): np.asarray(v, dtype=np.float64) for k, v in d["gt_boxes"].items()},
            None if d.get("scene") is None else Scene.from_dict(d["scene"]),
            int(d.get("id", 0)),
        )


# -- geometry -----------------------------------------------------------------


def corners(box):
    cx, cy, w, h = box
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def iou(a, b):
    ax0, ay0, ax1, ay1 = corners(a)
    bx0, by0, bx1, by1 = corners(b)
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return float(inter / union) if union > 0 else 0.0


def _contains(outer, inner):
    ox0, oy0, ox1, oy1 = corners(outer)
    ix0, iy0, ix1, iy1 = corners(inner)
    return ox0 <= ix0 and oy0 <= iy0 and ix1 <= ox1 and iy1 <= oy1


def _gap(a, b):
    ax0, ay0, ax1, ay1 = corners(a)
    bx0, by0, bx1, by1 = corners(b)
    dx = max(0.0, max(ax0, bx0) - min(ax1, bx1))
    dy = max(0.0, max(ay0, by0) - min(ay1, by1))
    return float(np.hypot(dx, dy))


def _intersects(a, b):
    ax0, ay0, ax1, ay1 = corners(a)
    bx0, by0, bx1, by1 = corners(b)
    return min(ax1, bx1) - max(ax0, bx0) > 0 and min(ay1, by1) - max(ay0, by0) > 0


def predicates(a, b, cfg=WorldConfig()):
    """Names of every relation ``a -> b`` that holds."""
    ax0, ay0, ax1, ay1 = corners(a)
    bx0, by0, bx1, by1 = corners(b)
    out = []
    if ax1 < bx0:
        out.append("left of")
    if ay1 < by0:
        out.append("above")
    inside = _contains(b, a)
    h_overlap = min(ax1, bx1) - max(ax0, bx0) > 0
    if h_overlap and abs(ay1 - by0) <= cfg.on_tolerance and a[1] < b[1] and not inside:
        out.append("on")
    if inside:
        out.append("inside")
    touching = _intersects(a, b)
    if not touching and _gap(a, b) <= cfg.near_radius:
        out.append("near")
    if touching and not inside and not _contains(a, b):
        out.append("overlaps")
    return out


def scene_relations(boxes, cfg=WorldConfig()):
    rel_id = {r: i for i, r in enumerate(RELATIONS)}
    out = []
    for j in range(len(boxes)):
        for k in range(len(boxes)):
            if j != k:
                out.extend((j, k, rel_id[r]) for r in predicates(boxes[j], boxes[k], cfg))
    return out


# -- generation -----------------------------------------------------------------


def _random_box(rng, cfg):
    w, h = rng.uniform(cfg.min_size, cfg.max_size, 2)
    cx = rng.uniform(w / 2, 1 - w / 2)
    cy = rng.uniform(h / 2, 1 - h / 2)
    return np.array([cx, cy, w, h])


def generate_scene(cfg, seed):
    """Place objects and emit every relation triple whose predicate holds."""
    rng = np.random.default_rng(seed)
    n_groups = int(rng.integers(
        -(-cfg.min_objects // cfg.distractors), cfg.max_objects // cfg.distractors + 1
    ))
    n_groups = max(1, min(n_groups, cfg.n_categories))
    cats = rng.choice(cfg.n_categories, n_groups, replace=False)
    categories = [int(c) for c in cats for _ in range(cfg.distractors)]
    boxes = []
    for _ in categories:
        for _attempt in range(cfg.max_retries):
            if boxes and rng.random() < cfg.inside_prob:
                host = boxes[int(rng.integers(len(boxes)))]
                frac = rng.uniform(0.3, 0.7, 2)
                w, h = host[2] * frac[0], host[3] * frac[1]
                x0, y0, x1, y1 = corners(host)
                box = np.array([rng.uniform(x0 + w / 2, x1 - w / 2), rng.uniform(y0 + h / 2, y1 - h / 2), w, h])
                break
            box = _random_box(rng, cfg)
            if not any(_contains(b, box) or _contains(box, b) for b in boxes):
                break
        else:
            raise PlacementError("could not place object without unintended containment")
        boxes.append(box)
    boxes = np.array(boxes).reshape(-1, 4)
    return Scene(categories, boxes, scene_relations(boxes, cfg), seed)


def _jittered(box, rng, cfg):
    if cfg.jitter == 0:
        return box.copy()
    for _ in range(cfg.max_retries):
        d = rng.uniform(-cfg.jitter, cfg.jitter, 4)
        cand = np.array([
            box[0] + d[0] * box[2],
            box[1] + d[1] * box[3],
            box[2] * np.exp(d[2]),
            box[3] * np.exp(d[3]),
        ])
        cand[:2] = np.clip(cand[:2], 0.0, 1.0)
        if iou(cand, box) >= 0.55:
            return cand
    return box.copy()


def candidate_boxes(scene, cfg, seed):
    """Detector stand-in: jittered true boxes plus spurious ones.

    Returns the candidate set and a map from object index to candidate
    index.
    """
    rng = np.random.default_rng(seed)
    boxes, labels = [], []
    for cat, box in zip(scene.categories, scene.boxes):
        boxes.append(_jittered(box, rng, cfg))
        labels.append(cat)
    for _ in range(cfg.n_spurious):
        boxes.append(_random_box(rng, cfg))
        labels.append(int(rng.integers(cfg.n_categories)))
    observed = []
    for lab in labels:
        if cfg.n_categories > 1 and rng.random() < cfg.label_noise:
            lab = int((lab + rng.integers(1, cfg.n_categories)) % cfg.n_categories)
        observed.append(lab)
    n = len(boxes)
    order = rng.permutation(n) if cfg.shuffle else np.arange(n)
    boxes = np.array(boxes).reshape(-1, 4)[order]
    onehot = np.zeros((n, cfg.n_categories))
    onehot[np.arange(n), np.array(observed, dtype=int)[order]] = 1.0
    feats = np.concatenate([onehot, boxes], axis=1)
    position = {int(src): dst for dst, src in enumerate(order)}
    gt_map = {i: position[i] for i in range(len(scene.categories))}
    return CandidateSet(boxes, feats), gt_map


def make_query(scene, n_nodes, n_edges, allow_cycles, seed):
    """Sample a connected query of true relation triples.

    Returns ``(query, objects)`` where ``objects[node_id]`` is the scene
    object index of that node.
    """
    if n_edges < n_nodes - 1:
        raise ValueError("a connected query needs at least n_nodes - 1 edges")
    if not allow_cycles and n_edges != n_nodes - 1:
        raise ValueError("without cycles the query must have exactly n_nodes - 1 edges")
    rng = np.random.default_rng(seed)
    by_pair = {}
    for j, k, r in scene.relations:
        by_pair.setdefault((min(j, k), max(j, k)), []).append((j, k, r))
    adj = {i: set() for i in range(len(scene.categories))}
    for a, b in by_pair:
        adj[a].add(b)
        adj[b].add(a)

    starts = list(rng.permutation(len(scene.categories)))
    for start in starts:
        chosen = [int(start)]
        tree_pairs = []
        while len(chosen) < n_nodes:
            frontier = sorted({(u, v) for u in chosen for v in adj[u] if v not in chosen})
            if not frontier:
                break
            u, v = frontier[int(rng.integers(len(frontier)))]
            chosen.append(int(v))
            tree_pairs.append((min(u, v), max(u, v)))
        if len(chosen) < n_nodes:
            continue
        extra = sorted(
            p for p in by_pair if p[0] in chosen and p[1] in chosen and p not in tree_pairs
        )
        need = n_edges - len(tree_pairs)
        if need > len(extra):
            continue
        picked = [extra[i] for i in sorted(rng.choice(len(extra), need, replace=False))] if need else []
        node_of = {obj: pos + 1 for pos, obj in enumerate(chosen)}
        edges = []
        for pair in tree_pairs + picked:
            options = by_pair[pair]
            j, k, r = options[int(rng.integers(len(options)))]
            edges.append(Edge(node_of[j], node_of[k], int(r)))
        nodes = [Node(node_of[o], int(scene.categories[o])) for o in chosen]
        return QueryGraph(tuple(nodes), tuple(edges)), {node_of[o]: o for o in chosen}
    raise QueryUnavailable(f"no connected query with {n_nodes} nodes and {n_edges} edges")


def make_item(cfg, n_rels, cyclic, seed, item_id=0):
    """One grounding item; resamples the scene until the query is available."""
    n_nodes = n_rels if cyclic else n_rels + 1
    for attempt in range(cfg.max_retries):
        ss = np.random.SeedSequence([seed, attempt])
        s_scene, s_cand, s_query = (int(x) for x in ss.generate_state(3))
        scene = generate_scene(cfg, s_scene)
        if len(scene.categories) < n_nodes:
            continue
        try:
            query, objects = make_query(scene, n_nodes, n_rels, cyclic, s_query)
        except QueryUnavailable:
            continue
        cands, gt_map = candidate_boxes(scene, cfg, s_cand)
        gt = {node: gt_map[obj] for node, obj in objects.items()}
        gt_boxes = {node: scene.boxes[obj].copy() for node, obj in objects.items()}
        return GroundingItem(cands, query, gt, gt_boxes, scene, item_id)
    raise QueryUnavailable(f"could not build an item with {n_rels} relations")


@dataclass(frozen=True)
class DatasetConfig:
    n_items: int = 2000
    min_rels: int = 1
    max_rels: int = 5
    cycle_fraction: float = 0.3
    world: WorldConfig = WorldConfig()

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        world = {k[len("world."):]: d.pop(k) for k in list(d) if k.startswith("world.")}
        known = {f.name for f in fields(cls)} - {"world"}
        unknown = sorted(set(d) - known)
        if unknown:
            raise KeyError(f"unknown dataset config keys: {', '.join(unknown)}")
        return cls(world=WorldConfig.from_dict(world), **d)

    def to_dict(self):
        d = {k: v for k, v in asdict(self).items() if k != "world"}
        d.update({f"world.{k}": v for k, v in asdict(self.world).items()})
        return d


def generate_dataset(cfg, seed):
    """Items with uniformly drawn relation counts; a share of them cyclic."""
    items = []
    for t in range(cfg.n_items):
        rng = np.random.default_rng(np.random.SeedSequence([seed, t, 0]))
        n_rels = int(rng.integers(cfg.min_rels, cfg.max_rels + 1))
        cyclic = n_rels >= 3 and rng.random() < cfg.cycle_fraction
        item_seed = int(np.random.SeedSequence([seed, t, 1]).generate_state(1)[0])
        items.append(make_item(cfg.world, n_rels, cyclic, item_seed, t))
    return items


def dumps_item(item):
    return json.dumps(item.to_dict(), separators=(",", ":"), sort_keys=True)


def save_dataset(items, path):
    with open(path, "w") as fh:
        for item in items:
            fh.write(dumps_item(item))
            fh.write("\n")


def load_dataset(path):
    items = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                items.append(GroundingItem.from_dict(json.loads(line)))
            except (ValueError, KeyError) as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from exc
    return items
