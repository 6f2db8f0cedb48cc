"""Recall@k for node grounding and pair (relationship) grounding."""

from __future__ import annotations

import numpy as np

from .bp import BPResult
from .world import iou

IOU_THRESHOLD = 0.5


def top_k(prob, k):
    """Indices of the ``k`` most probable boxes; equal probabilities keep index order."""
    order = np.argsort(-np.asarray(prob), kind="stable")
    return order[:k]


def _ranked(prediction, node, k):
    if isinstance(prediction, BPResult):
        return top_k(prediction.marginals[node], k)
    if isinstance(prediction, dict) and isinstance(next(iter(prediction.values())), np.ndarray):
        return top_k(prediction[node], k)
    # a single assignment (dict node -> box)
    return [int(prediction[node])]


def node_hits(prediction, item, k, nodes=None):
    """Per-node hit flags: any top-k box with IoU above 0.5 against the true box."""
    if k < 1:
        raise ValueError("k must be at least 1")
    boxes = item.candidates.boxes
    hits = {}
    for node in item.query.node_ids if nodes is None else nodes:
        truth = item.gt_boxes[node]
        hits[node] = any(iou(boxes[b], truth) > IOU_THRESHOLD for b in _ranked(prediction, node, k))
    return hits


def recall_at_k(prediction, item, k, nodes=None):
    """``(hits, recall)`` for one item."""
    hits = node_hits(prediction, item, k, nodes)
    return hits, (sum(hits.values()) / len(hits) if hits else float("nan"))


def pair_hits(prediction, item, k):
    """Per-edge flags: an edge counts only when both endpoints are hits."""
    hits = node_hits(prediction, item, k)
    return [(e.rel, hits[e.src] and hits[e.dst]) for e in item.query.edges]


def pair_recall_at_k(per_item_pair_hits):
    """Aggregate ``(R, mR)`` over a list of :func:`pair_hits` outputs.

    mR averages recall over the relation categories that occur.
    """
    flat = [h for hs in per_item_pair_hits for h in hs]
    if not flat:
        return float("nan"), float("nan")
    recall = sum(ok for _, ok in flat) / len(flat)
    per_rel = {}
    for rel, ok in flat:
        per_rel.setdefault(rel, []).append(ok)
    mean_recall = float(np.mean([np.mean(v) for v in per_rel.values()]))
    return float(recall), mean_recall
