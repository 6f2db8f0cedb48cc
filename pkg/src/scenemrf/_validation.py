"""Input checks shared by the estimator and the CLI."""

from __future__ import annotations

import logging

from .graph import InvalidQueryError, validate_query

log = logging.getLogger(__name__)


def item_problems(item):
    """List of reasons ``item`` cannot be used for training or scoring."""
    problems = []
    try:
        validate_query(item.query)
    except InvalidQueryError as exc:
        problems.extend(exc.problems)
    nb = item.candidates.n_boxes
    for node in item.query.node_ids:
        if node not in item.gt:
            problems.append(f"no ground truth for node {node}")
        elif not 0 <= item.gt[node] < nb:
            problems.append(f"ground-truth box {item.gt[node]} for node {node} outside 0..{nb - 1}")
        if node not in item.gt_boxes:
            problems.append(f"no true box for node {node}")
    return problems


def check_items(items, skip_invalid=False):
    """Return usable items; raise on the first bad one unless ``skip_invalid``.

    Skipped items are counted in the log.
    """
    items = list(items)
    if not items:
        raise ValueError("no items given")
    good, skipped = [], 0
    for item in items:
        problems = item_problems(item)
        if problems:
            if not skip_invalid:
                raise ValueError(f"item {item.item_id}: {'; '.join(problems)}")
            skipped += 1
            continue
        good.append(item)
    if skipped:
        log.warning("skipped %d infeasible items", skipped)
    if not good:
        raise ValueError("every item was infeasible")
    dims = {it.candidates.features.shape[1] for it in good}
    if len(dims) != 1:
        raise ValueError(f"candidate feature dimensions differ across items: {sorted(dims)}")
    return good
