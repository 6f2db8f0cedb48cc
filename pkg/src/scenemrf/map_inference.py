"""MAP assignment search: MPLP, exact min-sum on trees, annealed MCMC under
the distinct-box constraint, and brute-force oracles.

Everything here works on plain arrays taken from the factor tensors; none
of it is differentiated.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, logsumexp_array
from .bp import BPResult, NotATreeError
from .graph import check_assignment, energy_of_assignment

MAX_ENUMERATION = 10**7


class SearchSpaceTooLarge(ValueError):
    pass


class InfeasibleConstraint(ValueError):
    pass


@dataclass
class MapResult:
    assignment: dict
    energy: float
    dual_bound: float | None = None
    distinct: bool = False
    iterations: int = 0
    dual_history: list = field(default_factory=list)


def is_distinct(a):
    boxes = list(a.values())
    return len(set(boxes)) == len(boxes)


def _result(m, a, **kw):
    a = {i: int(a[i]) for i in m.node_ids}
    return MapResult(a, energy_of_assignment(m, a), distinct=is_distinct(a), **kw)


# -- MPLP ----------------------------------------------------------------------


def _mplp_dual(theta_node, theta_edge, lam, m):
    total = 0.0
    for i in m.node_ids:
        b = theta_node[i].copy()
        for idx, f in enumerate(m.pairwise):
            if f.src == i:
                b += lam[idx][0]
            if f.dst == i:
                b += lam[idx][1]
        total += float(b.max())
    for idx, th in enumerate(theta_edge):
        total += float((th - lam[idx][0][:, None] - lam[idx][1][None, :]).max())
    return total


def mplp_map(m, max_iters=200, tol=1e-7):
    """Edge-block MPLP on the dual of the pairwise LP relaxation.

    Works in max-product form with potentials ``-energy``. The returned
    ``dual_bound`` is a lower bound on the minimum energy and
    ``dual_history`` holds it after every sweep.
    """
    nb = m.n_boxes
    theta_node = {i: -m.unary[i].data for i in m.node_ids}
    theta_edge = [-f.energy.data for f in m.pairwise]
    lam = [[np.zeros(nb), np.zeros(nb)] for _ in m.pairwise]
    belief = {i: theta_node[i].copy() for i in m.node_ids}

    history = [-_mplp_dual(theta_node, theta_edge, lam, m)]
    iters = 0
    for iters in range(1, max_iters + 1 if m.pairwise else 1):
        for idx, f in enumerate(m.pairwise):
            th = theta_edge[idx]
            bj = belief[f.src] - lam[idx][0]
            bk = belief[f.dst] - lam[idx][1]
            new_j = -0.5 * bj + 0.5 * np.max(th + bk[None, :], axis=1)
            new_k = -0.5 * bk + 0.5 * np.max(th + bj[:, None], axis=0)
            belief[f.src] = bj + new_j
            belief[f.dst] = bk + new_k
            lam[idx] = [new_j, new_k]
        history.append(-_mplp_dual(theta_node, theta_edge, lam, m))
        if history[-1] - history[-2] < tol:
            break

    plain = {i: int(np.argmax(belief[i])) for i in m.node_ids}
    best = _result(m, plain)
    # conditional decoding guards against near-ties in the node beliefs
    cond = {}
    for i in m.node_ids:
        score = theta_node[i].copy()
        for idx, f in enumerate(m.pairwise):
            if f.src == i:
                score += theta_edge[idx][:, cond[f.dst]] if f.dst in cond else lam[idx][0]
            elif f.dst == i:
                score += theta_edge[idx][cond[f.src], :] if f.src in cond else lam[idx][1]
        cond[i] = int(np.argmax(score))
    alt = _result(m, cond)
    if alt.energy < best.energy:
        best = alt
    best.dual_bound = history[-1]
    best.iterations = iters
    best.dual_history = history
    return best


# -- exact min-sum on trees --------------------------------------------------


def tree_map(m, root=None):
    """Exact MAP on a tree by min-sum messages and backtracking."""
    if not m.is_tree():
        raise NotATreeError("tree_map needs a connected, acyclic Scene-MRF")
    if root is None:
        root = min(m.node_ids)
    adj = m.neighbors()
    cost = {}
    back = {}  # child -> (parent, argmin table over parent states)
    order = []

    def visit(var, parent_idx):
        order.append(var)
        c = m.unary[var].data.copy()
        for idx, child in adj[var]:
            if idx == parent_idx:
                continue
            visit(child, idx)
            f = m.pairwise[idx]
            # orient as (child state, parent state)
            table = f.energy.data if f.src == child else f.energy.data.T
            total = table + cost[child][:, None]
            back[(child, idx)] = np.argmin(total, axis=0)
            c += total.min(axis=0)
        cost[var] = c

    visit(root, None)
    a = {root: int(np.argmin(cost[root]))}
    stack = [root]
    seen = {root}
    while stack:
        var = stack.pop()
        for idx, child in adj[var]:
            if child in seen:
                continue
            seen.add(child)
            a[child] = int(back[(child, idx)][a[var]])
            stack.append(child)
    return _result(m, a)


# -- constrained refinement --------------------------------------------------


def _local_energy(m, a, node, box, incident):
    e = m.unary[node].data[box]
    for f in incident[node]:
        if f.src == node:
            e += f.energy.data[box, a[f.dst]]
        else:
            e += f.energy.data[a[f.src], box]
    return float(e)


def _incident(m):
    inc = {i: [] for i in m.node_ids}
    for f in m.pairwise:
        inc[f.src].append(f)
        if f.dst != f.src:
            inc[f.dst].append(f)
    return inc


def _move_delta(m, old, new, changed, incident):
    seen = set()
    delta = 0.0
    for node in changed:
        delta += m.unary[node].data[new[node]] - m.unary[node].data[old[node]]
        for f in incident[node]:
            if id(f) in seen:
                continue
            seen.add(id(f))
            delta += f.energy.data[new[f.src], new[f.dst]] - f.energy.data[old[f.src], old[f.dst]]
    return float(delta)


def project_distinct(m, a):
    """Greedy feasibility repair: later duplicates move to their cheapest unused box."""
    a = {i: int(a[i]) for i in m.node_ids}
    incident = _incident(m)
    claimed = set()
    conflicted = []
    for i in m.node_ids:
        if a[i] in claimed:
            conflicted.append(i)
        else:
            claimed.add(a[i])
    for i in conflicted:
        used = {a[j] for j in m.node_ids if j != i}
        free = [b for b in range(m.n_boxes) if b not in used]
        a[i] = min(free, key=lambda b: (_local_energy(m, a, i, b, incident), b))
    return a


def constrained_refine_mcmc(m, init, steps=2000, seed=0, t_start=5.0, t_end=0.01, swap_prob=0.5):
    """Simulated annealing over distinct assignments, started from ``init``.

    Each step proposes either moving one variable to a uniformly chosen
    unused box or, with probability ``swap_prob``, exchanging the boxes of
    two variables; Metropolis acceptance under a geometric temperature
    schedule from ``t_start`` to ``t_end``. The best distinct assignment
    seen is returned; it is never worse than the feasibility-projected
    ``init``.
    """
    if m.n_nodes > m.n_boxes:
        raise InfeasibleConstraint(f"{m.n_nodes} nodes cannot take distinct boxes among {m.n_boxes}")
    check_assignment(m, init)
    rng = np.random.default_rng(seed)
    incident = _incident(m)
    nodes = list(m.node_ids)
    cur = project_distinct(m, init)
    cur_e = energy_of_assignment(m, cur)
    best, best_e = dict(cur), cur_e
    for t in range(steps):
        temp = t_start * (t_end / t_start) ** (t / max(steps - 1, 1))
        if len(nodes) > 1 and rng.random() < swap_prob:
            p, q = rng.choice(len(nodes), 2, replace=False)
            moves = [(nodes[p], cur[nodes[q]]), (nodes[q], cur[nodes[p]])]
        else:
            node = nodes[rng.integers(len(nodes))]
            used = set(cur.values())
            free = [b for b in range(m.n_boxes) if b not in used]
            if not free:
                continue
            moves = [(node, free[rng.integers(len(free))])]
        proposal = dict(cur)
        for node, box in moves:
            proposal[node] = box
        delta = _move_delta(m, cur, proposal, [n for n, _ in moves], incident)
        if delta <= 0 or rng.random() < np.exp(-delta / temp):
            cur = proposal
            cur_e += delta
            if cur_e < best_e:
                exact = energy_of_assignment(m, cur)
                cur_e = exact
                if exact < best_e:
                    best, best_e = dict(cur), exact
    return _result(m, best, iterations=steps)


# -- brute-force oracles -------------------------------------------------------


def _check_guard(m):
    if m.n_boxes ** m.n_nodes > MAX_ENUMERATION:
        raise SearchSpaceTooLarge(f"{m.n_boxes}^{m.n_nodes} assignments exceed the enumeration guard")


def energy_table(m):
    """Energy of every assignment as an array with one axis per node (node order)."""
    _check_guard(m)
    n = m.n_nodes
    pos = {i: k for k, i in enumerate(m.node_ids)}
    table = np.zeros((m.n_boxes,) * n)
    for i in m.node_ids:
        shape = [1] * n
        shape[pos[i]] = m.n_boxes
        table = table + m.unary[i].data.reshape(shape)
    for f in m.pairwise:
        shape = [1] * n
        a, b = pos[f.src], pos[f.dst]
        shape[a] = m.n_boxes
        shape[b] = m.n_boxes
        mat = f.energy.data if a < b else f.energy.data.T
        table = table + mat.reshape(shape)
    return table


def brute_force_map(m, distinct=False):
    """Exact minimum-energy assignment by enumeration; ties go to the
    lexicographically smallest assignment."""
    table = energy_table(m)
    if distinct:
        if m.n_nodes > m.n_boxes:
            raise InfeasibleConstraint("no distinct assignment exists")
        n = m.n_nodes
        grids = [np.arange(m.n_boxes).reshape([-1 if d == k else 1 for d in range(n)]) for k in range(n)]
        table = table.copy()
        for p, q in itertools.combinations(range(n), 2):
            table = np.where(grids[p] == grids[q], np.inf, table)
    flat = int(np.argmin(table))
    idx = np.unravel_index(flat, table.shape)
    a = {i: int(idx[k]) for k, i in enumerate(m.node_ids)}
    return _result(m, a)


def brute_force_joint(m):
    """Normalized log-probability of every assignment and the log partition."""
    logits = -energy_table(m)
    log_z = float(logsumexp_array(logits))
    return logits - log_z, log_z


def brute_force_marginals(m):
    log_joint, log_z = brute_force_joint(m)
    n = m.n_nodes
    marginals = {}
    for k, i in enumerate(m.node_ids):
        axes = tuple(d for d in range(n) if d != k)
        lm = logsumexp_array(log_joint, axis=axes) if axes else log_joint
        marginals[i] = np.exp(lm)
    return BPResult(marginals, Tensor(log_z), True, 0)
