"""Sum-product belief propagation on Scene-MRFs, in the log domain.

Tree-structured graphs get exact two-phase message passing recorded on the
differentiation tape, so ``log_partition`` and ``nll_of_assignment`` can be
backpropagated into the energy tables. Cyclic graphs go through a damped
flooding-schedule loopy BP that runs on plain arrays.

Factor-graph vertices are tagged tuples: ``("v", node_id)`` for variables,
``("u", node_id)`` for a labelled node's unary factor and ``("p", index)``
for the ``index``-th pairwise factor. Unary factors of generic nodes are
identically zero and never appear in a schedule.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, logsumexp_array
from .graph import check_assignment


class NotATreeError(ValueError):
    pass


@dataclass
class Message:
    source: tuple
    target: tuple
    value: Tensor | None = None


@dataclass
class BPResult:
    marginals: dict  # node id -> probability vector
    log_partition: Tensor
    converged: bool = True
    iterations: int = 1
    log_beliefs: dict | None = None  # node id -> unnormalized log marginal (Tensor)


def _require_tree(m):
    if len(m.components()) != 1:
        raise NotATreeError("Scene-MRF is disconnected")
    if not m.is_tree():
        raise NotATreeError("Scene-MRF contains a cycle")


def _adjacent_factors(m):
    """Per variable: pairwise factors in declaration order, then its unary factor."""
    adj = {i: [] for i in m.node_ids}
    for idx, f in enumerate(m.pairwise):
        adj[f.src].append(("p", idx))
        adj[f.dst].append(("p", idx))
    for i in m.node_ids:
        if i not in m.generic:
            adj[i].append(("u", i))
    return adj


def _factor_vars(m, fac):
    if fac[0] == "u":
        return [fac[1]]
    f = m.pairwise[fac[1]]
    return [f.src, f.dst]


def bp_schedule(m, root=None):
    """Two-phase message order for a tree: leaves to root, then back out.

    Messages into unary factors are never needed and are left out.
    """
    collect, distribute = _two_phase(m, root)
    return collect + distribute


def _two_phase(m, root):
    _require_tree(m)
    if root is None:
        root = min(m.node_ids)
    adj = _adjacent_factors(m)
    collect, distribute = [], []

    def up(var, parent_fac):
        for fac in adj[var]:
            if fac == parent_fac:
                continue
            if fac[0] == "p":
                child = next(v for v in _factor_vars(m, fac) if v != var)
                up(child, fac)
            collect.append((fac, ("v", var)))
        if parent_fac is not None:
            collect.append((("v", var), parent_fac))

    def down(var, parent_fac):
        for fac in adj[var]:
            if fac == parent_fac or fac[0] != "p":
                continue
            child = next(v for v in _factor_vars(m, fac) if v != var)
            distribute.append((("v", var), fac))
            distribute.append((fac, ("v", child)))
            down(child, fac)

    up(root, None)
    down(root, None)
    return [Message(s, t) for s, t in collect], [Message(s, t) for s, t in distribute]


def _expand_rows(vec, n_cols):
    # out[a, b] = vec[a]
    n = vec.shape[0]
    return ad.gather(ad.reshape(vec, (n, 1)), 1, np.zeros(n_cols, dtype=np.intp))


def _expand_cols(vec, n_rows):
    # out[a, b] = vec[b]
    n = vec.shape[0]
    return ad.gather(ad.reshape(vec, (1, n)), 0, np.zeros(n_rows, dtype=np.intp))


def _sum(tensors):
    if not tensors:
        return None
    out = tensors[0]
    for t in tensors[1:]:
        out = ad.add(out, t)
    return out


def _pass_messages(m, schedule):
    """Evaluate ``schedule`` in order; returns {(source, target): Tensor}."""
    adj = _adjacent_factors(m)
    nb = m.n_boxes
    msgs = {}
    for msg in schedule:
        src, dst = msg.source, msg.target
        if src[0] == "v":
            var = src[1]
            incoming = [msgs[(fac, src)] for fac in adj[var] if fac != dst]
            value = _sum(incoming)  # None means the all-zero message
        elif src[0] == "u":
            value = ad.neg(m.unary[src[1]])
        else:
            f = m.pairwise[src[1]]
            other = f.src if dst[1] == f.dst else f.dst
            inc = msgs[(("v", other), src)]
            scores = ad.neg(f.energy)
            if dst[1] == f.dst:
                if inc is not None:
                    scores = ad.add(scores, _expand_rows(inc, nb))
                value = ad.reduce_logsumexp(scores, 0)
            else:
                if inc is not None:
                    scores = ad.add(scores, _expand_cols(inc, nb))
                value = ad.reduce_logsumexp(scores, 1)
        msg.value = value
        msgs[(src, dst)] = value
    return msgs


def _belief(m, msgs, var, adj):
    incoming = [msgs[(fac, ("v", var))] for fac in adj[var] if (fac, ("v", var)) in msgs]
    out = _sum(incoming)
    return Tensor(np.zeros(m.n_boxes)) if out is None else out


def run_bp(m, root=None):
    """Exact marginals and log partition function of a tree Scene-MRF."""
    schedule = bp_schedule(m, root)
    if root is None:
        root = min(m.node_ids)
    msgs = _pass_messages(m, schedule)
    adj = _adjacent_factors(m)
    beliefs = {i: _belief(m, msgs, i, adj) for i in m.node_ids}
    log_z = ad.reduce_logsumexp(beliefs[root], 0)
    marginals = {}
    for i, b in beliefs.items():
        marginals[i] = np.exp(b.data - logsumexp_array(b.data))
    return BPResult(marginals, log_z, True, 1, beliefs)


def log_partition(m, root=None):
    """Log partition function of a tree; only the inward pass is evaluated."""
    if root is None:
        root = min(m.node_ids)
    collect, _ = _two_phase(m, root)
    msgs = _pass_messages(m, collect)
    belief = _belief(m, msgs, root, _adjacent_factors(m))
    return ad.reduce_logsumexp(belief, 0)


def _scalar_entry(t, index):
    flat = ad.reshape(t, (-1,))
    return ad.gather(flat, 0, [index])


def nll_of_assignment(m, a, root=None):
    """Differentiable ``-log P(a)`` on a tree: selected energies plus log Z."""
    _require_tree(m)
    check_assignment(m, a)
    terms = [ad.reshape(log_partition(m, root), (1,))]
    nb = m.n_boxes
    for i in m.node_ids:
        if i in m.generic:
            continue
        terms.append(ad.gather(m.unary[i], 0, [a[i]]))
    for f in m.pairwise:
        terms.append(_scalar_entry(f.energy, a[f.src] * nb + a[f.dst]))
    return ad.reshape(_sum(terms), ())


# -- forests and cyclic graphs ------------------------------------------------


def forest_nll(m, a):
    """Sum of per-component ``nll_of_assignment`` for a forest."""
    total = None
    for comp in m.components():
        part = nll_of_assignment(m.subgraph(comp), a)
        total = part if total is None else ad.add(total, part)
    return total


def forest_log_partition(m):
    total = None
    for comp in m.components():
        part = log_partition(m.subgraph(comp))
        total = part if total is None else ad.add(total, part)
    return total


def loopy_bp(m, max_iters=50, damping=0.5, tol=1e-6):
    """Damped flooding sum-product on plain arrays.

    Messages start uniform. ``converged`` is set when the largest message
    change drops below ``tol`` before ``max_iters``. The returned log
    partition is the Bethe estimate, which is exact on trees at the fixed
    point.
    """
    if not 0 <= damping < 1:
        raise ValueError("damping must lie in [0, 1)")
    nb = m.n_boxes
    ids = list(m.node_ids)
    local = {i: -m.unary[i].data for i in ids}
    energies = [f.energy.data for f in m.pairwise]
    to_dst = [np.zeros(nb) for _ in m.pairwise]
    to_src = [np.zeros(nb) for _ in m.pairwise]
    incident = {i: [] for i in ids}
    for idx, f in enumerate(m.pairwise):
        incident[f.src].append((idx, "src"))
        incident[f.dst].append((idx, "dst"))

    def totals():
        tot = {i: local[i].copy() for i in ids}
        for idx, f in enumerate(m.pairwise):
            tot[f.src] += to_src[idx]
            tot[f.dst] += to_dst[idx]
        return tot

    converged = not m.pairwise
    iters = 0
    for iters in range(1, max_iters + 1):
        tot = totals()
        delta = 0.0
        new_dst, new_src = [], []
        for idx, f in enumerate(m.pairwise):
            from_src = tot[f.src] - to_src[idx]
            from_dst = tot[f.dst] - to_dst[idx]
            md = logsumexp_array(from_src[:, None] - energies[idx], axis=0)
            ms = logsumexp_array(from_dst[None, :] - energies[idx], axis=1)
            md -= logsumexp_array(md)
            ms -= logsumexp_array(ms)
            md = damping * to_dst[idx] + (1 - damping) * md
            ms = damping * to_src[idx] + (1 - damping) * ms
            delta = max(delta, np.max(np.abs(md - to_dst[idx])), np.max(np.abs(ms - to_src[idx])))
            new_dst.append(md)
            new_src.append(ms)
        to_dst, to_src = new_dst, new_src
        if delta < tol:
            converged = True
            break
    if not m.pairwise:
        iters = 0

    tot = totals()
    marginals, log_beliefs = {}, {}
    neg_entropy_terms = 0.0
    energy_term = 0.0
    for i in ids:
        lb = tot[i] - logsumexp_array(tot[i])
        b = np.exp(lb)
        marginals[i] = b
        log_beliefs[i] = Tensor(tot[i])
        energy_term += float(np.dot(b, m.unary[i].data))
        degree = len(incident[i])
        neg_entropy_terms += (1 - degree) * float(np.dot(b, lb))
    for idx, f in enumerate(m.pairwise):
        from_src = tot[f.src] - to_src[idx]
        from_dst = tot[f.dst] - to_dst[idx]
        lf = from_src[:, None] + from_dst[None, :] - energies[idx]
        lf = lf - logsumexp_array(lf)
        bf = np.exp(lf)
        energy_term += float(np.sum(bf * energies[idx]))
        neg_entropy_terms += float(np.sum(bf * lf))
    log_z = -energy_term - neg_entropy_terms
    return BPResult(marginals, Tensor(log_z), converged, iters, log_beliefs)


def infer_marginals(m, max_iters=50, damping=0.5, tol=1e-6):
    """Marginals for any Scene-MRF: exact BP per tree component, loopy otherwise."""
    marginals, log_beliefs = {}, {}
    log_z = 0.0
    converged, iters = True, 1
    for comp in m.components():
        sub = m.subgraph(comp)
        if sub.is_tree():
            res = run_bp(sub.detached())
        else:
            res = loopy_bp(sub, max_iters, damping, tol)
            converged = converged and res.converged
            iters = max(iters, res.iterations)
        marginals.update(res.marginals)
        log_beliefs.update(res.log_beliefs)
        log_z += res.log_partition.item()
    return BPResult(marginals, Tensor(log_z), converged, iters, log_beliefs)
