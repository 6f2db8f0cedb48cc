"""Brute-force equivalence and identity suites.

Each suite draws its instances from a seeded generator, compares a fast
routine against an exact or analytic reference, and returns a
:class:`SuiteResult`. ``perturb`` adds a constant to the reference values
so the harness itself can be shown to fail.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.stats import spearmanr

from . import autodiff as ad
from .autodiff import Tape
from .bp import nll_of_assignment, run_bp
from .graph import Edge, mrf_from_arrays, random_scene_mrf
from .map_inference import (
    brute_force_joint,
    brute_force_map,
    brute_force_marginals,
    constrained_refine_mcmc,
    mplp_map,
    tree_map,
)
from .posenc import (
    decode_on_grid,
    encode_box,
    encode_boxes,
    expand_encoding,
    low_disc,
    make_frequency_set,
    overlap_score,
    shift_encoding,
)
from .trees import random_tree_query


@dataclass
class SuiteResult:
    name: str
    passed: bool
    trials: int
    failures: int
    max_error: float
    threshold: float
    seconds: float = 0.0
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return (f"{status} {self.name}: trials={self.trials} failures={self.failures} "
                f"max_error={self.max_error:.3e} threshold={self.threshold:g} "
                f"time={self.seconds:.1f}s {self.detail}").rstrip()


def _timed(fn):
    def wrapper(*args, **kwargs):
        start = time.perf_counter()
        res = fn(*args, **kwargs)
        res.seconds = time.perf_counter() - start
        return res

    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


def _random_tree(rng, max_nodes, max_boxes, low=-3.0, high=3.0):
    n = int(rng.integers(1, max_nodes + 1))
    nb = int(rng.integers(1, max_boxes + 1))
    return random_scene_mrf(random_tree_query(n, rng), nb, rng, low, high)


@_timed
def bp_tree_suite(seed=0, trials=500, tol=1e-9, perturb=0.0):
    """Tree BP marginals and log Z against enumeration, in log space."""
    rng = np.random.default_rng(seed)
    worst, failures = 0.0, 0
    for _ in range(trials):
        m = _random_tree(rng, 6, 8)
        res, ref = run_bp(m), brute_force_marginals(m)
        err = abs(res.log_partition.item() - (ref.log_partition.item() + perturb))
        for i in m.node_ids:
            err = max(err, float(np.max(np.abs(np.log(res.marginals[i]) - np.log(ref.marginals[i])))))
        worst = max(worst, err)
        failures += err >= tol
    return SuiteResult("bp_tree", failures == 0, trials, failures, worst, tol)


def _fd_nll(m_arrays, a, which, index, step):
    un, pw = m_arrays
    vals = []
    for sign in (1, -1):
        u2 = {k: v.copy() for k, v in un.items()}
        p2 = [(j, k, e.copy()) for j, k, e in pw]
        target = u2[which[1]] if which[0] == "u" else p2[which[1]][2]
        target[index] += sign * step
        vals.append(nll_of_assignment(mrf_from_arrays(list(un), u2, p2), a).item())
    return (vals[0] - vals[1]) / (2 * step)


@_timed
def nll_gradient_suite(seed=0, trials=100, tol=1e-5, perturb=0.0, step=1e-5):
    """Gradient of the assignment NLL: tape vs (indicator - marginal) vs central differences."""
    rng = np.random.default_rng(seed)
    worst, failures = 0.0, 0
    for _ in range(trials):
        n = int(rng.integers(1, 5))
        nb = int(rng.integers(2, 5))
        q = random_tree_query(n, rng)
        un = {i: rng.uniform(-3, 3, nb) for i in q.node_ids}
        pw = [(e.src, e.dst, rng.uniform(-3, 3, (nb, nb))) for e in q.edges]
        a = {i: int(rng.integers(nb)) for i in q.node_ids}
        tape = Tape()
        t_un = {i: tape.watch(v) for i, v in un.items()}
        t_pw = [(j, k, tape.watch(e)) for j, k, e in pw]
        m = mrf_from_arrays(q.node_ids, t_un, t_pw)
        grads = ad.backward(nll_of_assignment(m, a))

        plain = mrf_from_arrays(q.node_ids, un, pw)
        log_joint, _ = brute_force_joint(plain)
        joint = np.exp(log_joint)
        pos = {i: k for k, i in enumerate(plain.node_ids)}
        err = 0.0
        for i in q.node_ids:
            axes = tuple(d for d in range(n) if d != pos[i])
            marg = joint.sum(axis=axes) if axes else joint
            analytic = np.eye(nb)[a[i]] - marg + perturb
            g = grads[t_un[i].node_id].data
            fd = np.array([_fd_nll((un, pw), a, ("u", i), (b,), step) for b in range(nb)])
            scale = max(1.0, float(np.max(np.abs(analytic))))
            err = max(err, float(np.max(np.abs(g - analytic))) / scale, float(np.max(np.abs(g - fd))) / scale)
        for idx, (j, k, _) in enumerate(pw):
            axes = tuple(d for d in range(n) if d not in (pos[j], pos[k]))
            pair = joint.sum(axis=axes) if axes else joint
            if pos[j] > pos[k]:
                pair = pair.T
            ind = np.zeros((nb, nb))
            ind[a[j], a[k]] = 1.0
            analytic = ind - pair + perturb
            g = grads[t_pw[idx][2].node_id].data
            fd = np.array([[_fd_nll((un, pw), a, ("p", idx), (b, c), step) for c in range(nb)] for b in range(nb)])
            scale = max(1.0, float(np.max(np.abs(analytic))))
            err = max(err, float(np.max(np.abs(g - analytic))) / scale, float(np.max(np.abs(g - fd))) / scale)
        worst = max(worst, err)
        failures += err >= tol
    return SuiteResult("nll_gradient", failures == 0, trials, failures, worst, tol)


@_timed
def map_tree_suite(seed=0, trials=500, perturb=0.0):
    """MPLP, min-sum and enumeration reach the same minimum energy on trees."""
    rng = np.random.default_rng(seed)
    worst, failures = 0.0, 0
    for _ in range(trials):
        m = _random_tree(rng, 6, 6)
        ref = brute_force_map(m).energy + perturb
        energies = (mplp_map(m).energy, tree_map(m).energy)
        err = max(abs(e - ref) for e in energies)
        worst = max(worst, err)
        failures += any(e != ref for e in energies)
    return SuiteResult("map_tree", failures == 0, trials, failures, worst, 0.0)


def random_connected_mrf(rng, n_nodes, n_boxes, extra_edge_prob=0.5):
    """Random tree query, sometimes closed into a cycle by one extra edge."""
    q = random_tree_query(n_nodes, rng)
    if n_nodes >= 3 and rng.random() < extra_edge_prob:
        linked = {frozenset((e.src, e.dst)) for e in q.edges}
        free = [(j, k) for j in q.node_ids for k in q.node_ids if j < k and frozenset((j, k)) not in linked]
        if free:
            j, k = free[int(rng.integers(len(free)))]
            q = q.with_edges(q.edges + (Edge(j, k, int(rng.integers(3))),))
    return random_scene_mrf(q, n_boxes, rng)


@_timed
def mcmc_distinct_suite(seed=0, trials=100, steps=2000, required=0.95, perturb=0.0):
    """Annealed refinement from the MPLP solution vs constrained enumeration."""
    rng = np.random.default_rng(seed)
    matches, worst = 0, 0.0
    for t in range(trials):
        m = random_connected_mrf(rng, 4, 6)
        ref = brute_force_map(m, distinct=True).energy + perturb
        res = constrained_refine_mcmc(m, mplp_map(m).assignment, steps=steps, seed=seed + t)
        gap = res.energy - ref
        worst = max(worst, abs(gap))
        matches += res.distinct and abs(gap) <= 1e-9
    passed = matches >= required * trials
    return SuiteResult("mcmc_distinct", passed, trials, trials - matches, worst, 1e-9,
                       detail=f"matched={matches}/{trials} required={required:.0%}")


@_timed
def posenc_suite(seed=0, n_boxes=1000, n_pairs=200, tol=1e-12, min_rho=0.9, perturb=0.0):
    """Shift and widening identities plus rank agreement of overlap scores with spatial overlap."""
    rng = np.random.default_rng(seed)
    f = make_frequency_set(48, 6, 128, seed)
    boxes = np.c_[rng.uniform(0, 1, (n_boxes, 2)), rng.uniform(0, 0.5, (n_boxes, 2))]
    shifts = rng.uniform(-0.5, 0.5, (n_boxes, 2))
    widen = rng.uniform(0, 0.5, (n_boxes, 2))
    base = encode_boxes(boxes, f)
    moved = encode_boxes(boxes + np.c_[shifts, np.zeros((n_boxes, 2))], f)
    wide = encode_boxes(boxes + np.c_[np.zeros((n_boxes, 2)), widen], f)
    shift_err = max(
        float(np.max(np.abs(shift_encoding(base[k], *shifts[k], f) - moved[k] - perturb))) for k in range(n_boxes)
    )
    env_err = max(
        float(np.max(np.abs(expand_encoding(base[k], *widen[k], f) - wide[k] - perturb))) for k in range(n_boxes)
    )

    full = make_frequency_set(48, 6, len(low_disc(48, 6)), seed)
    axis = np.arange(256) / 128.0  # one full period of the phase lattice
    scores, integrals = [], []
    for _ in range(n_pairs):
        a = np.r_[rng.uniform(0, 1, 2), rng.uniform(0.02, 0.3, 2)]
        b = np.r_[rng.uniform(0, 1, 2), rng.uniform(0.02, 0.3, 2)]
        ea, eb = encode_box(a, full), encode_box(b, full)
        scores.append(overlap_score(ea, eb))
        integrals.append(float(np.mean(decode_on_grid(ea, full, axis, axis) * decode_on_grid(eb, full, axis, axis))))
    rho = float(spearmanr(scores, integrals)[0])
    err = max(shift_err, env_err)
    failures = int(shift_err >= tol) + int(env_err >= tol) + int(rho <= min_rho)
    return SuiteResult("posenc", failures == 0, n_boxes, failures, err, tol,
                       detail=f"shift_err={shift_err:.2e} envelope_err={env_err:.2e} spearman={rho:.4f}")


SUITES = {
    "bp_tree": bp_tree_suite,
    "nll_gradient": nll_gradient_suite,
    "map_tree": map_tree_suite,
    "mcmc_distinct": mcmc_distinct_suite,
    "posenc": posenc_suite,
}


def run_all(seed=0, trials=None, perturb=0.0, names=None):
    """Run the selected suites; ``trials`` caps every suite's instance count."""
    out = []
    for name in names or SUITES:
        kwargs = {"seed": seed, "perturb": perturb}
        if trials is not None:
            kwargs["n_boxes" if name == "posenc" else "trials"] = trials
        out.append(SUITES[name](**kwargs))
    return out


def uniform_loss_gap(items, freqs, seed=0):
    """Largest ``|loss - N ln N_b|`` of the zero-parameter model over ``items``."""
    from .energy import grounding_loss, init_params

    n_obj = 1 + max(n.category for it in items for n in it.query.nodes if not n.generic)
    n_rel = 1 + max((e.rel for it in items for e in it.query.edges), default=0)
    dim = items[0].candidates.features.shape[1] + freqs.dim
    p = init_params(dim, n_obj, n_rel, zero=True)
    gaps = []
    for k, item in enumerate(items):
        loss = grounding_loss(p, item, freqs, seed + k).item()
        gaps.append(abs(loss - item.query.n_nodes * np.log(item.candidates.n_boxes)))
    return max(gaps), gaps


__all__ = [
    "SUITES",
    "SuiteResult",
    "bp_tree_suite",
    "map_tree_suite",
    "mcmc_distinct_suite",
    "nll_gradient_suite",
    "posenc_suite",
    "random_connected_mrf",
    "run_all",
    "uniform_loss_gap",
]
