import itertools

import numpy as np
import pytest

from scenemrf import autodiff as ad
from scenemrf.autodiff import Tape, logsumexp_array
from scenemrf.bp import (
    NotATreeError,
    bp_schedule,
    forest_nll,
    infer_marginals,
    log_partition,
    loopy_bp,
    nll_of_assignment,
    run_bp,
)
from scenemrf.graph import Edge, Node, QueryGraph, energy_of_assignment, mrf_from_arrays, random_scene_mrf
from scenemrf.map_inference import brute_force_marginals

from conftest import chain, cycle, random_tree_mrf


def softmax_neg(u):
    return np.exp(-u - logsumexp_array(-u))


def test_single_variable_uniform():
    m = mrf_from_arrays([1], {1: np.zeros(4)}, [])
    res = run_bp(m)
    assert np.allclose(res.marginals[1], 0.25)
    assert np.isclose(res.log_partition.item(), np.log(4))
    assert len(bp_schedule(m)) == 1


def test_independent_pair():
    u, v = np.array([0.5, -1.0, 2.0]), np.array([1.0, 0.0, -0.3])
    m = mrf_from_arrays([1, 2], {1: u, 2: v}, [(1, 2, np.zeros((3, 3)))])
    res = run_bp(m)
    assert np.allclose(res.marginals[1], softmax_neg(u), atol=1e-12)
    assert np.allclose(res.marginals[2], softmax_neg(v), atol=1e-12)
    assert np.isclose(res.log_partition.item(), logsumexp_array(-u) + logsumexp_array(-v))


def test_chain_message_order_rooted_at_last_node():
    # node 2 carries the only unary; nodes 1 and 3 are generic
    m = mrf_from_arrays(
        [1, 2, 3],
        {1: np.zeros(4), 2: np.arange(4.0), 3: np.zeros(4)},
        [(1, 2, np.ones((4, 4))), (2, 3, np.ones((4, 4)))],
        generic={1, 3},
    )
    order = [(s, t) for s, t in ((msg.source, msg.target) for msg in bp_schedule(m, root=3))][:5]
    assert order == [
        (("v", 1), ("p", 0)),
        (("p", 0), ("v", 2)),
        (("u", 2), ("v", 2)),
        (("v", 2), ("p", 1)),
        (("p", 1), ("v", 3)),
    ]


def test_star_leaf_messages_precede_hub_outgoing():
    rng = np.random.default_rng(0)
    q = QueryGraph([Node(i, 0) for i in range(1, 6)], [Edge(1, k, 0) for k in range(2, 6)])
    m = random_scene_mrf(q, 3, rng)
    sched = bp_schedule(m, root=1)
    pos = {(msg.source, msg.target): n for n, msg in enumerate(sched)}
    into_hub = [n for (s, t), n in pos.items() if t == ("v", 1)]
    out_of_hub = [n for (s, t), n in pos.items() if s == ("v", 1)]
    assert max(into_hub) < min(out_of_hub)


def test_schedule_dependencies_precede_each_message():
    rng = np.random.default_rng(1)
    for _ in range(30):
        m = random_tree_mrf(rng)
        sched = [(msg.source, msg.target) for msg in bp_schedule(m)]
        assert len(set(sched)) == len(sched)
        seen = set()
        for src, dst in sched:
            if src[0] == "v":
                needed = {(s, t) for s, t in sched if t == src and s != dst}
            elif src[0] == "p":
                f = m.pairwise[src[1]]
                other = f.src if dst[1] == f.dst else f.dst
                needed = {(("v", other), src)}
            else:
                needed = set()
            assert needed <= seen
            seen.add((src, dst))


def test_cycle_and_disconnected_rejected():
    rng = np.random.default_rng(2)
    with pytest.raises(NotATreeError):
        run_bp(random_scene_mrf(cycle(3), 3, rng))
    q = QueryGraph([Node(1, 0), Node(2, 0)])
    with pytest.raises(NotATreeError):
        bp_schedule(random_scene_mrf(q, 3, rng))


def test_random_tree_matches_enumeration():
    rng = np.random.default_rng(3)
    q = QueryGraph([Node(i, 0) for i in range(1, 6)],
                   [Edge(1, 2, 0), Edge(3, 2, 0), Edge(2, 4, 0), Edge(4, 5, 0)])
    m = random_scene_mrf(q, 6, rng)
    res, ref = run_bp(m), brute_force_marginals(m)
    assert abs(res.log_partition.item() - ref.log_partition.item()) < 1e-9
    for i in m.node_ids:
        assert np.max(np.abs(np.log(res.marginals[i]) - np.log(ref.marginals[i]))) < 1e-9
        assert abs(res.marginals[i].sum() - 1) < 1e-9


def test_log_partition_zero_energy_and_root_invariance():
    m = random_scene_mrf(chain(4), 5, np.random.default_rng(0), 0.0, 0.0)
    assert np.isclose(log_partition(m).item(), 4 * np.log(5))
    m = random_tree_mrf(np.random.default_rng(4), max_nodes=6)
    zs = [log_partition(m, root=r).item() for r in m.node_ids]
    assert max(zs) - min(zs) <= 1e-12


def test_log_z_gradient_is_negative_marginal():
    rng = np.random.default_rng(5)
    tape = Tape()
    un = {i: tape.watch(rng.uniform(-3, 3, 4)) for i in (1, 2, 3)}
    pw = [(1, 2, tape.watch(rng.uniform(-3, 3, (4, 4)))), (2, 3, tape.watch(rng.uniform(-3, 3, (4, 4))))]
    m = mrf_from_arrays([1, 2, 3], un, pw)
    grads = ad.backward(log_partition(m))
    res = run_bp(m.detached())
    for i in (1, 2, 3):
        assert np.max(np.abs(grads[un[i].node_id].data + res.marginals[i])) < 1e-9


def test_nll_zero_energy_and_probability():
    m = random_scene_mrf(chain(3), 4, np.random.default_rng(0), 0.0, 0.0)
    assert np.isclose(nll_of_assignment(m, {1: 0, 2: 3, 3: 1}).item(), 3 * np.log(4))
    rng = np.random.default_rng(6)
    for _ in range(20):
        m = random_tree_mrf(rng, max_nodes=4, max_boxes=4)
        joint = brute_force_marginals(m)
        log_z = joint.log_partition.item()
        for a in itertools.islice(itertools.product(range(m.n_boxes), repeat=m.n_nodes), 10):
            a = dict(zip(m.node_ids, a))
            nll = nll_of_assignment(m, a).item()
            assert nll >= -1e-12
            assert abs(np.exp(-nll) - np.exp(-energy_of_assignment(m, a) - log_z)) < 1e-9


def test_nll_gradient_identity():
    rng = np.random.default_rng(7)
    tape = Tape()
    un = {i: tape.watch(rng.uniform(-3, 3, 3)) for i in (1, 2)}
    e = tape.watch(rng.uniform(-3, 3, (3, 3)))
    m = mrf_from_arrays([1, 2], un, [(1, 2, e)])
    a = {1: 2, 2: 0}
    grads = ad.backward(nll_of_assignment(m, a))
    ref = brute_force_marginals(m.detached())
    g1 = grads[un[1].node_id].data
    assert np.allclose(g1, np.eye(3)[2] - ref.marginals[1], atol=1e-9)
    joint = np.exp(-(un[1].data[:, None] + un[2].data[None, :] + e.data) - ref.log_partition.item())
    ind = np.zeros((3, 3))
    ind[2, 0] = 1
    assert np.allclose(grads[e.node_id].data, ind - joint, atol=1e-9)


def test_marginals_invariant_to_unary_shift():
    rng = np.random.default_rng(8)
    m = random_tree_mrf(rng, max_nodes=5)
    base = run_bp(m).marginals
    node = m.node_ids[0]
    shifted = {i: t.data + (7.5 if i == node else 0.0) for i, t in m.unary.items()}
    m2 = mrf_from_arrays(m.node_ids, shifted, [(f.src, f.dst, f.energy.data) for f in m.pairwise])
    for i in m.node_ids:
        assert np.max(np.abs(run_bp(m2).marginals[i] - base[i])) < 1e-9


def test_loopy_matches_exact_on_trees():
    rng = np.random.default_rng(9)
    for _ in range(20):
        m = random_tree_mrf(rng)
        exact, loopy = run_bp(m), loopy_bp(m, max_iters=200)
        assert loopy.converged
        for i in m.node_ids:
            assert np.max(np.abs(loopy.marginals[i] - exact.marginals[i])) < 1e-6
        assert abs(loopy.log_partition.item() - exact.log_partition.item()) < 1e-5


def test_loopy_vacuous_cycle():
    u = {i: np.random.default_rng(i).normal(size=4) for i in (1, 2, 3)}
    m = mrf_from_arrays([1, 2, 3], u, [(1, 2, np.zeros((4, 4))), (2, 3, np.zeros((4, 4))), (3, 1, np.zeros((4, 4)))])
    res = loopy_bp(m)
    for i in (1, 2, 3):
        assert np.allclose(res.marginals[i], softmax_neg(u[i]), atol=1e-9)


def test_loopy_argmax_on_triangles():
    agree = 0
    tv = []
    for seed in range(100):
        m = random_scene_mrf(cycle(3), 4, np.random.default_rng(seed))
        res, ref = loopy_bp(m), brute_force_marginals(m)
        ok = all(np.argmax(res.marginals[i]) == np.argmax(ref.marginals[i]) for i in m.node_ids)
        agree += ok
        tv.append(max(0.5 * np.abs(res.marginals[i] - ref.marginals[i]).sum() for i in m.node_ids))
    assert agree >= 90
    assert np.mean(tv) < 0.2


def test_loopy_reports_non_convergence():
    m = random_scene_mrf(cycle(4), 5, np.random.default_rng(0), -8.0, 8.0)
    res = loopy_bp(m, max_iters=1, damping=0.0, tol=0.0)
    assert not res.converged
    assert res.iterations == 1
    with pytest.raises(ValueError):
        loopy_bp(m, damping=1.0)


def test_forest_and_infer_marginals_route_per_component():
    rng = np.random.default_rng(10)
    q = QueryGraph([Node(i, 0) for i in range(1, 5)], [Edge(1, 2, 0)])
    m = random_scene_mrf(q, 3, rng)
    ref = brute_force_marginals(m)
    res = infer_marginals(m)
    for i in m.node_ids:
        assert np.allclose(res.marginals[i], ref.marginals[i], atol=1e-12)
    assert abs(res.log_partition.item() - ref.log_partition.item()) < 1e-9
    a = {1: 0, 2: 1, 3: 2, 4: 0}
    assert np.isclose(forest_nll(m, a).item(), energy_of_assignment(m, a) + ref.log_partition.item())
