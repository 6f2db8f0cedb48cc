import numpy as np
import pytest

from scenemrf.bp import NotATreeError
from scenemrf.graph import energy_of_assignment, mrf_from_arrays, random_scene_mrf
from scenemrf.map_inference import (
    InfeasibleConstraint,
    SearchSpaceTooLarge,
    brute_force_map,
    brute_force_marginals,
    constrained_refine_mcmc,
    is_distinct,
    mplp_map,
    project_distinct,
    tree_map,
)

from conftest import chain, cycle, random_tree_mrf


def test_single_variable_argmin():
    m = mrf_from_arrays([1], {1: np.array([3.0, 1.0, 2.0])}, [])
    for solver in (mplp_map, tree_map, brute_force_map):
        res = solver(m)
        assert res.assignment == {1: 1}
        assert res.energy == 1.0


def test_zero_energy_tie_break():
    m = random_scene_mrf(chain(3), 4, np.random.default_rng(0), 0.0, 0.0)
    assert mplp_map(m).assignment == {1: 0, 2: 0, 3: 0}
    assert tree_map(m).assignment == {1: 0, 2: 0, 3: 0}
    assert brute_force_map(m, distinct=True).assignment == {1: 0, 2: 1, 3: 2}


def test_tree_map_forced_pair():
    e = np.zeros((3, 3))
    e[2, 0] = -10.0
    m = mrf_from_arrays([1, 2], {1: np.zeros(3), 2: np.zeros(3)}, [(1, 2, e)])
    res = tree_map(m)
    assert res.assignment == {1: 2, 2: 0}
    assert res.energy == -10.0
    with pytest.raises(NotATreeError):
        tree_map(random_scene_mrf(cycle(3), 3, np.random.default_rng(0)))


def test_tree_solvers_agree_with_enumeration():
    rng = np.random.default_rng(1)
    for _ in range(200):
        m = random_tree_mrf(rng, max_nodes=6, max_boxes=6)
        ref = brute_force_map(m).energy
        assert tree_map(m).energy == ref
        assert mplp_map(m).energy == ref


def test_map_result_energy_is_consistent():
    rng = np.random.default_rng(2)
    m = random_scene_mrf(cycle(4), 4, rng)
    for res in (mplp_map(m), brute_force_map(m)):
        assert res.energy == energy_of_assignment(m, res.assignment)


def test_mplp_dual_bound_monotone_and_valid():
    rng = np.random.default_rng(3)
    for _ in range(30):
        m = random_scene_mrf(cycle(4), 4, rng)
        res = mplp_map(m)
        hist = res.dual_history
        assert all(b >= a - 1e-9 for a, b in zip(hist, hist[1:]))
        assert res.dual_bound <= brute_force_map(m).energy + 1e-9


def test_mcmc_two_nodes_two_boxes():
    v = np.array([0.0, 5.0])
    m = mrf_from_arrays([1, 2], {1: v, 2: v.copy()}, [(1, 2, np.zeros((2, 2)))])
    res = constrained_refine_mcmc(m, {1: 0, 2: 0}, steps=200, seed=0)
    assert res.assignment == {1: 0, 2: 1}
    assert res.energy == 5.0
    assert res.distinct


def test_mcmc_keeps_optimal_init():
    rng = np.random.default_rng(4)
    m = random_scene_mrf(chain(3), 5, rng)
    opt = brute_force_map(m, distinct=True)
    res = constrained_refine_mcmc(m, opt.assignment, steps=500, seed=1)
    assert res.assignment == opt.assignment


def test_mcmc_never_worse_than_projection_and_deterministic():
    rng = np.random.default_rng(5)
    for seed in range(10):
        m = random_scene_mrf(cycle(4), 5, rng)
        init = mplp_map(m).assignment
        proj = project_distinct(m, init)
        assert is_distinct(proj)
        a = constrained_refine_mcmc(m, init, steps=300, seed=seed)
        b = constrained_refine_mcmc(m, init, steps=300, seed=seed)
        assert a.distinct
        assert a.energy <= energy_of_assignment(m, proj)
        assert a.assignment == b.assignment


def test_mcmc_infeasible():
    m = random_scene_mrf(chain(3), 2, np.random.default_rng(0))
    with pytest.raises(InfeasibleConstraint):
        constrained_refine_mcmc(m, {1: 0, 2: 0, 3: 0})


def test_enumeration_guard():
    m = random_scene_mrf(chain(8), 10, np.random.default_rng(0))
    with pytest.raises(SearchSpaceTooLarge):
        brute_force_map(m)


def test_brute_force_marginals_consistency():
    m = random_scene_mrf(chain(3), 4, np.random.default_rng(0), 0.0, 0.0)
    res = brute_force_marginals(m)
    assert np.allclose(res.marginals[2], 0.25)
    assert np.isclose(res.log_partition.item(), 3 * np.log(4))

    from scenemrf.map_inference import brute_force_joint

    m = random_scene_mrf(chain(3), 4, np.random.default_rng(1))
    log_joint, _ = brute_force_joint(m)
    joint = np.exp(log_joint)
    pair = joint.sum(axis=2)
    res = brute_force_marginals(m)
    assert np.max(np.abs(pair.sum(axis=1) - res.marginals[1])) < 1e-12
