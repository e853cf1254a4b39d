"""The jitted kernels and their numpy fallbacks must agree."""

import numpy as np
import pytest

from vopt import _kernels
from vopt.european import PayoffSpec, ReducedHazard, penalized_european, penalized_ladder
from vopt.filtration import StoppingTime, _enumerate_stop_nodes, build_tree
from vopt.instances import random_delta_hazard, random_payoff, random_tree


def _game_arrays(rng):
    tree = build_tree({"times": [0, 1, 2, 3], "branching": 2, "p": "uniform"})
    payoff = random_payoff(rng, tree, r_dominates=True)
    hz = random_delta_hazard(rng, tree)
    sig = _enumerate_stop_nodes(tree, np.ones(tree.n_nodes, dtype=bool), 10 ** 6)
    tau = _enumerate_stop_nodes(tree, hz.support_mask()
                                | StoppingTime.horizon(tree).stop, 10 ** 6)
    lvl = tree.level_of
    upper = np.maximum(payoff.P.values, payoff.R.values)
    upper[tree.level_slice(3)] = payoff.P.values[tree.level_slice(3)]
    return (lvl[sig].astype(np.int64), lvl[tau].astype(np.int64),
            payoff.P.values[sig], upper[tau], tree.node_q[tree.leaves])


def test_game_saddle_backends_agree():
    rng = np.random.default_rng(80)
    args = _game_arrays(rng)
    supinf_np, infsup_np, i_np, j_np = _kernels.game_saddle_numpy(*args)
    supinf, infsup, i, j = _kernels.game_saddle(*args)
    assert supinf == pytest.approx(supinf_np, abs=1e-12)
    assert infsup == pytest.approx(infsup_np, abs=1e-12)
    assert supinf <= infsup + 1e-12


def test_penalized_ladder_backends_agree():
    rng = np.random.default_rng(81)
    tree = random_tree(rng)
    payoff = random_payoff(rng, tree)
    hz = random_delta_hazard(rng, tree)
    ns = np.array([1.0, 8.0, 512.0])
    term = payoff.P.values[tree.level_slice(tree.n_periods)]
    a = _kernels.penalized_ladder_numpy(ns, tree.level_start.astype(np.int64),
                                        tree.first_child.astype(np.int64),
                                        tree.q_edge, hz.delta, payoff.R.values, term, 1)
    b = _kernels.penalized_ladder(ns, tree, hz.delta, payoff.R.values, term, 1)
    assert np.max(np.abs(a - b)) <= 1e-12
    for i, n in enumerate(ns):
        ref = penalized_european(float(n), payoff, hz, tree).value.values
        assert np.max(np.abs(a[i] - ref)) <= 1e-12


def test_lower_sign_ladder():
    rng = np.random.default_rng(82)
    tree = random_tree(rng)
    payoff = random_payoff(rng, tree)
    hz = random_delta_hazard(rng, tree)
    mat = penalized_ladder([4.0], payoff, hz, tree, sign=-1)
    # the unreflected lower scheme equals the penalty_down implicit step
    from vopt.american import reflected_gbsde_solve
    from vopt.filtration import AdaptedProcess
    rep = reflected_gbsde_solve("penalty_down", 4.0, payoff, hz, tree,
                                obstacle=AdaptedProcess.constant(tree, -1e9))
    assert np.max(np.abs(mat[0] - rep.value.values)) <= 1e-12


def test_stopped_values_backends():
    rng = np.random.default_rng(83)
    reward = rng.uniform(0, 3, (50, 16))
    w = rng.uniform(0, 1, 16)
    w /= w.sum()
    a = _kernels.stopped_values_numpy(reward, w)
    b = _kernels.stopped_values(reward, w)
    assert np.max(np.abs(a - b)) <= 1e-12


def test_benchmark_runs():
    from vopt.benchmark import main
    assert main() == 0
