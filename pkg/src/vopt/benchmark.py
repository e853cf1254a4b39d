"""Benchmark the jitted kernels against their pure-numpy fallbacks.

Run as ``python -m vopt.benchmark``.  The two paths must produce the same
numbers; the table shows wall times on a brute-force game scan and a
penalized backward ladder.
"""

from __future__ import annotations

import time

import numpy as np

from . import _kernels
from .european import penalized_ladder
from .filtration import StoppingTime, _enumerate_stop_nodes, build_tree
from .instances import random_delta_hazard, random_payoff


def _setup(periods: int = 4):
    tree = build_tree({"times": list(np.linspace(0.0, 1.0, periods + 1)),
                       "branching": 2, "p": "uniform"})
    rng = np.random.default_rng(42)
    payoff = random_payoff(rng, tree, r_dominates=True)
    hz = random_delta_hazard(rng, tree)
    sig_nodes = _enumerate_stop_nodes(tree, np.ones(tree.n_nodes, dtype=bool), 10 ** 7)
    tau_nodes = _enumerate_stop_nodes(
        tree, hz.support_mask() | StoppingTime.horizon(tree).stop, 10 ** 7)
    lvl = tree.level_of
    upper = np.maximum(payoff.P.values, payoff.R.values)
    upper[tree.level_slice(periods)] = payoff.P.values[tree.level_slice(periods)]
    return (tree, payoff, hz,
            lvl[sig_nodes].astype(np.int64), lvl[tau_nodes].astype(np.int64),
            payoff.P.values[sig_nodes], upper[tau_nodes],
            tree.node_q[tree.leaves])


def _time(fn, repeats: int = 3):
    best = np.inf
    out = None
    for _ in range(repeats):
        t0 = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - t0)
    return best, out


def main() -> int:
    tree, payoff, hz, sig_lvl, tau_lvl, pay_sig, pay_tau, w = _setup()
    ns = np.array([2.0 ** k for k in range(0, 21)])
    print(f"kernel backend available: {_kernels.backend()}")
    print(f"game scan: {sig_lvl.shape[0]} x {tau_lvl.shape[0]} stopping-time pairs, "
          f"{sig_lvl.shape[1]} paths")

    t_np, out_np = _time(lambda: _kernels.game_saddle_numpy(
        sig_lvl, tau_lvl, pay_sig, pay_tau, w))
    print(f"  numpy : {t_np * 1e3:9.2f} ms  (supinf {out_np[0]:.12g})")
    if _kernels.HAVE_NUMBA:
        _kernels.game_saddle(sig_lvl, tau_lvl, pay_sig, pay_tau, w)  # compile
        t_nb, out_nb = _time(lambda: _kernels.game_saddle(
            sig_lvl, tau_lvl, pay_sig, pay_tau, w))
        print(f"  numba : {t_nb * 1e3:9.2f} ms  (supinf {out_nb[0]:.12g}, "
              f"speedup x{t_np / t_nb:.1f})")
        assert abs(out_np[0] - out_nb[0]) < 1e-12 and abs(out_np[1] - out_nb[1]) < 1e-12

    print(f"penalized ladder: {ns.size} levels x {tree.n_nodes} nodes")
    args = (ns, tree.level_start.astype(np.int64), tree.first_child.astype(np.int64),
            tree.q_edge, hz.delta, payoff.R.values,
            payoff.P.values[tree.level_slice(tree.n_periods)], 1)
    t_np, out_np = _time(lambda: _kernels.penalized_ladder_numpy(*args))
    print(f"  numpy : {t_np * 1e3:9.2f} ms  (top root {out_np[-1, 0]:.12g})")
    if _kernels.HAVE_NUMBA:
        _kernels.penalized_ladder(ns, tree, hz.delta, payoff.R.values,
                                  payoff.P.values[tree.level_slice(tree.n_periods)], 1)
        t_nb, out_nb = _time(lambda: _kernels.penalized_ladder(
            ns, tree, hz.delta, payoff.R.values,
            payoff.P.values[tree.level_slice(tree.n_periods)], 1))
        print(f"  numba : {t_nb * 1e3:9.2f} ms  (top root {out_nb[-1, 0]:.12g}, "
              f"speedup x{t_np / t_nb:.1f})")
        assert np.allclose(out_np, out_nb, atol=1e-12)
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
