"""Hot numeric kernels: numba-jitted with a pure-numpy fallback.

The jitted path is used by default; set ``VOPT_NO_NUMBA=1`` to force the
numpy implementations (same results, bit for bit).  ``python -m vopt.benchmark``
times the two paths against each other.
"""

from __future__ import annotations

import os

import numpy as np

_DISABLED = os.environ.get("VOPT_NO_NUMBA", "").strip().lower() in ("1", "true", "yes")

try:
    if _DISABLED:
        raise ImportError("numba disabled by VOPT_NO_NUMBA")
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - depends on environment
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(f):
            return f
        if args and callable(args[0]):
            return args[0]
        return wrap


def backend() -> str:
    return "numba" if HAVE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# Zero-sum constrained game: saddle scan over enumerated stopping-time pairs
# --------------------------------------------------------------------------

def game_saddle_numpy(sig_lvl, tau_lvl, pay_sig, pay_tau, w):
    """inf-sup and sup-inf of E[payoff(sigma, tau)] over enumerated pairs.

    sig_lvl/tau_lvl: (nS, P) / (nT, P) stop levels per leaf path.
    pay_sig/pay_tau: payoff collected at the stop node (maximizer's P at sigma,
    minimizer's P-or-R at tau).  w: path probabilities.  Payoff of a pair is
    the tau-payoff on paths where tau <= sigma, else the sigma-payoff.
    """
    n_sig = sig_lvl.shape[0]
    row_min = np.full(n_sig, np.inf)
    col_max = np.empty(tau_lvl.shape[0])
    base = pay_sig * w  # (nS, P)
    for j in range(tau_lvl.shape[0]):
        tau_first = tau_lvl[j] <= sig_lvl  # (nS, P)
        vals = np.where(tau_first, pay_tau[j] * w, base).sum(axis=1)
        col_max[j] = vals.max()
        np.minimum(row_min, vals, out=row_min)
    infsup = float(col_max.min())
    supinf = float(row_min.max())
    return supinf, infsup, int(row_min.argmax()), int(col_max.argmin())


@njit(cache=True)
def _game_saddle_jit(sig_lvl, tau_lvl, pay_sig, pay_tau, w):  # pragma: no cover - jitted
    n_sig, n_paths = sig_lvl.shape
    n_tau = tau_lvl.shape[0]
    row_min = np.full(n_sig, np.inf)
    col_max = np.full(n_tau, -np.inf)
    for j in range(n_tau):
        for i in range(n_sig):
            acc = 0.0
            for p in range(n_paths):
                if tau_lvl[j, p] <= sig_lvl[i, p]:
                    acc += pay_tau[j, p] * w[p]
                else:
                    acc += pay_sig[i, p] * w[p]
            if acc < row_min[i]:
                row_min[i] = acc
            if acc > col_max[j]:
                col_max[j] = acc
    infsup = col_max[0]
    arg_j = 0
    for j in range(1, n_tau):
        if col_max[j] < infsup:
            infsup = col_max[j]
            arg_j = j
    supinf = row_min[0]
    arg_i = 0
    for i in range(1, n_sig):
        if row_min[i] > supinf:
            supinf = row_min[i]
            arg_i = i
    return supinf, infsup, arg_i, arg_j


def game_saddle(sig_lvl, tau_lvl, pay_sig, pay_tau, w):
    if HAVE_NUMBA:
        out = _game_saddle_jit(np.ascontiguousarray(sig_lvl), np.ascontiguousarray(tau_lvl),
                               np.ascontiguousarray(pay_sig), np.ascontiguousarray(pay_tau),
                               np.ascontiguousarray(w))
        return float(out[0]), float(out[1]), int(out[2]), int(out[3])
    return game_saddle_numpy(sig_lvl, tau_lvl, pay_sig, pay_tau, w)


# --------------------------------------------------------------------------
# Penalized backward sweeps over a whole penalty ladder
# --------------------------------------------------------------------------

def penalized_ladder_numpy(ns, level_start, child_off, q_edge, delta, r_vals, terminal, sign):
    """Backward implicit penalized recursion for every penalty level in ``ns``.

    sign=+1: generator n(R - y)^+ (upper scheme), sign=-1: -n(y - R)^+ (lower).
    Returns (len(ns), n_nodes) of value processes.  Flat-array mirror of the
    per-level numpy path in ``european.penalized_european``.
    """
    n_levels = level_start.size - 1
    n_nodes = level_start[-1]
    out = np.empty((ns.size, n_nodes))
    for a, n in enumerate(ns):
        v = out[a]
        v[level_start[n_levels - 1]:] = terminal
        for k in range(n_levels - 2, -1, -1):
            lo, hi = level_start[k], level_start[k + 1]
            nxt = slice(level_start[k + 1], level_start[k + 2])
            w = q_edge[nxt] * v[nxt]
            e = np.add.reduceat(w, child_off[lo:hi] - level_start[k + 1])
            a_pen = n * delta[lo:hi]
            r = r_vals[lo:hi]
            bind = (r > e) if sign > 0 else (r < e)
            v[lo:hi] = np.where(bind, (e + a_pen * r) / (1.0 + a_pen), e)
    return out


@njit(cache=True)
def _penalized_ladder_jit(ns, level_start, child_off, n_children, q_edge, delta,
                          r_vals, terminal, sign):  # pragma: no cover - jitted
    n_levels = level_start.size - 1
    n_nodes = level_start[-1]
    out = np.empty((ns.size, n_nodes))
    for a in range(ns.size):
        n = ns[a]
        for i in range(terminal.size):
            out[a, level_start[n_levels - 1] + i] = terminal[i]
        for k in range(n_levels - 2, -1, -1):
            for v in range(level_start[k], level_start[k + 1]):
                e = 0.0
                for c in range(child_off[v], child_off[v] + n_children[v]):
                    e += q_edge[c] * out[a, c]
                a_pen = n * delta[v]
                r = r_vals[v]
                bind = (r > e) if sign > 0 else (r < e)
                if bind:
                    out[a, v] = (e + a_pen * r) / (1.0 + a_pen)
                else:
                    out[a, v] = e
    return out


def penalized_ladder(ns, tree, delta, r_vals, terminal, sign=1):
    ns = np.asarray(ns, dtype=np.float64)
    if HAVE_NUMBA:
        return _penalized_ladder_jit(ns, tree.level_start.astype(np.int64),
                                     tree.first_child.astype(np.int64),
                                     tree.n_children.astype(np.int64),
                                     tree.q_edge, delta, r_vals,
                                     np.ascontiguousarray(terminal, dtype=np.float64),
                                     1 if sign > 0 else -1)
    return penalized_ladder_numpy(ns, tree.level_start.astype(np.int64),
                                  tree.first_child.astype(np.int64), tree.q_edge,
                                  delta, r_vals,
                                  np.asarray(terminal, dtype=np.float64),
                                  1 if sign > 0 else -1)


# --------------------------------------------------------------------------
# Batch evaluation of enumerated stopping times
# --------------------------------------------------------------------------

def stopped_values_numpy(reward_at_stop, w):
    """E[reward at stop] for a batch: (nS, P) rewards times path probs."""
    return reward_at_stop @ w


@njit(cache=True)
def _stopped_values_jit(reward_at_stop, w):  # pragma: no cover - jitted
    n_s, n_p = reward_at_stop.shape
    out = np.empty(n_s)
    for i in range(n_s):
        acc = 0.0
        for p in range(n_p):
            acc += reward_at_stop[i, p] * w[p]
        out[i] = acc
    return out


def stopped_values(reward_at_stop, w):
    if HAVE_NUMBA:
        return _stopped_values_jit(np.ascontiguousarray(reward_at_stop, dtype=np.float64),
                                   np.ascontiguousarray(w, dtype=np.float64))
    return stopped_values_numpy(np.asarray(reward_at_stop, dtype=np.float64),
                                np.asarray(w, dtype=np.float64))
