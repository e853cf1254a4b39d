"""Finite filtered probability spaces on event trees.

Everything in this package runs on a :class:`FiniteTree`: a rooted tree whose
level-k nodes are the atoms of F_{t_k}, carrying one-step transition
probabilities under a base measure P and a pricing measure Q.  Conditional
expectations are exact probability-weighted sums over children; nothing is
sampled.  Trees and processes are immutable after construction, so every
operation here is a pure function and safe to call concurrently.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

from .errors import EnumerationCapError, TreeError

DEFAULT_ENUM_CAP = 10_000_000


@dataclass(frozen=True)
class TimeGrid:
    """Strictly increasing grid t_0 = 0 < t_1 < ... < t_N (in years)."""

    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        object.__setattr__(self, "times", t)
        if t.ndim != 1 or t.size < 2:
            raise TreeError("time grid needs at least one period")
        if t[0] != 0.0:
            raise TreeError("time grid must start at t_0 = 0")
        if np.any(np.diff(t) <= 0.0):
            raise TreeError("time grid must be strictly increasing")

    @property
    def steps(self) -> int:
        return self.times.size - 1

    @property
    def horizon(self) -> float:
        return float(self.times[-1])


class FiniteTree:
    """Rooted event tree with per-edge probabilities under P and Q.

    Nodes are global integer ids, contiguous level by level (root = 0).
    Children of a node are contiguous in the next level.  ``p_edge[v]`` /
    ``q_edge[v]`` hold the one-step probability of the edge into node ``v``
    (1.0 at the root).
    """

    def __init__(self, grid: TimeGrid, parent: np.ndarray, first_child: np.ndarray,
                 n_children: np.ndarray, p_edge: np.ndarray, q_edge: np.ndarray,
                 level_start: np.ndarray):
        self.grid = grid
        self.parent = parent
        self.first_child = first_child
        self.n_children = n_children
        self.p_edge = p_edge
        self.q_edge = q_edge
        self.level_start = level_start
        self.n_periods = grid.steps
        self.n_nodes = int(level_start[-1])
        self.level_of = np.repeat(np.arange(self.n_periods + 1),
                                  np.diff(level_start).astype(int))
        # Probability of reaching each node from the root.
        self.node_p = self._path_products(p_edge)
        self.node_q = self._path_products(q_edge)
        self._path_nodes: np.ndarray | None = None
        self._validate()

    # -- construction helpers -------------------------------------------------

    def _path_products(self, edge: np.ndarray) -> np.ndarray:
        out = np.ones(self.n_nodes)
        for k in range(1, self.n_periods + 1):
            sl = self.level_slice(k)
            out[sl] = out[self.parent[sl]] * edge[sl]
        return out

    def _validate(self):
        for name, edge in (("P", self.p_edge), ("Q", self.q_edge)):
            if np.any(edge <= 0.0):
                v = int(np.flatnonzero(edge <= 0.0)[0])
                raise TreeError(
                    f"{name}-probability of edge into node {v} is not strictly "
                    "positive (breaks measure equivalence)")
            for k in range(self.n_periods):
                sums = self.sum_over_children(k, edge[self.level_slice(k + 1)])
                bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-9)
                if bad.size:
                    node = int(self.level_nodes(k)[bad[0]])
                    raise TreeError(
                        f"probabilities do not sum to 1 under {name} at node "
                        f"{node} (level {k}, sum {sums[bad[0]]:.12g})")
        if np.any(self.n_children[self.level_slice(self.n_periods)] != 0):
            raise TreeError("terminal node with children")
        for k in range(self.n_periods):
            if np.any(self.n_children[self.level_slice(k)] < 1):
                raise TreeError(f"dangling node at level {k} (no children)")

    # -- structure accessors ---------------------------------------------------

    def level_nodes(self, k: int) -> np.ndarray:
        return np.arange(self.level_start[k], self.level_start[k + 1])

    def level_slice(self, k: int) -> slice:
        return slice(int(self.level_start[k]), int(self.level_start[k + 1]))

    def level_size(self, k: int) -> int:
        return int(self.level_start[k + 1] - self.level_start[k])

    @property
    def leaves(self) -> np.ndarray:
        return self.level_nodes(self.n_periods)

    def children(self, v: int) -> np.ndarray:
        return np.arange(self.first_child[v], self.first_child[v] + self.n_children[v])

    def edge_probs(self, measure: str) -> np.ndarray:
        if measure == "P":
            return self.p_edge
        if measure == "Q":
            return self.q_edge
        raise TreeError(f"unknown measure {measure!r} (use 'P' or 'Q')")

    def node_probs(self, measure: str) -> np.ndarray:
        return self.node_p if measure == "P" else self.node_q

    def path_nodes(self) -> np.ndarray:
        """(n_leaves, N+1) matrix of the node at each time along each leaf path."""
        if self._path_nodes is None:
            n = self.n_periods
            mat = np.empty((self.leaves.size, n + 1), dtype=np.int64)
            mat[:, n] = self.leaves
            for k in range(n - 1, -1, -1):
                mat[:, k] = self.parent[mat[:, k + 1]]
            self._path_nodes = mat
        return self._path_nodes

    def sum_over_children(self, k: int, values_next: np.ndarray) -> np.ndarray:
        """Sum ``values_next`` (indexed over level k+1) over each level-k node's children."""
        offsets = (self.first_child[self.level_slice(k)] - self.level_start[k + 1]).astype(np.int64)
        return np.add.reduceat(values_next, offsets)

    def density_zf(self) -> np.ndarray:
        """Node values of the P->Q density martingale Z^F (= Q-path-prob / P-path-prob)."""
        return self.node_q / self.node_p


@dataclass
class AdaptedProcess:
    """A real value per tree node; the carrier for every adapted object."""

    tree: FiniteTree
    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.tree.n_nodes,):
            raise TreeError(f"process has {v.shape} values, tree has {self.tree.n_nodes} nodes")
        self.values = v

    @classmethod
    def constant(cls, tree: FiniteTree, c: float) -> "AdaptedProcess":
        return cls(tree, np.full(tree.n_nodes, float(c)))

    @classmethod
    def from_levels(cls, tree: FiniteTree, levels) -> "AdaptedProcess":
        vals = np.concatenate([np.asarray(lv, dtype=float).ravel() for lv in levels])
        return cls(tree, vals)

    @classmethod
    def from_terminal(cls, tree: FiniteTree, terminal, measure: str = "Q") -> "AdaptedProcess":
        """Martingale closure E[X_T | F_k] of terminal values."""
        return cls(tree, backward_closure(tree, terminal, measure))

    def at_level(self, k: int) -> np.ndarray:
        return self.values[self.tree.level_slice(k)]

    def __add__(self, other):
        return AdaptedProcess(self.tree, self.values + _vals(other))

    def __sub__(self, other):
        return AdaptedProcess(self.tree, self.values - _vals(other))


def _vals(x) -> np.ndarray:
    return x.values if isinstance(x, AdaptedProcess) else np.asarray(x, dtype=float)


@dataclass
class StoppingTime:
    """Stop/continue decision per node; every terminal node stops.

    Adaptedness is automatic (the decision is a function of the node).  The
    terminal-stop invariant guarantees at least one stop on every path.
    """

    tree: FiniteTree
    stop: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.stop, dtype=bool)
        if s.shape != (self.tree.n_nodes,):
            raise TreeError("stop mask has wrong length")
        if not np.all(s[self.tree.level_slice(self.tree.n_periods)]):
            raise TreeError("every terminal node must be a stop node")
        self.stop = s

    @classmethod
    def horizon(cls, tree: FiniteTree) -> "StoppingTime":
        """tau = T."""
        s = np.zeros(tree.n_nodes, dtype=bool)
        s[tree.level_slice(tree.n_periods)] = True
        return cls(tree, s)

    @classmethod
    def from_stop_nodes(cls, tree: FiniteTree, nodes) -> "StoppingTime":
        s = np.zeros(tree.n_nodes, dtype=bool)
        s[np.asarray(list(nodes), dtype=int)] = True
        s[tree.level_slice(tree.n_periods)] = True
        return cls(tree, s)

    def stop_levels(self) -> np.ndarray:
        """Per leaf path, the time index of the first stop node."""
        paths = self.tree.path_nodes()
        hit = self.stop[paths]
        return np.argmax(hit, axis=1)

    def stop_nodes_per_path(self) -> np.ndarray:
        paths = self.tree.path_nodes()
        lv = self.stop_levels()
        return paths[np.arange(paths.shape[0]), lv]


# --------------------------------------------------------------------------
# Tree construction
# --------------------------------------------------------------------------

def build_tree(spec: dict) -> FiniteTree:
    """Build and validate a tree from a scenario-style description.

    Expected keys: ``times`` (grid), ``branching`` (int, per-level ints, or
    per-level per-node lists), ``p`` ("uniform" or nested per-node lists) and
    either ``q`` (same layout) or ``zf_leaves`` (terminal values of the density
    Z^F, from which Q is derived by reweighting P node-wise).  Omitting both
    sets Q = P.
    """
    grid = TimeGrid(np.asarray(spec["times"], dtype=float))
    n = grid.steps
    counts = _normalize_branching(spec.get("branching", 2), n)
    level_sizes = [1]
    for k in range(n):
        if len(counts[k]) != level_sizes[-1]:
            raise TreeError(f"branching list at level {k} has {len(counts[k])} entries, "
                            f"level has {level_sizes[-1]} nodes")
        level_sizes.append(int(sum(counts[k])))
    level_start = np.concatenate([[0], np.cumsum(level_sizes)]).astype(np.int64)
    n_nodes = int(level_start[-1])

    parent = np.full(n_nodes, -1, dtype=np.int64)
    first_child = np.full(n_nodes, -1, dtype=np.int64)
    n_children = np.zeros(n_nodes, dtype=np.int64)
    for k in range(n):
        nodes = np.arange(level_start[k], level_start[k + 1])
        cnt = np.asarray(counts[k], dtype=np.int64)
        if np.any(cnt < 1):
            raise TreeError(f"dangling node at level {k} (zero branching)")
        starts = level_start[k + 1] + np.concatenate([[0], np.cumsum(cnt)[:-1]])
        first_child[nodes] = starts
        n_children[nodes] = cnt
        for v, s, c in zip(nodes, starts, cnt):
            parent[s:s + c] = v

    p_edge = _edge_probs_from_spec(spec.get("p", "uniform"), counts, level_start, "p")
    if "q" in spec and spec["q"] is not None:
        q_edge = _edge_probs_from_spec(spec["q"], counts, level_start, "q")
    else:
        q_edge = p_edge.copy()

    tree = FiniteTree(grid, parent, first_child, n_children, p_edge, q_edge, level_start)

    zf = spec.get("zf_leaves")
    if zf is not None:
        if "q" in spec and spec["q"] is not None:
            raise TreeError("give either q or zf_leaves, not both")
        tree = reweight_by_density(tree, np.asarray(zf, dtype=float))
    return tree


def reweight_by_density(tree: FiniteTree, zf_leaves: np.ndarray) -> FiniteTree:
    """Derive Q from P by the terminal density Z^F (normalised to E_P[Z^F]=1)."""
    if zf_leaves.shape != (tree.leaves.size,):
        raise TreeError("zf_leaves must have one value per terminal node")
    if np.any(zf_leaves <= 0.0):
        raise TreeError("density Z^F must be strictly positive")
    z = np.ones(tree.n_nodes)
    z[tree.level_slice(tree.n_periods)] = zf_leaves
    for k in range(tree.n_periods - 1, -1, -1):
        nxt = tree.level_slice(k + 1)
        z[tree.level_slice(k)] = tree.sum_over_children(k, tree.p_edge[nxt] * z[nxt])
    z /= z[0]  # Z_0 = 1
    q_edge = np.ones(tree.n_nodes)
    sl = slice(1, tree.n_nodes)
    q_edge[sl] = tree.p_edge[sl] * z[sl] / z[tree.parent[sl]]
    return FiniteTree(tree.grid, tree.parent, tree.first_child, tree.n_children,
                      tree.p_edge, q_edge, tree.level_start)


def _normalize_branching(branching, n_levels: int):
    if isinstance(branching, (int, np.integer)):
        counts, size = [], 1
        for _ in range(n_levels):
            counts.append([int(branching)] * size)
            size *= int(branching)
        return counts
    out, size = [], 1
    if len(branching) != n_levels:
        raise TreeError(f"branching must describe {n_levels} levels")
    for k, b in enumerate(branching):
        if isinstance(b, (int, np.integer)):
            out.append([int(b)] * size)
        else:
            out.append([int(x) for x in b])
        size = sum(out[-1])
    return out


def _edge_probs_from_spec(p, counts, level_start, label: str) -> np.ndarray:
    n_nodes = int(level_start[-1])
    edge = np.ones(n_nodes)
    for k, cnt in enumerate(counts):
        pos = int(level_start[k + 1])
        if isinstance(p, str) and p == "uniform":
            rows = [[1.0 / c] * c for c in cnt]
        else:
            rows = p[k]
        if len(rows) != len(cnt):
            raise TreeError(f"{label}[level {k}] has {len(rows)} rows, expected {len(cnt)}")
        for i, (row, c) in enumerate(zip(rows, cnt)):
            row = np.asarray(row, dtype=float)
            if row.size != c:
                raise TreeError(f"{label}[level {k}][node {i}] has {row.size} entries, "
                                f"branching is {c}")
            s = row.sum()
            if abs(s - 1.0) > 1e-9:
                raise TreeError(f"{label}[level {k}][node {i}]: probabilities do not "
                                f"sum to 1 (got {s:.12g})")
            if np.any(row <= 0.0):
                raise TreeError(f"{label}[level {k}][node {i}]: zero/negative probability "
                                "(breaks measure equivalence)")
            edge[pos:pos + c] = row / s
            pos += c
    return edge


# --------------------------------------------------------------------------
# Conditional expectation and friends
# --------------------------------------------------------------------------

def condexp(tree: FiniteTree, x, k: int, measure: str = "Q") -> np.ndarray:
    """E[x_{k+1} | F_k]: exact probability-weighted average over children.

    ``x`` may be a full-node array, an :class:`AdaptedProcess`, or an array
    over the level-(k+1) nodes only.  Returns values over the level-k nodes.
    """
    xv = _vals(x)
    if xv.shape == (tree.n_nodes,):
        xv = xv[tree.level_slice(k + 1)]
    elif xv.shape != (tree.level_size(k + 1),):
        raise TreeError(f"condexp at level {k}: got {xv.shape}, expected level "
                        f"{k + 1} values")
    w = tree.edge_probs(measure)[tree.level_slice(k + 1)] * xv
    return tree.sum_over_children(k, w)


def condexp_next(tree: FiniteTree, x, measure: str = "Q") -> AdaptedProcess:
    """Process of one-step conditional expectations: node at k -> E[x_{k+1}|F_k].

    Terminal nodes carry their own value (nothing left to average).
    """
    xv = _vals(x)
    out = xv.copy()
    for k in range(tree.n_periods):
        out[tree.level_slice(k)] = condexp(tree, xv, k, measure)
    return AdaptedProcess(tree, out)


def backward_closure(tree: FiniteTree, terminal, measure: str = "Q") -> np.ndarray:
    """E[X_T | F_k] for all k, from terminal values (full-node array out)."""
    tv = _vals(terminal)
    if tv.shape == (tree.n_nodes,):
        tv = tv[tree.level_slice(tree.n_periods)]
    out = np.empty(tree.n_nodes)
    out[tree.level_slice(tree.n_periods)] = tv
    for k in range(tree.n_periods - 1, -1, -1):
        out[tree.level_slice(k)] = condexp(tree, out[tree.level_slice(k + 1)], k, measure)
    return out


def is_martingale(tree: FiniteTree, x, measure: str = "Q", tol: float = 1e-12) -> bool:
    return martingale_residual(tree, x, measure) <= tol


def martingale_residual(tree: FiniteTree, x, measure: str = "Q") -> float:
    xv = _vals(x)
    r = 0.0
    for k in range(tree.n_periods):
        ce = condexp(tree, xv, k, measure)
        r = max(r, float(np.max(np.abs(ce - xv[tree.level_slice(k)]))))
    return r


def doob_decomposition(x, measure: str = "Q", tol: float = 1e-12):
    """Split a supermartingale into x = N - B (N martingale, B predictable, nondecreasing).

    B is the full predictable compensator; in discrete time there is no
    separate left-jump component.  Raises if ``x`` fails the supermartingale
    check beyond ``tol``.
    """
    tree = x.tree if isinstance(x, AdaptedProcess) else None
    if tree is None:
        raise TreeError("doob_decomposition expects an AdaptedProcess")
    xv = x.values
    b = np.zeros(tree.n_nodes)
    for k in range(tree.n_periods):
        ce = condexp(tree, xv, k, measure)
        cur = xv[tree.level_slice(k)]
        drop = cur - ce
        if np.any(drop < -tol):
            raise TreeError(f"input is not a supermartingale at level {k} "
                            f"(violation {float(np.min(drop)):.3g})")
        drop = np.maximum(drop, 0.0)
        nxt = tree.level_nodes(k + 1)
        b[nxt] = b[tree.parent[nxt]] + drop[tree.parent[nxt] - tree.level_start[k]]
    n_mart = AdaptedProcess(tree, xv + b)
    return n_mart, AdaptedProcess(tree, b)


# --------------------------------------------------------------------------
# Optimal stopping
# --------------------------------------------------------------------------

def snell_envelope(reward, measure: str = "Q", allowed: np.ndarray | None = None):
    """Smallest supermartingale dominating the reward on allowed nodes.

    Backward induction ``value = max(reward, E[value_next])`` at allowed
    nodes, plain continuation elsewhere; at terminal nodes value = reward.
    Returns ``(value, tau_star)`` where ``tau_star`` stops at the earliest
    allowed node with reward >= continuation (ties stop).
    """
    tree = reward.tree
    rv = reward.values
    if allowed is None:
        allowed = np.ones(tree.n_nodes, dtype=bool)
    allowed = np.asarray(allowed, dtype=bool)
    if not np.all(allowed[tree.level_slice(tree.n_periods)]):
        raise TreeError("mask excludes a terminal node")

    value = np.empty(tree.n_nodes)
    stop = np.zeros(tree.n_nodes, dtype=bool)
    term = tree.level_slice(tree.n_periods)
    value[term] = rv[term]
    stop[term] = True
    for k in range(tree.n_periods - 1, -1, -1):
        sl = tree.level_slice(k)
        cont = condexp(tree, value[tree.level_slice(k + 1)], k, measure)
        ok = allowed[sl]
        value[sl] = np.where(ok, np.maximum(rv[sl], cont), cont)
        stop[sl] = ok & (rv[sl] >= cont)
    return AdaptedProcess(tree, value), StoppingTime(tree, stop | StoppingTime.horizon(tree).stop)


def count_stopping_times(tree: FiniteTree, allowed: np.ndarray | None = None,
                         cap: int = DEFAULT_ENUM_CAP) -> int:
    """c(v) = [v allowed] + prod over children c(w); exact count, cap-checked."""
    if allowed is None:
        allowed = np.ones(tree.n_nodes, dtype=bool)
    counts = np.zeros(tree.n_nodes, dtype=object)
    term = tree.level_slice(tree.n_periods)
    counts[term] = 1
    for k in range(tree.n_periods - 1, -1, -1):
        for v in tree.level_nodes(k):
            prod = 1
            for w in tree.children(v):
                prod *= counts[w]
            counts[v] = prod + (1 if allowed[v] else 0)
            if counts[v] > cap:
                raise EnumerationCapError(
                    f"stopping-time count exceeds cap {cap} at node {int(v)}")
    return int(counts[0])


def _enumerate_stop_nodes(tree: FiniteTree, allowed: np.ndarray, cap: int) -> np.ndarray:
    """(count, n_leaves) matrix: stop node per leaf path for every stopping time."""
    count_stopping_times(tree, allowed, cap)  # raises if too many

    def rec(v: int) -> list[np.ndarray]:
        if tree.n_children[v] == 0:
            return [np.array([v], dtype=np.int64)]
        child_lists = [rec(int(w)) for w in tree.children(v)]
        out = []
        if allowed[v]:
            width = sum(arrs[0].size for arrs in child_lists)
            out.append(np.full(width, v, dtype=np.int64))
        for combo in itertools.product(*child_lists):
            out.append(np.concatenate(combo))
        return out

    return np.vstack(rec(0))


def enumerate_stopping_times(tree: FiniteTree, allowed: np.ndarray | None = None,
                             cap: int = DEFAULT_ENUM_CAP) -> list[StoppingTime]:
    """Exhaustive list of distinct stopping times with stop nodes in the mask.

    Terminal nodes are always allowed.  The oracle behind every sup/inf over
    stopping times in the test suites.
    """
    if allowed is None:
        allowed = np.ones(tree.n_nodes, dtype=bool)
    allowed = np.asarray(allowed, dtype=bool) | StoppingTime.horizon(tree).stop
    mat = _enumerate_stop_nodes(tree, allowed, cap)
    out = []
    for row in mat:
        out.append(StoppingTime.from_stop_nodes(tree, np.unique(row)))
    return out


def evaluate_stopping(reward, tau: StoppingTime, measure: str = "Q") -> float:
    """Exact E[reward at the stopped node] under the chosen measure."""
    tree = reward.tree
    nodes = tau.stop_nodes_per_path()
    w = tree.node_probs(measure)[tree.leaves]
    return float(np.dot(w, reward.values[nodes]))


def brute_force_snell_root(reward, measure: str = "Q",
                           allowed: np.ndarray | None = None,
                           cap: int = DEFAULT_ENUM_CAP) -> float:
    """max over all enumerated stopping times of evaluate_stopping (root value)."""
    tree = reward.tree
    if allowed is None:
        allowed = np.ones(tree.n_nodes, dtype=bool)
    allowed = np.asarray(allowed, dtype=bool) | StoppingTime.horizon(tree).stop
    mat = _enumerate_stop_nodes(tree, allowed, cap)
    w = tree.node_probs(measure)[tree.leaves]
    vals = reward.values[mat] @ w
    return float(np.max(vals))
