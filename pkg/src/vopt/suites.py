"""Verification suites: identity checks, duality sweeps, oracle comparisons.

Each suite runs on the scenario instance (plus the optional randomized family
for the batch identity checks), returns its worst residual against the
scenario tolerances, and is pure, so suites can run in a worker pool; the
report is assembled in declaration order and is byte-stable across thread
counts.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .american import (american_upper_price, brute_force_game, constrained_dynkin_game,
                       game_payoff, modified_payoff, penalized_american_lower,
                       penalized_american_upper, rbsde_vs_weighted_optstop)
from .errors import EnumerationCapError, TreeError
from .european import (constrained_snell, dirac_convergence_check, penalized_european,
                       reduced_price_closed_form, sup_over_phi)
from .filtration import (AdaptedProcess, StoppingTime, backward_closure,
                         brute_force_snell_root, _enumerate_stop_nodes,
                         count_stopping_times, evaluate_stopping, snell_envelope)
from .instances import (random_delta_hazard, random_extension, random_game_instance,
                        random_payoff, random_phi, random_tree)
from .measure_change import (G_under_phi, PhiControl, compensated_default_residual,
                             density_eta, hazard_under_phi, phi_pr_from_marks,
                             validate_phi)
from .random_time import (cox_extend, jeulin_yor_transform, key_lemma,
                          pre_default_transform, projections, verify_lemma21)
from .scenario import Scenario


@dataclass
class SuiteResult:
    name: str
    passed: bool
    max_residual: float
    tolerance: float
    elapsed: float
    details: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        # timings stay out of the artifact so reports are byte-stable
        return {"suite": self.name, "passed": bool(self.passed),
                "max_residual": float(self.max_residual),
                "tolerance": float(self.tolerance), "details": self.details}


@dataclass
class RunReport:
    scenario: str
    results: list[SuiteResult]

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def to_dict(self) -> dict:
        return {"scenario": self.scenario, "passed": bool(self.passed),
                "kernel_backend": _kernels.backend(),
                "suites": [r.to_dict() for r in self.results]}


def _family_instances(sc: Scenario):
    """Scenario instance first, then the seeded random family."""
    yield sc.tree, cox_extend(sc.tree, sc.hazard_h)
    if sc.family:
        rng = np.random.default_rng(sc.family["seed"])
        for _ in range(sc.family["instances"]):
            tree = random_tree(rng, sc.family["max_periods"], sc.family["max_branching"])
            yield tree, random_extension(rng, tree)


def suite_projections_identities(sc: Scenario) -> SuiteResult:
    tol = sc.tolerances["identity"]
    worst = 0.0
    count = 0
    rng = np.random.default_rng(sc.phi_seed)
    for tree, ext in _family_instances(sc):
        bundle = projections(ext)
        rep = verify_lemma21(bundle)
        worst = max(worst, rep.max_residual)
        x = AdaptedProcess(tree, rng.uniform(0.0, 3.0, tree.n_nodes))
        xp = np.empty(tree.n_nodes)
        xp[0] = x.values[0]
        xp[1:] = x.values[tree.parent[1:]]
        for t in range(tree.n_periods + 1):
            key_lemma(ext, x, t, "optional", tol=tol)
            key_lemma(ext, AdaptedProcess(tree, xp), t, "predictable", tol=tol)
        count += 1
    return SuiteResult("projections-identities", worst <= tol, worst, tol, 0.0,
                       {"instances": count})


def suite_martingale_transforms(sc: Scenario) -> SuiteResult:
    tol = sc.tolerances["identity"]
    worst = 0.0
    rng = np.random.default_rng(sc.phi_seed + 1)
    count = 0
    for tree, ext in _family_instances(sc):
        bundle = projections(ext)
        M = AdaptedProcess(tree, backward_closure(
            tree, rng.uniform(-1.0, 2.0, tree.leaves.size), "P"))
        worst = max(worst, ext.g_martingale_residual(jeulin_yor_transform(ext, M, bundle)))
        worst = max(worst, ext.g_martingale_residual(pre_default_transform(ext, M, bundle)))
        count += 1
    return SuiteResult("martingale-transforms", worst <= tol, worst, tol, 0.0,
                       {"instances": count})


def suite_measure_change(sc: Scenario) -> SuiteResult:
    tol = sc.tolerances["identity"]
    rng = np.random.default_rng(sc.phi_seed + 2)
    worst = 0.0
    details: dict = {"controls": 0}
    for tree, ext in _family_instances(sc):
        bundle = projections(ext)
        for _ in range(sc.phi_count):
            phi = random_phi(rng, ext, bundle, with_pr=False)
            hz_rep = hazard_under_phi(ext, phi, bundle, tol=tol)
            g_rep = G_under_phi(ext, phi, bundle, tol=tol)
            worst = max(worst, hz_rep.two_route_residual, hz_rep.dual_projection_residual,
                        g_rep.two_route_residual,
                        compensated_default_residual(ext, phi, bundle))
            details["controls"] += 1
    # post-default marks: the density stays an exact martingale and the
    # reduced (pre-default) option values are invariant to the mark.  Uses
    # the vulnerable payoff itself: recovery read at the decision node is
    # what makes the invariance exact.
    from .random_time import full_price_assembly
    ext = cox_extend(sc.tree, sc.hazard_h)
    bundle = projections(ext)
    lam = AdaptedProcess(sc.tree, 1.0 + 0.4 * np.cos(np.arange(sc.tree.n_nodes)))
    phi_o_arrival = np.zeros(sc.tree.n_nodes)
    phi_o_arrival[1:] = lam.values[sc.tree.parent[1:]] - 1.0
    base = None
    for _ in range(3):
        marks = phi_pr_from_marks(ext, rng.uniform(-0.7, 0.7, sc.tree.n_nodes),
                                  bundle, phi_o_arrival)
        rep = full_price_assembly(ext, sc.payoff, lam=lam, phi_pr=marks)
        worst = max(worst, rep.residual)
        if base is None:
            base = rep.reduced.values
        else:
            worst = max(worst, float(np.max(np.abs(rep.reduced.values - base))))
        details["controls"] += 1
    return SuiteResult("measure-change", worst <= tol, worst, tol, 0.0, details)


def suite_european_duality(sc: Scenario) -> SuiteResult:
    tol = sc.tolerances["duality"]
    tol_id = sc.tolerances["identity"]
    tree, payoff, hz = sc.tree, sc.payoff, sc.hazard_delta
    snell = constrained_snell(payoff, hz, tree)
    gaps = []
    prev = None
    mono_ok = True
    for n in sc.penalty_ladder:
        val = penalized_european(n, payoff, hz, tree).value.values
        if prev is not None and np.any(val < prev - tol_id):
            mono_ok = False
        prev = val
        gaps.append(float(np.max(np.abs(snell.value.values - val))))
    worst = gaps[-1]
    for n in (1, 4, 16):
        sup = sup_over_phi(n, payoff, hz, tree).value.values
        pen = penalized_european(n, payoff, hz, tree).value.values
        worst = max(worst, float(np.max(np.abs(sup - pen))))
    lam = 1.0 + 0.5 * np.sin(np.arange(tree.n_nodes))   # deterministic tilt
    reduced_id = reduced_price_closed_form(AdaptedProcess(tree, lam), payoff, hz, tree)
    oracle_gap = 0.0
    try:
        reward = payoff.R.values.copy()
        term = tree.level_slice(tree.n_periods)
        reward[term] = payoff.P.values[term]
        bf = brute_force_snell_root(AdaptedProcess(tree, reward), "Q", hz.support_mask())
        oracle_gap = abs(bf - snell.value.values[0])
    except EnumerationCapError:
        pass
    worst = max(worst, oracle_gap)
    passed = worst <= tol and mono_ok and oracle_gap <= tol_id
    return SuiteResult("european-duality", passed, worst, tol, 0.0,
                       {"monotone": mono_ok, "gap_trace": gaps,
                        "ladder": list(sc.penalty_ladder),
                        "enumeration_gap": oracle_gap})


def suite_dirac_convergence(sc: Scenario) -> SuiteResult:
    tol = sc.tolerances["dirac"]
    tree, payoff, hz = sc.tree, sc.payoff, sc.hazard_delta
    # stop at the first support node: the earliest time termination mass exists
    nu = StoppingTime(tree, hz.support_mask())
    table = dirac_convergence_check(payoff, hz, tree, nu)
    worst = table.gaps[-1]
    passed = worst <= tol and (table.strictly_decreasing or max(table.gaps) <= tol)
    return SuiteResult("dirac-convergence", passed, worst, tol, 0.0,
                       {"strictly_decreasing": table.strictly_decreasing,
                        "trace": table.to_trace()})


def suite_rbsde_vs_optstop(sc: Scenario) -> SuiteResult:
    tol = sc.tolerances["rbsde"]
    tol_id = sc.tolerances["identity"]
    worst = 0.0
    sk = 0.0
    rng = np.random.default_rng(sc.phi_seed + 3)
    rep = rbsde_vs_weighted_optstop(sc.payoff, sc.hazard_delta, sc.tree, tol=tol)
    worst, sk = rep.max_diff, rep.skorokhod_residual
    count = 1
    if sc.family:
        for _ in range(sc.family["instances"]):
            tree = random_tree(rng, sc.family["max_periods"], sc.family["max_branching"])
            rep = rbsde_vs_weighted_optstop(random_payoff(rng, tree),
                                            random_delta_hazard(rng, tree), tree, tol=tol)
            worst = max(worst, rep.max_diff)
            sk = max(sk, rep.skorokhod_residual)
            count += 1
    return SuiteResult("rbsde-vs-optstop", worst <= tol and sk <= tol_id, worst, tol,
                       0.0, {"instances": count, "skorokhod": sk})


def suite_american_upper(sc: Scenario) -> SuiteResult:
    tol = sc.tolerances["duality"]
    tol_id = sc.tolerances["identity"]
    tree, payoff, hz = sc.tree, sc.payoff, sc.hazard_delta
    target = american_upper_price(payoff, hz, tree)
    prev = None
    mono_ok = True
    gaps = []
    for n in sc.penalty_ladder:
        val = penalized_american_upper(n, payoff, hz, tree).value.values
        if prev is not None and np.any(val < prev - tol_id):
            mono_ok = False
        prev = val
        gaps.append(float(np.max(np.abs(target.value.values - val))))
    worst = gaps[-1]
    oracle_gap = 0.0
    try:
        bf = brute_force_snell_root(modified_payoff(payoff, hz, tree), "Q")
        oracle_gap = abs(bf - target.value.values[0])
    except EnumerationCapError:
        pass
    passed = worst <= tol and mono_ok and oracle_gap <= tol_id
    return SuiteResult("american-upper", passed, max(worst, oracle_gap), tol, 0.0,
                       {"monotone": mono_ok, "gap_trace": gaps,
                        "enumeration_gap": oracle_gap})


def suite_game_duality(sc: Scenario) -> SuiteResult:
    tol = sc.tolerances["game"]
    tol_id = sc.tolerances["identity"]
    tree, payoff, hz = sc.tree, sc.payoff, sc.hazard_delta
    try:
        game = constrained_dynkin_game(payoff, hz, tree)
    except TreeError as e:
        return SuiteResult("game-duality", False, np.inf, tol, 0.0,
                           {"error": str(e), "hint": "game needs P <= R on the support"})
    lower = penalized_american_lower(sc.penalty_ladder[-1], payoff, hz, tree)
    worst_pen = float(np.max(np.abs(game.value.values - lower.value.values)))
    details: dict = {"penalized_gap": worst_pen}
    worst_exact = 0.0
    try:
        bf = brute_force_game(payoff, hz, tree)
        worst_exact = max(abs(bf.infsup - bf.supinf),
                          abs(bf.infsup - game.value.values[0]))
        achieved = game_payoff(payoff, tree, game.sigma_star, game.tau_star)
        worst_exact = max(worst_exact, abs(achieved - game.value.values[0]))
        details.update({"infsup": bf.infsup, "supinf": bf.supinf,
                        "strategies_achieve": achieved})
    except EnumerationCapError as e:
        details["enumeration"] = f"skipped: {e}"
    passed = worst_pen <= tol and worst_exact <= tol_id
    return SuiteResult("game-duality", passed, max(worst_pen, worst_exact), tol, 0.0,
                       details)


def suite_oracle_equivalence(sc: Scenario) -> SuiteResult:
    tol = sc.tolerances["identity"]
    rng = np.random.default_rng(sc.phi_seed + 4)
    worst = 0.0
    count = 0
    specs = [(sc.tree, random_payoff(rng, sc.tree), sc.hazard_delta)]
    if sc.family:
        for _ in range(min(sc.family["instances"], 8)):
            tree = random_tree(rng, min(sc.family["max_periods"], 3), 2)
            specs.append((tree, random_payoff(rng, tree), random_delta_hazard(rng, tree)))
    for tree, payoff, hz in specs:
        try:
            n_all = count_stopping_times(tree)
        except EnumerationCapError:
            continue
        reward = AdaptedProcess(tree, rng.uniform(0.0, 3.0, tree.n_nodes))
        for mask in (None, hz.support_mask()):
            val, tau = snell_envelope(reward, "Q", mask)
            bf = brute_force_snell_root(reward, "Q", mask)
            worst = max(worst, abs(val.values[0] - bf),
                        abs(evaluate_stopping(reward, tau, "Q") - val.values[0]))
        # counting formula cross-check: c(v) = [allowed] + prod over children
        mat = _enumerate_stop_nodes(tree, np.ones(tree.n_nodes, dtype=bool),
                                    10_000_000)
        if mat.shape[0] != n_all:
            worst = max(worst, np.inf)
        count += 1
    return SuiteResult("oracle-equivalence", worst <= tol, worst, tol, 0.0,
                       {"instances": count})


SUITE_FUNCTIONS = {
    "projections-identities": suite_projections_identities,
    "martingale-transforms": suite_martingale_transforms,
    "measure-change": suite_measure_change,
    "european-duality": suite_european_duality,
    "dirac-convergence": suite_dirac_convergence,
    "rbsde-vs-optstop": suite_rbsde_vs_optstop,
    "american-upper": suite_american_upper,
    "game-duality": suite_game_duality,
    "oracle-equivalence": suite_oracle_equivalence,
}


def run_suites(sc: Scenario, threads: int = 1) -> RunReport:
    """Execute the selected suites; deterministic report regardless of threads."""

    def run_one(name: str) -> SuiteResult:
        t0 = time.perf_counter()
        try:
            res = SUITE_FUNCTIONS[name](sc)
        except Exception as e:  # identity errors inside ops count as failures
            res = SuiteResult(name, False, np.inf, sc.tolerances["identity"], 0.0,
                              {"error": f"{type(e).__name__}: {e}"})
        res.elapsed = time.perf_counter() - t0
        return res

    names = list(sc.suites)
    if threads <= 1 or len(names) <= 1:
        results = [run_one(n) for n in names]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run_one, names))
    return RunReport(sc.name, results)
