"""Scenario files: one JSON document describing an instance and a suite run.

Sections: ``tree`` (grid, branching, probabilities or a terminal density),
``hazard`` (per-node one-step hazards ``h`` for the extension and reduced
increments ``delta``), ``payoff`` (P and R node tables), ``phi`` (control
sampling), ``suites``, ``tolerances``, ``penalty_ladder``, an optional
``random_family`` block for the batch identity checks, and ``output``.
Fixtures are plain JSON so regressions diff cleanly.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ScenarioError
from .european import PayoffSpec, ReducedHazard
from .filtration import AdaptedProcess, FiniteTree, build_tree
from .random_time import HazardSpec

DEFAULT_TOLERANCES = {
    "identity": 1e-12,
    "duality": 1e-5,
    "dirac": 1e-4,
    "rbsde": 1e-10,
    "game": 1e-5,
}

ALL_SUITES = [
    "projections-identities",
    "martingale-transforms",
    "measure-change",
    "european-duality",
    "dirac-convergence",
    "rbsde-vs-optstop",
    "american-upper",
    "game-duality",
    "oracle-equivalence",
]


@dataclass
class Scenario:
    name: str
    tree: FiniteTree
    hazard_h: HazardSpec
    hazard_delta: ReducedHazard
    payoff: PayoffSpec
    phi_seed: int
    phi_count: int
    suites: list[str]
    tolerances: dict[str, float]
    penalty_ladder: list[int]
    family: dict | None
    output_dir: str
    raw: dict = field(repr=False, default_factory=dict)


def _node_table(tree: FiniteTree, spec, where: str) -> np.ndarray:
    """Materialize a per-node value table: constant or per-level lists."""
    if isinstance(spec, (int, float)):
        return np.full(tree.n_nodes, float(spec))
    if not isinstance(spec, dict):
        raise ScenarioError(f"{where}: expected a number or an object")
    if "constant" in spec:
        return np.full(tree.n_nodes, float(spec["constant"]))
    if "by_level" in spec:
        rows = spec["by_level"]
        if len(rows) != tree.n_periods + 1:
            raise ScenarioError(f"{where}.by_level: {len(rows)} levels given, tree has "
                                f"{tree.n_periods + 1}")
        out = np.empty(tree.n_nodes)
        for k, row in enumerate(rows):
            vals = np.asarray(row, dtype=float).ravel()
            if vals.size == 1:
                vals = np.full(tree.level_size(k), vals[0])
            if vals.size != tree.level_size(k):
                raise ScenarioError(f"{where}.by_level[{k}]: {vals.size} values for "
                                    f"{tree.level_size(k)} nodes")
            out[tree.level_slice(k)] = vals
        return out
    raise ScenarioError(f"{where}: use 'constant' or 'by_level'")


def parse_scenario(path: str) -> Scenario:
    """Read and validate a scenario file; error messages name the offending
    section and node."""
    try:
        with open(path) as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ScenarioError(f"scenario file not found: {path}")
    except json.JSONDecodeError as e:
        raise ScenarioError(f"{path}: not valid JSON ({e})")
    return scenario_from_dict(raw, name_hint=os.path.basename(path))


def scenario_from_dict(raw: dict, name_hint: str = "scenario") -> Scenario:
    if "tree" not in raw:
        raise ScenarioError("missing 'tree' section")
    from .errors import TreeError
    try:
        tree = build_tree(raw["tree"])
    except TreeError as e:
        raise ScenarioError(f"tree: {e}")

    hz_raw = raw.get("hazard", {})
    h_vals = _node_table(tree, hz_raw.get("h", 0.0), "hazard.h")
    from .errors import HazardError
    try:
        hazard_h = HazardSpec(h_vals, timing=hz_raw.get("timing", "decision"),
                              terminal_absorption=hz_raw.get("terminal_absorption", True))
        hazard_delta = ReducedHazard(tree, _node_table(tree, hz_raw.get("delta", 0.0),
                                                       "hazard.delta"))
    except HazardError as e:
        raise ScenarioError(f"hazard: {e}")

    pay_raw = raw.get("payoff", {})
    payoff = PayoffSpec(
        AdaptedProcess(tree, _node_table(tree, pay_raw.get("P", 1.0), "payoff.P")),
        AdaptedProcess(tree, _node_table(tree, pay_raw.get("R", 1.0), "payoff.R")))

    phi_raw = raw.get("phi", {})
    suites = raw.get("suites", list(ALL_SUITES))
    for s in suites:
        if s not in ALL_SUITES:
            raise ScenarioError(f"unknown suite {s!r} (known: {', '.join(ALL_SUITES)})")

    tol = dict(DEFAULT_TOLERANCES)
    tol.update(raw.get("tolerances", {}))
    for k, v in tol.items():
        if not v > 0:
            raise ScenarioError(f"tolerances.{k} must be positive")

    ladder = [int(n) for n in raw.get("penalty_ladder",
                                      [2 ** k for k in range(0, 22, 2)])]
    if any(b <= a for a, b in zip(ladder, ladder[1:])) or any(n < 1 for n in ladder):
        raise ScenarioError("penalty_ladder must be strictly increasing and >= 1")

    family = raw.get("random_family")
    if family is not None:
        family = {"seed": int(family.get("seed", 0)),
                  "instances": int(family.get("instances", 20)),
                  "max_periods": int(family.get("max_periods", 3)),
                  "max_branching": int(family.get("max_branching", 3))}
        if family["instances"] < 1:
            raise ScenarioError("random_family.instances must be >= 1")

    out_dir = raw.get("output", {}).get("dir") or os.environ.get("VOPT_OUT_DIR", "out")
    return Scenario(name=raw.get("name", name_hint), tree=tree, hazard_h=hazard_h,
                    hazard_delta=hazard_delta, payoff=payoff,
                    phi_seed=int(phi_raw.get("seed", 20240901)),
                    phi_count=int(phi_raw.get("count", 10)),
                    suites=list(suites), tolerances=tol, penalty_ladder=ladder,
                    family=family, output_dir=out_dir, raw=raw)
