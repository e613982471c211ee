"""
Iterative Variance Refinement

What: Drives the profile -> decompose -> select -> expand loop that narrows
      root latency variance down to a few responsible functions
How: Each step enables the callees of every variance factor awaiting
     break-down, reruns the workload under the enlarged profile set, rebuilds
     the variance tree from that run alone and reselects the top-k factors

A selected factor is broken down further only when:
- it is a variance factor of a function (not of a body term)
- that function has callees that are not yet profiled
- its contribution is at least d
- its body term explains less than BODY_DOMINANCE of its variance
Everything else selected is final. Values are never mixed across runs; only
factor identities carry over between iterations.
"""

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Protocol, Tuple, Union

from src.collector import ProfileSet
from src.errors import RefinementError, StaleFactorError, UnknownNodeError, VarlatError
from src.tracefmt import Forest, FunctionRegistry
from src.vartree import (Factor, FactorId, SelectionParams, VarianceTree, aggregate_factors,
                         build_variance_tree, ranking_key, select_factors)

logger = logging.getLogger(__name__)

BODY_DOMINANCE = 0.9


class WorkloadRunner(Protocol):
    registry: FunctionRegistry

    def callees(self, func_id: int) -> Iterable[int]:
        ...

    def run(self, profile_set: ProfileSet, iteration: int) -> Forest:
        ...


def variance_of(func_id: int, body: bool = False) -> FactorId:
    return FactorId("var", ((func_id, body),))


@dataclass
class RefineState:
    """
    Where refinement stands

    frontier holds identities awaiting break-down; finalized maps identities
    to the factor as last selected. The two never overlap and the profile set
    only grows.
    """

    root: int
    registry: FunctionRegistry
    call_graph: Dict[int, Tuple[int, ...]]
    iteration: int = 0
    profile_set: ProfileSet = field(default_factory=ProfileSet)
    frontier: List[FactorId] = field(default_factory=list)
    finalized: Dict[FactorId, Factor] = field(default_factory=dict)
    tree: Optional[VarianceTree] = None
    factors: Dict[FactorId, Factor] = field(default_factory=dict)
    selected: List[Factor] = field(default_factory=list)

    def unprofiled_callees(self, func_id: int) -> List[int]:
        return [c for c in self.call_graph.get(func_id, ()) if c not in self.profile_set]

    def final_ranking(self) -> List[Factor]:
        return sorted(self.finalized.values(), key=ranking_key)


def init_refinement(root: Union[str, int], registry: FunctionRegistry,
                    call_graph: Optional[Dict[int, Iterable[int]]] = None) -> RefineState:
    """
    Fresh state: profile set {root}, frontier [Var(root)]

    Raises:
        UnknownNodeError: root is not registered
        RefinementError: root is registered but not flagged as a root function
    """
    try:
        root_id = registry.resolve(root)
    except KeyError:
        raise UnknownNodeError(f"unknown root function {root!r}") from None
    if root_id not in registry:
        raise UnknownNodeError(f"unknown root function {root!r}")
    if not registry.is_root(root_id):
        raise RefinementError(f"{registry.name_of(root_id)} is not a root function")
    graph = {fid: tuple(callees) for fid, callees in (call_graph or {}).items()}
    return RefineState(root_id, registry, graph, profile_set=ProfileSet({root_id}),
                       frontier=[variance_of(root_id)])


def needs_break_down(factor: Factor, state: RefineState, params: SelectionParams) -> bool:
    identity = factor.identity
    if not identity.is_variance:
        return False
    func_id, is_body = identity.terms[0]
    if is_body or not state.unprofiled_callees(func_id):
        return False
    if factor.contribution < params.d:
        return False
    body = state.factors.get(variance_of(func_id, body=True))
    if body is not None and factor.total_value > 0 and body.total_value / factor.total_value >= BODY_DOMINANCE:
        return False
    return True


def refine_step(state: RefineState, runner: WorkloadRunner,
                params: SelectionParams) -> Tuple[RefineState, List[Factor]]:
    """
    One expand-run-select round

    Returns:
        tuple: (the updated state, factors selected this iteration)

    Raises:
        RefinementError: empty frontier, or the workload run failed
        StaleFactorError: a selected factor names an unregistered function
    """
    if not state.frontier:
        raise RefinementError("refinement frontier is empty")

    expandable = [fid for fid in state.frontier if fid.is_variance and not fid.terms[0][1]]
    if not expandable:
        logger.info("Frontier holds only terminal factors; refinement ends")
        state.frontier = []
        state.selected = []
        return state, []

    for identity in expandable:
        state.profile_set.update(state.unprofiled_callees(identity.terms[0][0]))

    state.iteration += 1
    try:
        forest = runner.run(state.profile_set.copy(), state.iteration)
    except VarlatError:
        raise
    except Exception as e:
        raise RefinementError(f"workload run failed in iteration {state.iteration}: {e}") from e

    tree = build_variance_tree(forest, state.root)
    state.tree = tree
    state.factors = {f.identity: f for f in aggregate_factors(tree.all_terms(), tree.heights)}
    selected = select_factors(list(state.factors.values()), params)

    for factor in selected:
        unknown = [fid for fid in factor.identity.func_ids if fid not in state.registry]
        if unknown:
            raise StaleFactorError(f"selected factor {factor.identity.label()} names unregistered "
                                   f"functions {unknown}")

    frontier = []
    for factor in selected:
        if needs_break_down(factor, state, params):
            frontier.append(factor.identity)
            state.finalized.pop(factor.identity, None)
        else:
            state.finalized[factor.identity] = factor
    state.frontier = frontier
    state.selected = selected
    logger.info(f"Iteration {state.iteration}: profiled {len(state.profile_set)} functions, "
                f"selected {len(selected)}, frontier {len(frontier)}")
    return state, selected


@dataclass
class IterationReport:
    iteration: int
    n_samples: int
    root_variance_ns2: float
    profile_set: List[str]
    selected: List[Dict[str, Any]]
    frontier: List[str]
    finalized: List[str]

    def to_dict(self) -> Dict[str, Any]:
        return {
            "iteration": self.iteration,
            "n_samples": self.n_samples,
            "root_variance_ns2": self.root_variance_ns2,
            "profile_set": self.profile_set,
            "selected": self.selected,
            "frontier": self.frontier,
            "finalized": self.finalized,
        }


def iteration_report(state: RefineState) -> IterationReport:
    registry = state.registry
    tree = state.tree
    return IterationReport(
        iteration=state.iteration,
        n_samples=tree.n_samples if tree else 0,
        root_variance_ns2=tree.root_variance if tree else 0.0,
        profile_set=state.profile_set.names(registry),
        selected=[f.to_dict(registry) for f in state.selected],
        frontier=[fid.label(registry) for fid in state.frontier],
        finalized=[fid.label(registry) for fid in state.finalized],
    )


@dataclass
class RefinementResult:
    state: RefineState
    iterations: List[IterationReport]

    @property
    def ranking(self) -> List[Factor]:
        return self.state.final_ranking()

    def final_report(self) -> Dict[str, Any]:
        registry = self.state.registry
        return {
            "root": registry.name_of(self.state.root),
            "iterations": len(self.iterations),
            "profile_set": self.state.profile_set.names(registry),
            "factors": [f.to_dict(registry) for f in self.ranking],
        }


def run_refinement(root: Union[str, int], runner: WorkloadRunner, params: SelectionParams,
                   max_iterations: Optional[int] = None) -> RefinementResult:
    """
    Refine until the frontier empties or max_iterations runs have happened

    Raises:
        ValueError: max_iterations < 1
    """
    if max_iterations is not None and max_iterations < 1:
        raise ValueError("max_iterations must be >= 1")
    graph = {fid: tuple(runner.callees(fid)) for fid in runner.registry.entries}
    state = init_refinement(root, runner.registry, graph)
    reports: List[IterationReport] = []
    while state.frontier and (max_iterations is None or state.iteration < max_iterations):
        before = state.iteration
        state, _ = refine_step(state, runner, params)
        if state.iteration == before:
            break
        reports.append(iteration_report(state))
    return RefinementResult(state, reports)
