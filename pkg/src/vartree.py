"""
Variance Tree Construction and Factor Selection

What: Decomposes root-invocation latency variance over the observed call tree,
      aggregates per-call-site terms into call-site-free factors, scores them
      by specificity and picks the top-k
How: A CallProfile sums durations per call path per root sample; each parent
     path becomes a SampleMatrix (pandas frame, one column per child path plus
     a body column) whose population covariance matrix yields the Var/Cov terms

Identity checked by the tests on every expanded node:
    Var(parent) == sum(Var(col)) + 2 * sum(Cov(col_i, col_j), i < j)

Scoring:
    specificity = (height(call graph) - height(factor)) ** 2
    score       = specificity * total_value
Body columns are leaves (height 0). Covariance factors take the larger height
of their two terms. Covariance values are kept signed.

Usage:
    tree = build_variance_tree(forest, root_func=registry.id_of("dispatch"))
    factors = select_factors(tree, SelectionParams(k=5, d=0.05))
"""

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, List, NamedTuple, Optional, Set, Tuple, Union

import numpy as np
import pandas as pd

from src.errors import InsufficientSamplesError, UnknownNodeError
from src.metrics import covariance_matrix
from src.tracefmt import Forest, FunctionRegistry, Invocation, ordered_roots

logger = logging.getLogger(__name__)

PathElement = Tuple[int, int]
NodePath = Tuple[PathElement, ...]

# root samples are pooled regardless of the site tag they were entered with
ROOT_SITE = 0

BODY_LABEL = "body"


class Column(NamedTuple):
    path: NodePath
    is_body: bool = False

    @property
    def func_id(self) -> int:
        return self.path[-1][0]

    @property
    def label(self) -> str:
        if self.is_body:
            return BODY_LABEL
        func_id, site_tag = self.path[-1]
        return f"{func_id}@{site_tag}"


def root_path(func_id: int) -> NodePath:
    return ((func_id, ROOT_SITE),)


class CallProfile:
    """
    Per-root-sample durations of every observed call path

    What: The raw material for sample matrices and heights
    How: One pass over each root invocation tree; a path's duration in a
         sample is the sum over every invocation reached by that path

    Args:
        forest: thread_id -> root invocations (from build_invocations)
        root_func: Keep only roots of this function; None keeps every root
    """

    def __init__(self, forest: Forest, root_func: Optional[int] = None):
        self.root_func = root_func
        self.samples: List[Invocation] = ordered_roots(forest, root_func)
        self.durations: Dict[NodePath, Dict[int, int]] = {}
        self.bodies: Dict[NodePath, Dict[int, int]] = {}
        self.children: Dict[NodePath, Set[NodePath]] = {}
        self.callees: Dict[int, Set[int]] = {}

        for index, root in enumerate(self.samples):
            stack: List[Tuple[Invocation, NodePath]] = [(root, root_path(root.func_id))]
            while stack:
                inv, path = stack.pop()
                per_sample = self.durations.setdefault(path, {})
                per_sample[index] = per_sample.get(index, 0) + inv.duration_ns
                body = self.bodies.setdefault(path, {})
                body[index] = body.get(index, 0) + inv.body_ns
                kids = self.children.setdefault(path, set())
                called = self.callees.setdefault(inv.func_id, set())
                for child in inv.children:
                    child_path = path + ((child.func_id, child.site_tag),)
                    kids.add(child_path)
                    called.add(child.func_id)
                    stack.append((child, child_path))

    @property
    def n_samples(self) -> int:
        return len(self.samples)

    def root_paths(self) -> List[NodePath]:
        return sorted(p for p in self.durations if len(p) == 1)

    def child_paths(self, path: NodePath) -> List[NodePath]:
        return sorted(self.children.get(path, ()))

    def functions(self) -> Set[int]:
        return {path[-1][0] for path in self.durations}

    def root_durations(self) -> np.ndarray:
        return np.array([inv.duration_ns for inv in self.samples], dtype=float)


@dataclass
class SampleMatrix:
    """
    Samples of one parent's components

    frame rows are root-sample indices in which the parent appeared; column i
    of frame holds columns[i]. Every row sums to the parent's duration.
    """

    node: NodePath
    columns: List[Column]
    frame: pd.DataFrame

    @property
    def n_rows(self) -> int:
        return len(self.frame)

    def parent_durations(self) -> np.ndarray:
        return self.frame.sum(axis=1).to_numpy(dtype=float)


def _as_profile(source: Union[Forest, CallProfile], root_func: Optional[int]) -> CallProfile:
    if isinstance(source, CallProfile):
        return source
    return CallProfile(source, root_func)


def build_sample_matrix(source: Union[Forest, CallProfile], parent: NodePath) -> SampleMatrix:
    """
    Sample matrix for one parent path

    Args:
        source: A forest or an already built CallProfile
        parent: Path from the root (first element is the root function)

    Raises:
        UnknownNodeError: the parent path was never observed
        InsufficientSamplesError: the parent appears in fewer than 2 samples
    """
    profile = _as_profile(source, parent[0][0] if parent else None)
    if parent not in profile.durations:
        raise UnknownNodeError(f"call path {format_path(parent)} was never observed")

    rows = sorted(profile.durations[parent])
    if len(rows) < 2:
        raise InsufficientSamplesError(
            f"insufficient samples: {format_path(parent)} appears in {len(rows)} root invocation(s)")

    columns = [Column(child) for child in profile.child_paths(parent)]
    columns.append(Column(parent, is_body=True))

    data = {}
    for column in columns:
        cells = profile.bodies[parent] if column.is_body else profile.durations[column.path]
        data[column.label] = [cells.get(row, 0) for row in rows]
    frame = pd.DataFrame(data, index=pd.Index(rows, name="sample"), dtype=float)
    return SampleMatrix(parent, columns, frame)


@dataclass(frozen=True)
class VarianceNode:
    """
    One Var or Cov term under a parent

    value is the raw (co)variance in ns^2; contribution is the term's share of
    root variance, with Cov terms counted twice as in the decomposition sum.
    """

    kind: str
    parent: NodePath
    columns: Tuple[Column, ...]
    value: float
    contribution: float

    @property
    def is_variance(self) -> bool:
        return self.kind == "var"

    @property
    def weighted_value(self) -> float:
        return self.value if self.is_variance else 2.0 * self.value


def decompose_variance(matrix: SampleMatrix, parent_contribution: float = 1.0) -> List[VarianceNode]:
    """
    Var terms per column and Cov terms per unordered column pair

    Args:
        matrix: Sample matrix with >= 2 rows
        parent_contribution: The parent's own share of root variance; the
            returned contributions sum to it (1.0 at the root)

    Returns:
        list: Var nodes in column order followed by Cov nodes (i < j)
    """
    cov = covariance_matrix(matrix)
    k = len(matrix.columns)
    parent_variance = float(cov.sum())
    scale = parent_contribution / parent_variance if parent_variance > 0 else 0.0

    nodes = []
    for i in range(k):
        value = float(cov[i, i])
        nodes.append(VarianceNode("var", matrix.node, (matrix.columns[i],), value, value * scale))
    for i in range(k):
        for j in range(i + 1, k):
            value = float(cov[i, j])
            nodes.append(VarianceNode("cov", matrix.node, (matrix.columns[i], matrix.columns[j]),
                                      value, 2.0 * value * scale))
    return nodes


@dataclass
class Heights:
    paths: Dict[NodePath, int]
    functions: Dict[int, int]
    graph: int

    def of_column(self, column: Column) -> int:
        if column.is_body:
            return 0
        return self.functions.get(column.func_id, 0)


def compute_heights(source: Union[Forest, CallProfile], root_func: Optional[int] = None) -> Heights:
    """
    Heights over the observed dynamic call tree

    Leaves are 0, a parent is 1 + max(child heights); a function takes the max
    over all its occurrences; the call graph height is the tallest root path.
    """
    profile = _as_profile(source, root_func)
    paths: Dict[NodePath, int] = {}
    # longest paths first so every child is resolved before its parent
    for path in sorted(profile.durations, key=len, reverse=True):
        kids = profile.children.get(path)
        paths[path] = 1 + max(paths[c] for c in kids) if kids else 0

    functions: Dict[int, int] = {}
    for path, height in paths.items():
        func_id = path[-1][0]
        functions[func_id] = max(height, functions.get(func_id, 0))

    graph = max((paths[p] for p in profile.root_paths()), default=0)
    return Heights(paths, functions, graph)


@dataclass
class VarianceTree:
    """Decomposed terms per expanded parent path, plus what they were built from."""

    root_func: int
    profile: CallProfile
    heights: Heights
    root_variance: float
    terms: Dict[NodePath, List[VarianceNode]] = field(default_factory=dict)
    contributions: Dict[NodePath, float] = field(default_factory=dict)

    @property
    def n_samples(self) -> int:
        return self.profile.n_samples

    def all_terms(self) -> List[VarianceNode]:
        return [node for path in sorted(self.terms) for node in self.terms[path]]

    def depth(self) -> int:
        return max((len(path) for path in self.terms), default=0)


def build_variance_tree(forest: Union[Forest, CallProfile], root_func: int) -> VarianceTree:
    """
    Decompose every observed parent path below the root

    Child Var contributions become the child's own contribution, so terms of
    each parent sum to that parent's share of root variance.

    Raises:
        UnknownNodeError: no root invocation of root_func in the forest
        InsufficientSamplesError: fewer than 2 root invocations
    """
    profile = _as_profile(forest, root_func)
    top = root_path(root_func)
    if top not in profile.durations:
        raise UnknownNodeError(f"no root invocations of func {root_func} in the trace")
    if profile.n_samples < 2:
        raise InsufficientSamplesError(f"insufficient samples: {profile.n_samples} root invocation(s)")

    heights = compute_heights(profile)
    root_variance = float(np.var(profile.root_durations()))
    tree = VarianceTree(root_func, profile, heights, root_variance)
    tree.contributions[top] = 1.0

    queue = deque([top])
    while queue:
        parent = queue.popleft()
        if not profile.children.get(parent):
            continue
        try:
            matrix = build_sample_matrix(profile, parent)
        except InsufficientSamplesError:
            logger.debug(f"Skipping {format_path(parent)}: fewer than 2 samples")
            continue
        nodes = decompose_variance(matrix, tree.contributions[parent])
        tree.terms[parent] = nodes
        for node in nodes:
            column = node.columns[0]
            if node.is_variance and not column.is_body:
                tree.contributions[column.path] = node.contribution
                queue.append(column.path)

    logger.info(f"Variance tree over {profile.n_samples} samples: "
                f"{len(tree.terms)} expanded nodes, root variance {root_variance:.4g} ns^2")
    return tree


class FactorId(NamedTuple):
    """Call-site-free factor identity; terms are sorted (func_id, is_body) pairs."""

    kind: str
    terms: Tuple[Tuple[int, bool], ...]

    @property
    def func_ids(self) -> Tuple[int, ...]:
        return tuple(func_id for func_id, _ in self.terms)

    @property
    def is_variance(self) -> bool:
        return self.kind == "var"

    def label(self, registry: Optional[FunctionRegistry] = None) -> str:
        def name(term: Tuple[int, bool]) -> str:
            func_id, is_body = term
            base = registry.name_of(func_id) if registry else f"func#{func_id}"
            return f"body({base})" if is_body else base
        inner = ", ".join(name(t) for t in self.terms)
        return f"{'Var' if self.is_variance else 'Cov'}({inner})"


def factor_id_of(node: VarianceNode) -> FactorId:
    terms = tuple(sorted((c.func_id, c.is_body) for c in node.columns))
    return FactorId(node.kind, terms)


@dataclass(frozen=True)
class Factor:
    identity: FactorId
    total_value: float
    contribution: float
    height: int
    specificity: int
    score: float
    sites: Tuple[NodePath, ...] = ()

    @property
    def kind(self) -> str:
        return self.identity.kind

    def to_dict(self, registry: Optional[FunctionRegistry] = None) -> Dict[str, Any]:
        return {
            "identity": self.identity.label(registry),
            "kind": self.kind,
            "func_ids": list(self.identity.func_ids),
            "total_value": self.total_value,
            "contribution": self.contribution,
            "height": self.height,
            "specificity": self.specificity,
            "score": self.score,
            "n_sites": len(self.sites),
        }


def aggregate_factors(nodes: Iterable[VarianceNode], heights: Heights) -> List[Factor]:
    """
    Merge per-site terms into one Factor per function or function pair

    total_value and contribution are summed over sites; the score uses the
    factor height (max of the two terms for a covariance).
    """
    grouped: Dict[FactorId, List[VarianceNode]] = {}
    for node in nodes:
        grouped.setdefault(factor_id_of(node), []).append(node)

    factors = []
    for identity, members in grouped.items():
        height = max(heights.of_column(c) for c in members[0].columns)
        specificity = max(heights.graph - height, 0) ** 2
        total_value = float(sum(m.value for m in members))
        factors.append(Factor(
            identity=identity,
            total_value=total_value,
            contribution=float(sum(m.contribution for m in members)),
            height=height,
            specificity=specificity,
            score=specificity * total_value,
            sites=tuple(sorted(m.parent for m in members)),
        ))
    return factors


@dataclass(frozen=True)
class SelectionParams:
    k: int = 5
    d: float = 0.05

    def __post_init__(self):
        if self.k < 1:
            raise ValueError(f"k must be >= 1, got {self.k}")
        if not 0.0 <= self.d <= 1.0:
            raise ValueError(f"d must be within [0, 1], got {self.d}")


def ranking_key(factor: Factor) -> Tuple[float, float, FactorId]:
    return (-factor.score, -factor.contribution, factor.identity)


def select_factors(tree: Union[VarianceTree, Iterable[Factor]], params: SelectionParams) -> List[Factor]:
    """
    Top-k factors by score among those contributing at least d

    Ties: higher contribution first, then the smaller FactorId.
    """
    if isinstance(tree, VarianceTree):
        factors = aggregate_factors(tree.all_terms(), tree.heights)
    else:
        factors = list(tree)
    eligible = [f for f in factors if f.contribution >= params.d]
    eligible.sort(key=ranking_key)
    return eligible[:params.k]


def format_path(path: NodePath, registry: Optional[FunctionRegistry] = None) -> str:
    parts = []
    for func_id, site_tag in path:
        name = registry.name_of(func_id) if registry else str(func_id)
        parts.append(f"{name}@{site_tag}")
    return "/".join(parts)


def factor_report(tree: VarianceTree, factors: List[Factor],
                  registry: Optional[FunctionRegistry] = None) -> Dict[str, Any]:
    """The analyze document: root, sample count, root variance and ranked factors."""
    root_name = registry.name_of(tree.root_func) if registry else str(tree.root_func)
    return {
        "root": root_name,
        "n_samples": tree.n_samples,
        "root_variance_ns2": tree.root_variance,
        "factors": [f.to_dict(registry) for f in factors],
    }


def factor_frame(factors: List[Factor], registry: Optional[FunctionRegistry] = None) -> pd.DataFrame:
    columns = ["identity", "kind", "total_value", "contribution", "height", "specificity", "score"]
    rows = [{c: f.to_dict(registry)[c] for c in columns} for f in factors]
    return pd.DataFrame(rows, columns=columns)
