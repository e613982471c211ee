"""
Shared fixtures: seeded generators, synthetic invocation forests and event
streams for the trace and variance-tree suites.
"""

from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pytest

from src.tracefmt import EventKind, FunctionRegistry, Invocation, TraceEvent

ROOT_FUNC = 1

# (func_id, site_tag, children)
Template = Tuple[int, int, list]


def random_template(rng: np.random.Generator, max_depth: int = 6, max_fanout: int = 5,
                    max_nodes: Optional[int] = None) -> Template:
    """Random static call tree rooted at ROOT_FUNC; function ids are unique per node."""
    next_id = [ROOT_FUNC + 1]
    remaining = [max_nodes - 1 if max_nodes else 10 ** 9]

    def grow(func_id: int, site: int, depth: int) -> Template:
        children = []
        if depth < max_depth:
            for tag in range(1, int(rng.integers(0, max_fanout + 1)) + 1):
                if remaining[0] <= 0:
                    break
                remaining[0] -= 1
                child = next_id[0]
                next_id[0] += 1
                children.append(grow(child, tag, depth + 1))
        return (func_id, site, children)

    return grow(ROOT_FUNC, 0, 1)


def template_functions(template: Template) -> List[int]:
    func_id, _, children = template
    found = [func_id]
    for child in children:
        found.extend(template_functions(child))
    return found


def registry_for(func_ids: Sequence[int], root: int = ROOT_FUNC) -> FunctionRegistry:
    registry = FunctionRegistry()
    for func_id in sorted(set(func_ids)):
        registry.register(func_id, f"fn_{func_id}", is_root=func_id == root)
    return registry


def instantiate(template: Template, rng: np.random.Generator, start: int, thread_id: int = 0,
                presence: float = 1.0) -> Invocation:
    """One invocation tree; each child appears with probability `presence`."""
    func_id, site, children = template
    cursor = start + int(rng.integers(1, 50))
    kids = []
    for child in children:
        if presence < 1.0 and rng.random() > presence:
            continue
        inv = instantiate(child, rng, cursor, thread_id, presence)
        kids.append(inv)
        cursor = inv.end_ns + int(rng.integers(0, 20))
    end = cursor + int(rng.integers(1, 50))
    return Invocation(func_id, site, start, end, thread_id, kids)


def random_forest(rng: np.random.Generator, n_samples: int = 20, max_depth: int = 6, max_fanout: int = 5,
                  n_threads: int = 1, presence: float = 1.0, max_nodes: Optional[int] = None
                  ) -> Tuple[Dict[int, List[Invocation]], FunctionRegistry, Template]:
    template = random_template(rng, max_depth, max_fanout, max_nodes)
    forest: Dict[int, List[Invocation]] = {}
    clocks = [0] * n_threads
    for index in range(n_samples):
        thread = index % n_threads
        inv = instantiate(template, rng, clocks[thread], thread, presence)
        clocks[thread] = inv.end_ns + 1
        forest.setdefault(thread, []).append(inv)
    return forest, registry_for(template_functions(template)), template


def events_of(forest: Dict[int, List[Invocation]]) -> List[TraceEvent]:
    """Flatten a forest back into per-thread enter/exit events, threads interleaved by time."""
    events = []
    for thread_id, roots in forest.items():
        for root in roots:
            stack = [(root, False)]
            while stack:
                inv, done = stack.pop()
                if done:
                    events.append(TraceEvent(thread_id, inv.func_id, inv.site_tag, EventKind.EXIT, inv.end_ns))
                    continue
                events.append(TraceEvent(thread_id, inv.func_id, inv.site_tag, EventKind.ENTER, inv.start_ns))
                stack.append((inv, True))
                for child in reversed(inv.children):
                    stack.append((child, False))
    order = {id(e): i for i, e in enumerate(events)}
    events.sort(key=lambda e: (e.ts_ns, order[id(e)]))
    return events


def leaf(func_id: int, site: int, start: int, duration: int) -> Invocation:
    return Invocation(func_id, site, start, start + duration)


def worked_example_forest() -> Tuple[Dict[int, List[Invocation]], FunctionRegistry]:
    """A(1) calls B(2)@1 and C(3)@2; samples B=[1,2], C=[3,5], body(A)=[1,1]."""
    forest = {0: []}
    start = 0
    for b, c in ((1, 3), (2, 5)):
        b_inv = leaf(2, 1, start + 1, b)
        c_inv = leaf(3, 2, b_inv.end_ns, c)
        forest[0].append(Invocation(1, 0, start, c_inv.end_ns, 0, [b_inv, c_inv]))
        start = c_inv.end_ns + 10
    registry = FunctionRegistry()
    registry.register(1, "A", is_root=True)
    registry.register(2, "B")
    registry.register(3, "C")
    return forest, registry


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(20240611)


@pytest.fixture
def worked_example():
    return worked_example_forest()


@pytest.fixture
def env_dirs(tmp_path: Path, monkeypatch: pytest.MonkeyPatch) -> Path:
    """Point trace and log directories at tmp_path."""
    monkeypatch.setenv("VARLAT_TRACE_DIR", str(tmp_path / "traces"))
    monkeypatch.setenv("VARLAT_LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setenv("VARLAT_LOG_LEVEL", "WARNING")
    return tmp_path
