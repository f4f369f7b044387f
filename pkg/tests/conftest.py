from __future__ import annotations

import numpy as np
import pytest

from hieract.hierarchy import LabelHierarchy, LabelNode, build_hierarchy, builtin_hierarchy


def tree_from_children(children: dict[str, list[str]], roots: list[str]) -> LabelHierarchy:
    """Build a hierarchy from ``{parent: [children]}`` plus the root list."""
    nodes = []
    ids = {}
    frontier = list(roots)
    level = 0
    parent_of = {c: p for p, cs in children.items() for c in cs}
    while frontier:
        for name in frontier:
            ids[name] = len(ids)
            pid = ids[parent_of[name]] if name in parent_of else None
            nodes.append(LabelNode(ids[name], name, level, pid))
        frontier = [c for name in frontier for c in children.get(name, [])]
        level += 1
    return build_hierarchy(nodes)


def random_hierarchy(rng: np.random.Generator, max_levels: int = 4, max_branch: int = 5) -> LabelHierarchy:
    num_levels = int(rng.integers(2, max_levels + 1))
    nodes = []
    prev = []
    for lvl in range(num_levels):
        cur = []
        if lvl == 0:
            for _ in range(int(rng.integers(1, max_branch + 1))):
                cur.append(len(nodes))
                nodes.append(LabelNode(len(nodes), f"n{len(nodes)}", 0, None))
        else:
            for p in prev:
                for _ in range(int(rng.integers(1, max_branch + 1))):
                    cur.append(len(nodes))
                    nodes.append(LabelNode(len(nodes), f"n{len(nodes)}", lvl, p))
        prev = cur
    return build_hierarchy(nodes)


def random_levels(rng: np.random.Generator, h: LabelHierarchy, n: int, sharp: float = 1.0) -> list[np.ndarray]:
    return [rng.dirichlet(np.full(s, sharp), size=n) for s in h.level_sizes]


@pytest.fixture
def s3dis() -> LabelHierarchy:
    return builtin_hierarchy("s3dis")


@pytest.fixture
def small_tree() -> LabelHierarchy:
    # A -> {A1, A2}, B -> {B1}
    return tree_from_children({"A": ["A1", "A2"], "B": ["B1"]}, ["A", "B"])


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
