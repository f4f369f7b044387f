"""Multi-level semantic label tree.

Levels are indexed coarse (0) to fine (n).  Every node carries a dense
integer id; within a level, nodes keep the order they were declared in,
and that order is the index used by probability vectors for the level.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import (
    CycleDetected,
    DeadInternalNode,
    DepthExceeded,
    DuplicateName,
    EmptyLevel,
    HierarchyError,
    LeafHasNoChildren,
    OrphanNode,
)

MAX_LEVELS = 8


@dataclass(frozen=True)
class LabelNode:
    id: int
    name: str
    level: int
    parent_id: int | None = None


@dataclass(frozen=True)
class LeafPath:
    leaf_id: int
    node_ids: tuple[int, ...]


@dataclass(frozen=True)
class LevelBalance:
    """Child-count statistics for the transition level -> level + 1."""

    level: int
    min_children: int
    max_children: int
    mean_children: float


@dataclass(frozen=True)
class BalanceReport:
    level_sizes: tuple[int, ...]
    depth: int
    child_counts: dict[int, int]
    per_level: tuple[LevelBalance, ...]
    min_children: int
    max_children: int
    mean_children: float


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


class LabelHierarchy:
    """Validated, immutable label tree.

    Build it with :func:`build_hierarchy` or :func:`hierarchy_from_dict`;
    the constructor assumes its inputs are already consistent.
    """

    def __init__(self, nodes: Sequence[LabelNode], num_levels: int):
        self._nodes = {n.id: n for n in nodes}
        levels: list[list[int]] = [[] for _ in range(num_levels)]
        for n in nodes:
            levels[n.level].append(n.id)
        self._levels = tuple(tuple(ids) for ids in levels)
        self._position = {nid: j for ids in self._levels for j, nid in enumerate(ids)}

        children: dict[int, list[int]] = {n.id: [] for n in nodes}
        for n in nodes:
            if n.parent_id is not None:
                children[n.parent_id].append(n.id)
        self._children = {k: tuple(v) for k, v in children.items()}

        # parent_positions[i][j]: position in level i-1 of the parent of node j of level i
        self._parent_positions: list[np.ndarray | None] = [None]
        for i in range(1, num_levels):
            pos = np.array(
                [self._position[self._nodes[nid].parent_id] for nid in self._levels[i]],
                dtype=np.intp,
            )
            self._parent_positions.append(_readonly(pos))

        paths = []
        for leaf in self._levels[-1]:
            chain = [leaf]
            while self._nodes[chain[-1]].parent_id is not None:
                chain.append(self._nodes[chain[-1]].parent_id)
            paths.append(LeafPath(leaf, tuple(reversed(chain))))
        self._paths = tuple(paths)
        table = np.array(
            [[self._position[nid] for nid in p.node_ids] for p in paths], dtype=np.intp
        ).reshape(len(paths), num_levels)
        self._path_table = _readonly(table)

    # -- basic queries ------------------------------------------------------

    @property
    def num_levels(self) -> int:
        return len(self._levels)

    @property
    def levels(self) -> tuple[tuple[int, ...], ...]:
        """Node ids per level, coarse to fine."""
        return self._levels

    @property
    def level_sizes(self) -> tuple[int, ...]:
        return tuple(len(ids) for ids in self._levels)

    @property
    def leaf_ids(self) -> tuple[int, ...]:
        return self._levels[-1]

    @property
    def nodes(self) -> tuple[LabelNode, ...]:
        return tuple(self._nodes[nid] for ids in self._levels for nid in ids)

    def node(self, node_id: int) -> LabelNode:
        return self._nodes[node_id]

    def level_names(self, level: int) -> list[str]:
        return [self._nodes[nid].name for nid in self._levels[level]]

    def find(self, name: str, level: int | None = None) -> LabelNode:
        """Look a node up by name, optionally restricted to one level."""
        for ids in self._levels if level is None else (self._levels[level],):
            for nid in ids:
                if self._nodes[nid].name == name:
                    return self._nodes[nid]
        raise KeyError(name)

    def position(self, node_id: int) -> int:
        """Index of the node within its own level."""
        return self._position[node_id]

    def children(self, node_id: int) -> tuple[int, ...]:
        return self._children[node_id]

    def parent_positions(self, level: int) -> np.ndarray:
        """For each node of ``level`` (>= 1), the position of its parent in ``level - 1``."""
        if level < 1:
            raise ValueError("level 0 has no parents")
        return self._parent_positions[level]

    @property
    def path_table(self) -> np.ndarray:
        """(num_leaves, num_levels) array of within-level positions along each leaf path."""
        return self._path_table

    def leaf_paths(self) -> list[LeafPath]:
        return list(self._paths)

    def sub_labels(self, node_id: int) -> list[int]:
        kids = self._children[node_id]
        if not kids:
            raise LeafHasNoChildren(f"node {self._nodes[node_id].name!r} has no sub-labels")
        return list(kids)

    def ancestor_at(self, node_id: int, level: int) -> int:
        nid = node_id
        while self._nodes[nid].level > level:
            nid = self._nodes[nid].parent_id
        if self._nodes[nid].level != level:
            raise ValueError(f"node {node_id} is above level {level}")
        return nid

    def fine_to_level(self, level: int) -> np.ndarray:
        """Map leaf position -> position of its ancestor in ``level``."""
        return self._path_table[:, level]

    # -- serialization ------------------------------------------------------

    def to_dict(self) -> dict:
        parents = {}
        for ids in self._levels[1:]:
            for nid in ids:
                node = self._nodes[nid]
                parents[node.name] = self._nodes[node.parent_id].name
        return {"levels": [self.level_names(i) for i in range(self.num_levels)], "parents": parents}

    def digest(self) -> str:
        """Stable content hash, used to bind checkpoints to a hierarchy."""
        blob = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, LabelHierarchy):
            return NotImplemented
        return self.nodes == other.nodes

    def __hash__(self) -> int:
        return hash(self.nodes)

    def __repr__(self) -> str:
        return f"LabelHierarchy(level_sizes={list(self.level_sizes)})"


def _check_cycles(parent_of: dict, describe) -> None:
    state: dict = {}
    for start in parent_of:
        trail = []
        cur = start
        while cur is not None and cur in parent_of and state.get(cur) != "done":
            if state.get(cur) == "open":
                raise CycleDetected(f"cycle through node {describe(cur)}")
            state[cur] = "open"
            trail.append(cur)
            cur = parent_of[cur]
        for t in trail:
            state[t] = "done"


def build_hierarchy(nodes: Iterable[LabelNode], num_levels: int | None = None) -> LabelHierarchy:
    """Validate ``nodes`` and assemble a :class:`LabelHierarchy`.

    ``num_levels`` defaults to one past the deepest level present.  Checks
    run in a fixed order (cycles, orphans, names, empty levels, dead
    internal nodes) so the reported error is deterministic.
    """
    nodes = list(nodes)
    if not nodes:
        raise EmptyLevel("hierarchy has no nodes")
    by_id: dict[int, LabelNode] = {}
    for n in nodes:
        if n.id in by_id:
            raise DuplicateName(f"duplicate node id {n.id}")
        if n.level < 0:
            raise HierarchyError(f"node {n.name!r} has negative level {n.level}")
        by_id[n.id] = n

    deepest = max(n.level for n in nodes) + 1
    if num_levels is None:
        num_levels = deepest
    elif deepest > num_levels:
        raise HierarchyError(f"node at level {deepest - 1} exceeds declared {num_levels} levels")
    if num_levels > MAX_LEVELS:
        raise DepthExceeded(f"{num_levels} levels exceeds the supported maximum of {MAX_LEVELS}")

    _check_cycles({n.id: n.parent_id for n in nodes}, lambda nid: repr(by_id[nid].name))

    for n in nodes:
        if n.level == 0:
            if n.parent_id is not None:
                raise OrphanNode(f"root-level node {n.name!r} declares a parent")
            continue
        parent = by_id.get(n.parent_id) if n.parent_id is not None else None
        if parent is None:
            raise OrphanNode(f"node {n.name!r} at level {n.level} has no parent")
        if parent.level != n.level - 1:
            raise OrphanNode(
                f"node {n.name!r} at level {n.level} has parent {parent.name!r} at level {parent.level}"
            )

    seen: set[tuple[int, str]] = set()
    for n in nodes:
        if (n.level, n.name) in seen:
            raise DuplicateName(f"label {n.name!r} appears twice in level {n.level}")
        seen.add((n.level, n.name))

    sizes = [0] * num_levels
    for n in nodes:
        sizes[n.level] += 1
    for i, s in enumerate(sizes):
        if s == 0:
            raise EmptyLevel(f"level {i} is empty")

    has_child = {n.parent_id for n in nodes if n.parent_id is not None}
    for n in nodes:
        if n.level < num_levels - 1 and n.id not in has_child:
            raise DeadInternalNode(f"node {n.name!r} at level {n.level} has no children")

    return LabelHierarchy(nodes, num_levels)


def sub_labels(h: LabelHierarchy, node_id: int) -> list[int]:
    return h.sub_labels(node_id)


def leaf_paths(h: LabelHierarchy) -> list[LeafPath]:
    return h.leaf_paths()


def balance_metrics(h: LabelHierarchy) -> BalanceReport:
    counts = {nid: len(h.children(nid)) for ids in h.levels[:-1] for nid in ids}
    per_level = []
    for i in range(h.num_levels - 1):
        c = [counts[nid] for nid in h.levels[i]]
        per_level.append(LevelBalance(i, min(c), max(c), sum(c) / len(c)))
    allc = list(counts.values())
    return BalanceReport(
        level_sizes=h.level_sizes,
        depth=h.num_levels,
        child_counts=counts,
        per_level=tuple(per_level),
        min_children=min(allc) if allc else 0,
        max_children=max(allc) if allc else 0,
        mean_children=sum(allc) / len(allc) if allc else 0.0,
    )


# -- file format -----------------------------------------------------------


def hierarchy_from_dict(doc: object) -> LabelHierarchy:
    """Parse the ``{"levels": [...], "parents": {...}}`` document.

    Names are keys of the parent map, so the file format requires them to be
    unique across the whole tree, not only within a level.
    """
    if not isinstance(doc, dict) or not isinstance(doc.get("levels"), list):
        raise HierarchyError("hierarchy document must be an object with a 'levels' list")
    levels = doc["levels"]
    parents = doc.get("parents", {})
    if not isinstance(parents, dict):
        raise HierarchyError("'parents' must be an object mapping child name to parent name")
    if not levels:
        raise EmptyLevel("hierarchy has no levels")

    level_of: dict[str, int] = {}
    for i, names in enumerate(levels):
        if not isinstance(names, list) or not all(isinstance(x, str) for x in names):
            raise HierarchyError(f"level {i} must be a list of strings")
        if not names:
            raise EmptyLevel(f"level {i} is empty")
        for name in names:
            if name in level_of:
                raise DuplicateName(f"label {name!r} appears more than once")
            level_of[name] = i
    if len(levels) > MAX_LEVELS:
        raise DepthExceeded(f"{len(levels)} levels exceeds the supported maximum of {MAX_LEVELS}")

    for child, parent in parents.items():
        if not isinstance(parent, str):
            raise HierarchyError(f"parent of {child!r} must be a string")
    _check_cycles(dict(parents), repr)

    ids = {name: k for k, name in enumerate(n for names in levels for n in names)}
    nodes = []
    for i, names in enumerate(levels):
        for name in names:
            if i == 0:
                if name in parents:
                    raise OrphanNode(f"root-level node {name!r} declares a parent")
                nodes.append(LabelNode(ids[name], name, 0, None))
                continue
            parent = parents.get(name)
            if parent is None:
                raise OrphanNode(f"node {name!r} at level {i} has no parent")
            if parent not in level_of:
                raise OrphanNode(f"parent {parent!r} of node {name!r} is not a declared label")
            nodes.append(LabelNode(ids[name], name, i, ids[parent]))
    for child in parents:
        if child not in level_of:
            raise OrphanNode(f"parent map names undeclared label {child!r}")
    return build_hierarchy(nodes, num_levels=len(levels))


def hierarchy_to_dict(h: LabelHierarchy) -> dict:
    return h.to_dict()


def loads_hierarchy(text: str | bytes) -> LabelHierarchy:
    if isinstance(text, bytes):
        text = text.decode("utf-8")
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise HierarchyError(f"hierarchy file is not valid JSON: {exc}") from exc
    return hierarchy_from_dict(doc)


def load_hierarchy(path: str | Path) -> LabelHierarchy:
    return loads_hierarchy(Path(path).read_bytes())


def dumps_hierarchy(h: LabelHierarchy) -> str:
    return json.dumps(h.to_dict(), indent=2, ensure_ascii=False) + "\n"


def save_hierarchy(h: LabelHierarchy, path: str | Path) -> None:
    Path(path).write_text(dumps_hierarchy(h), encoding="utf-8")


def builtin_hierarchy(name: str = "s3dis") -> LabelHierarchy:
    """Bundled fixtures: ``"s3dis"`` ([3, 6, 13]) and ``"s3dis_alt"``, the same
    13 leaves grouped without regard to meaning."""
    from importlib import resources

    blob = resources.files("hieract.data").joinpath(f"{name}_hierarchy.json").read_bytes()
    return loads_hierarchy(blob)
