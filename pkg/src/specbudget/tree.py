"""Tree attention masks for speculative decoding.

A mask is a rooted tree of candidate tokens. Each non-root node is addressed by
its *rank path*: the sibling ranks from the root down, where rank 0 is the
most probable token sampled at that level. ``(0, 2)`` is the third-ranked
continuation of the first-ranked level-1 token.

Nodes are kept in level-major order (level, then path), which is also the row
order of :func:`ancestor_mask`. Independently of that order, each node has a
*priority*: its position in the probability-sorted path list the mask was
loaded from. Trees generated here use level-major order as priority.
"""

from __future__ import annotations

import heapq
import json
import math
import warnings
from dataclasses import dataclass
from functools import cached_property, lru_cache
from importlib import resources
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .memory import TreeShape

DEFAULT_NODE_LIMIT = 10**6
Path_ = tuple[int, ...]


class TreeStructureError(ValueError):
    """A tree or a requested tree transformation violates the structural invariants."""


class InfeasibleTreeError(TreeStructureError):
    """No tree satisfies the requested (nodes, leaves, arity, levels) features."""

    def __init__(self, violations: Sequence[str]):
        self.violations = list(violations)
        super().__init__("infeasible tree features: " + "; ".join(self.violations))


@dataclass(frozen=True)
class Node:
    id: int
    parent: int | None
    level: int
    rank: int
    priority: int


def _level_order(paths: Iterable[Path_]) -> list[Path_]:
    return sorted(paths, key=lambda p: (len(p), p))


class TreeMask:
    """Immutable tree mask. Build one with the module functions or :meth:`from_paths`."""

    def __init__(self, arity: int, paths: Sequence[Path_], priority: Sequence[int] | None = None):
        self.arity = int(arity)
        ordered = _level_order(tuple(p) for p in paths)
        if priority is None:
            prio = {p: i for i, p in enumerate(ordered)}
        else:
            prio = dict(zip((tuple(p) for p in paths), priority))
        self._paths: tuple[Path_, ...] = tuple(ordered)
        self._priority: dict[Path_, int] = prio
        self._validate()

    # -- construction helpers -------------------------------------------------

    @classmethod
    def from_paths(cls, paths: Sequence[Sequence[int]], arity: int | None = None) -> TreeMask:
        """Build from a Medusa-style choice list; list order becomes priority order."""
        tuples = [tuple(int(r) for r in p) for p in paths]
        if len(set(tuples)) != len(tuples):
            raise TreeStructureError("duplicate paths in path list")
        if arity is None:
            arity = max((max(p) for p in tuples if p), default=0) + 1
        return cls(arity, tuples, priority=range(len(tuples)))

    def _validate(self) -> None:
        if self.arity < 1:
            raise TreeStructureError("arity must be >= 1")
        seen = set(self._paths)
        if () in seen:
            raise TreeStructureError("the root is implicit and must not appear as a path")
        for p in self._paths:
            if any(r < 0 or r >= self.arity for r in p):
                raise TreeStructureError(f"path {list(p)} has a rank outside [0, {self.arity})")
            if len(p) > 1 and p[:-1] not in seen:
                raise TreeStructureError(f"path {list(p)} has no parent in the mask")
        if sorted(self._priority) != sorted(self._paths):
            raise TreeStructureError("priority must cover every path exactly once")

    # -- basic views -------------------------------------------------------------

    @property
    def paths(self) -> tuple[Path_, ...]:
        """Non-root rank paths in level-major order."""
        return self._paths

    def priority(self, path: Path_) -> int:
        return self._priority[path]

    def path_list(self) -> list[list[int]]:
        """Paths in priority order, the Medusa choice-list layout."""
        return [list(p) for p in sorted(self._paths, key=self._priority.__getitem__)]

    @cached_property
    def index(self) -> dict[Path_, int]:
        out = {(): 0}
        for i, p in enumerate(self._paths, start=1):
            out[p] = i
        return out

    @cached_property
    def nodes(self) -> tuple[Node, ...]:
        idx = self.index
        out = [Node(0, None, 0, 0, -1)]
        for p in self._paths:
            out.append(Node(idx[p], idx[p[:-1]], len(p), p[-1], self._priority[p]))
        return tuple(out)

    @cached_property
    def children(self) -> dict[Path_, list[Path_]]:
        kids: dict[Path_, list[Path_]] = {(): []}
        for p in self._paths:
            kids.setdefault(p, [])
            kids[p[:-1]].append(p)
        for v in kids.values():
            v.sort()
        return kids

    @property
    def num_nodes(self) -> int:
        return len(self._paths) + 1

    @property
    def levels(self) -> int:
        return max((len(p) for p in self._paths), default=0)

    @cached_property
    def leaves(self) -> tuple[Path_, ...]:
        """Leaf paths, left to right. A root-only mask has the root as its one leaf."""
        if not self._paths:
            return ((),)
        return tuple(sorted(p for p in self._paths if not self.children[p]))

    @cached_property
    def level_counts(self) -> tuple[int, ...]:
        counts = [1] + [0] * self.levels
        for p in self._paths:
            counts[len(p)] += 1
        return tuple(counts)

    @property
    def label(self) -> str:
        return "-".join(str(c) for c in self.level_counts)

    @property
    def shape(self) -> TreeShape:
        return TreeShape(self.num_nodes, len(self.leaves), self.levels, self.arity)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TreeMask):
            return NotImplemented
        return (self.arity == other.arity and self._paths == other._paths
                and self._priority == other._priority)

    def __hash__(self) -> int:
        return hash((self.arity, self._paths))

    def __repr__(self) -> str:
        return f"TreeMask(arity={self.arity}, label={self.label!r}, leaves={len(self.leaves)})"

    # -- serialization -------------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "arity": self.arity,
            "nodes": [
                {"id": n.id, "parent": n.parent, "level": n.level, "rank": n.rank,
                 **({"priority": n.priority} if n.parent is not None else {})}
                for n in self.nodes
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> TreeMask:
        try:
            arity = int(doc["arity"])
            records = doc["nodes"]
        except (KeyError, TypeError) as exc:
            raise TreeStructureError(f"native mask JSON needs 'arity' and 'nodes': {exc}") from None
        by_id = {int(r["id"]): r for r in records}
        roots = [r for r in records if r.get("parent") is None]
        if len(roots) != 1:
            raise TreeStructureError(f"expected exactly one root, found {len(roots)}")
        path_of: dict[int, Path_] = {}

        def resolve(node_id: int, depth: int = 0) -> Path_:
            if node_id in path_of:
                return path_of[node_id]
            if depth > len(by_id):
                raise TreeStructureError("cycle in parent links")
            rec = by_id[node_id]
            if rec.get("parent") is None:
                path = ()
            else:
                if int(rec["parent"]) not in by_id:
                    raise TreeStructureError(f"node {node_id} has unknown parent {rec['parent']}")
                path = resolve(int(rec["parent"]), depth + 1) + (int(rec["rank"]),)
            if "level" in rec and int(rec["level"]) != len(path):
                raise TreeStructureError(f"node {node_id} declares level {rec['level']}, actual {len(path)}")
            path_of[node_id] = path
            return path

        paths, prio = [], []
        for rec in records:
            p = resolve(int(rec["id"]))
            if p:
                paths.append(p)
                prio.append(int(rec.get("priority", len(prio))))
        if len(set(paths)) != len(paths):
            raise TreeStructureError("two nodes share a parent and rank")
        if len(set(prio)) != len(prio):
            prio = list(range(len(paths)))
        return cls(arity, paths, prio)


# -- loading ----------------------------------------------------------------------------


def medusa_vicuna_7b() -> TreeMask:
    """The 64-node, 42-leaf Medusa mask shipped for Vicuna-7B."""
    text = resources.files("specbudget.data").joinpath("medusa_vicuna_7b.json").read_text()
    return TreeMask.from_paths(json.loads(text), arity=10)


BUILTIN_MASKS = {"medusa": medusa_vicuna_7b, "medusa-vicuna-7b": medusa_vicuna_7b}


def load_mask(source: str | Path, arity: int | None = None) -> TreeMask:
    """Load a mask file (path-list or native JSON) or a built-in name."""
    name = str(source)
    if name in BUILTIN_MASKS:
        return BUILTIN_MASKS[name]()
    doc = json.loads(Path(source).read_text())
    if isinstance(doc, dict):
        return TreeMask.from_json(doc)
    if isinstance(doc, list):
        return TreeMask.from_paths(doc, arity=arity)
    raise TreeStructureError(f"{source}: expected a path list or a native mask object")


def dump_mask(mask: TreeMask, fmt: str = "json") -> str:
    if fmt == "json":
        return json.dumps(mask.to_json(), indent=1) + "\n"
    if fmt == "path-list":
        return json.dumps(mask.path_list()) + "\n"
    raise ValueError(f"unknown mask format {fmt!r}")


# -- full trees and the pruning schedule -------------------------------------------------


def _warn_domain(arity: int, levels: int) -> None:
    if arity not in (5, 10) or not 1 <= levels <= 5:
        warnings.warn(f"arity={arity}, levels={levels} is outside the studied range "
                      "(arity 5 or 10, 1-5 levels)", stacklevel=3)


def full_tree_size(arity: int, levels: int) -> int:
    return sum(arity**i for i in range(levels + 1))


def full_tree(arity: int, levels: int, node_limit: int = DEFAULT_NODE_LIMIT) -> TreeMask:
    if arity < 1 or levels < 1:
        raise ValueError("full_tree needs arity >= 1 and levels >= 1")
    _warn_domain(arity, levels)
    size = full_tree_size(arity, levels)
    if size > node_limit:
        raise TreeStructureError(f"full tree has {size} nodes, above the limit of {node_limit}")
    paths: list[Path_] = []
    frontier: list[Path_] = [()]
    for _ in range(levels):
        frontier = [p + (r,) for p in frontier for r in range(arity)]
        paths.extend(frontier)
    return TreeMask(arity, paths)


@dataclass(frozen=True)
class PruneSchedule:
    """Scaled logistic pruning rate per level.

    The defaults are estimates read off a plotted curve; treat them as tunable.
    """

    r_min: float = 0.1
    r_max: float = 0.95
    midpoint_level: float = 2.5
    steepness: float = 2.0

    def __post_init__(self):
        if not 0.0 <= self.r_min <= self.r_max <= 1.0:
            raise ValueError("PruneSchedule needs 0 <= r_min <= r_max <= 1")
        if self.steepness < 0:
            raise ValueError("steepness must be >= 0 so the rate never falls with depth")


def prune_rate(level: float, schedule: PruneSchedule = PruneSchedule()) -> float:
    if level < 1:
        raise ValueError("pruning rates are defined for levels >= 1")
    z = -schedule.steepness * (level - schedule.midpoint_level)
    # exp overflows past ~709; the logistic is already at r_min there
    logistic = 0.0 if z > 700 else 1.0 / (1.0 + math.exp(z))
    return schedule.r_min + (schedule.r_max - schedule.r_min) * logistic


def prune_full_tree(arity: int, levels: int, schedule: PruneSchedule = PruneSchedule(),
                    node_limit: int = DEFAULT_NODE_LIMIT, allow_truncation: bool = True) -> TreeMask:
    """Prune an (implicit) full tree level by level with the logistic schedule.

    Level 1 keeps all ``arity`` nodes. Deeper levels keep
    ``ceil((1 - rate) * arity**level)`` nodes, leftmost first, limited to the
    children of surviving parents. A level pruned to nothing ends the tree
    there, unless ``allow_truncation`` is False.
    """
    if arity < 1 or levels < 1:
        raise ValueError("prune_full_tree needs arity >= 1 and levels >= 1")
    _warn_domain(arity, levels)
    size = full_tree_size(arity, levels)
    if size > node_limit:
        raise TreeStructureError(f"full tree has {size} nodes, above the limit of {node_limit}")
    paths: list[Path_] = []
    frontier: list[Path_] = [(r,) for r in range(arity)]
    paths.extend(frontier)
    for level in range(2, levels + 1):
        ideal = arity**level
        want = math.ceil(round((1.0 - prune_rate(level, schedule)) * ideal, 9))
        if want <= 0:
            if not allow_truncation:
                raise TreeStructureError(f"schedule empties level {level}")
            warnings.warn(f"schedule empties level {level}; tree truncated to {level - 1} levels",
                          stacklevel=2)
            break
        # children of a lexicographic prefix are themselves a lexicographic prefix
        frontier = [p + (r,) for p in frontier for r in range(arity)][:want]
        paths.extend(frontier)
    return TreeMask(arity, paths)


# -- in-place (right-to-left) pruning ---------------------------------------------------


def prune_in_place(mask: TreeMask, target_nodes: int) -> TreeMask:
    """Shrink ``mask`` to exactly ``target_nodes`` nodes, root included.

    Only leaves that are the rightmost child of their parent are removable, so
    every surviving node keeps all of its lower-ranked siblings. Among those,
    the shallowest leaf goes first (short candidate sequences add the least
    acceptance length), then the one under the highest-ranked parent, then the
    least probable. Depth is therefore preserved down to a single chain of
    ``levels + 1`` nodes, which is the floor.
    """
    floor = mask.levels + 1
    if not floor <= target_nodes <= mask.num_nodes:
        raise TreeStructureError(
            f"target {target_nodes} outside [{floor}, {mask.num_nodes}] for a {mask.levels}-level mask")
    alive = set(mask.paths)
    nkids = {p: len(k) for p, k in mask.children.items()}

    def removable(p: Path_) -> bool:
        return nkids.get(p, 0) == 0 and (p[:-1] + (p[-1] + 1,)) not in alive

    def key(p: Path_) -> tuple:
        parent_rank = p[-2] if len(p) > 1 else -1
        return (len(p), -parent_rank, -mask.priority(p), p)

    heap = [key(p) for p in alive if removable(p)]
    heapq.heapify(heap)
    remaining = mask.num_nodes
    while remaining > target_nodes:
        *_, p = heapq.heappop(heap)
        if p not in alive or not removable(p):
            continue
        alive.remove(p)
        remaining -= 1
        parent = p[:-1]
        nkids[parent] -= 1
        if parent and removable(parent):
            heapq.heappush(heap, key(parent))
        if p[-1] > 0:
            left = parent + (p[-1] - 1,)
            if left in alive and removable(left):
                heapq.heappush(heap, key(left))
    prio = [mask.priority(p) for p in alive]
    return TreeMask(mask.arity, list(alive), prio)


def truncate(mask: TreeMask, levels: int) -> TreeMask:
    """Drop every node deeper than ``levels``."""
    kept = [p for p in mask.paths if len(p) <= levels]
    return TreeMask(mask.arity, kept, [mask.priority(p) for p in kept])


# -- building from exact features --------------------------------------------------


def _min_tips(internal: int, depth: int, arity: int) -> int:
    """Fewest leaves a tree of ``internal`` nodes and height <= ``depth`` can have."""
    if depth == 0:
        return 1
    tips = 1
    while sum(min(tips, arity**d) for d in range(depth + 1)) < internal:
        tips += 1
    return tips


def tree_feasibility(nodes: int, leaves: int, arity: int, levels: int) -> list[str]:
    """Violated constraints for a tree with exactly these features; empty if feasible."""
    out = []
    if arity < 1 or levels < 1:
        return ["arity >= 1 and levels >= 1"]
    if leaves < 1:
        out.append("leaves >= 1")
    if nodes < levels + 1:
        out.append(f"nodes >= levels + 1 ({levels + 1})")
    if out:
        return out
    internal = nodes - leaves
    if internal < levels:
        out.append(f"leaves <= nodes - levels ({nodes - levels}): every level above the "
                   "deepest needs an internal node")
    if nodes - 1 > arity * internal:
        out.append(f"nodes - 1 <= arity * internal ({arity} * {internal}): too few parents for "
                   f"{nodes - 1} children")
    if leaves > arity**levels:
        out.append(f"leaves <= arity**levels ({arity ** levels})")
    max_internal = full_tree_size(arity, levels - 1)
    if internal > max_internal:
        out.append(f"internal nodes <= {max_internal} for {levels} levels")
    elif internal >= levels and leaves < _min_tips(internal, levels - 1, arity):
        out.append(f"leaves >= {_min_tips(internal, levels - 1, arity)}: {internal} internal "
                   f"nodes within {levels - 1} levels leave that many childless parents")
    return out


@lru_cache(maxsize=65536)
def leaf_range(nodes: int, arity: int, levels: int) -> range:
    """Feasible leaf counts for a tree of ``nodes`` nodes (possibly empty)."""
    ok = [s for s in range(1, nodes + 1) if not tree_feasibility(nodes, s, arity, levels)]
    if not ok:
        return range(0)
    return range(ok[0], ok[-1] + 1)


def build_custom_tree(total_nodes: int, total_leaves: int, arity: int = 10, levels: int = 4) -> TreeMask:
    """Deterministic left-heavy tree with exactly the requested node and leaf counts.

    Starts from the rank-0 spine down to ``levels - 1``, adds the remaining
    internal nodes breadth-first (switching to extending existing tips once the
    leaf budget would be exceeded), then gives every tip one leaf and spends the
    remaining leaves on the shallowest free slots, left to right.
    """
    violations = tree_feasibility(total_nodes, total_leaves, arity, levels)
    if violations:
        raise InfeasibleTreeError(violations)
    internal_total = total_nodes - total_leaves
    internal: set[Path_] = {(0,) * d for d in range(levels)}
    nkids: dict[Path_, int] = {(0,) * d: 1 for d in range(levels - 1)}
    nkids[(0,) * (levels - 1)] = 0
    tips = 1

    def add_internal(p: Path_) -> None:
        nonlocal tips
        parent = p[:-1]
        if nkids[parent] > 0:
            tips += 1
        nkids[parent] += 1
        internal.add(p)
        nkids[p] = 0

    while len(internal) < internal_total:
        parents = sorted((q for q in internal if len(q) <= levels - 2 and nkids[q] < arity),
                         key=lambda q: (len(q), q))
        extend = [q for q in parents if nkids[q] == 0]
        if tips < total_leaves and parents:
            q = parents[0]
        elif extend:
            q = extend[0]
        else:
            raise InfeasibleTreeError([f"could not place {internal_total} internal nodes "
                                       f"with at most {total_leaves} tips"])
        add_internal(q + (nkids[q],))

    paths = set(internal) - {()}
    leaf_count = 0
    for q in sorted(internal, key=lambda q: (len(q), q)):
        if nkids[q] == 0:
            paths.add(q + (0,))
            nkids[q] = 1
            leaf_count += 1
    for q in sorted(internal, key=lambda q: (len(q), q)):
        while leaf_count < total_leaves and nkids[q] < arity:
            paths.add(q + (nkids[q],))
            nkids[q] += 1
            leaf_count += 1
    mask = TreeMask(arity, list(paths))
    if mask.num_nodes != total_nodes or len(mask.leaves) != total_leaves or mask.levels != levels:
        raise InfeasibleTreeError([f"construction produced {mask.shape}, wanted "
                                   f"({total_nodes}, {total_leaves}, {levels})"])
    return mask


def chain(levels: int, arity: int = 10) -> TreeMask:
    """Single-branch mask: the leftmost path of ``levels`` tokens."""
    return build_custom_tree(levels + 1, 1, arity, levels)


# -- interrogation --------------------------------------------------------------------


def candidate_paths(mask: TreeMask) -> list[list[int]]:
    """Root-to-leaf rank paths, one per candidate sequence, left to right."""
    return [list(p) for p in mask.leaves]


def ancestor_mask(mask: TreeMask) -> np.ndarray:
    """Entry (i, j) is 1 iff node j is node i or one of its ancestors."""
    n = mask.num_nodes
    out = np.zeros((n, n), dtype=np.uint8)
    out[0, 0] = 1
    idx = mask.index
    for p in mask.paths:
        i = idx[p]
        out[i] = out[idx[p[:-1]]]
        out[i, i] = 1
    return out


def tree_stats(mask: TreeMask) -> tuple[TreeShape, str]:
    return mask.shape, mask.label
