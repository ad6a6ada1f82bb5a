"""Budget engine: fit speculative decoding into a device before generation starts.

The cascade, cheapest concession first:

1. defaults: default head count, default mask, minimal KV cache;
2. tree exploration: smaller custom masks at the current head count;
3. head reduction: fewer decoding heads, down to two;
4. quantization: the next lower precision, then back to step 2.

A plan that cannot be made to fit is returned with ``feasible=False`` and the
component that overflowed first; the engine never raises for infeasibility.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, Sequence

from .memory import (
    MemoryBreakdown,
    ModelSpec,
    Precision,
    TreeShape,
    Workload,
    DeviceBudget,
    ClusterSpec,  # noqa: F401  (re-exported)
    base_model_bytes,
    buffer_bytes,
    heads_bytes,
    kv_bytes_for_tokens,
    ratio_split,
)
from .simulator import AcceptanceModel, CostModel, expected_tau
from .tree import TreeMask, build_custom_tree, leaf_range, medusa_vicuna_7b, truncate

MIN_HEADS = 2
OOM_REASONS = ("Model", "Cache", "Buffer")


@dataclass(frozen=True)
class Defaults:
    heads: int = 4
    arity: int = 10
    precision: Precision = Precision.FP16
    tree: TreeMask | None = None  # None means the bundled Medusa mask
    safety_tokens_per_query: int = 0
    max_explore_nodes: int | None = None  # None caps exploration at the default tree's size
    leaf_stride: int | None = None
    acceptance: AcceptanceModel | None = None
    cost: CostModel = CostModel()

    def default_tree(self) -> TreeMask:
        return self.tree if self.tree is not None else medusa_vicuna_7b()


@dataclass(frozen=True)
class Availability:
    remaining: int
    breakdown: MemoryBreakdown
    usable: int
    reason: str | None = None

    @property
    def feasible(self) -> bool:
        return self.reason is None


@dataclass
class BudgetPlan:
    cache_bytes: int
    head_count: int
    tree_config: TreeShape
    precision: Precision
    breakdown: MemoryBreakdown
    feasible: bool
    usable: int
    decisions_log: list[dict] = field(default_factory=list)
    reason: str | None = None
    mask: TreeMask | None = None
    mean_tau: float | None = None
    speedup: float | None = None

    @property
    def label(self) -> str | None:
        return self.mask.label if self.mask is not None else None

    def to_dict(self) -> dict:
        from .report import breakdown_report

        return {
            "feasible": self.feasible,
            "reason": self.reason,
            "precision": self.precision.value,
            "head_count": self.head_count,
            "cache_bytes": self.cache_bytes,
            "usable_bytes": self.usable,
            "tree": {
                "nodes": self.tree_config.nodes,
                "leaves": self.tree_config.leaves,
                "levels": self.tree_config.levels,
                "arity": self.tree_config.arity,
                "label": self.label,
            },
            "mean_tau": self.mean_tau,
            "speedup": self.speedup,
            "breakdown": breakdown_report(self.breakdown),
            "decisions_log": self.decisions_log,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def compute_min_cache(workload: Workload, model: ModelSpec, precision: Precision = Precision.FP16,
                      safety_tokens_per_query: int = 0) -> int:
    """KV cache for exactly ``n * m`` tokens, plus optional headroom per query."""
    tokens = workload.sequence_length + safety_tokens_per_query * workload.query_count
    return kv_bytes_for_tokens(model, tokens, workload.batch_size, precision)


def avail_memory(device: DeviceBudget, model: ModelSpec, cache_bytes: int, shape: TreeShape,
                 head_count: int, precision: Precision = Precision.FP16,
                 batch: int = 1) -> Availability:
    """Usable bytes left after model, cache and buffers, allocated in that order.

    ``reason`` names the first allocation that does not fit.
    """
    bd = MemoryBreakdown(
        kv_cache=cache_bytes,
        buffers=buffer_bytes(shape, model, batch, precision),
        heads=heads_bytes(head_count, model),
        base_model=base_model_bytes(model, precision),
    )
    usable = device.usable
    reason = None
    running = bd.base_model + bd.heads
    if running > usable:
        reason = "Model"
    elif running + bd.kv_cache > usable:
        reason = "Cache"
    elif bd.total > usable:
        reason = "Buffer"
    return Availability(usable - bd.total, bd, usable, reason)


def _stride(nodes: int, stride: int | None) -> int:
    if stride is not None:
        return max(1, stride)
    return 1 if nodes <= 128 else 4


def explore_tree_configs(budget_remaining: int, head_count: int, arity: int, model: ModelSpec,
                         batch: int = 1, precision: Precision = Precision.FP16, *,
                         max_nodes: int = 64, leaf_stride: int | None = None) -> list[TreeShape]:
    """Every (nodes, leaves) pair from ``arity * head_count`` nodes up whose buffers fit.

    Nodes range up to ``max_nodes`` or the largest size that fits, whichever is
    smaller. Leaf counts are the structurally feasible ones, smallest first,
    at the given stride (always keeping the largest that fits).
    """
    if head_count < MIN_HEADS:
        raise ValueError(f"head_count must be >= {MIN_HEADS}")
    floor = arity * head_count
    out: list[TreeShape] = []
    if budget_remaining < 0:
        return out
    for n in range(floor, max(floor, max_nodes) + 1):
        leaves = leaf_range(n, arity, head_count)
        if not leaves:
            continue
        fitting = [s for s in leaves
                   if buffer_bytes(TreeShape(n, s, head_count, arity), model, batch, precision)
                   <= budget_remaining]
        if not fitting:
            # buffers grow with n at fixed leaves, so nothing larger fits either
            break
        step = _stride(n, leaf_stride)
        picked = fitting[::step]
        if picked[-1] != fitting[-1]:
            picked.append(fitting[-1])
        out.extend(TreeShape(n, s, head_count, arity) for s in picked)
    return out


@lru_cache(maxsize=4096)
def _custom_tree(nodes: int, leaves: int, arity: int, levels: int) -> TreeMask:
    return build_custom_tree(nodes, leaves, arity, levels)


@lru_cache(maxsize=16384)
def _score(mask: TreeMask, acc: AcceptanceModel, cost: CostModel) -> tuple[float, float]:
    tau = expected_tau(mask, acc)
    per_token = cost.step_latency(mask.num_nodes) / tau
    return tau, cost.per_token_vanilla / per_token


def simulated_score(mask: TreeMask, acc: AcceptanceModel | None = None,
                    cost: CostModel = CostModel()) -> tuple[float, float]:
    """(expected tau, expected speedup) of one mask under the cost model."""
    return _score(mask, acc or AcceptanceModel.default(mask.levels), cost)


def select_best_config(results: Sequence[tuple], buffer_of: Callable[[object], int] | None = None,
                       label_of: Callable[[object], str] | None = None):
    """Highest speedup; ties go to the smaller buffer, then the smaller label."""
    if not results:
        raise ValueError("select_best_config needs at least one result")

    def buf(cfg) -> int:
        if buffer_of is not None:
            return buffer_of(cfg)
        return getattr(cfg, "buffer_bytes", 0)

    def lab(cfg) -> str:
        if label_of is not None:
            return label_of(cfg)
        return str(getattr(cfg, "label", cfg))

    best = min(results, key=lambda r: (-r[2], buf(r[0]), lab(r[0])))
    return best[0]


@dataclass(frozen=True)
class _Candidate:
    shape: TreeShape
    mask: TreeMask
    buffer_bytes: int

    @property
    def label(self) -> str:
        return self.mask.label


def _plan(device, model, cache, heads, mask, precision, workload, log, acc, cost,
          reason=None) -> BudgetPlan:
    av = avail_memory(device, model, cache, mask.shape, heads, precision, workload.batch_size)
    tau, speed = (None, None)
    if reason is None and av.feasible:
        tau, speed = simulated_score(mask, _acc_for(acc, heads), cost)
    return BudgetPlan(
        cache_bytes=cache, head_count=heads, tree_config=mask.shape, precision=precision,
        breakdown=av.breakdown, feasible=reason is None and av.feasible, usable=av.usable,
        decisions_log=log, reason=reason if reason is not None else av.reason,
        mask=mask, mean_tau=tau, speedup=speed,
    )


def _acc_for(acc: AcceptanceModel | None, levels: int) -> AcceptanceModel:
    if acc is None:
        return AcceptanceModel.default(levels)
    if len(acc.per_level_accept) < levels:
        raise ValueError(f"acceptance model covers {len(acc.per_level_accept)} levels, need {levels}")
    return acc


def _best_explored(configs: list[TreeShape], model, batch, precision, acc, cost) -> _Candidate:
    results = []
    for shape in configs:
        mask = _custom_tree(shape.nodes, shape.leaves, shape.arity, shape.levels)
        cand = _Candidate(shape, mask, buffer_bytes(shape, model, batch, precision))
        tau, speed = simulated_score(mask, _acc_for(acc, shape.levels), cost)
        results.append((cand, tau, speed))
    return select_best_config(results)


def optimize(device: DeviceBudget, model: ModelSpec, workload: Workload,
             defaults: Defaults = Defaults()) -> BudgetPlan:
    """Run the budget cascade and return the chosen plan (possibly infeasible)."""
    log: list[dict] = []
    default_tree = defaults.default_tree()
    # head count equals tree depth, so a shallow default tree caps it
    heads = max(MIN_HEADS, min(defaults.heads, default_tree.levels))
    precision = defaults.precision
    explore_cap = defaults.max_explore_nodes or default_tree.num_nodes
    acc, cost = defaults.acceptance, defaults.cost
    batch = workload.batch_size

    def cache_at(p: Precision) -> int:
        return compute_min_cache(workload, model, p, defaults.safety_tokens_per_query)

    def default_at(h: int) -> TreeMask:
        return default_tree if h >= default_tree.levels else truncate(default_tree, h)

    cache = cache_at(precision)
    first = avail_memory(device, model, cache, default_at(heads).shape, heads, precision, batch)
    log.append({"stage": "defaults", "heads": heads, "precision": precision.value,
                "feasible": first.feasible, "reason": first.reason})
    if first.feasible:
        return _plan(device, model, cache, heads, default_at(heads), precision, workload, log,
                     acc, cost)

    last_reason = first.reason
    while True:
        fixed = base_model_bytes(model, precision) + heads_bytes(heads, model) + cache
        configs = explore_tree_configs(device.usable - fixed, heads, defaults.arity, model, batch,
                                       precision, max_nodes=explore_cap,
                                       leaf_stride=defaults.leaf_stride)
        log.append({"stage": "tree-exploration", "heads": heads, "precision": precision.value,
                    "configs": len(configs)})
        if configs:
            best = _best_explored(configs, model, batch, precision, acc, cost)
            return _plan(device, model, cache, heads, best.mask, precision, workload, log, acc, cost)
        reduced = None
        if heads <= MIN_HEADS:
            log.append({"stage": "head-reduction", "heads": heads, "precision": precision.value,
                        "feasible": False, "note": "already at the minimum"})
        for h in range(heads - 1, MIN_HEADS - 1, -1):
            probe = avail_memory(device, model, cache, default_at(h).shape, h, precision, batch)
            log.append({"stage": "head-reduction", "heads": h, "precision": precision.value,
                        "feasible": probe.feasible, "reason": probe.reason})
            last_reason = probe.reason or last_reason
            if probe.feasible:
                reduced = h
                break
        if reduced is not None:
            return _plan(device, model, cache, reduced, default_at(reduced), precision, workload,
                         log, acc, cost)
        heads = MIN_HEADS

        lower = precision.lower()
        if lower is None:
            final = avail_memory(device, model, cache, default_at(heads).shape, heads, precision, batch)
            log.append({"stage": "give-up", "heads": heads, "precision": precision.value,
                        "reason": final.reason or last_reason})
            return _plan(device, model, cache, heads, default_at(heads), precision, workload, log,
                         acc, cost, reason=final.reason or last_reason or "Model")
        log.append({"stage": "quantization", "heads": heads, "from": precision.value,
                    "to": lower.value})
        precision = lower
        cache = cache_at(precision)


def ratio_baseline_plan(device: DeviceBudget, model: ModelSpec, cache_part: int, model_part: int,
                        workload: Workload | None = None, heads: int = 4,
                        tree: TreeMask | None = None,
                        precision: Precision = Precision.FP16) -> BudgetPlan:
    """Fixed cache:model split of the whole device, with no fallback.

    The cache slice is pre-allocated in full; the model slice must hold base
    model, heads and buffers. Failures are reported, never repaired.
    """
    tree = tree if tree is not None else medusa_vicuna_7b()
    tree = truncate(tree, heads) if heads < tree.levels else tree
    cache, model_room = ratio_split(device.capacity, cache_part, model_part)
    batch = workload.batch_size if workload else 1
    bd = MemoryBreakdown(
        kv_cache=cache,
        buffers=buffer_bytes(tree.shape, model, batch, precision),
        heads=heads_bytes(heads, model),
        base_model=base_model_bytes(model, precision),
    )
    reason = None
    if bd.base_model + bd.heads > model_room:
        reason = "Model"
    elif workload is not None and kv_bytes_for_tokens(
            model, workload.sequence_length, batch, precision) > cache:
        reason = "Cache"
    elif bd.base_model + bd.heads + bd.buffers > model_room:
        reason = "Buffer"
    log = [{"stage": "ratio-baseline", "ratio": f"{cache_part}:{model_part}",
            "cache_bytes": cache, "model_bytes": model_room, "reason": reason}]
    return BudgetPlan(
        cache_bytes=cache, head_count=heads, tree_config=tree.shape, precision=precision,
        breakdown=bd, feasible=reason is None, usable=device.capacity, decisions_log=log,
        reason=reason, mask=tree,
    )
