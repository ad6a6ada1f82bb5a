"""Strict JSON run configuration.

Byte quantities must carry an explicit unit suffix: ``"24gb"``, ``"55mb"`` or
``"4096bytes"``. Units are decimal (1 gb = 10**9 bytes). Unknown keys,
duplicate keys and bare numbers for byte fields are all rejected.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any

from .memory import PRESETS, ClusterSpec, DeviceBudget, ModelSpec, Precision, Workload
from .optimizer import Defaults
from .simulator import AcceptanceModel, CostModel
from .tree import BUILTIN_MASKS, TreeMask, build_custom_tree, load_mask

UNITS = {"gb": 10**9, "mb": 10**6, "bytes": 1}
_SIZE = re.compile(r"^\s*([0-9]+(?:\.[0-9]+)?)\s*(gb|mb|bytes)\s*$", re.IGNORECASE)
SWEEP_DIMS = ("heads", "mask", "cache", "batch", "precision")


class ConfigError(ValueError):
    def __init__(self, message: str, field: str | None = None, line: int | None = None):
        where = []
        if line is not None:
            where.append(f"line {line}")
        if field is not None:
            where.append(f"field '{field}'")
        super().__init__(f"{', '.join(where)}: {message}" if where else message)
        self.field = field
        self.line = line


def parse_size(value: Any, field: str = "size") -> int:
    """``"16gb"`` -> 16_000_000_000. Fractions resolve exactly, then must be whole bytes."""
    if not isinstance(value, str):
        raise ConfigError(f"expected a string with unit suffix (gb, mb, bytes), got {value!r}", field)
    m = _SIZE.match(value)
    if not m:
        raise ConfigError(f"cannot parse size {value!r}; use e.g. '24gb', '55mb', '4096bytes'", field)
    out = Fraction(m.group(1)) * UNITS[m.group(2).lower()]
    if out.denominator != 1:
        raise ConfigError(f"{value!r} is not a whole number of bytes", field)
    return int(out)


def _no_dupes(pairs):
    seen = {}
    for k, v in pairs:
        if k in seen:
            raise ConfigError("duplicate key", k)
        seen[k] = v
    return seen


@dataclass
class TreeSource:
    kind: str  # "builtin" | "file" | "custom"
    name: str | None = None
    path: Path | None = None
    nodes: int | None = None
    leaves: int | None = None
    levels: int | None = None
    arity: int = 10

    def load(self) -> TreeMask:
        if self.kind == "builtin":
            return BUILTIN_MASKS[self.name]()
        if self.kind == "file":
            return load_mask(self.path, self.arity if self.arity != 10 else None)
        return build_custom_tree(self.nodes, self.leaves, self.arity, self.levels)


@dataclass
class SweepGrid:
    heads: list[int] | None = None
    mask: list | None = None  # node counts, or [nodes, leaves, levels] triples
    cache: list[int] | None = None  # query counts
    batch: list[int] | None = None
    precision: list[Precision] | None = None

    def dims(self) -> dict:
        return {d: getattr(self, d) for d in SWEEP_DIMS if getattr(self, d) is not None}


@dataclass
class RunConfig:
    model: ModelSpec
    device: DeviceBudget
    workload: Workload
    tree: TreeSource
    acceptance: AcceptanceModel | None = None
    cost: CostModel = field(default_factory=CostModel)
    cluster: ClusterSpec | None = None
    precision: Precision = Precision.FP16
    heads: int = 4
    leaf_stride: int | None = None
    target_tokens: int = 256
    engine: str = "stochastic"
    sweep: SweepGrid | None = None
    seed: int = 0
    out: Path | None = None

    def defaults(self) -> Defaults:
        tree = self.tree.load()
        return Defaults(heads=self.heads, arity=tree.arity, precision=self.precision, tree=tree,
                        leaf_stride=self.leaf_stride, acceptance=self.acceptance, cost=self.cost)

    def acceptance_for(self, levels: int) -> AcceptanceModel:
        return self.acceptance if self.acceptance is not None else AcceptanceModel.default(levels)


class _Reader:
    """Walks a parsed document, tracking field paths and source lines for errors."""

    def __init__(self, text: str, base: Path):
        self.text = text
        self.base = base

    def line_of(self, key: str) -> int | None:
        m = re.search(r'"' + re.escape(key.split(".")[-1]) + r'"\s*:', self.text)
        return self.text.count("\n", 0, m.start()) + 1 if m else None

    def fail(self, msg: str, path: str):
        raise ConfigError(msg, path, self.line_of(path))

    def section(self, doc: dict, key: str, path: str, allowed: set[str], required: bool = True):
        if key not in doc:
            if required:
                self.fail("missing required field", f"{path}{key}")
            return None
        val = doc[key]
        full = f"{path}{key}"
        if not isinstance(val, dict):
            self.fail("expected an object", full)
        extra = set(val) - allowed
        if extra:
            self.fail(f"unknown keys {sorted(extra)}", f"{full}.{sorted(extra)[0]}")
        return val

    def get(self, doc: dict, key: str, path: str, kind, required: bool = False, default=None):
        full = f"{path}{key}"
        if key not in doc:
            if required:
                self.fail("missing required field", full)
            return default
        val = doc[key]
        if kind is int and (not isinstance(val, int) or isinstance(val, bool)):
            self.fail(f"expected an integer, got {val!r}", full)
        if kind is float and (not isinstance(val, (int, float)) or isinstance(val, bool)):
            self.fail(f"expected a number, got {val!r}", full)
        if kind is str and not isinstance(val, str):
            self.fail(f"expected a string, got {val!r}", full)
        if kind is list and not isinstance(val, list):
            self.fail(f"expected a list, got {val!r}", full)
        if kind == "size":
            try:
                return parse_size(val, full)
            except ConfigError as e:
                raise ConfigError(str(e).split(": ", 1)[-1], full, self.line_of(full)) from None
        return float(val) if kind is float else val


_TOP = {"model", "device", "cluster", "workload", "tree", "acceptance", "cost", "optimizer",
        "simulate", "sweep", "seed", "out"}


def _model(r: _Reader, doc: dict) -> ModelSpec:
    if "model" not in doc:
        r.fail("missing required field", "model")
    val = doc["model"]
    if isinstance(val, str):
        if val not in PRESETS:
            r.fail(f"unknown model preset {val!r}; known: {sorted(PRESETS)}", "model")
        return PRESETS[val]
    sec = r.section(doc, "model", "", {"hidden_layers", "kv_heads", "head_dim", "vocab_size",
                                       "param_count", "per_head_bytes", "name"})
    kw = {k: r.get(sec, k, "model.", int, required=True)
          for k in ("hidden_layers", "kv_heads", "head_dim", "vocab_size", "param_count")}
    if "per_head_bytes" in sec:
        kw["per_head_bytes"] = r.get(sec, "per_head_bytes", "model.", "size")
    kw["name"] = r.get(sec, "name", "model.", str, default="custom")
    try:
        return ModelSpec(**kw)
    except ValueError as e:
        r.fail(str(e), "model")


def _tree(r: _Reader, doc: dict) -> TreeSource:
    sec = r.section(doc, "tree", "", {"builtin", "file", "custom", "arity"}, required=False)
    if sec is None:
        return TreeSource("builtin", name="medusa")
    given = [k for k in ("builtin", "file", "custom") if k in sec]
    if len(given) != 1:
        r.fail("exactly one of builtin, file, custom is required", "tree")
    arity = r.get(sec, "arity", "tree.", int, default=10)
    kind = given[0]
    if kind == "builtin":
        name = r.get(sec, "builtin", "tree.", str)
        if name not in BUILTIN_MASKS:
            r.fail(f"unknown builtin mask {name!r}; known: {sorted(BUILTIN_MASKS)}", "tree.builtin")
        return TreeSource("builtin", name=name)
    if kind == "file":
        p = Path(r.get(sec, "file", "tree.", str))
        p = p if p.is_absolute() else r.base / p
        if not p.exists():
            r.fail(f"mask file {str(p)!r} does not exist", "tree.file")
        return TreeSource("file", path=p, arity=arity)
    c = r.section(sec, "custom", "tree.", {"nodes", "leaves", "levels"})
    src = TreeSource("custom", nodes=r.get(c, "nodes", "tree.custom.", int, required=True),
                     leaves=r.get(c, "leaves", "tree.custom.", int, required=True),
                     levels=r.get(c, "levels", "tree.custom.", int, default=4), arity=arity)
    try:
        src.load()
    except ValueError as e:
        r.fail(str(e), "tree.custom")
    return src


def _sweep(r: _Reader, doc: dict) -> SweepGrid | None:
    sec = r.section(doc, "sweep", "", set(SWEEP_DIMS), required=False)
    if sec is None:
        return None
    grid = SweepGrid()
    for dim in ("heads", "cache", "batch"):
        vals = r.get(sec, dim, "sweep.", list)
        if vals is not None:
            if not vals or any(not isinstance(v, int) or isinstance(v, bool) or v < 1 for v in vals):
                r.fail("expected a non-empty list of positive integers", f"sweep.{dim}")
            setattr(grid, dim, vals)
    masks = r.get(sec, "mask", "sweep.", list)
    if masks is not None:
        if not masks:
            r.fail("expected a non-empty list", "sweep.mask")
        for m in masks:
            ok = isinstance(m, int) or (isinstance(m, list) and len(m) == 3
                                        and all(isinstance(v, int) for v in m))
            if not ok:
                r.fail("entries must be node counts or [nodes, leaves, levels]", "sweep.mask")
        if grid.heads is not None and any(isinstance(m, list) for m in masks):
            r.fail("[nodes, leaves, levels] entries fix the head count; drop sweep.heads",
                   "sweep.mask")
        grid.mask = masks
    precs = r.get(sec, "precision", "sweep.", list)
    if precs is not None:
        try:
            grid.precision = [Precision.parse(p) for p in precs]
        except (ValueError, AttributeError) as e:
            r.fail(str(e), "sweep.precision")
    return grid


def parse_config(text: str, base: Path | str = ".") -> RunConfig:
    try:
        doc = json.loads(text, object_pairs_hook=_no_dupes)
    except json.JSONDecodeError as e:
        raise ConfigError(f"invalid JSON: {e.msg} (column {e.colno})", line=e.lineno) from None
    r = _Reader(text, Path(base))
    if not isinstance(doc, dict):
        raise ConfigError("top level must be an object")
    extra = set(doc) - _TOP
    if extra:
        r.fail(f"unknown keys {sorted(extra)}", sorted(extra)[0])

    model = _model(r, doc)
    dev = r.section(doc, "device", "", {"capacity", "safety_margin"})
    capacity = r.get(dev, "capacity", "device.", "size", required=True)
    margin = r.get(dev, "safety_margin", "device.", float, default=0.02)
    try:
        device = DeviceBudget(capacity, margin)
    except ValueError as e:
        r.fail(str(e), "device")

    wl = r.section(doc, "workload", "", {"query_count", "max_tokens_per_query", "batch_size"})
    try:
        workload = Workload(r.get(wl, "query_count", "workload.", int, required=True),
                            r.get(wl, "max_tokens_per_query", "workload.", int, required=True),
                            r.get(wl, "batch_size", "workload.", int, default=1))
    except ValueError as e:
        r.fail(str(e), "workload")

    cluster = None
    cl = r.section(doc, "cluster", "", {"device_count", "interconnect_cost"}, required=False)
    if cl is not None:
        try:
            cluster = ClusterSpec(r.get(cl, "device_count", "cluster.", int, required=True), device,
                                  r.get(cl, "interconnect_cost", "cluster.", float))
        except ValueError as e:
            r.fail(str(e), "cluster")

    acceptance = None
    ac = r.section(doc, "acceptance", "", {"per_level_accept", "rank_decay"}, required=False)
    if ac is not None:
        try:
            acceptance = AcceptanceModel(
                tuple(r.get(ac, "per_level_accept", "acceptance.", list, required=True)),
                r.get(ac, "rank_decay", "acceptance.", float, default=0.8))
        except (ValueError, TypeError) as e:
            r.fail(str(e), "acceptance")

    cost = CostModel()
    cs = r.section(doc, "cost", "", set(CostModel.__dataclass_fields__), required=False)
    if cs is not None:
        try:
            cost = CostModel(**{k: r.get(cs, k, "cost.", float) for k in cs})
        except ValueError as e:
            r.fail(str(e), "cost")

    opt = r.section(doc, "optimizer", "", {"heads", "precision", "leaf_stride"}, required=False) or {}
    heads = r.get(opt, "heads", "optimizer.", int, default=4)
    if heads < 2:
        r.fail("head count must be >= 2", "optimizer.heads")
    try:
        precision = Precision.parse(r.get(opt, "precision", "optimizer.", str, default="fp16"))
    except ValueError as e:
        r.fail(str(e), "optimizer.precision")
    stride = r.get(opt, "leaf_stride", "optimizer.", int)

    sim = r.section(doc, "simulate", "", {"target_tokens", "engine"}, required=False) or {}
    target = r.get(sim, "target_tokens", "simulate.", int, default=256)
    engine = r.get(sim, "engine", "simulate.", str, default="stochastic")
    if engine not in ("stochastic", "stub"):
        r.fail("engine must be 'stochastic' or 'stub'", "simulate.engine")
    if target < 1:
        r.fail("target_tokens must be >= 1", "simulate.target_tokens")

    seed = r.get(doc, "seed", "", int, default=0)
    out = r.get(doc, "out", "", str)
    return RunConfig(
        model=model, device=device, workload=workload, tree=_tree(r, doc), acceptance=acceptance,
        cost=cost, cluster=cluster, precision=precision, heads=heads, leaf_stride=stride,
        target_tokens=target, engine=engine, sweep=_sweep(r, doc), seed=seed,
        out=Path(out) if out else None,
    )


def load_config(path: str | Path) -> RunConfig:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file {str(p)!r} does not exist")
    return parse_config(p.read_text(encoding="utf-8"), p.parent)
