"""``specbudget`` command line: plan, simulate, sweep, tree.

Exit codes: 0 success, 1 usage or config error, 2 valid request that is infeasible.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import __version__
from .config import ConfigError, RunConfig, load_config
from .memory import PRESETS, ClusterSpec, Precision, Workload, buffer_bytes
from .optimizer import (
    _custom_tree,
    avail_memory,
    compute_min_cache,
    optimize,
    ratio_baseline_plan,
    select_best_config,
    simulated_score,
)
from .report import MB, MIB, human_bytes, write_csv
from .simulator import simulate_batched, simulate_distributed, simulate_generation
from .tree import (
    InfeasibleTreeError,
    PruneSchedule,
    TreeStructureError,
    dump_mask,
    leaf_range,
    load_mask,
    prune_full_tree,
    prune_in_place,
    tree_feasibility,
    truncate,
)

EXIT_OK, EXIT_USAGE, EXIT_INFEASIBLE = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on usage errors; 2 is reserved for infeasible plans here
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _out_dir(args, cfg: RunConfig | None = None) -> Path:
    d = Path(args.out) if args.out else (cfg.out if cfg and cfg.out else Path("."))
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8", newline="\n")
    print(f"wrote {path}")


def _config(args) -> RunConfig:
    if not args.config:
        raise UsageError("--config is required")
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _ratio(text: str) -> tuple[int, int]:
    try:
        a, b = (int(x) for x in text.split(":"))
    except ValueError:
        raise UsageError(f"--baseline-ratio expects x:y with positive integers, got {text!r}") from None
    if a <= 0 or b <= 0:
        raise UsageError("--baseline-ratio parts must be positive")
    return a, b


# -- plan ---------------------------------------------------------------------------


def cmd_plan(args) -> int:
    cfg = _config(args)
    if args.baseline_ratio:
        a, b = _ratio(args.baseline_ratio)
        tree = cfg.tree.load()
        plan = ratio_baseline_plan(cfg.device, cfg.model, a, b, cfg.workload,
                                   heads=min(cfg.heads, tree.levels), tree=tree,
                                   precision=cfg.precision)
    else:
        plan = optimize(cfg.device, cfg.model, cfg.workload, cfg.defaults())
    _write(_out_dir(args, cfg) / "plan.json", plan.to_json())
    if plan.feasible:
        print(f"feasible: {plan.precision.value}, {plan.head_count} heads, mask {plan.label}, "
              f"total {human_bytes(plan.breakdown.total)} of {human_bytes(plan.usable)}")
        return EXIT_OK
    print(f"infeasible: OOM reason {plan.reason}")
    return EXIT_INFEASIBLE


# -- simulate -------------------------------------------------------------------------


def cmd_simulate(args) -> int:
    cfg = _config(args)
    mask = cfg.tree.load()
    acc = cfg.acceptance_for(mask.levels)
    out = _out_dir(args, cfg)
    if args.distributed:
        cluster = cfg.cluster or ClusterSpec(args.distributed, cfg.device)
        cluster = replace(cluster, device_count=args.distributed)
        if args.distributed > cfg.model.hidden_layers:
            raise UsageError(f"cannot split {cfg.model.hidden_layers} layers over "
                             f"{args.distributed} devices")
        res = simulate_distributed(cluster, cfg.model, mask, acc, cfg.cost, cfg.seed,
                                   workload=cfg.workload, target_tokens=cfg.target_tokens,
                                   precision=cfg.precision)
        _write(out / "summary.json", json.dumps(res.summary(), indent=1, sort_keys=True) + "\n")
        if res.result is not None:
            _write(out / "steps.csv", res.result.to_csv())
        print(f"layers per stage: {[s.layers for s in res.stages]}")
        if not res.feasible:
            print(f"infeasible: {res.reason}")
            return EXIT_INFEASIBLE
        return EXIT_OK
    if args.batch is not None:
        if args.batch < 1:
            raise UsageError("--batch must be >= 1")
        res = simulate_batched(args.batch, mask, acc, cfg.cost, cfg.target_tokens, cfg.seed,
                               engine=cfg.engine, model=cfg.model, precision=cfg.precision)
        summary = res.summary()
        rows = res.steps
        tokens = [r.tokens for r in res.per_sequence]
    else:
        res = simulate_generation(mask, acc, cfg.cost, cfg.target_tokens, cfg.seed,
                                  engine=cfg.engine, model=cfg.model, precision=cfg.precision)
        summary = res.summary()
        rows = res.steps
        tokens = [res.tokens]
    summary["mask"] = mask.label
    summary["seed"] = cfg.seed
    _write(out / "summary.json", json.dumps(summary, indent=1, sort_keys=True) + "\n")
    lines = ["step,tau,latency,cumulative_tokens"]
    lines += [f"{r.step},{r.tau},{r.latency:.9g},{r.cumulative_tokens}" for r in rows]
    _write(out / "steps.csv", "\n".join(lines) + "\n")
    if cfg.engine == "stub":
        _write(out / "tokens.json", json.dumps(tokens) + "\n")
    return EXIT_OK


# -- sweep ----------------------------------------------------------------------------


def _mask_for(entry, heads: int, arity: int, acc_of, cost):
    """A concrete mask for a grid cell, or None when no tree has these features."""
    if isinstance(entry, list):
        n, s, l = entry
        if tree_feasibility(n, s, arity, l):
            return None
        return _custom_tree(n, s, arity, l)
    leaves = leaf_range(entry, arity, heads)
    if not leaves:
        return None
    results = []
    for s in leaves:
        mask = _custom_tree(entry, s, arity, heads)
        results.append((mask, *simulated_score(mask, acc_of(heads), cost)))
    return select_best_config(
        results, buffer_of=lambda m: m.num_nodes + len(m.leaves) * (m.levels + m.levels**2),
        label_of=lambda m: m.label)


def _sweep_cell(cfg: RunConfig, cell: dict) -> dict:
    heads = cell.get("heads", cfg.heads)
    entry = cell.get("mask")
    base_tree = cfg.tree.load()
    arity = base_tree.arity
    queries = cell.get("cache", cfg.workload.query_count)
    batch = cell.get("batch", cfg.workload.batch_size)
    precision = cell.get("precision", cfg.precision)
    acc_of = cfg.acceptance_for
    if entry is None:
        mask = base_tree if heads >= base_tree.levels else truncate(base_tree, heads)
    else:
        mask = _mask_for(entry, heads, arity, acc_of, cfg.cost)
    row = {"heads": heads, "query_count": queries, "batch": batch, "precision": precision.value}
    if isinstance(entry, list):
        row["heads"] = entry[2]
    if mask is None:
        n, s = (entry[0], entry[1]) if isinstance(entry, list) else (entry, None)
        return row | {"nodes": n, "leaves": s, "feasible": False, "reason": "Tree"}
    workload = Workload(queries, cfg.workload.max_tokens_per_query, batch)
    cache = compute_min_cache(workload, cfg.model, precision)
    av = avail_memory(cfg.device, cfg.model, cache, mask.shape, mask.levels, precision, batch)
    buf = av.breakdown.buffers
    per_query = buffer_bytes(mask.shape, cfg.model, 1, precision)
    sim = simulate_batched(batch, mask, acc_of(mask.levels), cfg.cost, cfg.target_tokens,
                           cfg.seed, model=cfg.model, precision=precision)
    taus = [r.mean_tau for r in sim.per_sequence]
    return row | {
        "heads": mask.levels, "nodes": mask.num_nodes, "leaves": len(mask.leaves),
        "label": mask.label, "feasible": av.feasible, "reason": av.reason,
        "buffer_bytes": buf, "buffer_mb": round(buf / MB, 2), "buffer_mib": round(buf / MIB, 2),
        "chat_buffer_mb": round(per_query * queries / MB, 2),
        "chat_buffer_mib": round(per_query * queries / MIB, 2),
        "total_bytes": av.breakdown.total,
        "mean_tau": sum(taus) / len(taus),
        "per_token_latency_ms": 1000.0 * sim.total_time / sim.total_tokens,
        "throughput_tok_s": sim.aggregate_throughput,
    }


def _cell_key(cell: dict):
    out = []
    for d in ("heads", "mask", "cache", "batch", "precision"):
        v = cell.get(d)
        if isinstance(v, Precision):
            v = list(Precision).index(v)
        elif isinstance(v, list):
            v = tuple(v)
        elif isinstance(v, int):
            v = (v,)
        out.append(v)
    return tuple(x if x is not None else () for x in out)


def sweep_rows(cfg: RunConfig, jobs: int = 1) -> list[dict]:
    if cfg.sweep is None or not cfg.sweep.dims():
        raise UsageError("the config has no sweep grid (or it is empty)")
    dims = cfg.sweep.dims()
    names = list(dims)
    cells = [dict(zip(names, combo)) for combo in itertools.product(*dims.values())]
    cells.sort(key=_cell_key)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            rows = list(pool.map(_sweep_cell, [cfg] * len(cells), cells))
    else:
        rows = [_sweep_cell(cfg, c) for c in cells]
    return rows


def cmd_sweep(args) -> int:
    cfg = _config(args)
    rows = sweep_rows(cfg, args.jobs)
    _write(_out_dir(args, cfg) / "sweep.csv", write_csv(rows))
    return EXIT_OK


# -- tree ----------------------------------------------------------------------------


def cmd_tree(args) -> int:
    action = args.action
    if action == "build":
        if args.logistic:
            sched = PruneSchedule(args.r_min, args.r_max, args.midpoint, args.steepness)
            mask = prune_full_tree(args.arity, args.levels, sched)
        else:
            if args.nodes is None or args.leaves is None:
                raise UsageError("tree build needs NODES LEAVES (or --logistic)")
            violations = tree_feasibility(args.nodes, args.leaves, args.arity, args.levels)
            if violations:
                for v in violations:
                    print(f"infeasible: {v}", file=sys.stderr)
                return EXIT_INFEASIBLE
            mask = _custom_tree(args.nodes, args.leaves, args.arity, args.levels)
    else:
        if not args.mask:
            raise UsageError(f"tree {action} needs a mask (file path or 'medusa')")
        if not (args.mask in ("medusa", "medusa-vicuna-7b") or Path(args.mask).exists()):
            raise UsageError(f"mask {args.mask!r} is neither a file nor a built-in name")
        mask = load_mask(args.mask)
        if action == "prune":
            if args.target is None:
                raise UsageError("tree prune needs --nodes")
            if args.target < mask.levels + 1:
                print(f"infeasible: a {mask.levels}-level mask keeps at least {mask.levels + 1} "
                      "nodes", file=sys.stderr)
                return EXIT_INFEASIBLE
            mask = prune_in_place(mask, args.target)
        elif action == "stats":
            model = PRESETS[args.model]
            prec = Precision.parse(args.precision)
            buf = buffer_bytes(mask.shape, model, 1, prec)
            print(f"label {mask.label}")
            print(f"{mask.num_nodes} nodes, {len(mask.leaves)} leaves, {mask.levels} levels, "
                  f"arity {mask.arity}")
            print(f"buffer_bytes {buf} ({human_bytes(buf)}) at {model.name} {prec.value}")
            return EXIT_OK
    print(f"{mask.label}: {mask.num_nodes} nodes, {len(mask.leaves)} leaves, {mask.levels} levels")
    text = dump_mask(mask, args.format)
    if args.out:
        out = _out_dir(args)
        _write(out / ("mask.json" if args.format == "json" else "mask.paths.json"), text)
    elif action == "export":
        sys.stdout.write(text)
    return EXIT_OK


# -- entry point ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="run configuration (JSON)")
    common.add_argument("--seed", type=int, default=None, help="overrides the config seed")
    common.add_argument("--out", help="output directory (default: config 'out' or .)")

    p = _Parser(prog="specbudget", description="Memory budgeting for tree speculative decoding.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sp = sub.add_parser("plan", parents=[common], help="run the budget optimizer")
    sp.add_argument("--baseline-ratio", metavar="X:Y", help="fixed cache:model split instead")
    sp.set_defaults(func=cmd_plan)

    sp = sub.add_parser("simulate", parents=[common], help="simulate decoding")
    sp.add_argument("--batch", type=int, metavar="N", help="static batch of N sequences")
    sp.add_argument("--distributed", type=int, metavar="G", help="pipeline over G devices")
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("sweep", parents=[common], help="grid of configurations to CSV")
    sp.add_argument("--jobs", type=int, default=1, help="worker processes")
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("tree", help="build, prune, inspect or export masks")
    sp.add_argument("action", choices=("build", "prune", "stats", "export"))
    sp.add_argument("operands", nargs="*", help="build: NODES LEAVES; others: MASK")
    sp.add_argument("--arity", type=int, default=10)
    sp.add_argument("--levels", type=int, default=4)
    sp.add_argument("--nodes", dest="target", type=int, help="prune: node target")
    sp.add_argument("--logistic", action="store_true", help="build: prune a full tree by schedule")
    sp.add_argument("--r-min", type=float, default=PruneSchedule.r_min)
    sp.add_argument("--r-max", type=float, default=PruneSchedule.r_max)
    sp.add_argument("--steepness", type=float, default=PruneSchedule.steepness)
    sp.add_argument("--midpoint", type=float, default=PruneSchedule.midpoint_level)
    sp.add_argument("--model", choices=sorted(PRESETS), default="vicuna-7b")
    sp.add_argument("--precision", default="fp16")
    sp.add_argument("--format", choices=("json", "path-list"), default="json")
    sp.add_argument("--out", help="output directory")
    sp.set_defaults(func=cmd_tree)
    return p


def _tree_operands(args) -> None:
    args.nodes = args.leaves = args.mask = None
    ops = args.operands
    if args.action == "build":
        if ops:
            if len(ops) != 2:
                raise UsageError("tree build takes NODES LEAVES")
            try:
                args.nodes, args.leaves = int(ops[0]), int(ops[1])
            except ValueError:
                raise UsageError("NODES and LEAVES must be integers") from None
    else:
        if len(ops) > 1:
            raise UsageError(f"tree {args.action} takes one mask")
        args.mask = ops[0] if ops else None


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "tree":
            _tree_operands(args)
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"specbudget {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except InfeasibleTreeError as e:
        print(f"specbudget {args.command}: infeasible: {e}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (TreeStructureError, ValueError, OSError) as e:
        print(f"specbudget {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
