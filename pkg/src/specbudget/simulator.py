"""Seeded simulation of tree-based speculative generation.

Two engines drive a decoding step:

* ``"stochastic"``: every non-root node is accepted independently with
  probability ``per_level_accept[level - 1] * rank_decay ** rank``.
* ``"stub"``: a deterministic toy verifier (:func:`stub_model_decode`) whose
  candidate tokens and verdicts are a pure function of the visible context.
  It exists so batching can be checked token for token against unbatched runs.

Either way the longest fully accepted root path wins (leftmost on ties) and
the base model adds one bonus token, so ``tau = accepted + 1``.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .memory import (
    VICUNA_7B,
    ClusterSpec,
    ModelSpec,
    Precision,
    Workload,
    base_model_bytes,
    buffer_bytes,
    heads_bytes,
    kv_bytes_for_tokens,
    kv_cache_bytes,
    split_layers,
)
from .tree import TreeMask

PAD_TOKEN = -1
EXHAUSTIVE_NODE_LIMIT = 20
DEFAULT_ACCEPT = (0.75, 0.55, 0.45, 0.4, 0.35)
_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class AcceptanceModel:
    per_level_accept: tuple[float, ...]
    rank_decay: float = 0.8
    independent: bool = True

    def __post_init__(self):
        object.__setattr__(self, "per_level_accept", tuple(float(a) for a in self.per_level_accept))
        if any(not 0.0 <= a <= 1.0 for a in self.per_level_accept):
            raise ValueError("acceptance probabilities must lie in [0, 1]")
        if not 0.0 < self.rank_decay <= 1.0:
            raise ValueError("rank_decay must be in (0, 1]")

    @classmethod
    def default(cls, levels: int, rank_decay: float = 0.8) -> AcceptanceModel:
        alphas = [DEFAULT_ACCEPT[min(i, len(DEFAULT_ACCEPT) - 1)] for i in range(levels)]
        return cls(tuple(alphas), rank_decay)

    @classmethod
    def uniform(cls, alpha: float, levels: int, rank_decay: float = 1.0) -> AcceptanceModel:
        return cls((alpha,) * levels, rank_decay)

    def node_probability(self, path: tuple[int, ...]) -> float:
        return self.per_level_accept[len(path) - 1] * self.rank_decay ** path[-1]

    def node_probabilities(self, mask: TreeMask) -> np.ndarray:
        """Acceptance probability per non-root node, in level-major order."""
        if len(self.per_level_accept) < mask.levels:
            raise ValueError(f"acceptance model covers {len(self.per_level_accept)} levels, "
                             f"mask has {mask.levels}")
        return np.array([self.node_probability(p) for p in mask.paths], dtype=float)


@dataclass(frozen=True)
class CostModel:
    """Per-step timing. Defaults are a desk calibration, not measurements.

    ``batch_exponent`` makes per-node work grow sub-linearly with batch size;
    ``pipeline_overlap`` hides that fraction of inter-stage communication.
    """

    fixed_step_cost: float = 0.030
    per_node_cost: float = 0.0001
    per_token_vanilla: float = 0.030
    comm_cost: float = 0.002
    batch_exponent: float = 0.5
    pipeline_overlap: float = 0.0

    def __post_init__(self):
        for name in ("fixed_step_cost", "per_node_cost", "per_token_vanilla", "comm_cost",
                     "batch_exponent"):
            if getattr(self, name) < 0:
                raise ValueError(f"CostModel.{name} must be >= 0")
        if not 0.0 <= self.pipeline_overlap <= 1.0:
            raise ValueError("pipeline_overlap must be in [0, 1]")

    def step_latency(self, nodes: int, batch_eff: float = 1.0) -> float:
        return self.fixed_step_cost + self.per_node_cost * nodes * batch_eff


@dataclass(frozen=True)
class StepOutcome:
    chosen_path: tuple[int, ...]
    accepted_speculative: int
    tokens: tuple[int, ...] = ()

    @property
    def tau(self) -> int:
        return self.accepted_speculative + 1


@dataclass
class StepRecord:
    step: int
    tau: int
    latency: float
    cumulative_tokens: int


@dataclass
class SimResult:
    mean_tau: float
    tokens_per_second: float
    per_token_latency: float
    total_steps: int
    total_tokens: int
    total_time: float
    speedup: float
    memory_trace: list[tuple[int, int, int]] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)
    tokens: list[int] = field(default_factory=list)

    def summary(self) -> dict:
        out = asdict(self)
        for key in ("memory_trace", "steps", "tokens"):
            out.pop(key)
        return out

    def to_json(self) -> str:
        doc = self.summary()
        doc["memory_trace"] = [list(t) for t in self.memory_trace]
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["step", "tau", "latency", "cumulative_tokens"])
        for r in self.steps:
            writer.writerow([r.step, r.tau, f"{r.latency:.9g}", r.cumulative_tokens])
        return buf.getvalue()


# -- acceptance ----------------------------------------------------------------------


def _parents(mask: TreeMask) -> np.ndarray:
    """Level-major index of each non-root node's parent; -1 for level-1 nodes."""
    idx = mask.index
    return np.array([idx[p[:-1]] - 1 for p in mask.paths], dtype=np.int64)


def longest_accepted(mask: TreeMask, accepted: Sequence[bool]) -> tuple[int, ...]:
    """Deepest node whose whole root path is accepted; leftmost among equals.

    Returns ``()`` (the root) when no level-1 node is accepted.
    """
    alive: dict[tuple[int, ...], bool] = {(): True}
    best: tuple[int, ...] = ()
    for p, ok in zip(mask.paths, accepted):
        a = bool(ok) and alive[p[:-1]]
        alive[p] = a
        # level-major order: the first alive node at a new depth is the leftmost
        if a and len(p) > len(best):
            best = p
    return best


def step_accept(mask: TreeMask, acc: AcceptanceModel,
                rng: int | np.random.Generator | None = None) -> StepOutcome:
    gen = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(rng)
    draws = gen.random(len(mask.paths)) < acc.node_probabilities(mask)
    path = longest_accepted(mask, draws)
    return StepOutcome(path, len(path))


def expected_tau_exhaustive(mask: TreeMask, acc: AcceptanceModel,
                            max_nodes: int = EXHAUSTIVE_NODE_LIMIT) -> float:
    """Exact E[tau] by enumerating all 2**(N-1) accept/reject assignments."""
    if mask.num_nodes > max_nodes:
        raise ValueError(f"exhaustive enumeration is capped at {max_nodes} nodes, "
                         f"mask has {mask.num_nodes}")
    m = len(mask.paths)
    if m == 0:
        return 1.0
    probs = acc.node_probabilities(mask)
    parents = _parents(mask)
    depths = np.array([len(p) for p in mask.paths])
    codes = np.arange(2**m, dtype=np.int64)
    bits = ((codes[:, None] >> np.arange(m)) & 1).astype(bool)
    weight = np.prod(np.where(bits, probs, 1.0 - probs), axis=1)
    alive = np.zeros_like(bits)
    for i in range(m):
        alive[:, i] = bits[:, i] if parents[i] < 0 else bits[:, i] & alive[:, parents[i]]
    deepest = np.max(np.where(alive, depths, 0), axis=1)
    return float(np.sum(weight * (deepest + 1)))


def expected_tau(mask: TreeMask, acc: AcceptanceModel) -> float:
    """Exact E[tau] under independent acceptance, by recursion over subtrees.

    For a node v, reach_v[j] is the probability that an accepted chain of
    length >= j hangs below v, given v itself is accepted. Then
    E[tau] = 1 + sum_j reach_root[j].
    """
    probs = dict(zip(mask.paths, acc.node_probabilities(mask)))
    depth = mask.levels
    reach: dict[tuple[int, ...], np.ndarray] = {}
    for p in sorted(mask.children, key=len, reverse=True):
        miss = np.ones(depth + 1)
        for c in mask.children[p]:
            shifted = np.concatenate(([1.0], reach[c][:-1]))
            miss *= 1.0 - probs[c] * shifted
        r = 1.0 - miss
        r[0] = 1.0
        reach[p] = r
    return 1.0 + float(np.sum(reach[()][1:]))


# -- deterministic stub verifier -----------------------------------------------------


def _splitmix(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK64
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK64
    return x ^ (x >> 31)


@dataclass(frozen=True)
class StubDecode:
    candidates: tuple[int, ...]
    accepted: tuple[bool, ...]
    outcome: StepOutcome


def context_digest(tokens: Sequence[int], positions: Sequence[int] | None = None,
                   pad_mask: Sequence[bool] | None = None) -> int:
    """64-bit digest of the visible (position, token) pairs; padded slots are skipped."""
    toks = np.asarray(tokens, dtype=np.int64)
    pos = np.arange(len(toks), dtype=np.int64) if positions is None else np.asarray(positions, np.int64)
    if pad_mask is not None:
        keep = ~np.asarray(pad_mask, dtype=bool)
        toks, pos = toks[keep], pos[keep]
    pairs = np.stack([pos, toks], axis=1).astype("<i8")
    return int.from_bytes(hashlib.blake2b(pairs.tobytes(), digest_size=8).digest(), "little")


def stub_model_decode(tokens: Sequence[int], mask: TreeMask, *,
                      positions: Sequence[int] | None = None,
                      pad_mask: Sequence[bool] | None = None,
                      acc: AcceptanceModel | None = None,
                      vocab_size: int = 32000) -> StubDecode:
    """Toy verifier: candidates and verdicts depend only on the visible context.

    The same real tokens at the same positions give the same answer whether
    they arrive alone, inside a padded batch, or with trailing pads.
    """
    acc = acc or AcceptanceModel.default(mask.levels)
    seed = context_digest(tokens, positions, pad_mask)
    probs = acc.node_probabilities(mask)
    candidates, verdicts = [], []
    for i in range(len(mask.paths)):
        h = _splitmix(seed ^ ((i + 1) * 0x9E3779B97F4A7C15 & _MASK64))
        candidates.append(h % vocab_size)
        verdicts.append((_splitmix(h) >> 11) / float(1 << 53) < probs[i])
    path = longest_accepted(mask, verdicts)
    idx = mask.index
    spec = tuple(candidates[idx[path[:d]] - 1] for d in range(1, len(path) + 1))
    bonus = _splitmix(seed ^ (0xB0B0 + len(path))) % vocab_size
    outcome = StepOutcome(path, len(path), spec + (bonus,))
    return StubDecode(tuple(candidates), tuple(verdicts), outcome)


def make_prompts(count: int, seed: int = 0, vocab_size: int = 32000,
                 min_len: int = 4, max_len: int = 16) -> list[list[int]]:
    rng = np.random.default_rng([seed, 0x5EED])
    return [rng.integers(0, vocab_size, size=int(rng.integers(min_len, max_len + 1))).tolist()
            for _ in range(count)]


# -- single-sequence generation --------------------------------------------------


def _rngs(seed: int, count: int) -> list[np.random.Generator]:
    return [np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(count)]


def simulate_generation(mask: TreeMask, acc: AcceptanceModel, cost: CostModel,
                        target_tokens: int, seed: int = 0, *, engine: str = "stochastic",
                        prompt: Sequence[int] | None = None, model: ModelSpec = VICUNA_7B,
                        precision: Precision = Precision.FP16) -> SimResult:
    """Decode until at least ``target_tokens`` tokens are committed."""
    if target_tokens < 1:
        raise ValueError("target_tokens must be >= 1")
    if engine not in ("stochastic", "stub"):
        raise ValueError(f"unknown engine {engine!r}")
    rng = _rngs(seed, 1)[0]
    context = list(prompt) if prompt is not None else make_prompts(1, seed)[0]
    start = len(context)
    latency = cost.step_latency(mask.num_nodes)
    buffers = buffer_bytes(mask.shape, model, 1, precision)
    steps: list[StepRecord] = []
    trace: list[tuple[int, int, int]] = []
    generated: list[int] = []
    taus = 0
    while len(generated) < target_tokens:
        if engine == "stub":
            outcome = stub_model_decode(context, mask, acc=acc, vocab_size=model.vocab_size).outcome
            new = list(outcome.tokens)
        else:
            outcome = step_accept(mask, acc, rng)
            new = [0] * outcome.tau
        generated.extend(new)
        context.extend(new)
        taus += outcome.tau
        steps.append(StepRecord(len(steps), outcome.tau, latency, len(generated)))
        trace.append((len(steps) - 1, buffers, kv_bytes_for_tokens(model, len(context), 1, precision)))
    n = len(steps)
    total_time = latency * n
    per_token = total_time / len(generated)
    return SimResult(
        mean_tau=taus / n,
        tokens_per_second=len(generated) / total_time if total_time > 0 else float("inf"),
        per_token_latency=per_token,
        total_steps=n,
        total_tokens=len(generated),
        total_time=total_time,
        speedup=cost.per_token_vanilla / per_token if per_token > 0 else float("inf"),
        memory_trace=trace,
        steps=steps,
        tokens=generated if engine == "stub" else [],
    )


# -- batching -------------------------------------------------------------------------


@dataclass
class BatchState:
    """One sequence's view of a padded batch cache.

    ``cache_tokens``/``cache_positions`` hold every slot, pads included;
    ``pad_positions`` are the cache indices holding pads.
    """

    generated_tokens: list[int] = field(default_factory=list)
    position_counter: int = 0
    pad_positions: set[int] = field(default_factory=set)
    cache_tokens: list[int] = field(default_factory=list)
    cache_positions: list[int] = field(default_factory=list)

    def visible(self) -> tuple[list[int], list[int]]:
        """Real tokens and their position ids, pads excluded."""
        keep = [i for i in range(len(self.cache_tokens)) if i not in self.pad_positions]
        return [self.cache_tokens[i] for i in keep], [self.cache_positions[i] for i in keep]

    def real_token_count(self) -> int:
        return len(self.cache_tokens) - len(self.pad_positions)


@dataclass(frozen=True)
class PaddedBatch:
    tokens: np.ndarray
    position_ids: np.ndarray
    pad_mask: np.ndarray

    @property
    def width(self) -> int:
        return int(self.tokens.shape[1])

    @property
    def pad_counts(self) -> list[int]:
        return self.pad_mask.sum(axis=1).tolist()


def _append_padded(chunks: Sequence[Sequence[int]], states: Sequence[BatchState],
                   pad_token: int = PAD_TOKEN) -> PaddedBatch:
    width = max(len(c) for c in chunks)
    b = len(chunks)
    tokens = np.full((b, width), pad_token, dtype=np.int64)
    positions = np.zeros((b, width), dtype=np.int64)
    pads = np.ones((b, width), dtype=bool)
    for row, (chunk, st) in enumerate(zip(chunks, states)):
        base = len(st.cache_tokens)
        for j in range(width):
            if j < len(chunk):
                tokens[row, j] = chunk[j]
                positions[row, j] = st.position_counter
                pads[row, j] = False
                st.cache_tokens.append(int(chunk[j]))
                st.cache_positions.append(st.position_counter)
                st.position_counter += 1
            else:
                # pad ids repeat the last real position; the pad mask hides them anyway
                positions[row, j] = max(st.position_counter - 1, 0)
                st.cache_tokens.append(pad_token)
                st.cache_positions.append(positions[row, j])
                st.pad_positions.add(base + j)
    return PaddedBatch(tokens, positions, pads)


def batch_from_prompts(prompts: Sequence[Sequence[int]]) -> tuple[list[BatchState], PaddedBatch]:
    if not prompts:
        raise ValueError("empty batch")
    states = [BatchState() for _ in prompts]
    return states, _append_padded(prompts, states)


def batched_verify_pad(outcomes: Sequence[StepOutcome], states: Sequence[BatchState],
                       pad_token: int = PAD_TOKEN) -> PaddedBatch:
    """Pad each sequence's committed tokens to the batch maximum and append them.

    Position ids continue from each sequence's own counter and skip pads; the
    returned pad mask marks the slots attention must ignore.
    """
    if not outcomes or len(outcomes) != len(states):
        raise ValueError("need one outcome per batch state and a non-empty batch")
    chunks = []
    for o in outcomes:
        chunks.append(list(o.tokens) if o.tokens else [0] * o.tau)
    out = _append_padded(chunks, states, pad_token)
    for st, chunk in zip(states, chunks):
        st.generated_tokens.extend(chunk)
    return out


@dataclass
class BatchedResult:
    per_sequence: list[SimResult]
    aggregate_throughput: float
    total_time: float
    total_steps: int
    total_tokens: int
    pad_slots: int
    memory_trace: list[tuple[int, int, int]] = field(default_factory=list)
    steps: list[StepRecord] = field(default_factory=list)

    def summary(self) -> dict:
        return {
            "aggregate_throughput": self.aggregate_throughput,
            "total_time": self.total_time,
            "total_steps": self.total_steps,
            "total_tokens": self.total_tokens,
            "pad_slots": self.pad_slots,
            "batch_size": len(self.per_sequence),
            "per_sequence": [r.summary() for r in self.per_sequence],
        }


def simulate_batched(batch_size: int, mask: TreeMask, acc: AcceptanceModel, cost: CostModel,
                     target_tokens: int, seed: int = 0, *, engine: str = "stochastic",
                     prompts: Sequence[Sequence[int]] | None = None,
                     max_steps: int | None = None, model: ModelSpec = VICUNA_7B,
                     precision: Precision = Precision.FP16) -> BatchedResult:
    """Static batch: step every sequence until all have ``target_tokens`` tokens.

    Per-step cost is ``c0 + c1 * N * batch_eff`` with
    ``batch_eff = batch_size ** batch_exponent * padded_width / mean_width``.
    ``max_steps`` stops early regardless of the token target.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if engine not in ("stochastic", "stub"):
        raise ValueError(f"unknown engine {engine!r}")
    prompts = [list(p) for p in prompts] if prompts is not None else make_prompts(batch_size, seed)
    if len(prompts) != batch_size:
        raise ValueError("one prompt per sequence")
    rngs = _rngs(seed, batch_size)
    states, _ = batch_from_prompts(prompts)
    per_seq_steps: list[list[StepRecord]] = [[] for _ in range(batch_size)]
    taus = [0] * batch_size
    buffers = buffer_bytes(mask.shape, model, batch_size, precision)
    steps: list[StepRecord] = []
    trace: list[tuple[int, int, int]] = []
    total_time = 0.0
    pad_slots = 0
    while any(len(s.generated_tokens) < target_tokens for s in states):
        if max_steps is not None and len(steps) >= max_steps:
            break
        outcomes = []
        for i, st in enumerate(states):
            if engine == "stub":
                toks, pos = st.visible()
                outcomes.append(stub_model_decode(toks, mask, positions=pos, acc=acc,
                                                  vocab_size=model.vocab_size).outcome)
            else:
                outcomes.append(step_accept(mask, acc, rngs[i]))
        padded = batched_verify_pad(outcomes, states)
        widths = [o.tau for o in outcomes]
        batch_eff = batch_size**cost.batch_exponent * padded.width / (sum(widths) / batch_size)
        latency = cost.step_latency(mask.num_nodes, batch_eff)
        total_time += latency
        pad_slots += sum(padded.pad_counts)
        for i, o in enumerate(outcomes):
            taus[i] += o.tau
            per_seq_steps[i].append(StepRecord(len(steps), o.tau, latency,
                                               len(states[i].generated_tokens)))
        steps.append(StepRecord(len(steps), max(widths), latency,
                                sum(len(s.generated_tokens) for s in states)))
        trace.append((len(steps) - 1, buffers,
                      kv_bytes_for_tokens(model, len(states[0].cache_tokens), batch_size, precision)))
    per_sequence = []
    for i, st in enumerate(states):
        n = len(per_seq_steps[i])
        toks = len(st.generated_tokens)
        per_token = total_time / toks if toks else float("inf")
        per_sequence.append(SimResult(
            mean_tau=taus[i] / n if n else 0.0,
            tokens_per_second=toks / total_time if total_time else 0.0,
            per_token_latency=per_token,
            total_steps=n,
            total_tokens=toks,
            total_time=total_time,
            speedup=cost.per_token_vanilla / per_token if toks else 0.0,
            steps=per_seq_steps[i],
            tokens=list(st.generated_tokens) if engine == "stub" else [],
        ))
    total_tokens = sum(r.total_tokens for r in per_sequence)
    return BatchedResult(
        per_sequence=per_sequence,
        aggregate_throughput=total_tokens / total_time if total_time else 0.0,
        total_time=total_time,
        total_steps=len(steps),
        total_tokens=total_tokens,
        pad_slots=pad_slots,
        memory_trace=trace,
        steps=steps,
    )


# -- pipeline distribution ------------------------------------------------------------


@dataclass
class StageInfo:
    stage: int
    layers: int
    base_model: int
    kv_cache: int
    extra: int
    capacity: int

    @property
    def total(self) -> int:
        return self.base_model + self.kv_cache + self.extra

    @property
    def fits(self) -> bool:
        return self.total <= self.capacity


@dataclass
class DistributedResult:
    feasible: bool
    stages: list[StageInfo]
    step_latency: float
    reason: str | None = None
    result: SimResult | None = None

    def summary(self) -> dict:
        return {
            "feasible": self.feasible,
            "reason": self.reason,
            "step_latency": self.step_latency,
            "layers_per_stage": [s.layers for s in self.stages],
            "stages": [asdict(s) | {"total": s.total, "fits": s.fits} for s in self.stages],
            "result": self.result.summary() if self.result else None,
        }


def distributed_step_latency(cluster: ClusterSpec, model: ModelSpec, nodes: int,
                             cost: CostModel) -> float:
    layers = split_layers(model.hidden_layers, cluster.device_count)
    compute = sum(cost.step_latency(nodes) * n / model.hidden_layers for n in layers)
    return compute + _comm_overhead(cluster, cost)


def _comm_overhead(cluster: ClusterSpec, cost: CostModel) -> float:
    comm = cost.comm_cost if cluster.interconnect_cost is None else cluster.interconnect_cost
    return (cluster.device_count - 1) * comm * (1.0 - cost.pipeline_overlap)


def simulate_distributed(cluster: ClusterSpec, model: ModelSpec, mask: TreeMask,
                         acc: AcceptanceModel, cost: CostModel, seed: int = 0, *,
                         workload: Workload | None = None, target_tokens: int = 256,
                         precision: Precision = Precision.FP16) -> DistributedResult:
    """Layer-pipelined decoding over ``cluster``; no micro-batch overlap by default.

    Each stage holds its share of base-model weights and KV cache. Decoding
    heads and sampling buffers sit on the last stage, next to the output layer.
    """
    workload = workload or Workload(1, target_tokens)
    layers = split_layers(model.hidden_layers, cluster.device_count)
    base = base_model_bytes(model, precision)
    kv = kv_cache_bytes(model, workload, precision)
    extra_last = heads_bytes(mask.levels, model) + buffer_bytes(mask.shape, model,
                                                                workload.batch_size, precision)
    cap = cluster.per_device.usable
    stages = []
    for s, n in enumerate(layers):
        stages.append(StageInfo(
            stage=s, layers=n,
            base_model=-(-base * n // model.hidden_layers),
            kv_cache=-(-kv * n // model.hidden_layers),
            extra=extra_last if s == len(layers) - 1 else 0,
            capacity=cap,
        ))
    latency = distributed_step_latency(cluster, model, mask.num_nodes, cost)
    bad = [s for s in stages if not s.fits]
    if bad:
        return DistributedResult(False, stages, latency,
                                 reason=f"stage {bad[0].stage} needs {bad[0].total} B of {cap} B")
    # vanilla decoding pays the same pipeline hops once per token
    dcost = CostModel(fixed_step_cost=latency, per_node_cost=0.0,
                      per_token_vanilla=cost.per_token_vanilla + _comm_overhead(cluster, cost),
                      comm_cost=cost.comm_cost)
    result = simulate_generation(mask, acc, dcost, target_tokens, seed, model=model,
                                 precision=precision)
    return DistributedResult(True, stages, latency, result=result)
