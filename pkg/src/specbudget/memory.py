"""Closed-form memory footprint of tree-based speculative decoding.

Every quantity is an exact integer byte count. Fractional bytes (FP4 stores
half a byte per value) are rounded up once, at the final multiplication.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass
from fractions import Fraction

MAX_BYTES = 2**63 - 1
DEFAULT_HEAD_BYTES = 600_000_000


class ArithmeticRangeError(OverflowError):
    """A byte count left the representable range (signed 64-bit)."""


class InfeasibleError(ValueError):
    """The fixed allocations alone do not fit the device."""

    def __init__(self, message: str, reason: str = "Model"):
        super().__init__(message)
        self.reason = reason


class Precision(enum.Enum):
    FP16 = "fp16"
    INT8 = "int8"
    FP4 = "fp4"

    @property
    def bytes_per_value(self) -> Fraction:
        return _BYTES_PER_VALUE[self]

    def lower(self) -> Precision | None:
        """Next precision in the quantization descent, or None at the bottom."""
        order = list(Precision)
        i = order.index(self)
        return order[i + 1] if i + 1 < len(order) else None

    @classmethod
    def parse(cls, text: str | Precision) -> Precision:
        if isinstance(text, Precision):
            return text
        try:
            return cls(text.strip().lower())
        except ValueError:
            raise ValueError(f"unknown precision {text!r}; expected one of fp16, int8, fp4") from None


_BYTES_PER_VALUE = {
    Precision.FP16: Fraction(2),
    Precision.INT8: Fraction(1),
    Precision.FP4: Fraction(1, 2),
}


@dataclass(frozen=True)
class ModelSpec:
    hidden_layers: int
    kv_heads: int
    head_dim: int
    vocab_size: int
    param_count: int
    per_head_bytes: int = DEFAULT_HEAD_BYTES
    name: str = "custom"

    def __post_init__(self):
        for field in ("hidden_layers", "kv_heads", "head_dim", "vocab_size", "param_count"):
            if getattr(self, field) < 1:
                raise ValueError(f"ModelSpec.{field} must be >= 1")
        if self.per_head_bytes <= 0:
            raise ValueError("ModelSpec.per_head_bytes must be > 0")


VICUNA_7B = ModelSpec(
    hidden_layers=32, kv_heads=32, head_dim=128, vocab_size=32000,
    param_count=7_000_000_000, name="vicuna-7b",
)
VICUNA_13B = ModelSpec(
    hidden_layers=40, kv_heads=40, head_dim=128, vocab_size=32000,
    param_count=13_000_000_000, name="vicuna-13b",
)
LLAMA2_70B = ModelSpec(
    hidden_layers=80, kv_heads=8, head_dim=128, vocab_size=32000,
    param_count=70_000_000_000, name="llama-2-70b",
)
PRESETS = {m.name: m for m in (VICUNA_7B, VICUNA_13B, LLAMA2_70B)}


@dataclass(frozen=True)
class Workload:
    """A chat of ``query_count`` queries, each up to ``max_tokens_per_query`` tokens.

    ``probe=True`` permits zero counts, used to ask what the fixed allocations
    cost on their own.
    """

    query_count: int
    max_tokens_per_query: int
    batch_size: int = 1
    probe: bool = False

    def __post_init__(self):
        low = 0 if self.probe else 1
        if self.query_count < low or self.max_tokens_per_query < low:
            raise ValueError("Workload needs query_count >= 1 and max_tokens_per_query >= 1")
        if self.batch_size < 1:
            raise ValueError("Workload.batch_size must be >= 1")

    @classmethod
    def zero_probe(cls, batch_size: int = 1) -> Workload:
        return cls(0, 0, batch_size, probe=True)

    @property
    def sequence_length(self) -> int:
        return self.query_count * self.max_tokens_per_query


@dataclass(frozen=True)
class TreeShape:
    nodes: int
    leaves: int
    levels: int
    arity: int = 10

    def __post_init__(self):
        if not 1 <= self.leaves <= self.nodes:
            raise ValueError(f"TreeShape needs 1 <= leaves <= nodes, got {self.leaves}/{self.nodes}")
        if self.levels < 0 or self.arity < 1:
            raise ValueError("TreeShape needs levels >= 0 and arity >= 1")
        if self.levels >= 1 and self.nodes < self.levels + 1:
            raise ValueError(f"a {self.levels}-level tree needs at least {self.levels + 1} nodes")
        if self.leaves > self.arity**self.levels:
            raise ValueError(f"{self.leaves} leaves exceed arity**levels = {self.arity ** self.levels}")


@dataclass(frozen=True)
class MemoryBreakdown:
    kv_cache: int
    buffers: int
    heads: int
    base_model: int

    @property
    def total(self) -> int:
        return self.kv_cache + self.buffers + self.heads + self.base_model

    def as_dict(self) -> dict[str, int]:
        return {
            "kv_cache": self.kv_cache,
            "buffers": self.buffers,
            "heads": self.heads,
            "base_model": self.base_model,
            "total": self.total,
        }


def _checked(value: int | Fraction) -> int:
    out = math.ceil(value)
    if out > MAX_BYTES:
        raise ArithmeticRangeError(f"byte count {out} exceeds {MAX_BYTES}")
    return out


def kv_bytes_per_token(model: ModelSpec, precision: Precision = Precision.FP16) -> int:
    return _checked(2 * model.hidden_layers * model.kv_heads * model.head_dim * precision.bytes_per_value)


def kv_bytes_for_tokens(model: ModelSpec, tokens: int, batch: int = 1,
                        precision: Precision = Precision.FP16) -> int:
    if tokens < 0 or batch < 1:
        raise ValueError("tokens must be >= 0 and batch >= 1")
    per_value = 2 * model.hidden_layers * batch * model.kv_heads * model.head_dim * tokens
    return _checked(per_value * precision.bytes_per_value)


def kv_cache_bytes(model: ModelSpec, workload: Workload, precision: Precision = Precision.FP16) -> int:
    """Pre-allocated key/value cache: 2 * layers * batch * kv_heads * head_dim * tokens * bytes."""
    return kv_bytes_for_tokens(model, workload.sequence_length, workload.batch_size, precision)


def buffer_bytes(shape: TreeShape, model: ModelSpec, batch: int = 1,
                 precision: Precision = Precision.FP16) -> int:
    """Sampling buffers for one decoding step over the tree.

    Three vocabulary-wide allocations: logits for every node, the retrieved
    candidate sequences, and the per-sequence acceptance-length workspace.
    """
    if batch < 1:
        raise ValueError("batch must be >= 1")
    n, s, l, w = shape.nodes, shape.leaves, shape.levels, model.vocab_size
    values = batch * n * w + batch * s * l * w + batch * s * l * l * w
    return _checked(values * precision.bytes_per_value)


def heads_bytes(levels: int, model: ModelSpec) -> int:
    if levels < 0:
        raise ValueError("levels must be >= 0")
    return _checked(levels * model.per_head_bytes)


def base_model_bytes(model: ModelSpec, precision: Precision = Precision.FP16) -> int:
    return _checked(model.param_count * precision.bytes_per_value)


def total_bytes(model: ModelSpec, workload: Workload, shape: TreeShape,
                precision: Precision = Precision.FP16) -> MemoryBreakdown:
    # buffers are reused across steps, so they are counted once
    return MemoryBreakdown(
        kv_cache=kv_cache_bytes(model, workload, precision),
        buffers=buffer_bytes(shape, model, workload.batch_size, precision),
        heads=heads_bytes(shape.levels, model),
        base_model=base_model_bytes(model, precision),
    )


def queries_for_cache(cache_budget: int, model: ModelSpec, max_tokens_per_query: int,
                      batch: int = 1, precision: Precision = Precision.FP16) -> int:
    """How many whole queries of ``max_tokens_per_query`` tokens fit a cache budget."""
    per_query = kv_bytes_for_tokens(model, max_tokens_per_query, batch, precision)
    if cache_budget < 0:
        return 0
    return cache_budget // per_query


def max_servable_queries(device: int, model: ModelSpec, max_tokens_per_query: int,
                         shape: TreeShape, precision: Precision = Precision.FP16,
                         batch: int = 1) -> int:
    """Largest query count whose full footprint fits ``device`` bytes.

    Returns 0 when not even one query fits next to the fixed allocations.
    Raises InfeasibleError when the base model and heads alone exceed the device.
    """
    fixed = base_model_bytes(model, precision) + heads_bytes(shape.levels, model)
    if fixed > device:
        raise InfeasibleError(
            f"base model and heads need {fixed} B, device has {device} B", reason="Model")
    room = device - fixed - buffer_bytes(shape, model, batch, precision)
    if room < 0:
        return 0
    return queries_for_cache(room, model, max_tokens_per_query, batch, precision)


def ratio_split(capacity: int, cache_part: int, model_part: int) -> tuple[int, int]:
    """Split ``capacity`` bytes as cache:model. Cache is floored, model gets the rest."""
    if cache_part <= 0 or model_part <= 0:
        raise ValueError("ratio parts must be positive")
    cache = capacity * cache_part // (cache_part + model_part)
    return cache, capacity - cache


@dataclass(frozen=True)
class DeviceBudget:
    capacity: int
    safety_margin: float = 0.02

    def __post_init__(self):
        if self.capacity <= 0:
            raise ValueError("device capacity must be > 0")
        if not 0.0 <= self.safety_margin < 1.0:
            raise ValueError("safety_margin must be in [0, 1)")

    @property
    def usable(self) -> int:
        reserve = math.ceil(self.capacity * Fraction(str(self.safety_margin)))
        return self.capacity - reserve


@dataclass(frozen=True)
class ClusterSpec:
    device_count: int
    per_device: DeviceBudget
    interconnect_cost: float | None = None  # seconds per stage boundary; None defers to the cost model

    def __post_init__(self):
        if self.device_count < 1:
            raise ValueError("device_count must be >= 1")
        if self.interconnect_cost is not None and self.interconnect_cost < 0:
            raise ValueError("interconnect_cost must be >= 0")


def split_layers(hidden_layers: int, stages: int) -> list[int]:
    """Equal contiguous layer chunks; the remainder goes to the last stage."""
    if stages < 1 or stages > hidden_layers:
        raise ValueError(f"cannot split {hidden_layers} layers over {stages} stages")
    base = hidden_layers // stages
    return [base] * (stages - 1) + [hidden_layers - base * (stages - 1)]
