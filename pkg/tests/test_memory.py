from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from oracles import buffer_bytes_by_hand, kv_bytes_by_hand
from specbudget.memory import (
    LLAMA2_70B,
    MAX_BYTES,
    VICUNA_7B,
    ArithmeticRangeError,
    DeviceBudget,
    InfeasibleError,
    ModelSpec,
    Precision,
    TreeShape,
    Workload,
    base_model_bytes,
    buffer_bytes,
    heads_bytes,
    kv_bytes_for_tokens,
    kv_cache_bytes,
    max_servable_queries,
    queries_for_cache,
    ratio_split,
    split_layers,
    total_bytes,
)

MEDUSA = TreeShape(64, 42, 4)
PRUNED = TreeShape(44, 23, 3)
GIB = 2**30
MIB = 2**20


def test_precision_widths_and_descent():
    assert Precision.FP16.bytes_per_value == 2
    assert Precision.INT8.bytes_per_value == 1
    assert Precision.FP4.bytes_per_value == Fraction(1, 2)
    assert Precision.FP16.lower() is Precision.INT8
    assert Precision.INT8.lower() is Precision.FP4
    assert Precision.FP4.lower() is None
    assert Precision.parse(" INT8 ") is Precision.INT8
    with pytest.raises(ValueError):
        Precision.parse("bf16")


def test_kv_one_token_is_half_mib():
    assert kv_cache_bytes(VICUNA_7B, Workload(1, 1)) == 524_288


def test_kv_full_context_is_one_gib():
    assert kv_cache_bytes(VICUNA_7B, Workload(1, 2048)) == GIB


def test_kv_chat_workload():
    got = kv_cache_bytes(VICUNA_7B, Workload(20, 128))
    assert got == 1_342_177_280 == kv_bytes_by_hand(32, 1, 32, 128, 2560, 2)
    assert got == 1.25 * GIB


def test_kv_zero_probe():
    assert kv_cache_bytes(VICUNA_7B, Workload.zero_probe()) == 0
    with pytest.raises(ValueError):
        Workload(0, 128)
    with pytest.raises(ValueError):
        Workload(20, 0)


def test_kv_fp4_rounds_up_once():
    tiny = ModelSpec(1, 1, 1, 10, 10)
    # 2 values at half a byte each is exactly one byte; 1 token of 1 layer is 2 values
    assert kv_bytes_for_tokens(tiny, 1, precision=Precision.FP4) == 1
    odd = ModelSpec(1, 1, 1, 3, 3)
    assert base_model_bytes(odd, Precision.FP4) == 2  # 1.5 rounds up


def test_buffer_medusa_default():
    assert buffer_bytes(MEDUSA, VICUNA_7B) == 57_856_000 == buffer_bytes_by_hand(64, 42, 4, 32000)
    assert buffer_bytes(MEDUSA, VICUNA_7B) / MIB == pytest.approx(55.18, abs=0.01)


def test_buffer_pruned_mask():
    assert buffer_bytes(PRUNED, VICUNA_7B) == 20_480_000
    assert buffer_bytes(PRUNED, VICUNA_7B) / MIB == pytest.approx(19.53, abs=0.01)


def test_buffer_chain():
    assert buffer_bytes(TreeShape(5, 1, 4), VICUNA_7B) == 1_600_000


def test_buffer_cross_check_against_rounded_figures():
    assert abs(buffer_bytes(MEDUSA, VICUNA_7B) / MIB - 55) / 55 < 0.02
    assert abs(buffer_bytes(PRUNED, VICUNA_7B) / MIB - 19.5) / 19.5 < 0.01


def test_heads_bytes():
    assert heads_bytes(4, VICUNA_7B) == 2_400_000_000
    assert heads_bytes(1, VICUNA_7B) == 600_000_000
    custom = ModelSpec(32, 32, 128, 32000, 7_000_000_000, per_head_bytes=500_000_000)
    assert heads_bytes(3, custom) == 1_500_000_000


def test_base_model_bytes():
    assert base_model_bytes(VICUNA_7B) == 14_000_000_000
    assert base_model_bytes(LLAMA2_70B) == 140_000_000_000
    assert base_model_bytes(LLAMA2_70B) // 8 == 17_500_000_000
    assert base_model_bytes(VICUNA_7B, Precision.FP4) == 3_500_000_000


def test_total_is_sum_of_components():
    bd = total_bytes(VICUNA_7B, Workload(20, 128), MEDUSA)
    assert bd.total == 14 * 10**9 + 2_400_000_000 + int(1.25 * GIB) + 57_856_000
    assert bd.total == sum(v for k, v in bd.as_dict().items() if k != "total")


def test_total_zero_probe_is_fixed_cost_only():
    bd = total_bytes(VICUNA_7B, Workload.zero_probe(), MEDUSA)
    assert bd.kv_cache == 0
    assert bd.total == bd.base_model + bd.heads + bd.buffers


def test_mask_choice_flips_feasibility_on_24gb_fp16():
    # long chat: the 64-node 4-head mask overflows, the 44-node 3-head mask fits
    dev = DeviceBudget(24 * 10**9).usable
    wl = Workload(110, 128)
    assert total_bytes(VICUNA_7B, wl, MEDUSA).total > dev
    assert total_bytes(VICUNA_7B, wl, PRUNED).total <= dev


def test_overflow_is_explicit():
    huge = ModelSpec(10**6, 10**6, 10**6, 10, 10)
    with pytest.raises(ArithmeticRangeError):
        kv_bytes_for_tokens(huge, 10**6)
    assert isinstance(ArithmeticRangeError("x"), OverflowError)
    with pytest.raises(ArithmeticRangeError):
        base_model_bytes(ModelSpec(1, 1, 1, 1, MAX_BYTES))


def test_queries_for_cache_example():
    per_query = 524_288 * 128
    assert queries_for_cache(5_300_000_000, VICUNA_7B, 128) == 5_300_000_000 // per_query == 78
    assert queries_for_cache(per_query - 1, VICUNA_7B, 128) == 0


def test_max_servable_queries_round_trip():
    dev = 20 * 10**9
    n = max_servable_queries(dev, VICUNA_7B, 128, MEDUSA)
    assert total_bytes(VICUNA_7B, Workload(n, 128), MEDUSA).total <= dev
    assert total_bytes(VICUNA_7B, Workload(n + 1, 128), MEDUSA).total > dev


def test_max_servable_queries_model_does_not_fit():
    with pytest.raises(InfeasibleError) as err:
        max_servable_queries(10 * 10**9, VICUNA_7B, 128, MEDUSA)
    assert err.value.reason == "Model"
    fixed = base_model_bytes(VICUNA_7B) + heads_bytes(4, VICUNA_7B)
    assert max_servable_queries(fixed + 1000, VICUNA_7B, 128, MEDUSA) == 0


def test_ratio_split():
    cache, models = ratio_split(16 * 10**9, 1, 2)
    assert cache == pytest.approx(5.33e9, rel=0.001)
    assert models == pytest.approx(10.67e9, rel=0.001)
    assert ratio_split(16 * 10**9, 1, 15) == (10**9, 15 * 10**9)
    with pytest.raises(ValueError):
        ratio_split(10, 0, 1)


def test_device_budget():
    assert DeviceBudget(24 * 10**9).usable == 23_520_000_000
    assert DeviceBudget(100, 0.0).usable == 100
    with pytest.raises(ValueError):
        DeviceBudget(0)
    with pytest.raises(ValueError):
        DeviceBudget(10, 1.0)


def test_split_layers():
    assert split_layers(80, 8) == [10] * 8
    assert split_layers(32, 5) == [6, 6, 6, 6, 8]
    assert split_layers(32, 1) == [32]
    with pytest.raises(ValueError):
        split_layers(4, 5)


def test_tree_shape_validation():
    with pytest.raises(ValueError):
        TreeShape(3, 1, 4)
    with pytest.raises(ValueError):
        TreeShape(5, 6, 2)
    with pytest.raises(ValueError):
        TreeShape(200, 101, 2)


# -- properties -------------------------------------------------------------------

models = st.builds(
    ModelSpec,
    hidden_layers=st.integers(1, 128), kv_heads=st.integers(1, 64),
    head_dim=st.sampled_from([32, 64, 80, 128, 256]), vocab_size=st.integers(1, 200_000),
    param_count=st.integers(1, 10**11),
)
precisions = st.sampled_from(list(Precision))


@st.composite
def shapes(draw):
    levels = draw(st.integers(1, 5))
    arity = draw(st.integers(1, 10))
    nodes = draw(st.integers(levels + 1, 300))
    leaves = draw(st.integers(1, min(nodes, arity**levels)))
    return TreeShape(nodes, leaves, levels, arity)


@settings(max_examples=200, deadline=None)
@given(models, st.integers(0, 10**5), st.integers(1, 64), precisions)
def test_kv_linear_in_batch_and_monotone_in_tokens(model, tokens, batch, prec):
    one = kv_bytes_for_tokens(model, tokens, batch, prec)
    assert kv_bytes_for_tokens(model, tokens, 2 * batch, prec) == 2 * one or prec is Precision.FP4
    assert kv_bytes_for_tokens(model, tokens + 1, batch, prec) >= one
    assert one == kv_bytes_by_hand(model.hidden_layers, batch, model.kv_heads, model.head_dim, tokens,
                                   *prec.bytes_per_value.as_integer_ratio())


@settings(max_examples=200, deadline=None)
@given(shapes(), models, st.integers(1, 16), precisions)
def test_buffer_matches_hand_formula_and_scales(shape, model, batch, prec):
    got = buffer_bytes(shape, model, batch, prec)
    num, den = prec.bytes_per_value.as_integer_ratio()
    assert got == buffer_bytes_by_hand(shape.nodes, shape.leaves, shape.levels, model.vocab_size,
                                       batch, num, den)
    if prec is not Precision.FP4:
        assert buffer_bytes(shape, model, 2 * batch, prec) == 2 * got


@settings(max_examples=100, deadline=None)
@given(models, st.integers(1, 64), st.integers(1, 512), precisions)
def test_total_additive_and_monotone_in_queries(model, n, m, prec):
    bd = total_bytes(model, Workload(n, m), MEDUSA, prec)
    assert bd.total == bd.kv_cache + bd.buffers + bd.heads + bd.base_model
    assert total_bytes(model, Workload(n + 1, m), MEDUSA, prec).total >= bd.total


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 40), st.integers(1, 64))
def test_max_servable_exhaustive_small_budgets(extra_queries, m):
    tiny = ModelSpec(2, 2, 4, 50, 1000, per_head_bytes=100)
    shape = TreeShape(5, 2, 2, 3)
    fixed = total_bytes(tiny, Workload.zero_probe(), shape).total
    dev = fixed + extra_queries * kv_bytes_for_tokens(tiny, m) + 7
    n = max_servable_queries(dev, tiny, m, shape)
    assert n == extra_queries
    assert all(total_bytes(tiny, Workload(q, m), shape).total <= dev for q in range(1, n + 1))
    assert total_bytes(tiny, Workload(n + 1, m), shape).total > dev
