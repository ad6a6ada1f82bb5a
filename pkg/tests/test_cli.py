import csv
import io
import json

import pytest

from specbudget.cli import main
from specbudget.config import ConfigError, parse_config, parse_size

BASE = {
    "model": "vicuna-7b",
    "device": {"capacity": "24gb"},
    "workload": {"query_count": 20, "max_tokens_per_query": 128},
}


def write_config(tmp_path, doc=None, name="cfg.json", **updates):
    doc = dict(BASE if doc is None else doc)
    doc.update(updates)
    path = tmp_path / name
    path.write_text(json.dumps(doc, indent=2))
    return str(path)


def run(args):
    return main([str(a) for a in args])


# -- config -------------------------------------------------------------------------


def test_parse_size_units():
    assert parse_size("24gb") == 24 * 10**9
    assert parse_size("55MB") == 55 * 10**6
    assert parse_size("4096bytes") == 4096
    assert parse_size("1.5gb") == 1_500_000_000
    for bad in (24, "24", "24 GiB", "1.5bytes", "gb"):
        with pytest.raises(ConfigError):
            parse_size(bad)


def test_missing_model_field_reports_field():
    doc = {k: v for k, v in BASE.items() if k != "model"}
    with pytest.raises(ConfigError) as err:
        parse_config(json.dumps(doc))
    assert "model" in str(err.value)


def test_bad_json_reports_line():
    with pytest.raises(ConfigError) as err:
        parse_config('{\n  "model": "vicuna-7b",\n  "device": {"capacity": 24gb}\n}')
    assert err.value.line == 3


def test_field_errors_carry_line_numbers():
    text = json.dumps(dict(BASE, device={"capacity": 24}), indent=2)
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.field == "device.capacity"
    assert err.value.line == text.splitlines().index('    "capacity": 24') + 1


@pytest.mark.parametrize("doc", [
    dict(BASE, extra=1),
    dict(BASE, device={"capacity": "24gb", "color": "red"}),
    dict(BASE, tree={"builtin": "medusa", "custom": {"nodes": 44, "leaves": 23}}),
    dict(BASE, tree={"builtin": "nope"}),
    dict(BASE, tree={"file": "does-not-exist.json"}),
    dict(BASE, workload={"query_count": 0, "max_tokens_per_query": 128}),
    dict(BASE, optimizer={"heads": 1}),
    dict(BASE, model={"hidden_layers": 32}),
])
def test_invalid_configs_rejected(doc, tmp_path):
    with pytest.raises(ConfigError):
        parse_config(json.dumps(doc), tmp_path)


def test_duplicate_keys_rejected():
    with pytest.raises(ConfigError):
        parse_config('{"model": "vicuna-7b", "model": "vicuna-13b"}')


def test_explicit_model_and_custom_tree():
    cfg = parse_config(json.dumps(dict(
        BASE,
        model={"hidden_layers": 32, "kv_heads": 32, "head_dim": 128, "vocab_size": 32000,
               "param_count": 7_000_000_000, "per_head_bytes": "0.6gb"},
        tree={"custom": {"nodes": 44, "leaves": 23, "levels": 3}},
    )))
    assert cfg.model.per_head_bytes == 600_000_000
    assert cfg.tree.load().label == "1-10-23-10"
    assert cfg.seed == 0


# -- plan ---------------------------------------------------------------------------


def test_plan_defaults_on_24gb(tmp_path):
    assert run(["plan", "--config", write_config(tmp_path), "--out", tmp_path / "o"]) == 0
    doc = json.loads((tmp_path / "o" / "plan.json").read_text())
    assert doc["feasible"] and doc["tree"]["label"] == "1-10-28-23-2"
    assert [e["stage"] for e in doc["decisions_log"]] == ["defaults"]


def test_plan_baseline_ratio_fails_with_model(tmp_path):
    cfg = write_config(tmp_path, device={"capacity": "16gb"})
    assert run(["plan", "--config", cfg, "--baseline-ratio", "1:2", "--out", tmp_path]) == 2
    doc = json.loads((tmp_path / "plan.json").read_text())
    assert doc["reason"] == "Model"
    assert run(["plan", "--config", cfg, "--out", tmp_path]) == 0


def test_plan_usage_errors(tmp_path, capsys):
    doc = {k: v for k, v in BASE.items() if k != "model"}
    assert run(["plan", "--config", write_config(tmp_path, doc)]) == 1
    assert "model" in capsys.readouterr().err
    assert run(["plan"]) == 1
    assert run(["plan", "--config", tmp_path / "missing.json"]) == 1
    assert run(["plan", "--config", write_config(tmp_path), "--baseline-ratio", "1-2"]) == 1
    with pytest.raises(SystemExit) as exit_:
        run(["explode"])
    assert exit_.value.code == 1


def test_plan_infeasible_exit_code(tmp_path):
    cfg = write_config(tmp_path, device={"capacity": "4gb"})
    assert run(["plan", "--config", cfg, "--out", tmp_path]) == 2
    assert json.loads((tmp_path / "plan.json").read_text())["reason"] == "Model"


# -- simulate -----------------------------------------------------------------------


def test_simulate_is_byte_identical_per_seed(tmp_path):
    cfg = write_config(tmp_path, simulate={"target_tokens": 200})
    for d in ("a", "b"):
        assert run(["simulate", "--config", cfg, "--seed", 3, "--out", tmp_path / d]) == 0
    for f in ("summary.json", "steps.csv"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    assert run(["simulate", "--config", cfg, "--seed", 4, "--out", tmp_path / "c"]) == 0
    assert (tmp_path / "a" / "steps.csv").read_bytes() != (tmp_path / "c" / "steps.csv").read_bytes()


def test_simulate_batch_one_matches_unbatched_stub(tmp_path):
    cfg = write_config(tmp_path, simulate={"target_tokens": 150, "engine": "stub"})
    assert run(["simulate", "--config", cfg, "--out", tmp_path / "solo"]) == 0
    assert run(["simulate", "--config", cfg, "--batch", 1, "--out", tmp_path / "b1"]) == 0
    solo = json.loads((tmp_path / "solo" / "tokens.json").read_text())
    b1 = json.loads((tmp_path / "b1" / "tokens.json").read_text())
    assert solo == b1 and len(solo[0]) >= 150


def test_simulate_distributed_layers(tmp_path):
    cfg = write_config(tmp_path, model="llama-2-70b", simulate={"target_tokens": 32})
    assert run(["simulate", "--config", cfg, "--distributed", 8, "--out", tmp_path]) == 0
    doc = json.loads((tmp_path / "summary.json").read_text())
    assert doc["layers_per_stage"] == [10] * 8
    assert run(["simulate", "--config", cfg, "--distributed", 2, "--out", tmp_path]) == 2
    assert run(["simulate", "--config", cfg, "--distributed", 81, "--out", tmp_path]) == 1


# -- sweep ------------------------------------------------------------------------


def read_rows(path):
    return list(csv.DictReader(io.StringIO(path.read_text())))


def test_sweep_mask_buffers_and_chat_totals(tmp_path):
    cfg = write_config(tmp_path, sweep={"mask": [[64, 42, 4], [44, 23, 3]]},
                       simulate={"target_tokens": 64})
    assert run(["sweep", "--config", cfg, "--out", tmp_path]) == 0
    rows = read_rows(tmp_path / "sweep.csv")
    assert [(r["nodes"], r["leaves"]) for r in rows] == [("44", "23"), ("64", "42")]
    assert [r["buffer_mib"] for r in rows] == ["19.53", "55.18"]
    assert [float(r["chat_buffer_mb"]) for r in rows] == [409.6, 1157.12]
    assert float(rows[0]["chat_buffer_mib"]) == pytest.approx(390.6, abs=0.1)
    assert float(rows[1]["chat_buffer_mb"]) / 1000 == pytest.approx(1.1, abs=0.06)


def test_sweep_heads_by_mask_grid(tmp_path):
    masks = [16, 24, 32, 40, 48, 56, 64]
    cfg = write_config(tmp_path, sweep={"heads": [2, 3, 4, 5], "mask": masks},
                       simulate={"target_tokens": 32})
    assert run(["sweep", "--config", cfg, "--out", tmp_path]) == 0
    text = (tmp_path / "sweep.csv").read_text()
    rows = read_rows(tmp_path / "sweep.csv")
    assert len(rows) == 28
    assert len({len(line.split(",")) for line in text.splitlines()}) == 1
    assert [(int(r["heads"]), int(r["nodes"])) for r in rows] == [(h, m) for h in (2, 3, 4, 5)
                                                                   for m in masks]


def test_sweep_parallel_matches_serial(tmp_path):
    cfg = write_config(tmp_path, sweep={"batch": [1, 2], "precision": ["fp16", "int8"]},
                       simulate={"target_tokens": 32})
    assert run(["sweep", "--config", cfg, "--out", tmp_path / "s"]) == 0
    assert run(["sweep", "--config", cfg, "--jobs", 2, "--out", tmp_path / "p"]) == 0
    assert (tmp_path / "s" / "sweep.csv").read_bytes() == (tmp_path / "p" / "sweep.csv").read_bytes()


def test_sweep_single_cell_and_empty_grid(tmp_path):
    cfg = write_config(tmp_path, sweep={"batch": [1]}, simulate={"target_tokens": 16})
    assert run(["sweep", "--config", cfg, "--out", tmp_path]) == 0
    assert len(read_rows(tmp_path / "sweep.csv")) == 1
    assert run(["sweep", "--config", write_config(tmp_path, name="e.json", sweep={})]) == 1
    assert run(["sweep", "--config", write_config(tmp_path, name="n.json")]) == 1
    bad = write_config(tmp_path, name="b.json", sweep={"mask": []})
    assert run(["sweep", "--config", bad]) == 1


# -- tree --------------------------------------------------------------------------


def test_tree_build_and_stats(tmp_path, capsys):
    assert run(["tree", "build", 44, 37, "--arity", 10, "--levels", 4, "--out", tmp_path]) == 0
    capsys.readouterr()
    assert run(["tree", "stats", tmp_path / "mask.json"]) == 0
    out = capsys.readouterr().out
    assert "44 nodes, 37 leaves" in out


def test_tree_prune_medusa(tmp_path, capsys):
    src = tmp_path / "medusa.json"
    assert run(["tree", "export", "medusa", "--format", "path-list", "--out", tmp_path]) == 0
    (tmp_path / "mask.paths.json").rename(src)
    capsys.readouterr()
    assert run(["tree", "prune", src, "--nodes", 31]) == 0
    assert "31 nodes, 20 leaves" in capsys.readouterr().out


def test_tree_stats_builtin(capsys):
    assert run(["tree", "stats", "medusa"]) == 0
    out = capsys.readouterr().out
    assert "64 nodes, 42 leaves" in out and "57856000" in out


def test_tree_infeasible_build(capsys):
    assert run(["tree", "build", 44, 3]) == 2
    assert "leaves >=" in capsys.readouterr().err
    assert run(["tree", "prune", "medusa", "--nodes", 3]) == 2
    assert run(["tree", "build", 44]) == 1
    assert run(["tree", "stats"]) == 1


def test_tree_output_is_deterministic(tmp_path):
    for d in ("a", "b"):
        assert run(["tree", "build", "--logistic", "--levels", 3, "--out", tmp_path / d]) == 0
    assert (tmp_path / "a" / "mask.json").read_bytes() == (tmp_path / "b" / "mask.json").read_bytes()
