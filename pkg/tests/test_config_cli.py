import json

import pytest
import yaml

from stabletune.cli import grid_configs, main, select_best
from stabletune.config import ConfigError, load_experiment, parse_experiment, parse_seeds
from stabletune.results import RUN_COLUMNS, SchemaError, read_runs, read_table, write_table
from stabletune.trainer import RunConfig

TINY = {
    "dataset": {"synthetic": {"train_size": 40, "val_size": 20, "test_size": 20, "seq_len": 8, "min_len": 5}},
    "model": {"hidden_dim": 8, "num_heads": 2, "num_blocks": 1, "ffn_dim": 8},
    "pretrain": {"fresh": True},
    "run": {"total_steps": 4, "batch_size": 8, "eval_count": 2},
    "seeds": [0, 1],
}


def write_cfg(tmp_path, data, name="exp.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(data), encoding="utf-8")
    return path


def test_parse_nested_sections():
    cfg = parse_experiment({**TINY, "run": {"adam": {"lr": 3e-4, "bias_correction": False},
                                            "reinit": {"reinit_pooler": True, "num_blocks": 1}}})
    assert cfg.run.adam.lr == 3e-4 and not cfg.run.adam.bias_correction
    assert cfg.run.reinit.num_blocks == 1
    assert cfg.dataset.synthetic.train_size == 40
    assert cfg.seeds == [(0, 0), (1, 1)]


@pytest.mark.parametrize(
    "patch, where",
    [
        ({"run": {"adam": {"lr": "fast"}}}, "run.adam.lr"),
        ({"run": {"adam": {"beta3": 0.1}}}, "run.adam.beta3"),
        ({"model": {"depth": 3}}, "model.depth"),
        ({"run": {"total_steps": 0}}, "run"),
        ({"grid": {"method": "dropout"}}, "grid.method"),
        ({"grid": {"method": "lr", "values": []}}, "grid.values"),
        ({"pretrain": {"snapshot": "/no/such.ckpt"}}, "pretrain.snapshot"),
        ({"seeds": "1,x"}, "seeds"),
    ],
)
def test_errors_name_the_field(patch, where):
    with pytest.raises(ConfigError, match=rf"^{where}"):
        parse_experiment({**TINY, **patch})


def test_seed_forms():
    assert parse_seeds("3,4") == [(3, 3), (4, 4)]
    assert parse_seeds({"init": [0, 1], "order": [5]}) == [(0, 5), (1, 5)]
    with pytest.raises(ConfigError):
        parse_seeds([])


def test_json_and_yaml_agree(tmp_path):
    a = load_experiment(write_cfg(tmp_path, TINY))
    (tmp_path / "exp.json").write_text(json.dumps(TINY), encoding="utf-8")
    assert load_experiment(tmp_path / "exp.json") == a
    with pytest.raises(ConfigError):
        load_experiment(tmp_path / "missing.yaml")


def test_grid_order_is_canonical():
    base = RunConfig()
    a = grid_configs(base, "mixout", [0.5, 0.1, 0.3])
    b = grid_configs(base, "mixout", [0.3, 0.5, 0.1])
    assert a == b and [k for k, _ in a] == [0.1, 0.3, 0.5]
    with pytest.raises(ConfigError):
        grid_configs(base, "lr", [1e-3, 1e-3])
    assert select_best([0.5, float("nan"), 0.7, 0.7]) == 2


def test_table_schema(tmp_path):
    path = tmp_path / "t.csv"
    write_table(path, "runs", ["a"], [[1]])
    with pytest.raises(SchemaError, match="missing columns"):
        read_table(path, "runs", ["a", "b"])
    path.write_text("# stabletune runs v0\na\n1\n", encoding="utf-8")
    with pytest.raises(SchemaError, match="expected header"):
        read_table(path, "runs", ["a"])


def test_exit_codes(tmp_path, capsys):
    assert main(["sweep", "--config", str(tmp_path / "none.yaml")]) == 1
    with pytest.raises(SystemExit) as info:
        main(["bogus"])
    assert info.value.code == 1
    bad = write_cfg(tmp_path, {**TINY, "run": {"adam": {"lr": -1}}})
    assert main(["sweep", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert main(["plot", "--out", str(tmp_path / "empty")]) == 1
    assert "no runs found" in capsys.readouterr().err


def test_runtime_failure_exit_code(tmp_path, monkeypatch):
    import stabletune.cli as cli

    def boom(*a, **k):
        raise RuntimeError("disk on fire")

    monkeypatch.setattr(cli, "sweep", boom)
    cfg = write_cfg(tmp_path, TINY)
    assert main(["sweep", "--config", str(cfg), "--out", str(tmp_path / "o")]) == 2


def test_sweep_analyze_plot_end_to_end(tmp_path):
    cfg = write_cfg(tmp_path, TINY)
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    assert main(["sweep", "--config", str(cfg), "--out", str(out_a)]) == 0
    assert main(["sweep", "--config", str(cfg), "--out", str(out_b)]) == 0
    for name in ("runs.csv", "traces.csv"):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
    rows = read_runs(out_a / "runs.csv")
    assert len(rows) == 2 and rows[0]["init_seed"] == "0"
    assert main(["analyze", "--out", str(out_a), "--resamples", "50"]) == 0
    assert (out_a / "stats.csv").exists() and (out_a / "bootstrap.csv").exists()
    assert main(["plot", "--out", str(out_a)]) == 0
    assert (out_a / "figures" / "test_box.svg").read_text().startswith("<svg")
    assert (out_a / "figures" / "loss_curves.svg").exists()


def test_grid_single_point(tmp_path):
    cfg = write_cfg(tmp_path, {**TINY, "seeds": [0], "grid": {"method": "lr", "values": [1e-3]}})
    out = tmp_path / "g"
    assert main(["grid", "--config", str(cfg), "--out", str(out)]) == 0
    rows = read_table(out / "grid.csv", "grid", ["value", "selected"])
    assert len(rows) == 1 and rows[0]["selected"] == "1"


def _fixture_runs(path, records):
    rows = []
    for run_id, val, test in records:
        row = dict.fromkeys(RUN_COLUMNS, "")
        row.update(run_id=run_id, init_seed=run_id, order_seed=run_id, bias_correction=True, reinit_L=0,
                   reinit_pooler=False, regularizer="none", total_steps=96, selected_eval_idx=0,
                   val_metric=val, test_metric=test, degenerate=False)
        rows.append([row[c] for c in RUN_COLUMNS])
    write_table(path / "runs.csv", "runs", RUN_COLUMNS, rows)


def test_analyze_matches_enumeration(tmp_path):
    _fixture_runs(tmp_path, [(0, 0.8, 0.7), (1, 0.6, 0.9)])
    assert main(["analyze", "--out", str(tmp_path), "--resamples", "20000"]) == 0
    boot = [r for r in read_table(tmp_path / "bootstrap.csv", "bootstrap", ["n_trials"])
            if r["selection"] == "val->test"]
    assert abs(float(boot[0]["mean"]) - 0.8) < 3 * 0.1 / 20000**0.5
    assert abs(float(boot[1]["mean"]) - 0.75) < 3 * 0.0867 / 20000**0.5


def test_analyze_single_row_stats(tmp_path):
    _fixture_runs(tmp_path, [(0, 0.8, 0.7)])
    assert main(["analyze", "--out", str(tmp_path)]) == 0
    stats = read_table(tmp_path / "stats.csv", "stats", ["std"])
    assert all(float(r["std"]) == 0.0 for r in stats)


def test_analyze_rejects_old_schema(tmp_path):
    (tmp_path / "runs.csv").write_text("# stabletune runs v0\nrun_id\n", encoding="utf-8")
    assert main(["analyze", "--out", str(tmp_path)]) == 1
