import json

import numpy as np
import pytest

from factorcl import checkpoint as ck
from factorcl.cli import load_config, main
from factorcl.errors import ConfigError
from factorcl.metrics import MetricsReport, compute_metrics


def write_config(path, **overrides):
    cfg = {
        "kind": "synthetic_blobs",
        "tasks": 3,
        "classes_per_task": 2,
        "samples_per_class": 30,
        "input_shape": [2, 3, 3],
        "seed": 5,
        "overlap": 0.1,
        "scale": 3.0,
        "channels": [3, 3],
        "epochs": 2,
        "lr_drop_epochs": [1],
        "energy_e": 0.01,
    }
    cfg.update(overrides)
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def train_run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    config = write_config(root / "cfg.json")
    out = root / "run"
    assert main(["train", "--config", str(config), "--out", str(out)]) == 0
    return out


# -- config parsing -------------------------------------------------------------------


def test_load_config_builds_all_three(tmp_path):
    stream_spec, spec, cfg = load_config(write_config(tmp_path / "c.json"))
    assert stream_spec.tasks == 3
    assert spec.num_layers == 2 and spec.layers[0].n == 2
    assert cfg.epochs == 2 and cfg.seed == 5


def test_load_config_rejects_unknown_and_missing(tmp_path):
    bad = tmp_path / "bad.json"
    write_config(bad, mystery=1)
    with pytest.raises(ConfigError):
        load_config(bad)
    blob = json.loads(write_config(tmp_path / "m.json").read_text())
    del blob["channels"]
    (tmp_path / "m.json").write_text(json.dumps(blob))
    with pytest.raises(ConfigError):
        load_config(tmp_path / "m.json")


def test_load_config_rejects_non_json(tmp_path):
    path = tmp_path / "c.json"
    path.write_text("epochs: 3")
    with pytest.raises(ConfigError):
        load_config(path)


# -- train artifacts -------------------------------------------------------------------


def test_train_writes_all_artifacts(train_run):
    names = {p.name for p in train_run.iterdir()}
    expected = {"space.cacl", "metrics.json", "ranks.csv"}
    expected |= {f"task{t}_data.npz" for t in (1, 2, 3)}
    expected |= {f"task{t}_raw.npz" for t in (1, 2, 3)}
    assert expected <= names


def test_rank_csv_sums_match_model(train_run):
    space = ck.load_space(train_run / "space.cacl")
    lines = (train_run / "ranks.csv").read_text().strip().splitlines()
    assert lines[0] == "task,layer_0,layer_1"
    rows = [[int(v) for v in line.split(",")] for line in lines[1:]]
    assert len(rows) == 3
    for l in range(2):
        assert sum(row[1 + l] for row in rows) == space.rank_table[l][-1]


def test_metrics_json_parses(train_run):
    report = MetricsReport.from_json((train_run / "metrics.json").read_text())
    assert report.acc_matrix.shape == (3, 3)
    assert report.bwt == 0.0
    assert report.config["mode"] == "full"


# -- eval ------------------------------------------------------------------------------


def test_eval_matches_final_row_exactly(train_run, capsys):
    report = MetricsReport.from_json((train_run / "metrics.json").read_text())
    for t in (1, 2, 3):
        code = main([
            "eval", "--model", str(train_run / "space.cacl"),
            "--task", str(t), "--data", str(train_run / f"task{t}_data.npz"),
        ])
        assert code == 0
        printed = float(capsys.readouterr().out.split()[-1])
        assert printed == report.acc_matrix[2, t - 1]


def test_eval_rejects_out_of_range_task(train_run, capsys):
    code = main([
        "eval", "--model", str(train_run / "space.cacl"),
        "--task", "7", "--data", str(train_run / "task1_data.npz"),
    ])
    assert code == 1
    assert "error" in capsys.readouterr().err


def test_eval_reads_dense_models(tmp_path, capsys):
    config = write_config(tmp_path / "cfg.json", mode="baseline_ub", tasks=2)
    out = tmp_path / "run_ub"
    assert main(["train", "--config", str(config), "--out", str(out)]) == 0
    assert (out / "models.npz").is_file()
    code = main([
        "eval", "--model", str(out / "models.npz"),
        "--task", "2", "--data", str(out / "task2_data.npz"),
    ])
    assert code == 0
    assert "accuracy" in capsys.readouterr().out


# -- compress --------------------------------------------------------------------------


def test_compress_reports_and_writes(train_run, tmp_path, capsys):
    out = tmp_path / "small.npz"
    code = main([
        "compress", "--model", str(train_run / "task1_raw.npz"),
        "--energy", "0.5", "--out", str(out),
    ])
    assert code == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert sum("relative error" in line for line in lines) == 2
    spec, raw, _ = ck.load_task_factors(train_run / "task1_raw.npz")
    _, pruned, _ = ck.load_task_factors(out)
    assert all(a <= b for a, b in zip(pruned.ranks(), raw.ranks()))


def test_compress_rejects_space_file(train_run, tmp_path, capsys):
    code = main([
        "compress", "--model", str(train_run / "space.cacl"),
        "--energy", "0.1", "--out", str(tmp_path / "x.npz"),
    ])
    assert code == 1


# -- report ----------------------------------------------------------------------------


def test_report_aggregates_mean_std(tmp_path, capsys):
    accs = [0.90, 0.80, 0.70]
    for i, acc in enumerate(accs):
        run = tmp_path / f"seed{i}"
        run.mkdir()
        report = compute_metrics([[acc]], size_bytes=2_000_000)
        (run / "metrics.json").write_text(report.to_json())
    assert main(["report", "--runs", str(tmp_path)]) == 0
    out = capsys.readouterr().out
    mean = 100 * np.mean(accs)
    std = 100 * np.std(accs)
    assert f"{mean:.2f}({std:.2f})" in out
    assert "2.00(0.00)" in out  # Size(MB)
    assert "runs: 3" in out


def test_report_empty_dir_fails(tmp_path, capsys):
    assert main(["report", "--runs", str(tmp_path)]) == 1


# -- corrupt inputs ----------------------------------------------------------------------


def test_truncated_model_exits_nonzero(train_run, tmp_path, capsys):
    blob = (train_run / "space.cacl").read_bytes()
    bad = tmp_path / "broken.cacl"
    bad.write_bytes(blob[: len(blob) // 2])
    code = main([
        "eval", "--model", str(bad),
        "--task", "1", "--data", str(train_run / "task1_data.npz"),
    ])
    assert code == 1
    assert "offset" in capsys.readouterr().err
