"""Command-line workflow: artifact layout, exit codes, determinism."""

import json

import numpy as np
import pytest

from slowcaps import data as D
from slowcaps import evaluation as E
from slowcaps.cli import main

SET = [
    "--set", "synthetic.units=6",
    "--set", "synthetic.test_units=3",
    "--set", "synthetic.length_range=[80,100]",
    "--set", "synthetic.rul_max=40",
    "--set", "rul_max=40",
    "--set", "features.num_slow=2",
    "--set", "model.window_length=8",
    "--set", "model.filters=8",
    "--set", "model.lstm_units=4",
    "--set", "model.sequence_length=3",
    "--set", "model.epoch=2",
    "--set", "model.fnn.widths=[16,1]",
    "--set", "training.batch_size=32",
    "--set", "training.validation_fraction=0.25",
    "--set", "tune.filter_candidates=[8]",
    "--set", "tune.lstm_candidates=[4,8]",
    "--set", "tune.epochs=1",
    "--set", "tune.explore=full",
]


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    ws = tmp_path_factory.mktemp("cli")
    steps = [
        ["synth", "--out", str(ws / "data"), "--seed", "3", *SET],
        ["fit-features", "--out", str(ws / "feat"),
         "--data-dir", str(ws / "data"), "--seed", "3", *SET],
        ["train", "--out", str(ws / "model"), "--data-dir", str(ws / "data"),
         "--features", str(ws / "feat"), "--seed", "3", *SET],
        ["evaluate", "--out", str(ws / "eval"), "--data-dir", str(ws / "data"),
         "--model", str(ws / "model"),
         "--features", str(ws / "feat" / "features.json"),
         "--seed", "3", *SET],
    ]
    for argv in steps:
        assert main(argv) == 0, argv[0]
    return ws


def test_synth_artifacts(workspace):
    data = workspace / "data"
    for name in ("train_synthetic.txt", "test_synthetic.txt",
                 "RUL_synthetic.txt", "truth.json", "manifest.json",
                 "timing.json"):
        assert (data / name).exists(), name
    manifest = json.loads((data / "manifest.json").read_text())
    assert manifest["command"] == "synth"
    assert manifest["dataset"] == "synthetic"
    assert manifest["seed"] == 3
    assert manifest["train_units"] == 6 and manifest["test_units"] == 3
    assert manifest["artifacts"] == sorted(manifest["artifacts"])
    assert len(manifest["config_digest"]) == 16
    # the exported text round-trips through the standard loader
    loaded = D.load_cmapss(
        data / "train_synthetic.txt", data / "test_synthetic.txt",
        data / "RUL_synthetic.txt", rul_max=40.0, n_sensors=6,
    )
    assert len(loaded["train"]) == 6 and len(loaded["test"]) == 3


def test_fit_features_artifacts(workspace):
    feat = workspace / "feat"
    for name in ("features.json", "features_meta.json", "slowness.csv",
                 "features_dump.csv", "manifest.json"):
        assert (feat / name).exists(), name
    meta = json.loads((feat / "features_meta.json").read_text())
    assert meta["num_slow"] == 2
    assert meta["window"] == 8
    assert len(meta["lambdas"]) == 6
    assert meta["per_condition"] is False
    dump_header = (feat / "features_dump.csv").read_text().splitlines()[0]
    assert dump_header.startswith("unit,cycle,stage,")
    assert dump_header.endswith("slow1,slow2")


def test_train_artifacts(workspace):
    model = workspace / "model"
    for name in ("checkpoint.json", "model_config.json", "train_report.json",
                 "history.csv", "manifest.json"):
        assert (model / name).exists(), name
    doc = json.loads((model / "model_config.json").read_text())
    arch = doc["architecture"]
    assert arch["window_length"] == 8
    assert arch["in_channels"] == 8  # six channels plus two slow features
    assert doc["variant"] == "full"
    assert doc["label_scale"] == 40.0
    report = json.loads((model / "train_report.json").read_text())
    assert len(report["train_loss"]) == 2
    assert "wall_seconds" not in report  # timing lives in timing.json
    history = (model / "history.csv").read_text().splitlines()
    assert history[0] == "epoch,train_loss,val_loss"
    assert len(history) == 3


def test_evaluate_artifacts_and_determinism(workspace):
    out = workspace / "eval"
    report = E.load_report(out / "report.json")
    assert len(report.rows) == 3
    assert np.isfinite(report.rmse) and np.isfinite(report.score)
    assert all(0.0 <= r["predicted_rul"] <= 40.0 for r in report.rows)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["rmse"] == report.rmse
    assert manifest["units"] == 3
    csv_head = (out / "report_predictions.csv").read_text().splitlines()[0]
    assert csv_head == "unit,true_rul,predicted_rul,error"
    # a rerun of the same evaluation is byte-identical
    rc = main([
        "evaluate", "--out", str(workspace / "eval2"),
        "--data-dir", str(workspace / "data"),
        "--model", str(workspace / "model"),
        "--features", str(workspace / "feat" / "features.json"),
        "--seed", "3", *SET,
    ])
    assert rc == 0
    assert (workspace / "eval2" / "report.json").read_bytes() == \
        (out / "report.json").read_bytes()


def test_tune_smoke(workspace):
    out = workspace / "tune"
    rc = main([
        "tune", "--out", str(out), "--data-dir", str(workspace / "data"),
        "--features", str(workspace / "feat"), "--seed", "3", *SET,
    ])
    assert rc == 0
    grid = (out / "grid.csv").read_text().splitlines()
    assert grid[0] == "conv_filters,lstm_units,rmse,score,seed,best_epoch"
    assert len(grid) == 3  # full exploration of 1 x 2 candidates
    best = json.loads((out / "best.json").read_text())
    assert best["conv_filters"] == 8 and best["lstm_units"] in (4, 8)
    assert any(str(best["lstm_units"]) == line.split(",")[1] for line in grid[1:])


def test_ablate_smoke(workspace):
    out = workspace / "ablate"
    rc = main([
        "ablate", "--out", str(out), "--data-dir", str(workspace / "data"),
        "--variant", "full", "--variant", "no-sfa", "--epochs", "1",
        "--seed", "3", *SET,
    ])
    assert rc == 0
    summary = (out / "ablation_summary.csv").read_text().splitlines()
    assert summary[0] == "variant,rmse,score,parameters,best_epoch"
    assert [line.split(",")[0] for line in summary[1:]] == ["full", "no-sfa"]
    for variant in ("full", "no-sfa"):
        assert (out / variant / "report.json").exists()
        assert (out / variant / "train_report.json").exists()
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["variants"] == ["full", "no-sfa"]


# -------------------------------------------------------------- exit codes


def test_config_problem_exits_2(tmp_path, capsys):
    rc = main(["synth", "--out", str(tmp_path), "--set", "model.epoch=0"])
    assert rc == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config"
    assert any("epoch" in q for q in err["problems"])


def test_unknown_override_exits_2(tmp_path, capsys):
    rc = main(["synth", "--out", str(tmp_path), "--set", "model.nope=1"])
    assert rc == 2
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "config"


def test_missing_data_exits_1(tmp_path, capsys):
    rc = main([
        "fit-features", "--out", str(tmp_path / "o"),
        "--data-dir", str(tmp_path / "nowhere"), *SET,
    ])
    assert rc == 1
    err = json.loads(capsys.readouterr().err.strip().splitlines()[-1])
    assert err["error"] == "FileNotFoundError"
    assert "train_synthetic.txt" in err["message"]


def test_version_flag(capsys):
    with pytest.raises(SystemExit) as exit_info:
        main(["--version"])
    assert exit_info.value.code == 0
    from slowcaps import __version__

    assert capsys.readouterr().out.strip() == __version__


# ----------------------------------------------------------- milling path


def write_milling_csv(path, cases_material=((1, 9), (2, 2)), runs_per_case=3,
                      samples=90):
    rng = np.random.default_rng(1)
    lines = [",".join(D.MILLING_COLUMNS)]
    case_id = 0
    for material, n_cases in cases_material:
        for _ in range(n_cases):
            case_id += 1
            for run in range(1, runs_per_case + 1):
                wear = 0.1 + 0.2 * (run - 1)  # exceeds 0.45 on the third cut
                for k in range(samples):
                    row = [case_id, run, material, 1.5, 0.5, 200]
                    row += list(np.round(rng.normal(size=6), 4))
                    row.append(wear if k == 0 else "")
                    lines.append(",".join(str(v) for v in row))
    path.write_text("\n".join(lines) + "\n")


def test_fit_features_milling(tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    write_milling_csv(data / "milling.csv")
    args = [
        "fit-features", "--out", str(tmp_path / "feat"),
        "--data-dir", str(data),
        "--set", "dataset=milling", "--set", "rul_max=25",
        "--set", "features.num_slow=3", "--set", "model.window_length=10",
    ]
    assert main(args) == 0
    meta = json.loads((tmp_path / "feat" / "features_meta.json").read_text())
    assert meta["num_slow"] == 3 and meta["window"] == 10
    assert meta["per_condition"] is False
    # per-condition normalization is a turbofan-only feature
    rc = main(args + ["--set", "features.per_condition=true"])
    assert rc == 2
