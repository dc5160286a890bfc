import json
from fractions import Fraction

import pytest

from ecstfl import io as fio
from ecstfl.cli import BATCH_GRID, LAMBDA_GRID, main, parse_args

from oracles import kappa_rational

FAST = ["--epochs", "2", "--frame-hidden", "8", "--hidden-dim", "8"]


def run(argv, tmp_path, name):
    code = main(["--out", str(tmp_path), "--run-name", name, "--jobs", "1", *argv])
    return code, tmp_path / name


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    base = tmp_path_factory.mktemp("cli")
    code = main(["--out", str(base), "--run-name", "data", "gen-data", "--n", "120", "--feature-dim", "5",
                 "--seed", "3"])
    assert code == 0
    return base / "data"


def write_counts(path, rows):
    lines = ["clip_id,c1,c2,c3,c4,c5,c6,c7"]
    lines += [f"item{i}," + ",".join(map(str, r)) for i, r in enumerate(rows)]
    path.write_text("\n".join(lines) + "\n")
    return path


def test_gen_data_outputs(dataset):
    meta = fio.read_json(dataset / "dataset.json")
    assert meta["n_clips"] == 120 and meta["seed"] == 3
    assert sum(meta["class_counts"]) == 120
    folds = fio.read_folds(dataset / "folds.csv")
    assert len(folds) == 120 and set(folds.values()) == {1, 2, 3, 4, 5}
    manifest = fio.read_json(dataset / "manifest.json")
    assert manifest["command"] == "gen-data"
    assert set(manifest["outputs"]) == {"dataset.json", "dataset.csv", "folds.csv"}
    assert manifest["outputs"]["folds.csv"] == fio.sha256_file(dataset / "folds.csv")


def test_gen_data_default_size(tmp_path):
    code, d = run(["gen-data", "--seed", "1"], tmp_path, "g")
    assert code == 0
    assert fio.read_json(d / "dataset.json")["class_counts"] == [144, 117, 157, 129, 87, 9, 57]


def test_gen_data_too_small_is_usage_error(tmp_path, capsys):
    code, _ = run(["gen-data", "--n", "3"], tmp_path, "g")
    assert code == 1
    assert "round to zero" in capsys.readouterr().err


def test_gen_data_bad_proportions(tmp_path):
    assert run(["gen-data", "--proportions", "0.5,0.6"], tmp_path, "g")[0] == 1


def test_gen_data_is_reproducible(tmp_path):
    digests = []
    for name in ("a", "b"):
        code, d = run(["gen-data", "--n", "60", "--seed", "8"], tmp_path, name)
        assert code == 0
        digests.append(fio.read_json(d / "manifest.json")["outputs"])
    assert digests[0] == digests[1]


def test_argparse_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["no-such-command"])
    assert info.value.code == 1


@pytest.mark.parametrize("loss", ["softmax", "softmax+ecstfl", "softmax+center"])
def test_train_modes(dataset, tmp_path, loss):
    code, d = run(["train", "--data", str(dataset), "--fold", "1", "--loss", loss, *FAST], tmp_path, "t")
    assert code == 0
    params, config, doc = fio.read_checkpoint(d / "fd1" / "checkpoint.json")
    assert config.loss_mode == loss and doc["fold"] == 1
    rows = fio.read_csv_dicts(d / "fd1" / "history.csv")
    assert len(rows) == 2
    assert list(rows[0])[:6] == ["epoch", "lr", "L_s", "L_ecstfl", "L_total", "skipped_batches"]


def test_train_defaults_recorded(dataset, tmp_path):
    code, d = run(["train", "--data", str(dataset), *FAST], tmp_path, "t")
    assert code == 0
    cfg = fio.read_json(d / "manifest.json")["config"]["train_config"]
    assert cfg["lam"] == 10.0 and cfg["batch_size"] == 24 and cfg["loss_mode"] == "softmax+ecstfl"


def test_train_center_coefficient(dataset, tmp_path):
    code, d = run(["train", "--data", str(dataset), "--loss", "softmax+center", "--center-coef", "1e-4", *FAST],
                  tmp_path, "t")
    assert code == 0
    assert fio.read_checkpoint(d / "fd1" / "checkpoint.json")[1].center_coef == 1e-4


def test_train_divergence_exits_two(dataset, tmp_path, capsys):
    code, d = run(["train", "--data", str(dataset), "--lr", "1e308", *FAST], tmp_path, "t")
    assert code == 2
    assert "numerical failure" in capsys.readouterr().err
    assert "record" in fio.read_json(d / "diagnostic.json")


def test_train_missing_fold_file_exits_one(dataset, tmp_path):
    code, _ = run(["train", "--data", str(dataset), "--folds", str(tmp_path / "nope.csv"), *FAST], tmp_path, "t")
    assert code == 1


def test_train_unknown_fold_exits_one(dataset, tmp_path):
    assert run(["train", "--data", str(dataset), "--fold", "9", *FAST], tmp_path, "t")[0] == 1


def test_train_lr_grid(dataset, tmp_path):
    code, d = run(["train", "--data", str(dataset), "--lr-grid", "0.1", *FAST], tmp_path, "t")
    assert code == 0
    assert fio.read_json(d / "manifest.json")["config"]["learning_rate"] == 0.1


def test_full_pipeline_covers_every_clip(dataset, tmp_path, capsys):
    code, t = run(["train", "--data", str(dataset), "--fold", "all", *FAST], tmp_path, "t")
    assert code == 0
    code, e = run(["eval", "--data", str(dataset), "--checkpoints", str(t)], tmp_path, "e")
    assert code == 0
    m = fio.read_json(e / "metrics.json")
    assert sorted(m["per_fold"]) == ["fd1", "fd2", "fd3", "fd4", "fd5"]
    assert m["coverage"]["complete_cv"] and m["coverage"]["n_clips"] == sum(m["pooled"]["n_per_class"])
    projection = fio.read_csv_dicts(e / "projection.csv")
    assert len({r["clip_id"] for r in projection}) == len(projection) == m["coverage"]["n_clips"]
    header = (e / "confusion.csv").read_text().splitlines()[0]
    assert header == "truth\\pred,happy,sad,neutral,angry,surprise,disgust,fear"
    assert "UAR" in capsys.readouterr().out


def test_eval_perfect_separable_run(tmp_path):
    code, d = run(["gen-data", "--n", "100", "--separation", "30", "--noise", "0.05", "--seed", "2"],
                  tmp_path, "sep")
    assert code == 0
    code, t = run(["train", "--data", str(d), "--fold", "1", "--loss", "softmax", "--lr", "0.5",
                   "--epochs", "60"], tmp_path, "t")
    assert code == 0
    code, e = run(["eval", "--data", str(d), "--checkpoints", str(t)], tmp_path, "e")
    assert code == 0
    pooled = fio.read_json(e / "metrics.json")["pooled"]
    assert pooled["uar_pct"] == pooled["war_pct"] == 100.0


def test_eval_dimension_mismatch(dataset, tmp_path):
    code, t = run(["train", "--data", str(dataset), *FAST], tmp_path, "t")
    code, other = run(["gen-data", "--n", "60", "--feature-dim", "3"], tmp_path, "d3")
    code, _ = run(["eval", "--data", str(other), "--checkpoints", str(t)], tmp_path, "e")
    assert code == 1


def test_eval_missing_checkpoint(dataset, tmp_path):
    assert run(["eval", "--data", str(dataset), "--checkpoints", str(tmp_path / "x")], tmp_path, "e")[0] == 1


def test_kappa_unanimous_distinct(tmp_path):
    path = write_counts(tmp_path / "a.csv", [(10, 0, 0, 0, 0, 0, 0), (0, 10, 0, 0, 0, 0, 0)])
    code, d = run(["kappa", "--annotations", str(path)], tmp_path, "k")
    assert code == 0
    rep = fio.read_json(d / "kappa.json")
    assert rep["kappa"] == 1.0 and rep["band"] == "Almost perfect agreement"
    assert len(fio.read_csv_dicts(d / "single_labels.csv")) == 2


def test_kappa_hand_built_file(tmp_path):
    rows = [(7, 3, 0, 0, 0, 0, 0), (3, 7, 0, 0, 0, 0, 0), (5, 5, 0, 0, 0, 0, 0), (10, 0, 0, 0, 0, 0, 0)]
    path = write_counts(tmp_path / "a.csv", rows)
    code, d = run(["kappa", "--annotations", str(path)], tmp_path, "k")
    assert code == 0
    assert kappa_rational(rows) == Fraction(139, 675)
    assert abs(fio.read_json(d / "kappa.json")["kappa"] - 139 / 675) <= 1e-12
    labels = fio.read_csv_dicts(d / "single_labels.csv")
    assert [(r["clip_id"], r["label"], r["category"]) for r in labels] == [
        ("item0", "1", "happy"), ("item1", "2", "sad"), ("item3", "1", "happy")]


def test_kappa_r10_labels_nothing(tmp_path):
    path = write_counts(tmp_path / "a.csv", [(10, 0, 0, 0, 0, 0, 0), (0, 10, 0, 0, 0, 0, 0)])
    code, d = run(["kappa", "--annotations", str(path), "--r", "10"], tmp_path, "k")
    assert code == 0
    assert fio.read_json(d / "kappa.json")["n_single_labeled"] == 0


def test_kappa_vote_file(tmp_path):
    path = tmp_path / "v.csv"
    path.write_text("clip_id,v1,v2,v3\na,1,1,1\nb,2,2,2\n")
    code, d = run(["kappa", "--annotations", str(path), "--r", "2"], tmp_path, "k")
    assert code == 0
    assert fio.read_json(d / "kappa.json")["kappa"] == 1.0


def test_kappa_schema_error_names_line(tmp_path, capsys):
    path = tmp_path / "bad.csv"
    path.write_text("clip_id,c1,c2,c3,c4,c5,c6,c7\na,10,0,0,0,0,0,0\nb,5,x,0,0,0,0,0\n")
    code, _ = run(["kappa", "--annotations", str(path)], tmp_path, "k")
    assert code == 1
    assert "bad.csv:3" in capsys.readouterr().err


def test_kappa_degenerate_exits_two(tmp_path):
    path = write_counts(tmp_path / "a.csv", [(10, 0, 0, 0, 0, 0, 0)] * 3)
    assert run(["kappa", "--annotations", str(path)], tmp_path, "k")[0] == 2


def test_sweep_default_grids():
    assert LAMBDA_GRID == (1, 3, 5, 10, 15, 20, 30, 50, 80, 100)
    assert BATCH_GRID == (18, 24, 30, 36, 42, 48)


def test_sweep_singleton_matches_standalone(dataset, tmp_path):
    code, s = run(["sweep", "--data", str(dataset), "--axis", "lambda", "--grid", "3", *FAST], tmp_path, "s")
    assert code == 0
    rows = fio.read_csv_dicts(s / "sweep.csv")
    assert [r["cell"] for r in rows] == ["3.0"]
    code, t = run(["train", "--data", str(dataset), "--lambda", "3", *FAST], tmp_path, "t")
    code, e = run(["eval", "--data", str(dataset), "--checkpoints", str(t)], tmp_path, "e")
    pooled = fio.read_json(e / "metrics.json")["pooled"]
    assert float(rows[0]["uar"]) == pooled["uar"] and float(rows[0]["war"]) == pooled["war"]
    assert fio.sha256_file(s / "cells" / "lambda=3" / "checkpoint.json") == fio.sha256_file(t / "fd1" / "checkpoint.json")


def test_sweep_records_divergent_cell(dataset, tmp_path):
    code, s = run(["sweep", "--data", str(dataset), "--axis", "batch", "--grid", "18,24", "--lr", "1e308", *FAST],
                  tmp_path, "s")
    assert code == 0
    summary = fio.read_json(s / "summary.json")
    assert [f["cell"] for f in summary["failed"]] == [18, 24]


def test_config_file_precedence(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"lambda": 3.0, "epochs": 1, "seed": 4, "batch-size": 30, "hidden_dim": 8}))
    code, d = run(["--config", str(cfg), "train", "--data", str(dataset), "--batch-size", "18"], tmp_path, "t")
    assert code == 0
    tc = fio.read_json(d / "manifest.json")["config"]["train_config"]
    assert tc["lam"] == 3.0 and tc["epochs"] == 1 and tc["batch_size"] == 18 and tc["seed"] == 4
    assert tc["feature_dim"] == 8


def test_global_seed_beats_config(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"seed": 4}))
    args = parse_args(["--seed", "9", "--config", str(cfg), "train", "--data", str(dataset)])
    assert args.seed == 9
    args = parse_args(["--config", str(cfg), "train", "--data", str(dataset), "--seed", "7"])
    assert args.seed == 7
    args = parse_args(["--config", str(cfg), "train", "--data", str(dataset)])
    assert args.seed == 4


def test_config_unknown_key(dataset, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(SystemExit) as info:
        parse_args(["--config", str(cfg), "train", "--data", str(dataset)])
    assert info.value.code == 1


def test_report(dataset, tmp_path, capsys):
    code, t = run(["train", "--data", str(dataset), "--fold", "all", *FAST], tmp_path, "t")
    code, e = run(["eval", "--data", str(dataset), "--checkpoints", str(t)], tmp_path, "e")
    code, r = run(["report", "--runs", str(t), str(e)], tmp_path, "r")
    assert code == 0
    text = (r / "report.md").read_text()
    assert "| pooled |" in text and "fd1: final loss" in text
    assert run(["report", "--runs", str(tmp_path / "missing")], tmp_path, "r2")[0] == 1


def test_timestamped_run_dirs_do_not_collide(tmp_path, capsys):
    for _ in range(2):
        assert main(["--out", str(tmp_path), "gen-data", "--n", "60"]) == 0
    printed = capsys.readouterr().out.split()
    assert len(set(printed)) == 2
    assert all("gen-data" in p for p in printed)


def test_parallel_folds_match_sequential(dataset, tmp_path):
    outputs = []
    for jobs in ("1", "2"):
        d = tmp_path / f"j{jobs}"
        code = main(["--out", str(tmp_path), "--run-name", d.name, "--jobs", jobs,
                     "train", "--data", str(dataset), "--fold", "all", *FAST])
        assert code == 0
        outputs.append(fio.read_json(d / "manifest.json")["outputs"])
    assert outputs[0] == outputs[1]
