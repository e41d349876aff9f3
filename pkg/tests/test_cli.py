import csv
import json

import pytest

from fsfg.cli import main
from fsfg.datagen import read_dataset
from fsfg.network import load_checkpoint


def run(capsys, *argv):
    code = main(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


@pytest.fixture(scope="module")
def data_file(tmp_path_factory):
    path = tmp_path_factory.mktemp("cli") / "d.fsfg"
    assert main(["gen", "--classes", "6", "--per-class", "4", "--seed", "3", "-o", str(path)]) == 0
    return path


def test_gen_counts_and_determinism(capsys, tmp_path):
    a, b = tmp_path / "a.fsfg", tmp_path / "b.fsfg"
    flags = ["gen", "--classes", "10", "--per-class", "2", "--gap", "0.3", "--seed", "7"]
    code, out, _ = run(capsys, *flags, "-o", str(a))
    assert code == 0 and json.loads(out)["num_clips"] == 20
    run(capsys, *flags, "-o", str(b))
    assert a.read_bytes() == b.read_bytes()
    assert read_dataset(a).config.inter_class_gap == 0.3


def test_gen_rejects_bad_config(capsys, tmp_path):
    code, out, err = run(capsys, "gen", "--classes", "1", "-o", str(tmp_path / "x.fsfg"))
    assert code != 0 and out == "" and "error" in err
    assert run(capsys, "gen")[0] == 2


def test_dry_run_matches_flags(capsys, tmp_path):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"train": {"lr": 0.3, "total_episodes": 9}}))
    code, out, _ = run(capsys, "train", "--data", "x", "--config", str(cfg), "--episodes", "4", "--seed", "5",
                       "--dry-run")
    merged = json.loads(out)
    assert code == 0
    assert merged["train"]["lr"] == 0.3 and merged["train"]["total_episodes"] == 4
    assert merged["train"]["seed"] == merged["data"]["seed"] == merged["split"]["seed"] == 5
    cfg.write_text(json.dumps({"train": {"learning_rate": 1}}))
    assert run(capsys, "train", "--data", "x", "--config", str(cfg), "--dry-run")[0] == 2


def train_log(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_train_then_eval(capsys, data_file, tmp_path):
    ckpt = tmp_path / "m.ckpt"
    code, out, err = run(capsys, "train", "--data", str(data_file), "--n", "2", "--k", "1", "--q", "1",
                         "--episodes", "3", "--seed", "3", "-o", str(ckpt))
    assert code == 0 and "ep" in err
    rows = train_log(f"{ckpt}.log.csv")
    assert len(rows) == 3
    _, meta = load_checkpoint(ckpt)
    assert meta["config"]["train"]["total_episodes"] == 3 and "split" in meta

    report = tmp_path / "r.json"
    code, _, _ = run(capsys, "eval", "--checkpoint", str(ckpt), "--data", str(data_file), "--n", "2",
                     "--k", "1", "--q", "2", "--episodes", "7", "--episodes-csv", str(tmp_path / "e.csv"),
                     "-o", str(report))
    rep = json.loads(report.read_text())
    assert code == 0 and rep["num_episodes"] == 7 and len(rep["per_episode_accuracy"]) == 7
    assert rep["provenance"]["split"] == meta["split"]
    code, out, _ = run(capsys, "eval", "--checkpoint", str(ckpt), "--data", str(data_file), "--n", "2",
                       "--k", "1", "--q", "2", "--episodes", "7", "--summary")
    assert "per_episode_accuracy" not in json.loads(out)


def test_protonet_and_alpha_zero_logs(capsys, data_file, tmp_path):
    common = ["train", "--data", str(data_file), "--n", "2", "--k", "1", "--q", "1", "--episodes", "2"]
    run(capsys, *common, "--method", "protonet", "-o", str(tmp_path / "p.ckpt"))
    run(capsys, *common, "--alpha", "0", "-o", str(tmp_path / "a.ckpt"))
    proto, zero = train_log(tmp_path / "p.ckpt.log.csv"), train_log(tmp_path / "a.ckpt.log.csv")
    assert list(proto[0]) == list(zero[0])
    for r in zero:
        assert float(r["loss_ss1"]) > 0
        assert float(r["loss_total"]) == float(r["loss_meta"])


def test_pairs_text(capsys):
    code, out, _ = run(capsys, "pairs", "--n", "5", "--k", "1", "--q", "5")
    assert code == 0
    assert "ce:(25,100,125) cml:(150,720,870)" in out and out.strip().endswith("match=true")
    _, out, _ = run(capsys, "pairs", "--n", "1", "--k", "1", "--q", "1")
    assert "ce:(1,0,1) cml:(2,0,2)" in out


def test_pairs_grid_json(capsys):
    code, out, _ = run(capsys, "pairs", "--grid", "6")
    lines = out.strip().splitlines()
    assert code == 0 and len(lines) == 216 and all(l.endswith("match=true") for l in lines)
    _, out, _ = run(capsys, "pairs", "--grid", "2", "--json")
    doc = json.loads(out)
    assert len(doc["rows"]) == 8 and doc["provenance"]["command"] == "pairs"
    assert run(capsys, "pairs", "--n", "0")[0] == 2


def test_gradcheck_filter_and_fault(capsys):
    code, out, err = run(capsys, "gradcheck", "--op", "conv3d")
    doc = json.loads(out)
    assert code == 0 and [c["op"] for c in doc["checks"]] == ["conv3d"] and "PASS conv3d" in err
    code, out, err = run(capsys, "gradcheck", "--op", "relu", "--inject-fault")
    doc = json.loads(out)
    assert code == 1 and doc["failed"] == ["faulty_square"]
    assert "FAIL faulty_square" in err and "analytic=" in err


def test_compare_grid(capsys, data_file, tmp_path):
    table = tmp_path / "t.csv"
    code, out, err = run(capsys, "compare", "--data", str(data_file), "--grid", "2,1,1;3,1,1", "--test", "2,1,1",
                         "--train-episodes", "1", "--episodes", "4", "--csv", str(table))
    doc = json.loads(out)
    assert code == 0 and len(doc["rows"]) == 4
    assert doc["provenance"]["config"]["train"]["total_episodes"] == 1
    assert len(table.read_text().splitlines()) == 5
