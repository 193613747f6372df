import csv
import json
import shutil
import subprocess
import sys

import pytest

from oslow.cli import main
from oslow.io import read_json, sha256_file, write_dataset
from oslow.scm_bench import DatasetDescriptor, generate

DESCS = [
    DatasetDescriptor("affine", "sinusoidal", "path", "normal", 3, 200, 1),
    DatasetDescriptor("additive", "linear", "tournament", "laplace", 3, 200, 2),
]
FAST = "train:\n  epochs: 4\n  k: 4\n  batch_size: 100\n"


@pytest.fixture
def workspace(tmp_path):
    data = tmp_path / "data"
    data.mkdir()
    paths = [write_dataset(data, generate(d), d) for d in DESCS]
    cfg = tmp_path / "fast.yaml"
    cfg.write_text(FAST)
    return tmp_path, data, paths, cfg


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_gen_writes_the_small_suite(tmp_path, capsys):
    cfg = tmp_path / "g.yaml"
    cfg.write_text("gen:\n  num_samples: 20\n")
    code, out, _ = run(capsys, "gen", "--config", cfg, "--out", tmp_path / "g")
    assert code == 0 and "600 datasets" in out
    datasets = tmp_path / "g" / "datasets"
    assert len(list(datasets.glob("*.csv"))) == 600
    manifest = read_json(tmp_path / "g" / "manifest.json")
    assert len(manifest["files"]) == 1200 and manifest["finished"]


def test_train_writes_result_and_checkpoint(workspace, capsys):
    tmp, _, paths, cfg = workspace
    code, out, _ = run(capsys, "train", paths[0][0], "--config", cfg, "--out", tmp / "run")
    assert code == 0
    summary = json.loads(out.splitlines()[0])
    assert sorted(summary["ordering"]) == [1, 2, 3]
    stem = paths[0][0].stem
    result = read_json(tmp / "run" / f"{stem}.result.json")
    assert result["final_ordering"] == summary["ordering"]
    assert (tmp / "run" / f"{stem}.ckpt.npz").exists()
    assert read_json(tmp / "run" / "manifest.json")["records"][0]["method"] == "gumbel-top-k"


def test_train_soft_prints_cheat_report(workspace, capsys):
    tmp, _, paths, cfg = workspace
    code, out, _ = run(capsys, "train", paths[0][0], "--config", cfg, "--out", tmp / "soft",
                       "--method", "soft-sinkhorn")
    assert code == 0
    report = json.loads(out.splitlines()[1])["cheat_report"]
    assert "loop_detected" in report


def test_train_missing_dataset_writes_nothing(tmp_path, capsys):
    out_dir = tmp_path / "out"
    code, _, err = run(capsys, "train", tmp_path / "nope.csv", "--out", out_dir)
    assert code == 1 and "not found" in err
    assert not out_dir.exists()


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as info:
        main(["train"])
    assert info.value.code == 1
    with pytest.raises(SystemExit) as info:
        main(["bench", "--data", "x", "--out", "y", "--bogus"])
    assert info.value.code == 1


def test_bad_config_exits_one_with_line(workspace, capsys):
    tmp, _, paths, _ = workspace
    bad = tmp / "bad.yaml"
    bad.write_text("train:\n  epochs: lots\n")
    code, _, err = run(capsys, "train", paths[0][0], "--config", bad, "--out", tmp / "x")
    assert code == 1 and "bad.yaml:2" in err


def test_bench_aggregates_and_resumes(workspace, capsys):
    tmp, data, _, cfg = workspace
    out = tmp / "bench"
    code, stdout, _ = run(capsys, "bench", "--data", data, "--out", out, "--config", cfg,
                          "--methods", "oslow,varsort")
    assert code == 0
    rows = list(csv.DictReader(open(out / "aggregate.csv")))
    assert {r["method"] for r in rows} == {"oslow", "varsort"}
    assert sum(int(r["n"]) for r in rows) == 4
    assert stdout.startswith("method,family,mean,std,n")
    manifest = read_json(out / "manifest.json")
    assert len(manifest["records"]) == 4
    digest = sha256_file(out / "aggregate.csv")
    code, _, _ = run(capsys, "bench", "--data", data, "--out", out, "--config", cfg,
                     "--methods", "oslow,varsort")
    assert code == 0 and len(read_json(out / "manifest.json")["records"]) == 4
    assert sha256_file(out / "aggregate.csv") == digest


def test_bench_rejects_unknown_method(workspace, capsys):
    tmp, data, _, _ = workspace
    code, _, err = run(capsys, "bench", "--data", data, "--out", tmp / "b", "--methods", "magic")
    assert code == 1 and "magic" in err


def test_bench_in_parallel_matches_serial(workspace, capsys, monkeypatch):
    tmp, data, _, cfg = workspace
    run(capsys, "bench", "--data", data, "--out", tmp / "serial", "--config", cfg, "--methods", "oslow")
    monkeypatch.setenv("OSLOW_THREADS", "2")
    run(capsys, "bench", "--data", data, "--out", tmp / "par", "--config", cfg, "--methods", "oslow")
    assert (tmp / "serial" / "aggregate.csv").read_text() == (tmp / "par" / "aggregate.csv").read_text()


def test_intervene_on_the_true_scm(workspace, capsys):
    tmp, _, paths, _ = workspace
    side = paths[0][1]
    args = ["intervene", "--truth", side, "--target", 1, "--responses", "2,3", "--grid", "-2.5:2.5:21",
            "--seed", 4]
    code, first, _ = run(capsys, *args)
    assert code == 0
    rows = list(csv.DictReader(first.splitlines()))
    assert len(rows) == 42 and rows[0]["y"] == "-2.5" and rows[0]["response"] == "2"
    _, second, _ = run(capsys, *args)
    assert first == second


def test_intervene_from_checkpoint(workspace, capsys):
    tmp, _, paths, cfg = workspace
    run(capsys, "train", paths[0][0], "--config", cfg, "--out", tmp / "run")
    ckpt = tmp / "run" / f"{paths[0][0].stem}.ckpt.npz"
    out_csv = tmp / "sweep.csv"
    code, _, _ = run(capsys, "intervene", "--checkpoint", ckpt, "--target", 2, "--grid", "0,1",
                     "--num-samples", 20, "--out", out_csv)
    assert code == 0
    rows = list(csv.DictReader(open(out_csv)))
    assert len(rows) == 6
    clamped = [r for r in rows if r["response"] == "2"]
    assert [float(r["mean"]) for r in clamped] == [0.0, 1.0]


def test_intervene_target_out_of_range(workspace, capsys):
    _, _, paths, _ = workspace
    code, _, err = run(capsys, "intervene", "--truth", paths[0][1], "--target", 9)
    assert code == 1 and "out of range" in err


def test_eval_scores_a_result(workspace, capsys):
    tmp, _, paths, cfg = workspace
    run(capsys, "train", paths[0][0], "--config", cfg, "--out", tmp / "run")
    result = tmp / "run" / f"{paths[0][0].stem}.result.json"
    code, out, _ = run(capsys, "eval", result, paths[0][1])
    assert code == 0
    rec = json.loads(out)
    assert 0 <= rec["cbc"] <= 1 and rec["method"] == "gumbel-top-k"


def test_console_entry_point(tmp_path):
    exe = shutil.which("oslow")
    cmd = [exe] if exe else [sys.executable, "-m", "oslow.cli"]
    proc = subprocess.run(cmd + ["--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and "oslow" in proc.stdout
