import json
import subprocess
import sys

import numpy as np
import pytest

from indret.cli import main, parse_args
from indret.matchtensor import load_match_tensor

SYNTH = ["--corpus-size", "48", "--queries", "6", "--grid", "4x4", "--side", "32", "--seed", "3"]
TRAIN = ["--epochs", "2", "--test-count", "2", "--val-queries", "1"]


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, (json.loads(out) if code == 0 and out.strip() else out), err


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["synth", *SYNTH, "--out", str(root / "data")]) == 0
    assert main(["train", "--manifest", str(root / "data" / "manifest.json"), *TRAIN,
                 "--out", str(root / "m")]) == 0
    return root


def test_synth_summary(tmp_path, capsys):
    code, summary, _ = run(capsys, "synth", *SYNTH, "--out", tmp_path)
    assert code == 0
    assert summary["images"] == 54 and summary["queries"] == 6
    assert (tmp_path / "manifest.json").is_file()


def test_tensor_self_pair_diagonal(workspace, capsys):
    manifest = workspace / "data" / "manifest.json"
    code, summary, _ = run(capsys, "tensor", "--manifest", manifest, "--target", "img000", "--query", "img000",
                           "--metrics", "cosine", "--out", workspace / "t")
    assert code == 0
    assert summary["shape"] == [4, 4, 4, 4, 1]
    t = load_match_tensor(summary["path"]).values[..., 0]
    for i in range(4):
        for j in range(4):
            assert t[i, j, i, j] == pytest.approx(1.0, abs=1e-12)


def test_train_artifacts(workspace):
    out = workspace / "m"
    for name in ("model.iirm", "split.json", "train_log.csv", "training_curves.png"):
        assert (out / name).is_file()
    split = json.loads((out / "split.json").read_text())
    assert len(split["test"]) == 2 and len(split["train"]) == 4


def test_rank_prf_eval_explain(workspace, capsys):
    manifest = workspace / "data" / "manifest.json"
    model = workspace / "m" / "model.iirm"
    split = workspace / "m" / "split.json"
    code, s, _ = run(capsys, "rank", "--manifest", manifest, "--model", model, "--split", split,
                     "--out", workspace / "r")
    assert code == 0 and s["queries"] == 2
    lines = (workspace / "r" / "run.txt").read_text().splitlines()
    assert len(lines) == 2 * 48

    code, s, _ = run(capsys, "prf", "--manifest", manifest, "--model", model, "--run", workspace / "r" / "run.txt",
                     "--prf-depth", 3, "--out", workspace / "p")
    assert code == 0 and s["depth"] == 3
    assert len(list((workspace / "p" / "prf_masks").glob("*.csv"))) == 2

    code, s, _ = run(capsys, "eval", "--run", workspace / "r" / "run.txt", "--manifest", manifest,
                     "--annotations", workspace / "data" / "annotations.json", "--model", model,
                     "--out", workspace / "e")
    assert code == 0
    assert set(s) >= {"mAP", "mAP@5", "mIoU", "report", "figures"}
    report = json.loads((workspace / "e" / "report.json").read_text())
    assert "uniform_baseline_iou" in report["localization"]
    assert (workspace / "e" / "iou_curve.png").is_file() and (workspace / "e" / "metrics.png").is_file()

    q = json.loads(split.read_text())["test"][0]
    code, s, _ = run(capsys, "explain", "--manifest", manifest, "--model", model, "--target", "img001",
                     "--query", q, "--out", workspace / "x")
    assert code == 0
    d = workspace / "x" / f"explain_img001__{q}"
    for name in ("P.csv", "Q.csv", "heat_target.png", "heat_query.png", "evidence.png"):
        assert (d / name).is_file()
    assert np.loadtxt(d / "P.csv", delimiter=",").shape == (4, 4)


def test_eval_perfect_run_reports_hundred(workspace, tmp_path, capsys):
    manifest = json.loads((workspace / "data" / "manifest.json").read_text())
    lines = []
    for q in manifest["queries"]:
        rel = q["relevant"]
        others = [i["id"] for i in manifest["images"] if i["id"] not in rel and not i["id"].startswith("qimg")]
        for r, t in enumerate(rel + others, start=1):
            lines.append(f"{q['id']} {t} {r} {1.0 / r:.6f}")
    (tmp_path / "perfect.txt").write_text("\n".join(lines) + "\n")
    code, s, _ = run(capsys, "eval", "--run", tmp_path / "perfect.txt", "--manifest",
                     workspace / "data" / "manifest.json", "--out", tmp_path / "e")
    assert code == 0
    assert s["mAP"] == "100.00±0.00" and s["mAP@5"] == "100.00±0.00"


def test_gradcheck_seed_seven(tmp_path, capsys):
    code, s, _ = run(capsys, "gradcheck", "--seed", 7, "--out", tmp_path)
    assert code == 0
    assert s["passed"] and s["max_rel_error"] < 1e-4
    assert json.loads((tmp_path / "gradcheck.json").read_text())["seed"] == 7


def test_gradcheck_failure_exits_one(tmp_path, capsys):
    code, out, err = run(capsys, "gradcheck", "--configurations", 3, "--tolerance", 1e-30, "--out", tmp_path)
    assert code == 1
    assert err.startswith("error: validation: ")
    assert len(err.strip().splitlines()) == 1


def test_runtime_errors_are_single_line(workspace, tmp_path, capsys):
    manifest = workspace / "data" / "manifest.json"
    code, _, err = run(capsys, "rank", "--manifest", manifest, "--model", workspace / "m" / "model.iirm",
                       "--queries", "q99", "--out", tmp_path)
    assert code == 1 and err.startswith("error: validation: unknown query ids: q99")
    (tmp_path / "bad.iirm").write_bytes(b"junk" * 10)
    code, _, err = run(capsys, "rank", "--manifest", manifest, "--model", tmp_path / "bad.iirm", "--out", tmp_path)
    assert code == 1 and err.startswith("error: persistence: ")
    code, _, err = run(capsys, "explain", "--manifest", manifest, "--model", workspace / "m" / "model.iirm",
                       "--target", "nope", "--query", "q00", "--out", tmp_path)
    assert code == 1 and err.startswith("error: lookup: ")


def test_usage_errors_exit_two(tmp_path, capsys):
    with pytest.raises(SystemExit) as e:
        parse_args(["rank", "--manifest", "m.json", "--model", "x", "--queries", "q1", "--split", "s.json"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        parse_args(["eval", "--run", "r", "--manifest", "m", "--model", "x"])
    assert e.value.code == 2
    with pytest.raises(SystemExit) as e:
        parse_args(["gradcheck", "--threads", "0"])
    assert e.value.code == 2
    with pytest.raises(SystemExit):
        parse_args([])
    capsys.readouterr()


def test_config_file_defaults_and_override(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"seed": 9, "gradcheck": {"configurations": 4}}))
    args = parse_args(["gradcheck", "--config", str(cfg)])
    assert (args.seed, args.configurations) == (9, 4)
    args = parse_args(["gradcheck", "--config", str(cfg), "--seed", "2"])
    assert (args.seed, args.configurations) == (2, 4)
    cfg.write_text(json.dumps({"bogus": 1}))
    with pytest.raises(SystemExit) as e:
        parse_args(["gradcheck", "--config", str(cfg)])
    assert e.value.code == 2
    capsys.readouterr()


def test_seeded_runs_are_reproducible_and_stay_in_out(tmp_path, monkeypatch, workspace):
    monkeypatch.chdir(tmp_path)
    manifest = workspace / "data" / "manifest.json"
    for name in ("a", "b"):
        assert main(["train", "--manifest", str(manifest), *TRAIN, "--seed", "4", "--out", f"o/{name}"]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["o"]
    for f in ("model.iirm", "split.json", "train_log.csv", "training_curves.png"):
        assert (tmp_path / "o" / "a" / f).read_bytes() == (tmp_path / "o" / "b" / f).read_bytes()


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "indret", "gradcheck", "--configurations", "5",
                           "--out", str(tmp_path)], capture_output=True, text=True, timeout=120)
    assert proc.returncode == 0, proc.stderr
    assert json.loads(proc.stdout)["configurations"] == 5
