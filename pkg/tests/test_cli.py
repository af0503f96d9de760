import json

import numpy as np
import pytest

from taskprune import cli


def run(*argv) -> int:
    return cli.main(list(argv))


@pytest.fixture(scope="session")
def workspace(tmp_path_factory):
    """One small end-to-end CLI pipeline reused by the tests below."""
    ws = tmp_path_factory.mktemp("cli")
    steps = [
        ["synth-corpus", "--tasks", "2", "--records", "24", "--options", "2",
         "--seed", "7", "--out", str(ws / "corpus.jsonl")],
        ["train-tiny", "--corpus", str(ws / "corpus.jsonl"), "--out", str(ws / "model.npz"),
         "--layers", "4", "--d-model", "32", "--n-heads", "2", "--d-ff", "64",
         "--steps", "60", "--lr", "0.5", "--seed", "0"],
        ["collect-stats", "--model", str(ws / "model.npz"), "--corpus", str(ws / "corpus.jsonl"),
         "--out", str(ws / "stats.npz")],
        ["score", "--model", str(ws / "model.npz"), "--stats", str(ws / "stats.npz"),
         "--method", "fluctuation", "--out", str(ws / "scores.npz")],
        ["allocate", "--L", "4", "--G", "0.5", "--out", str(ws / "sched.json")],
        ["prune", "--model", str(ws / "model.npz"), "--scores", str(ws / "scores.npz"),
         "--origin", "general", "--schedule", str(ws / "sched.json"),
         "--out", str(ws / "plan.json"), "--emit", "compact",
         "--out-model", str(ws / "pruned.npz")],
        ["expert-matrix", "--model", str(ws / "model.npz"), "--corpus", str(ws / "corpus.jsonl"),
         "--eval", str(ws / "corpus.jsonl"), "--G", "0.5", "--out", str(ws / "matrix.csv")],
    ]
    for argv in steps:
        assert run(*argv) == 0, argv[0]
    return ws


def test_quickstart_artifacts(workspace):
    for name in ("corpus.jsonl", "model.npz", "stats.npz", "scores.npz",
                 "sched.json", "plan.json", "pruned.npz", "matrix.csv"):
        assert (workspace / name).exists()
    header = (workspace / "matrix.csv").read_text().splitlines()
    assert header[0].startswith("# kind=expert-matrix")
    assert header[1] == "eval_task,dense,mask=task0,mask=task1"
    assert len(header) == 4


def test_rerun_is_byte_identical(workspace, tmp_path):
    out = tmp_path / "scores2.npz"
    assert run("score", "--model", str(workspace / "model.npz"),
               "--stats", str(workspace / "stats.npz"),
               "--method", "fluctuation", "--out", str(out)) == 0
    assert out.read_bytes() == (workspace / "scores.npz").read_bytes()


def test_fingerprint_mismatch_exits_3(workspace, tmp_path):
    other = tmp_path / "other.npz"
    assert run("train-tiny", "--corpus", str(workspace / "corpus.jsonl"),
               "--out", str(other), "--layers", "4", "--d-model", "32",
               "--n-heads", "2", "--d-ff", "64", "--steps", "1", "--lr", "0.1",
               "--seed", "9") == 0
    code = run("score", "--model", str(other), "--stats", str(workspace / "stats.npz"),
               "--out", str(tmp_path / "x.npz"))
    assert code == 3


def test_infeasible_exits_4(tmp_path):
    assert run("allocate", "--L", "4", "--G", "0.9",
               "--out", str(tmp_path / "s.json")) == 4


def test_usage_error_exits_2(tmp_path):
    with pytest.raises(SystemExit) as exc:
        run("allocate", "--L", "4", "--out", str(tmp_path / "s.json"))
    assert exc.value.code == 2
    with pytest.raises(SystemExit):
        run("no-such-command")


def test_unknown_origin_exits_1(workspace, tmp_path):
    code = run("prune", "--model", str(workspace / "model.npz"),
               "--scores", str(workspace / "scores.npz"), "--origin", "ghost",
               "--rho", "0.25", "--out", str(tmp_path / "p.json"))
    assert code == 1


def test_prune_needs_exactly_one_ratio_source(workspace, tmp_path):
    base = ["prune", "--model", str(workspace / "model.npz"),
            "--scores", str(workspace / "scores.npz"), "--out", str(tmp_path / "p.json")]
    assert run(*base) == 1
    assert run(*base, "--rho", "0.3", "--schedule", str(workspace / "sched.json")) == 1
    assert run(*base, "--rho", "0.3") == 0


def test_config_file_fills_missing_flags(tmp_path):
    cfg = tmp_path / "run.ini"
    cfg.write_text("[allocate]\nL = 6\nG = 0.5\n")
    out = tmp_path / "sched.json"
    assert run("allocate", "--config", str(cfg), "--out", str(out)) == 0
    doc = json.loads(out.read_text())
    assert len(doc["ratios"]) == 6
    # explicit flags win over the file
    out2 = tmp_path / "sched2.json"
    assert run("allocate", "--config", str(cfg), "--G", "0.25", "--out", str(out2)) == 0
    assert json.loads(out2.read_text())["target"] == 0.25
    assert run("allocate", "--config", str(tmp_path / "missing.ini"),
               "--L", "4", "--G", "0.5", "--out", str(out2)) == 3


def test_eval_command(workspace, tmp_path, capsys):
    out = tmp_path / "eval.csv"
    assert run("eval", "--model", str(workspace / "pruned.npz"),
               "--eval", str(workspace / "corpus.jsonl"), "--out", str(out)) == 0
    text = out.read_text()
    lines = text.strip().splitlines()
    assert lines[1] == "scope,mean_nll,accuracy"
    assert lines[2].startswith("all,")
    assert run("eval", "--model", str(workspace / "model.npz")) == 1  # nothing to do


def test_eval_ppl_text(workspace, tmp_path):
    sample = tmp_path / "text.txt"
    sample.write_text("the quick brown fox jumps over the lazy dog\n" * 40)
    out = tmp_path / "ppl.csv"
    assert run("eval", "--model", str(workspace / "model.npz"), "--ppl-text", str(sample),
               "--context", "32", "--window", "16", "--samples", "4",
               "--out", str(out)) == 0
    row = out.read_text().strip().splitlines()[-1]
    assert row.startswith("ppl:text.txt,")
    assert float(row.split(",")[1]) > 0


def test_remove_test_command(workspace, tmp_path):
    out = tmp_path / "rm.csv"
    assert run("remove-test", "--model", str(workspace / "model.npz"),
               "--eval", str(workspace / "corpus.jsonl"),
               "--scores", str(workspace / "scores.npz"),
               "--layers", "0,2", "--ratios", "0,0.5", "--out", str(out)) == 0
    lines = out.read_text().strip().splitlines()
    assert lines[1] == "layer,rho=0,rho=0.5"
    assert len(lines) == 4


def test_compare_strategies_command(workspace, tmp_path):
    out = tmp_path / "cmp.csv"
    assert run("compare-strategies", "--model", str(workspace / "model.npz"),
               "--corpus", str(workspace / "corpus.jsonl"),
               "--eval", str(workspace / "corpus.jsonl"),
               "--G", "0.4", "--out", str(out)) == 0
    lines = out.read_text().strip().splitlines()
    assert [l.split(",")[0] for l in lines[1:]] == ["strategy", "uniform", "logistic"]


def test_classify_task_command(workspace, tmp_path):
    clf = tmp_path / "clf.npz"
    assert run("classify-task", "--model", str(workspace / "model.npz"),
               "--clf", str(clf), "--fit", str(workspace / "corpus.jsonl"),
               "--holdout", "4", "--epochs", "100",
               "--text", "sample prompt") == 0
    assert clf.exists()
    # classify-only run against the saved artifact
    assert run("classify-task", "--model", str(workspace / "model.npz"),
               "--clf", str(clf), "--text", "another prompt") == 0
    # missing both --fit and --text
    assert run("classify-task", "--model", str(workspace / "model.npz"),
               "--clf", str(clf)) == 1
    # classifier fit against a different model is rejected
    other = tmp_path / "other.npz"
    run("train-tiny", "--corpus", str(workspace / "corpus.jsonl"), "--out", str(other),
        "--layers", "4", "--d-model", "32", "--n-heads", "2", "--d-ff", "64",
        "--steps", "1", "--lr", "0.1", "--seed", "5")
    assert run("classify-task", "--model", str(other), "--clf", str(clf),
               "--text", "x") == 3


def test_export_heatmap_command(workspace, tmp_path):
    out_dir = tmp_path / "heat"
    assert run("export-heatmap", "--stats", str(workspace / "stats.npz"),
               "--out-dir", str(out_dir)) == 0
    assert (out_dir / "task0.heatmap.csv").exists()
    assert (out_dir / "task1.heatmap.csv").exists()
    single = tmp_path / "one.csv"
    assert run("export-heatmap", "--stats", str(workspace / "stats.npz"),
               "--tasks", "task0", "--out", str(single)) == 0
    assert single.read_text().startswith("layer,site,0,")
    # multiple tasks but no --out-dir
    assert run("export-heatmap", "--stats", str(workspace / "stats.npz")) == 1


def test_project_states_command(workspace, tmp_path):
    out = tmp_path / "proj.csv"
    assert run("project-states", "--model", str(workspace / "model.npz"),
               "--corpus", str(workspace / "corpus.jsonl"), "--layer", "2",
               "--out", str(out)) == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "task,x,y"
    assert len(lines) == 49


def test_build_corpus_round_trip(workspace, tmp_path):
    out = tmp_path / "normalized.jsonl"
    assert run("build-corpus", "--in", str(workspace / "corpus.jsonl"),
               "--out", str(out)) == 0
    assert out.read_text() == (workspace / "corpus.jsonl").read_text()
    bad = tmp_path / "bad.jsonl"
    bad.write_text('{"task": "t", "question": "q"}\n')
    assert run("build-corpus", "--in", str(bad), "--out", str(out)) == 1
