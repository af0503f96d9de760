import numpy as np
import pytest

import taskprune as tp
from taskprune import evaluate as ev
from taskprune.corpus import TaskRecord


def zeroed(model):
    out = model.copy()
    out.embed *= 0
    out.w_out *= 0
    for lw in out.layers:
        for f in ("wq", "wk", "wv", "wo", "w_gate", "w_up", "w_down"):
            getattr(lw, f)[:] = 0
    return out


@pytest.fixture(scope="module")
def uniform_model():
    cfg = tp.ModelConfig(n_layers=2, d_model=16, n_heads=2, d_head=8, d_ff=24,
                         vocab_size=256, max_seq=256)
    return zeroed(tp.init_random(cfg, 0))


def test_relative_logit_diff_frozen():
    a = np.array([0.0, 2.0])
    b = np.array([0.0, 1.0])
    assert ev.relative_logit_diff(a, b) == pytest.approx(0.5)
    assert ev.relative_logit_diff(a, a) == 0.0


def test_uniform_model_ppl_equals_vocab(uniform_model):
    rng = np.random.default_rng(0)
    tokens = rng.integers(0, 256, size=2000)
    ppl = ev.eval_ppl(uniform_model, tokens, context_len=32, window_len=16, n_samples=8)
    assert ppl == pytest.approx(256.0, rel=1e-6)


def test_eval_ppl_determinism_and_validation(uniform_model):
    tokens = np.arange(500) % 256
    a = ev.eval_ppl(uniform_model, tokens, context_len=32, window_len=16, n_samples=4, seed=3)
    b = ev.eval_ppl(uniform_model, tokens, context_len=32, window_len=16, n_samples=4, seed=3)
    assert a == b
    with pytest.raises(ValueError):
        ev.eval_ppl(uniform_model, tokens[:10], context_len=32, window_len=16)


def test_mc_ties_pick_first_option(uniform_model):
    records = [
        TaskRecord(task_id="t", question="q q", options=("aa", "bb"), answer="bb"),
        TaskRecord(task_id="t", question="q q", options=("cc", "dd"), answer="cc"),
    ]
    preds = ev.mc_predictions(uniform_model, records)
    assert preds == [0, 0]
    assert ev.eval_multiple_choice(uniform_model, records) == pytest.approx(0.5)


def test_mc_length_normalization(uniform_model):
    """Without normalization a longer option would always lose under uniform logits."""
    records = [TaskRecord(task_id="t", question="q", options=("aaaa", "b"), answer="b")]
    assert ev.mc_predictions(uniform_model, records) == [0]


def test_mc_requires_options(uniform_model):
    bare = [TaskRecord(task_id="t", question="q", options=(), answer="a")]
    with pytest.raises(ValueError):
        ev.eval_multiple_choice(uniform_model, bare)


def test_answer_nll_uniform(uniform_model):
    records = [TaskRecord(task_id="t", question="q", options=(), answer="xyz")]
    # continuation is " xyz": 4 byte tokens at log(256) nats each
    assert ev.answer_nll(uniform_model, records) == pytest.approx(np.log(256.0), rel=1e-6)


def test_trained_model_beats_uniform(trained_env):
    nll = ev.answer_nll(trained_env["model"], trained_env["eval_records"],
                        trained_env["tokenizer"])
    assert nll < np.log(256.0)
    acc = ev.eval_multiple_choice(trained_env["model"], trained_env["eval_records"],
                                  trained_env["tokenizer"])
    assert acc >= 0.9


def test_report_csv_format():
    rep = ev.EvalReport(kind="demo", rows=[{"a": 1, "b": 0.5}, {"a": 2, "b": None}],
                        fingerprints={"model": "abc"}, wall_clock_s=12.5)
    text = rep.to_csv()
    lines = text.strip().splitlines()
    assert lines[0] == "# kind=demo model=abc"
    assert lines[1] == "a,b"
    assert lines[2] == "1,0.5"
    assert lines[3] == "2,"
    assert "12.5" not in text


def test_report_save_round_trip(tmp_path):
    rep = ev.EvalReport(kind="demo", rows=[{"x": 1 / 3}])
    p1, p2 = tmp_path / "a.csv", tmp_path / "b.csv"
    rep.save(p1)
    rep.save(p2)
    assert p1.read_bytes() == p2.read_bytes()
    assert "0.3333333333" in p1.read_text()


def test_eval_speed_reports(uniform_model):
    rep = ev.eval_speed(uniform_model, prompt_len=4, gen_len=4, repeats=3)
    assert rep.tokens_per_sec > 0
    assert len(rep.runs) == 3
    assert rep.tokens_per_sec == pytest.approx(float(np.median(rep.runs)))
    assert rep.n_params == uniform_model.n_params()
    assert rep.speedup is None
    ratio = ev.eval_speed(uniform_model, prompt_len=4, gen_len=4, repeats=3,
                          baseline_tps=rep.tokens_per_sec)
    assert ratio.speedup == pytest.approx(ratio.tokens_per_sec / rep.tokens_per_sec)
    with pytest.raises(ValueError):
        ev.eval_speed(uniform_model, repeats=2)


def test_remove_test_rows(trained_env):
    rep = ev.remove_test(trained_env["model"], trained_env["eval_records"][:16],
                         trained_env["scores_general"], [0, 5], [0.0, 0.5],
                         trained_env["tokenizer"])
    assert rep.kind.startswith("remove-test")
    assert [r["layer"] for r in rep.rows] == [0, 5]
    for row in rep.rows:
        assert set(row) == {"layer", "rho=0", "rho=0.5"}
    # rho=0 rows all equal the dense metric
    assert rep.rows[0]["rho=0"] == pytest.approx(rep.rows[1]["rho=0"], rel=1e-9)


def test_compare_strategies_rows(trained_env):
    rep = ev.compare_strategies(trained_env["model"], trained_env["corpora"],
                                trained_env["eval_records"][:16], 0.25,
                                tokenizer=trained_env["tokenizer"])
    strategies = [r["strategy"] for r in rep.rows]
    assert strategies == ["uniform", "logistic"]
    for row in rep.rows:
        assert row["target"] == 0.25
        assert row["mean_nll"] > 0
        assert 0.0 <= row["accuracy"] <= 1.0


def test_expert_vs_mismatch_validation(trained_env):
    with pytest.raises(ValueError):
        ev.expert_vs_mismatch(trained_env["model"], trained_env["corpora"],
                              {"ghost": trained_env["eval_records"][:2]}, 0.5,
                              tokenizer=trained_env["tokenizer"])
