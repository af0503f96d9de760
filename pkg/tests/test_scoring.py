import numpy as np
import pytest

import taskprune as tp
from taskprune import scoring as sc
from taskprune.serialize import ArtifactError
from taskprune.stats import ActivationStats


def mlp_stats(samples, task="t"):
    s = ActivationStats(layer=0, site="mlp", task_id=task, width=np.shape(samples)[1])
    s.add_tokens(np.asarray(samples, dtype=np.float64))
    s.n_prompts = 1
    return s


def test_fluctuation_frozen_example():
    """var {0, 2*sqrt(2)} = 2 and consuming row [2, 0] -> 2 * 4 = 8."""
    s = mlp_stats([[0.0, 0.0], [2.0 * np.sqrt(2.0), 2.0]])
    W = np.array([[2.0, 0.0], [0.0, 3.0]])
    out = sc.score_fluctuation(s, W)
    np.testing.assert_allclose(out.channel_scores, [8.0, 9.0], rtol=1e-12)


def test_energy_frozen_example():
    """sum_xx [8, 4] and row l1 [2, 3] -> [16, 12]."""
    s = mlp_stats([[0.0, 0.0], [2.0 * np.sqrt(2.0), 2.0]])
    W = np.array([[2.0, 0.0], [0.0, -3.0]])
    out = sc.score_energy(s, W)
    np.testing.assert_allclose(out.channel_scores, [16.0, 12.0], rtol=1e-12)


def test_score_site_dispatch():
    s = mlp_stats([[1.0]])
    W = np.ones((1, 1))
    assert sc.score_site(s, W, "fluctuation").method == "fluctuation"
    assert sc.score_site(s, W, "energy").method == "energy"
    with pytest.raises(ValueError):
        sc.score_site(s, W, "bogus")


def test_aggregate_heads_frozen():
    scores = sc.ImportanceScores(0, "attn", "t", "energy",
                                 np.array([1.0, 2.0, 0.5, 0.5]))
    out = sc.aggregate_heads(scores, d_head=2)
    np.testing.assert_allclose(out.head_scores, [3.0, 1.0])
    # conservation
    assert out.head_scores.sum() == pytest.approx(out.channel_scores.sum())
    with pytest.raises(ValueError):
        sc.aggregate_heads(scores, d_head=3)
    with pytest.raises(ValueError):
        sc.aggregate_heads(sc.ImportanceScores(0, "mlp", "t", "energy", np.ones(4)), 2)


def test_scores_validation():
    with pytest.raises(ValueError):
        sc.ImportanceScores(0, "mlp", "t", "energy", np.array([1.0, -0.1]))
    with pytest.raises(ValueError):
        sc.ImportanceScores(0, "mlp", "t", "energy", np.array([1.0, np.nan]))


def test_rescaling_leaves_argsort_unchanged():
    rng = np.random.default_rng(0)
    W = rng.standard_normal((16, 8))
    data = rng.standard_normal((64, 16)) * rng.random(16)
    for lam in (0.25, 7.0):
        for method in sc.METHODS:
            a = sc.score_site(mlp_stats(data), W, method).channel_scores
            b = sc.score_site(mlp_stats(data * lam), W, method).channel_scores
            np.testing.assert_array_equal(np.argsort(a, kind="stable"),
                                          np.argsort(b, kind="stable"))


def test_score_task_covers_all_sites(trained_env):
    scores = sc.score_task(trained_env["model"], trained_env["archive"], "task0", "fluctuation")
    cfg = trained_env["model"].config
    assert len(scores) == cfg.n_layers * 2
    for (layer, site), s in scores.items():
        assert s.origin == "task0"
        assert s.width == trained_env["model"].site_width(layer, site)
        if site == "attn":
            assert s.head_scores is not None
            assert s.head_scores.sum() == pytest.approx(s.channel_scores.sum(), rel=1e-9)
        else:
            assert s.head_scores is None
    with pytest.raises(ValueError):
        sc.score_task(trained_env["model"], trained_env["archive"], "nope", "fluctuation")


def test_select_expert(trained_env):
    by_task = trained_env["scores_by_task"]
    assert sc.select_expert(by_task, "task1") is by_task["task1"]
    with pytest.raises(ValueError):
        sc.select_expert(by_task, "task9")


def test_default_general_weights():
    w = sc.default_general_weights(["a", "b"])
    assert w == {"a": 2.0, "b": 2.0}
    w = sc.default_general_weights(["a", "wiki"], text_task="wiki")
    assert w == {"a": 2.0, "wiki": 3.0}
    with pytest.raises(ValueError):
        sc.default_general_weights(["a"], text_task="missing")


def test_aggregate_general_frozen():
    a = {(0, "mlp"): sc.ImportanceScores(0, "mlp", "A", "energy", np.array([3.0]))}
    b = {(0, "mlp"): sc.ImportanceScores(0, "mlp", "B", "energy", np.array([2.0]))}
    out = sc.aggregate_general({"A": a, "B": b}, {"A": 1.0, "B": 2.0})
    assert out[(0, "mlp")].channel_scores[0] == pytest.approx(7.0)
    assert out[(0, "mlp")].origin == sc.GENERAL


def test_aggregate_general_validation():
    a = {(0, "mlp"): sc.ImportanceScores(0, "mlp", "A", "energy", np.array([3.0]))}
    b = {(1, "mlp"): sc.ImportanceScores(1, "mlp", "B", "energy", np.array([2.0]))}
    with pytest.raises(ValueError):
        sc.aggregate_general({"A": a, "B": b}, {"A": 1.0, "B": 1.0})
    with pytest.raises(ValueError):
        sc.aggregate_general({"A": a}, {"A": 1.0, "B": 1.0})
    c = {(0, "mlp"): sc.ImportanceScores(0, "mlp", "C", "fluctuation", np.array([2.0]))}
    with pytest.raises(ValueError):
        sc.aggregate_general({"A": a, "C": c}, {"A": 1.0, "C": 1.0})


def test_aggregate_general_reaggregates_heads(trained_env):
    by_task = trained_env["scores_by_task"]
    general = trained_env["scores_general"]
    for (layer, site), s in general.items():
        if site == "attn":
            assert s.head_scores.sum() == pytest.approx(s.channel_scores.sum(), rel=1e-9)
            manual = sum(2.0 * by_task[t][(layer, site)].channel_scores for t in by_task)
            np.testing.assert_allclose(s.channel_scores, manual, rtol=1e-9)


def test_scores_save_load_round_trip(tmp_path, trained_env):
    by_origin = dict(trained_env["scores_by_task"])
    by_origin[sc.GENERAL] = trained_env["scores_general"]
    path = tmp_path / "scores.npz"
    model_fp = trained_env["model"].fingerprint()
    stats_fp = trained_env["archive"].fingerprint()
    sc.save_scores(path, by_origin, "fluctuation", model_fp, stats_fp)
    again, meta = sc.load_scores(path)
    assert meta["method"] == "fluctuation"
    assert meta["model_fingerprint"] == model_fp
    assert sorted(again) == sorted(by_origin)
    key = (0, "attn")
    np.testing.assert_array_equal(again["task0"][key].channel_scores,
                                  by_origin["task0"][key].channel_scores)
    np.testing.assert_array_equal(again["task0"][key].head_scores,
                                  by_origin["task0"][key].head_scores)


def test_scores_tamper_detected(tmp_path, trained_env):
    from taskprune.serialize import load_npz, save_npz

    by_origin = {"task0": trained_env["scores_by_task"]["task0"]}
    path = tmp_path / "scores.npz"
    sc.save_scores(path, by_origin, "fluctuation", "m" * 16, "s" * 16)
    meta, arrays = load_npz(path)
    name = sorted(a for a in arrays if a.endswith(".channel"))[0]
    arrays[name] = arrays[name] + 1.0
    save_npz(path, meta, arrays)
    with pytest.raises(ArtifactError):
        sc.load_scores(path)
