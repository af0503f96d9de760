import numpy as np
import pytest

import taskprune as tp
from taskprune import classify as cl
from taskprune.serialize import ArtifactError


@pytest.fixture(scope="module")
def byte_model():
    cfg = tp.ModelConfig(n_layers=2, d_model=32, n_heads=2, d_head=16, d_ff=48,
                         vocab_size=256, max_seq=128)
    return tp.init_random(cfg, 3)


def test_embed_prompt_is_mean_embedding(byte_model):
    tokens = np.array([5, 9, 5])
    vec = cl.embed_prompt(byte_model, tokens)
    manual = byte_model.embed[tokens].astype(np.float64).mean(axis=0)
    np.testing.assert_allclose(vec, manual, rtol=1e-6)
    assert vec.shape == (32,)


def test_fit_separates_disjoint_tasks(byte_model):
    specs = tp.default_task_specs(3, n_records=48)
    records = tp.synth_records(specs, 5)
    train, held = tp.split_records(records, 12)
    tok = tp.byte_tokenizer()
    clf = cl.fit_classifier(byte_model, tp.build_corpora(train, tok))
    assert clf.labels == ["task0", "task1", "task2"]
    report = cl.evaluate_classifier(clf, byte_model, tp.build_corpora(held, tok))
    assert report.accuracy >= 0.9
    label, probs = cl.predict_task(clf, byte_model, tok.encode(tp.format_prompt(held[0])))
    assert label in clf.labels
    assert probs.shape == (3,)
    assert probs.sum() == pytest.approx(1.0)
    assert probs.min() >= 0


def test_fit_is_deterministic(byte_model):
    specs = tp.default_task_specs(2, n_records=16)
    corpora = tp.synth_tasks(specs, 1)
    a = cl.fit_classifier(byte_model, corpora, epochs=50)
    b = cl.fit_classifier(byte_model, corpora, epochs=50)
    assert a.fingerprint() == b.fingerprint()
    c = cl.fit_classifier(byte_model, corpora, epochs=50, seed=1)
    assert c.fingerprint() != a.fingerprint()


def test_constant_classifier_metrics(byte_model):
    """Bias forces label 'a' always; hand-counted metrics follow."""
    clf = cl.TaskClassifier(labels=["a", "b"],
                            weight=np.zeros((32, 2)),
                            bias=np.array([1.0, 0.0]),
                            model_fingerprint=byte_model.fingerprint())
    specs = tp.default_task_specs(2, n_records=10)
    corpora = tp.synth_tasks(specs, 2)
    corpora = {"a": corpora["task0"], "b": corpora["task1"]}
    report = cl.evaluate_classifier(clf, byte_model, corpora)
    assert report.accuracy == pytest.approx(0.5)
    pa, pb = report.per_class["a"], report.per_class["b"]
    assert pa["recall"] == pytest.approx(1.0)
    assert pa["precision"] == pytest.approx(0.5)
    assert pa["f1"] == pytest.approx(2 / 3)
    assert pb["recall"] == 0.0 and pb["precision"] == 0.0 and pb["f1"] == 0.0
    assert report.macro["f1"] == pytest.approx(1 / 3)
    assert report.weighted["f1"] == pytest.approx(1 / 3)


def test_evaluate_requires_matching_tasks(byte_model):
    specs = tp.default_task_specs(2, n_records=8)
    corpora = tp.synth_tasks(specs, 0)
    clf = cl.fit_classifier(byte_model, corpora, epochs=10)
    with pytest.raises(ValueError):
        cl.evaluate_classifier(clf, byte_model, {"task0": corpora["task0"]})


def test_classifier_validation():
    with pytest.raises(ValueError):
        cl.TaskClassifier(labels=["only"], weight=np.zeros((4, 1)), bias=np.zeros(1),
                          model_fingerprint="x")
    with pytest.raises(ValueError):
        cl.TaskClassifier(labels=["a", "b"], weight=np.zeros((4, 3)), bias=np.zeros(2),
                          model_fingerprint="x")


def test_save_load_fingerprint_guard(tmp_path, byte_model):
    specs = tp.default_task_specs(2, n_records=8)
    corpora = tp.synth_tasks(specs, 0)
    clf = cl.fit_classifier(byte_model, corpora, epochs=10)
    path = tmp_path / "clf.npz"
    clf.save(path)
    again = cl.load_classifier(path)
    assert again.fingerprint() == clf.fingerprint()
    assert again.labels == clf.labels
    assert again.model_fingerprint == byte_model.fingerprint()


def test_divergence_guard(byte_model):
    """Non-finite features (e.g. from a corrupt checkpoint) must not pass silently."""
    broken = byte_model.copy()
    broken.embed[:, 0] = np.inf
    specs = tp.default_task_specs(2, n_records=8)
    corpora = tp.synth_tasks(specs, 0)
    with pytest.raises(tp.DivergenceError), np.errstate(all="ignore"):
        cl.fit_classifier(broken, corpora, epochs=5)
