"""Task identification from mean-pooled layer-0 token embeddings.

A single linear layer plus softmax, trained by full-batch gradient descent.
Deliberately shallow: the point is measuring how separable the tasks are at
the embedding level, not building a strong classifier.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .model import DivergenceError, TinyModel
from .serialize import FORMAT_VERSION, ArtifactError, expect_format, fingerprint, load_npz, save_npz

DEFAULT_EPOCHS = 300
DEFAULT_LR = 0.1


@dataclass
class TaskClassifier:
    labels: list[str]
    weight: np.ndarray          # (d_model, n_labels)
    bias: np.ndarray            # (n_labels,)
    model_fingerprint: str

    def __post_init__(self):
        if len(self.labels) < 2:
            raise ValueError("classifier needs >= 2 labels")
        if self.weight.shape[1] != len(self.labels) or self.bias.shape != (len(self.labels),):
            raise ValueError("weight/bias shapes do not match label count")

    def fingerprint(self) -> str:
        return fingerprint(
            {"labels": self.labels, "model": self.model_fingerprint},
            {"weight": self.weight, "bias": self.bias},
        )

    def save(self, path) -> None:
        meta = {
            "format": "task-classifier",
            "version": FORMAT_VERSION,
            "labels": self.labels,
            "model_fingerprint": self.model_fingerprint,
            "fingerprint": self.fingerprint(),
        }
        save_npz(path, meta, {"weight": self.weight, "bias": self.bias})


def load_classifier(path) -> TaskClassifier:
    meta, arrays = load_npz(path)
    expect_format(meta, "task-classifier", path)
    clf = TaskClassifier(
        labels=list(meta["labels"]),
        weight=np.asarray(arrays["weight"], dtype=np.float64),
        bias=np.asarray(arrays["bias"], dtype=np.float64),
        model_fingerprint=meta["model_fingerprint"],
    )
    if clf.fingerprint() != meta["fingerprint"]:
        raise ArtifactError(f"{path}: classifier content does not match fingerprint")
    return clf


def embed_prompt(model: TinyModel, tokens) -> np.ndarray:
    """Mean of the layer-0 token embeddings."""
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.size == 0:
        raise ValueError("empty token sequence")
    return model.embed[tokens].astype(np.float64).mean(axis=0)


def _features(model: TinyModel, corpora: dict) -> tuple[np.ndarray, np.ndarray, list[str]]:
    labels = sorted(corpora)
    xs, ys = [], []
    for idx, task_id in enumerate(labels):
        for seq in corpora[task_id].token_sequences:
            xs.append(embed_prompt(model, seq))
            ys.append(idx)
    return np.asarray(xs), np.asarray(ys), labels


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def fit_classifier(model: TinyModel, corpora: dict, epochs: int = DEFAULT_EPOCHS, lr: float = DEFAULT_LR,
        seed: int = 0) -> TaskClassifier:
    if len(corpora) < 2:
        raise ValueError("need corpora for >= 2 tasks")
    X, y, labels = _features(model, corpora)
    n, d = X.shape
    k = len(labels)
    onehot = np.zeros((n, k))
    onehot[np.arange(n), y] = 1.0

    rng = np.random.default_rng(seed)
    W = rng.standard_normal((d, k)) * 0.01
    b = np.zeros(k)
    for epoch in range(epochs):
        p = _softmax(X @ W + b)
        err = (p - onehot) / n
        gw = X.T @ err
        gb = err.sum(axis=0)
        W -= lr * gw
        b -= lr * gb
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
            raise DivergenceError(f"classifier training diverged at epoch {epoch}")
    return TaskClassifier(labels=labels, weight=W, bias=b, model_fingerprint=model.fingerprint())


def predict_task(clf: TaskClassifier, model: TinyModel, tokens) -> tuple[str, np.ndarray]:
    """Predicted label and the softmax probabilities (label order)."""
    x = embed_prompt(model, tokens)
    probs = _softmax((x @ clf.weight + clf.bias)[None, :])[0]
    return clf.labels[int(np.argmax(probs))], probs


@dataclass
class ClassifierReport:
    labels: list[str]
    accuracy: float
    per_class: dict = field(default_factory=dict)  # label -> precision/recall/f1/support
    macro: dict = field(default_factory=dict)
    weighted: dict = field(default_factory=dict)


def evaluate_classifier(clf: TaskClassifier, model: TinyModel, corpora: dict) -> ClassifierReport:
    """Precision/recall/F1 per class plus accuracy and macro/weighted averages."""
    X, y, labels = _features(model, corpora)
    if labels != clf.labels:
        raise ValueError(f"eval corpora tasks {labels} do not match classifier labels {clf.labels}")
    pred = np.argmax(X @ clf.weight + clf.bias, axis=1)

    per_class = {}
    k = len(labels)
    for i, label in enumerate(labels):
        tp = int(np.sum((pred == i) & (y == i)))
        fp = int(np.sum((pred == i) & (y != i)))
        fn = int(np.sum((pred != i) & (y == i)))
        precision = tp / (tp + fp) if tp + fp else 0.0
        recall = tp / (tp + fn) if tp + fn else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        per_class[label] = {
            "precision": precision,
            "recall": recall,
            "f1": f1,
            "support": int(np.sum(y == i)),
        }
    total = len(y)
    macro = {m: float(np.mean([per_class[l][m] for l in labels])) for m in ("precision", "recall", "f1")}
    weighted = {
        m: float(sum(per_class[l][m] * per_class[l]["support"] for l in labels) / total)
        for m in ("precision", "recall", "f1")
    }
    return ClassifierReport(
        labels=labels,
        accuracy=float(np.mean(pred == y)),
        per_class=per_class,
        macro=macro,
        weighted=weighted,
    )
