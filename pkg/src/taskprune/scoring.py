"""Channel and head importance scores from activation statistics.

Two scoring rules, both "statistic x consuming-weight norm" per input
dimension of the down/output projection:

  fluctuation: population variance        x squared L2 of the consuming row
  energy:      pooled sum of squares      x L1 of the consuming row

Head scores are sums of the channel scores inside each head's contiguous
slice, so pruning decisions at head granularity conserve channel mass.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import SITE_ATTN, SITE_MLP, SITES, TinyModel
from .serialize import FORMAT_VERSION, ArtifactError, expect_format, fingerprint, load_npz, save_npz
from .stats import ActivationStats, StatsArchive

METHODS = ("fluctuation", "energy")

GENERAL = "general"

# (layer, site) -> ImportanceScores
ScoreMap = dict


@dataclass
class ImportanceScores:
    layer: int
    site: str
    origin: str          # task id, or "general"
    method: str
    channel_scores: np.ndarray
    head_scores: np.ndarray | None = None

    def __post_init__(self):
        if self.site not in SITES:
            raise ValueError(f"unknown site {self.site!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown method {self.method!r}")
        self.channel_scores = np.asarray(self.channel_scores, dtype=np.float64)
        if self.channel_scores.ndim != 1 or self.channel_scores.size == 0:
            raise ValueError("channel_scores must be a nonempty vector")
        if np.any(self.channel_scores < 0) or not np.all(np.isfinite(self.channel_scores)):
            raise ValueError("channel scores must be finite and nonnegative")

    @property
    def width(self) -> int:
        return self.channel_scores.size


@dataclass
class WeightSlice:
    """Consuming-matrix row for one channel: the weights that read dimension i."""

    layer: int
    site: str
    index: int
    values: np.ndarray
    l1: float
    l2sq: float


def consuming_matrix(model: TinyModel, layer: int, site: str) -> np.ndarray:
    """Rows are the weights consuming each channel of the site."""
    lw = model.layers[layer]
    if site == SITE_MLP:
        return lw.w_down
    if site == SITE_ATTN:
        return lw.wo
    raise ValueError(f"unknown site {site!r}")


def weight_slices(model: TinyModel, layer: int, site: str) -> list[WeightSlice]:
    W = consuming_matrix(model, layer, site)
    return [
        WeightSlice(
            layer=layer,
            site=site,
            index=i,
            values=row,
            l1=float(np.abs(row.astype(np.float64)).sum()),
            l2sq=float(np.square(row.astype(np.float64)).sum()),
        )
        for i, row in enumerate(W)
    ]


def _slice_matrix(slices) -> np.ndarray:
    if isinstance(slices, np.ndarray):
        W = slices
    else:
        W = np.stack([s.values for s in slices])
    return W.astype(np.float64)


def score_fluctuation(stats: ActivationStats, slices) -> ImportanceScores:
    W = _slice_matrix(slices)
    if W.shape[0] != stats.width:
        raise ValueError(f"stats width {stats.width} does not match {W.shape[0]} weight slices")
    channel = stats.var() * np.square(W).sum(axis=1)
    return ImportanceScores(stats.layer, stats.site, stats.task_id, "fluctuation", channel)


def score_energy(stats: ActivationStats, slices) -> ImportanceScores:
    W = _slice_matrix(slices)
    if W.shape[0] != stats.width:
        raise ValueError(f"stats width {stats.width} does not match {W.shape[0]} weight slices")
    channel = stats.sum_xx * np.abs(W).sum(axis=1)
    return ImportanceScores(stats.layer, stats.site, stats.task_id, "energy", channel)


def score_site(stats: ActivationStats, slices, method: str) -> ImportanceScores:
    if method == "fluctuation":
        return score_fluctuation(stats, slices)
    if method == "energy":
        return score_energy(stats, slices)
    raise ValueError(f"unknown method {method!r}")


def aggregate_heads(scores: ImportanceScores, d_head: int) -> ImportanceScores:
    """Attach per-head sums of the channel scores (contiguous head slices)."""
    if scores.site != SITE_ATTN:
        raise ValueError("head aggregation only applies to the attention site")
    if scores.width % d_head != 0:
        raise ValueError(f"width {scores.width} is not a multiple of d_head {d_head}")
    heads = scores.channel_scores.reshape(-1, d_head).sum(axis=1)
    return ImportanceScores(scores.layer, scores.site, scores.origin, scores.method,
                            scores.channel_scores, head_scores=heads)


def score_task(model: TinyModel, archive: StatsArchive, task_id: str, method: str) -> ScoreMap:
    """Scores for every (layer, site) of one task in the archive."""
    out: ScoreMap = {}
    for layer, site in archive.sites(task_id):
        stats = archive.get(layer, site, task_id)
        scores = score_site(stats, consuming_matrix(model, layer, site), method)
        if site == SITE_ATTN:
            scores = aggregate_heads(scores, model.config.d_head)
        out[(layer, site)] = scores
    if not out:
        raise ValueError(f"archive has no statistics for task {task_id!r}")
    return out


def score_all(model: TinyModel, archive: StatsArchive, method: str) -> dict[str, ScoreMap]:
    return {task: score_task(model, archive, task, method) for task in archive.tasks}


def select_expert(by_task: dict[str, ScoreMap], task_id: str) -> ScoreMap:
    """Exact per-task scores, unchanged (expert selection is identity)."""
    if task_id not in by_task:
        raise ValueError(f"no scores for task {task_id!r} (have {sorted(by_task)})")
    return by_task[task_id]


def default_general_weights(task_ids, text_task: str | None = None) -> dict[str, float]:
    """Task corpora weigh 2; a designated plain-text corpus weighs 3."""
    weights = {t: 2.0 for t in task_ids}
    if text_task is not None:
        if text_task not in weights:
            raise ValueError(f"text task {text_task!r} not among tasks")
        weights[text_task] = 3.0
    return weights


def aggregate_general(by_task: dict[str, ScoreMap], weights: dict[str, float]) -> ScoreMap:
    """Weighted sum of per-task scores (unnormalized)."""
    if not weights:
        raise ValueError("empty weight map")
    for task, w in weights.items():
        if w < 0:
            raise ValueError(f"negative weight for task {task!r}")
        if task not in by_task:
            raise ValueError(f"no scores for weighted task {task!r}")
    tasks = sorted(weights)
    keys = set(by_task[tasks[0]])
    for task in tasks[1:]:
        if set(by_task[task]) != keys:
            raise ValueError(f"task {task!r} covers different (layer, site) keys")
    out: ScoreMap = {}
    for key in keys:
        first = by_task[tasks[0]][key]
        total = np.zeros(first.width, dtype=np.float64)
        for task in tasks:
            s = by_task[task][key]
            if s.width != first.width or s.method != first.method:
                raise ValueError(f"mismatched scores for {key} across tasks")
            total += weights[task] * s.channel_scores
        merged = ImportanceScores(first.layer, first.site, GENERAL, first.method, total)
        if first.head_scores is not None:
            merged = aggregate_heads(merged, first.width // first.head_scores.size)
        out[key] = merged
    return out


# --- scores artifact ---------------------------------------------------------


def _scores_index(by_origin: dict[str, ScoreMap]) -> tuple[list[dict], dict[str, np.ndarray]]:
    index, arrays = [], {}
    i = 0
    for origin in sorted(by_origin):
        for key in sorted(by_origin[origin]):
            s = by_origin[origin][key]
            index.append({"origin": origin, "layer": s.layer, "site": s.site,
                          "width": int(s.width), "heads": s.head_scores is not None})
            arrays[f"{i}.channel"] = s.channel_scores
            if s.head_scores is not None:
                arrays[f"{i}.head"] = s.head_scores
            i += 1
    return index, arrays


def scores_fingerprint(by_origin: dict[str, ScoreMap], method: str, model_fp: str, stats_fp: str) -> str:
    index, arrays = _scores_index(by_origin)
    return fingerprint({"method": method, "model": model_fp, "stats": stats_fp, "index": index}, arrays)


def save_scores(path, by_origin: dict[str, ScoreMap], method: str, model_fp: str, stats_fp: str) -> None:
    index, arrays = _scores_index(by_origin)
    meta = {
        "format": "importance-scores",
        "version": FORMAT_VERSION,
        "method": method,
        "model_fingerprint": model_fp,
        "stats_fingerprint": stats_fp,
        "index": index,
        "fingerprint": scores_fingerprint(by_origin, method, model_fp, stats_fp),
    }
    save_npz(path, meta, arrays)


def load_scores(path) -> tuple[dict[str, ScoreMap], dict]:
    meta, arrays = load_npz(path)
    expect_format(meta, "importance-scores", path)
    by_origin: dict[str, ScoreMap] = {}
    for i, row in enumerate(meta["index"]):
        scores = ImportanceScores(
            layer=row["layer"],
            site=row["site"],
            origin=row["origin"],
            method=meta["method"],
            channel_scores=np.asarray(arrays[f"{i}.channel"], dtype=np.float64),
            head_scores=np.asarray(arrays[f"{i}.head"], dtype=np.float64) if row["heads"] else None,
        )
        by_origin.setdefault(row["origin"], {})[(row["layer"], row["site"])] = scores
    expected = scores_fingerprint(by_origin, meta["method"], meta["model_fingerprint"], meta["stats_fingerprint"])
    if expected != meta["fingerprint"]:
        raise ArtifactError(f"{path}: scores content does not match fingerprint")
    return by_origin, meta
