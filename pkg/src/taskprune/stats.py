"""Streaming activation statistics per (layer, site, task).

Accumulators hold running sums and sums of squares per dimension, so corpora
can be collected in shards and merged; derived quantities (mean, population
variance, raw and prompt-normalized L2) come out of the sums at read time.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .corpus import TaskCorpus
from .model import SITES, TinyModel, forward_with_taps
from .serialize import FORMAT_VERSION, ArtifactError, expect_format, fingerprint, load_npz, save_npz


@dataclass
class ActivationStats:
    layer: int
    site: str
    task_id: str
    width: int
    n: int = 0          # pooled samples (token positions under default pooling)
    n_prompts: int = 0
    sum_x: np.ndarray = field(default=None)
    sum_xx: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.site not in SITES:
            raise ValueError(f"unknown site {self.site!r}")
        if self.width < 1:
            raise ValueError("width must be >= 1")
        if self.sum_x is None:
            self.sum_x = np.zeros(self.width, dtype=np.float64)
        if self.sum_xx is None:
            self.sum_xx = np.zeros(self.width, dtype=np.float64)

    @property
    def key(self) -> tuple[int, str, str]:
        return (self.layer, self.site, self.task_id)

    def add(self, sample) -> None:
        """Append one activation sample vector."""
        self.add_tokens(np.asarray(sample, dtype=np.float64)[None, :])

    def add_tokens(self, values: np.ndarray) -> None:
        """Append a (T, width) block of samples."""
        values = np.asarray(values, dtype=np.float64)
        if values.ndim != 2 or values.shape[1] != self.width:
            raise ValueError(f"expected (*, {self.width}) samples, got {values.shape}")
        self.n += values.shape[0]
        self.sum_x += values.sum(axis=0)
        self.sum_xx += np.square(values).sum(axis=0)

    def merge(self, other: "ActivationStats") -> "ActivationStats":
        if self.key != other.key or self.width != other.width:
            raise ValueError(f"cannot merge stats for {self.key} with {other.key}")
        return ActivationStats(
            layer=self.layer,
            site=self.site,
            task_id=self.task_id,
            width=self.width,
            n=self.n + other.n,
            n_prompts=self.n_prompts + other.n_prompts,
            sum_x=self.sum_x + other.sum_x,
            sum_xx=self.sum_xx + other.sum_xx,
        )

    def _require_samples(self):
        if self.n == 0:
            raise ValueError(f"stats {self.key}: no samples")

    def mean(self) -> np.ndarray:
        self._require_samples()
        return self.sum_x / self.n

    def var(self) -> np.ndarray:
        """Population variance; clamped at zero against rounding."""
        self._require_samples()
        m = self.sum_x / self.n
        return np.maximum(self.sum_xx / self.n - m * m, 0.0)

    def raw_l2(self) -> np.ndarray:
        return np.sqrt(self.sum_xx)

    def normalized_l2(self) -> np.ndarray:
        """Raw pooled L2 divided by the prompt count."""
        if self.n_prompts == 0:
            raise ValueError(f"stats {self.key}: no prompts recorded")
        return self.raw_l2() / self.n_prompts

    def l2_per_token(self) -> np.ndarray:
        self._require_samples()
        return self.raw_l2() / self.n


def merge(a: ActivationStats, b: ActivationStats) -> ActivationStats:
    return a.merge(b)


def collect(model: TinyModel, corpus: TaskCorpus, pool: str = "tokens") -> list[ActivationStats]:
    """Run the corpus through the model and accumulate both sites of every layer.

    pool="tokens" treats every token position as a sample; pool="prompt_mean"
    reduces each prompt to its mean activation first.
    """
    if pool not in ("tokens", "prompt_mean"):
        raise ValueError(f"unknown pooling {pool!r}")
    cfg = model.config
    stats = {
        (layer, site): ActivationStats(layer, site, corpus.task_id, model.site_width(layer, site))
        for layer in range(cfg.n_layers)
        for site in SITES
    }
    for seq in corpus.token_sequences:
        _, trace = forward_with_taps(model, seq)
        for (layer, site), acc in stats.items():
            values = trace.site_values(layer, site)
            if pool == "prompt_mean":
                values = values.mean(axis=0, keepdims=True)
            acc.add_tokens(values)
            acc.n_prompts += 1
    return list(stats.values())


@dataclass
class StatsArchive:
    model_fingerprint: str
    tokenizer_fingerprint: str
    pool: str = "tokens"
    entries: dict = field(default_factory=dict)

    def add(self, stats: ActivationStats) -> None:
        if stats.key in self.entries:
            raise ValueError(f"duplicate stats entry {stats.key}")
        self.entries[stats.key] = stats

    def get(self, layer: int, site: str, task_id: str) -> ActivationStats:
        try:
            return self.entries[(layer, site, task_id)]
        except KeyError:
            raise ValueError(f"no statistics for layer {layer} site {site!r} task {task_id!r}") from None

    @property
    def tasks(self) -> list[str]:
        return sorted({k[2] for k in self.entries})

    def sites(self, task_id: str) -> list[tuple[int, str]]:
        return sorted((k[0], k[1]) for k in self.entries if k[2] == task_id)

    def _index_meta(self) -> list[dict]:
        index = []
        for key in sorted(self.entries):
            s = self.entries[key]
            index.append(
                {"layer": s.layer, "site": s.site, "task": s.task_id,
                 "width": s.width, "n": s.n, "n_prompts": s.n_prompts}
            )
        return index

    def _arrays(self) -> dict[str, np.ndarray]:
        arrays = {}
        for i, key in enumerate(sorted(self.entries)):
            arrays[f"{i}.sum"] = self.entries[key].sum_x
            arrays[f"{i}.sumsq"] = self.entries[key].sum_xx
        return arrays

    def fingerprint(self) -> str:
        meta = {
            "model": self.model_fingerprint,
            "tokenizer": self.tokenizer_fingerprint,
            "pool": self.pool,
            "index": self._index_meta(),
        }
        return fingerprint(meta, self._arrays())

    def save(self, path) -> None:
        meta = {
            "format": "stats-archive",
            "version": FORMAT_VERSION,
            "model_fingerprint": self.model_fingerprint,
            "tokenizer_fingerprint": self.tokenizer_fingerprint,
            "pool": self.pool,
            "index": self._index_meta(),
            "fingerprint": self.fingerprint(),
        }
        save_npz(path, meta, self._arrays())


def load_archive(path) -> StatsArchive:
    meta, arrays = load_npz(path)
    expect_format(meta, "stats-archive", path)
    archive = StatsArchive(
        model_fingerprint=meta["model_fingerprint"],
        tokenizer_fingerprint=meta["tokenizer_fingerprint"],
        pool=meta.get("pool", "tokens"),
    )
    for i, row in enumerate(meta["index"]):
        archive.add(
            ActivationStats(
                layer=row["layer"],
                site=row["site"],
                task_id=row["task"],
                width=row["width"],
                n=row["n"],
                n_prompts=row["n_prompts"],
                sum_x=np.asarray(arrays[f"{i}.sum"], dtype=np.float64),
                sum_xx=np.asarray(arrays[f"{i}.sumsq"], dtype=np.float64),
            )
        )
    if archive.fingerprint() != meta["fingerprint"]:
        raise ArtifactError(f"{path}: archive content does not match its fingerprint")
    return archive


def collect_archive(model: TinyModel, corpora: dict, tokenizer_fingerprint: str, pool: str = "tokens") -> StatsArchive:
    archive = StatsArchive(model.fingerprint(), tokenizer_fingerprint, pool)
    for task_id in sorted(corpora):
        for stats in collect(model, corpora[task_id], pool=pool):
            archive.add(stats)
    return archive


# --- profiles, heatmaps, projections ----------------------------------------


def cosine(u, v) -> float:
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        return 0.0
    return float(np.dot(u, v) / (nu * nv))


def _minmax_row(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi == lo:
        return np.zeros_like(values)
    return (values - lo) / (hi - lo)


def export_heatmap(archive: StatsArchive, tasks: list[str]) -> list[tuple[str, int, str, np.ndarray]]:
    """Rows of (task, layer, site, min-max scaled normalized-L2 profile)."""
    rows = []
    for task in tasks:
        sites = archive.sites(task)
        if not sites:
            raise ValueError(f"no statistics for task {task!r}")
        for layer, site in sites:
            profile = archive.get(layer, site, task).normalized_l2()
            rows.append((task, layer, site, _minmax_row(profile)))
    return rows


def heatmap_csv(archive: StatsArchive, task: str) -> str:
    """One task block: header of dimension indices, first two columns layer, site.

    MLP and attention rows have different widths; short rows are padded with
    empty cells so the table stays rectangular.
    """
    rows = export_heatmap(archive, [task])
    width = max(r[3].size for r in rows)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["layer", "site"] + [str(i) for i in range(width)])
    for _, layer, site, profile in rows:
        cells = [f"{v:.6f}" for v in profile] + [""] * (width - profile.size)
        writer.writerow([layer, site] + cells)
    return buf.getvalue()


def _power_component(cov: np.ndarray, rng: np.random.Generator, iters: int = 200) -> tuple[np.ndarray, float]:
    v = rng.standard_normal(cov.shape[0])
    v /= np.linalg.norm(v)
    for _ in range(iters):
        w = cov @ v
        norm = np.linalg.norm(w)
        if norm == 0.0:
            break
        v = w / norm
    # deterministic sign: largest-magnitude coordinate is positive
    pivot = int(np.argmax(np.abs(v)))
    if v[pivot] < 0:
        v = -v
    return v, float(v @ cov @ v)


def project_hidden_states(model: TinyModel, corpora: dict, layer: int, seed: int = 0):
    """Mean-pooled residual-stream vector per prompt projected on the top two
    principal directions (power iteration). Returns (labels, coords)."""
    if not 0 <= layer < model.config.n_layers:
        raise ValueError(f"layer {layer} out of range")
    labels, vectors = [], []
    for task_id in sorted(corpora):
        for seq in corpora[task_id].token_sequences:
            _, trace = forward_with_taps(model, seq)
            vectors.append(trace.resid[layer].mean(axis=0))
            labels.append(task_id)
    if len(vectors) < 3:
        raise ValueError("need at least 3 prompts to project")
    X = np.asarray(vectors, dtype=np.float64)
    Xc = X - X.mean(axis=0)
    cov = (Xc.T @ Xc) / X.shape[0]
    rng = np.random.default_rng(seed)
    v1, lam1 = _power_component(cov, rng)
    deflated = cov - lam1 * np.outer(v1, v1)
    v2, _ = _power_component(deflated, rng)
    v2 -= (v2 @ v1) * v1
    norm = np.linalg.norm(v2)
    if norm > 0:
        v2 /= norm
    coords = Xc @ np.stack([v1, v2], axis=1)
    return labels, coords
