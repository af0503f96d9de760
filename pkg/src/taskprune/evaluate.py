"""Evaluation harness: choice accuracy, windowed perplexity, generation
speed, layer-sensitivity sweeps, strategy comparison, and the expert-vs-
mismatched-mask matrix."""

from __future__ import annotations

import csv
import io
import math
import time
from dataclasses import dataclass, field

import numpy as np

from .allocate import probe_schedule, solve_schedule, uniform_schedule
from .corpus import TaskRecord, Tokenizer, byte_tokenizer
from .model import TinyModel, forward, greedy_generate, sequence_logprob
from .prune import CompactModel, apply_mask, as_model, make_plan
from .scoring import ScoreMap, aggregate_general, default_general_weights, score_all
from .stats import collect_archive

DEFAULT_CONTEXT = 256
DEFAULT_WINDOW = 64
DEFAULT_PPL_SAMPLES = 32


@dataclass
class EvalReport:
    kind: str
    rows: list[dict]
    fingerprints: dict = field(default_factory=dict)
    wall_clock_s: float = 0.0   # metadata only; never written into the CSV body

    def to_csv(self) -> str:
        buf = io.StringIO()
        parts = [f"{k}={v}" for k, v in sorted(self.fingerprints.items())]
        buf.write(f"# kind={self.kind}" + ("".join(" " + p for p in parts)) + "\n")
        if not self.rows:
            return buf.getvalue()
        header = list(self.rows[0])
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(header)
        for row in self.rows:
            writer.writerow([_cell(row.get(h)) for h in header])
        return buf.getvalue()

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(self.to_csv())


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.10g}"
    return "" if v is None else str(v)


def relative_logit_diff(a: np.ndarray, b: np.ndarray) -> float:
    """Peak absolute difference relative to the larger logit scale."""
    scale = max(float(np.max(np.abs(a))), float(np.max(np.abs(b))), 1e-12)
    return float(np.max(np.abs(a - b))) / scale


# --- multiple choice ---------------------------------------------------------


def _require_options(records: list[TaskRecord]):
    for r in records:
        if len(r.options) < 2:
            raise ValueError(f"task {r.task_id!r}: multiple choice needs >= 2 options")


def mc_predictions(model, records: list[TaskRecord], tokenizer: Tokenizer | None = None) -> list[int]:
    """Length-normalized option ranking; ties go to the lower option index."""
    model = as_model(model)
    tokenizer = tokenizer or byte_tokenizer()
    _require_options(records)
    picks = []
    for rec in records:
        ctx = tokenizer.encode(rec.question)
        best_idx, best = 0, -math.inf
        for i, option in enumerate(rec.options):
            lp, n = sequence_logprob(model, ctx, tokenizer.encode(" " + option))
            score = lp / n
            if score > best:
                best_idx, best = i, score
        picks.append(best_idx)
    return picks


def eval_multiple_choice(model, records: list[TaskRecord], tokenizer: Tokenizer | None = None) -> float:
    picks = mc_predictions(model, records, tokenizer)
    hits = sum(1 for rec, pick in zip(records, picks) if rec.options[pick] == rec.answer)
    return hits / len(records)


def answer_nll(model, records: list[TaskRecord], tokenizer: Tokenizer | None = None) -> float:
    """Mean per-token negative log-likelihood of answers given questions."""
    model = as_model(model)
    tokenizer = tokenizer or byte_tokenizer()
    if not records:
        raise ValueError("no records")
    total_lp, total_n = 0.0, 0
    for rec in records:
        lp, n = sequence_logprob(model, tokenizer.encode(rec.question), tokenizer.encode(" " + rec.answer))
        total_lp += lp
        total_n += n
    return -total_lp / total_n


def _metric(model, records, tokenizer, metric: str) -> float:
    if metric == "nll":
        return answer_nll(model, records, tokenizer)
    if metric == "accuracy":
        return eval_multiple_choice(model, records, tokenizer)
    raise ValueError(f"unknown metric {metric!r}")


# --- perplexity --------------------------------------------------------------


def eval_ppl(model, tokens, context_len: int = DEFAULT_CONTEXT, window_len: int = DEFAULT_WINDOW,
             n_samples: int = DEFAULT_PPL_SAMPLES, seed: int = 0) -> float:
    """Perplexity over randomly placed windows, each conditioned on a fixed-
    length context."""
    model = as_model(model)
    tokens = np.asarray(tokens, dtype=np.int64)
    if context_len < 1 or window_len < 1 or n_samples < 1:
        raise ValueError("context_len, window_len, n_samples must be >= 1")
    span = context_len + window_len
    if tokens.size < span:
        raise ValueError(f"text has {tokens.size} tokens; need at least {span}")
    if span > model.config.max_seq:
        raise ValueError(f"context+window {span} exceeds max_seq {model.config.max_seq}")
    rng = np.random.default_rng(seed)
    starts = rng.integers(0, tokens.size - span + 1, size=n_samples)
    total_lp, total_n = 0.0, 0
    for s in starts:
        lp, n = sequence_logprob(model, tokens[s : s + context_len], tokens[s + context_len : s + span])
        total_lp += lp
        total_n += n
    return float(math.exp(-total_lp / total_n))


# --- speed -------------------------------------------------------------------


@dataclass
class SpeedReport:
    tokens_per_sec: float       # median over repeats
    runs: list[float]
    n_params: int
    speedup: float | None = None


def eval_speed(model, prompt_len: int = 16, gen_len: int = 12, repeats: int = 5,
               seed: int = 0, baseline_tps: float | None = None) -> SpeedReport:
    """Greedy-generation throughput, median of timed repeats after a warmup."""
    inner = as_model(model)
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    rng = np.random.default_rng(seed)
    prompt = rng.integers(0, inner.config.vocab_size, size=prompt_len)
    greedy_generate(inner, prompt, gen_len)  # warmup
    runs = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        greedy_generate(inner, prompt, gen_len)
        runs.append(gen_len / (time.perf_counter() - t0))
    tps = float(np.median(runs))
    speedup = tps / baseline_tps if baseline_tps else None
    return SpeedReport(tokens_per_sec=tps, runs=runs, n_params=inner.n_params(), speedup=speedup)


# --- structured sweeps -------------------------------------------------------


def remove_test(model: TinyModel, records: list[TaskRecord], scores: ScoreMap,
                layers: list[int], ratios: list[float], tokenizer: Tokenizer | None = None,
                metric: str = "nll") -> EvalReport:
    """Prune one layer at a time over a sparsity grid; metric per (layer, ratio)."""
    t0 = time.perf_counter()
    tokenizer = tokenizer or byte_tokenizer()
    cfg = model.config
    for layer in layers:
        if not 0 <= layer < cfg.n_layers:
            raise ValueError(f"layer {layer} out of range")
    rows = []
    for layer in layers:
        row: dict = {"layer": layer}
        for rho in ratios:
            sched = probe_schedule(cfg.n_layers, layer, rho)
            plan = make_plan(scores, sched, cfg.d_head)
            masked = apply_mask(model, plan)
            row[f"rho={rho:g}"] = _metric(masked, records, tokenizer, metric)
        rows.append(row)
    return EvalReport(
        kind=f"remove-test/{metric}",
        rows=rows,
        fingerprints={"model": model.fingerprint()},
        wall_clock_s=time.perf_counter() - t0,
    )


def compare_strategies(model: TinyModel, corpora: dict, records: list[TaskRecord], target: float,
                       method: str = "fluctuation", tokenizer: Tokenizer | None = None,
                       weights: dict | None = None, n_frozen: int = 1) -> EvalReport:
    """Uniform-ratio vs solved logistic schedule, same general scores."""
    t0 = time.perf_counter()
    tokenizer = tokenizer or byte_tokenizer()
    cfg = model.config
    archive = collect_archive(model, corpora, tokenizer.fingerprint())
    by_task = score_all(model, archive, method)
    general = aggregate_general(by_task, weights or default_general_weights(by_task))
    schedules = {
        "uniform": uniform_schedule(cfg.n_layers, target),
        "logistic": solve_schedule(cfg.n_layers, target, n_frozen=n_frozen),
    }
    rows = []
    has_options = all(len(r.options) >= 2 for r in records)
    for name, sched in schedules.items():
        plan = make_plan(general, sched, cfg.d_head)
        masked = apply_mask(model, plan)
        row = {"strategy": name, "target": target, "mean_nll": answer_nll(masked, records, tokenizer)}
        if has_options:
            row["accuracy"] = eval_multiple_choice(masked, records, tokenizer)
        rows.append(row)
    return EvalReport(
        kind=f"compare-strategies/{method}",
        rows=rows,
        fingerprints={"model": model.fingerprint(), "stats": archive.fingerprint()},
        wall_clock_s=time.perf_counter() - t0,
    )


def expert_vs_mismatch(model: TinyModel, corpora: dict, eval_sets: dict, target: float,
                       method: str = "fluctuation", tokenizer: Tokenizer | None = None,
                       n_frozen: int = 1) -> EvalReport:
    """Answer NLL of every eval task under every task's expert mask.

    Rows are eval tasks; columns the mask origins plus the dense baseline.
    Matched (diagonal) cells are expected to carry the lowest loss in their row.
    """
    t0 = time.perf_counter()
    tokenizer = tokenizer or byte_tokenizer()
    cfg = model.config
    missing = sorted(set(eval_sets) - set(corpora))
    if missing:
        raise ValueError(f"no statistics corpora for eval tasks {missing}")
    archive = collect_archive(model, corpora, tokenizer.fingerprint())
    by_task = score_all(model, archive, method)
    sched = solve_schedule(cfg.n_layers, target, n_frozen=n_frozen)
    masked = {
        task: apply_mask(model, make_plan(by_task[task], sched, cfg.d_head))
        for task in sorted(corpora)
    }
    rows = []
    for eval_task in sorted(eval_sets):
        row: dict = {"eval_task": eval_task, "dense": answer_nll(model, eval_sets[eval_task], tokenizer)}
        for mask_task, mm in masked.items():
            row[f"mask={mask_task}"] = answer_nll(mm, eval_sets[eval_task], tokenizer)
        rows.append(row)
    return EvalReport(
        kind=f"expert-matrix/{method}",
        rows=rows,
        fingerprints={"model": model.fingerprint(), "stats": archive.fingerprint()},
        wall_clock_s=time.perf_counter() - t0,
    )
