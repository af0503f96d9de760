"""Pruning plans, mask application, and physical compaction.

A plan records which MLP channels and attention heads survive per layer.
floor(ratio * count) lowest-scoring units are pruned; ties resolve to the
lower index via a stable argsort, so plans are fully deterministic.
Masking zeroes the unit's weight slices in place; compaction removes them,
shrinking the matrices. Both paths must produce the same logits (up to
float32 summation order), which the tests enforce.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .allocate import SparsitySchedule
from .model import SITE_ATTN, SITE_MLP, SITES, TinyModel
from .scoring import ImportanceScores, ScoreMap
from .serialize import FORMAT_VERSION, ArtifactError, expect_format, fingerprint, load_json, save_json

SiteKey = tuple  # (layer, site)


@dataclass
class PrunePlan:
    keep: dict                 # (layer, site) -> sorted kept unit indices
    totals: dict               # (layer, site) -> unit count (channels or heads)
    d_head: int
    source: dict = field(default_factory=dict)

    def __post_init__(self):
        if set(self.keep) != set(self.totals):
            raise ValueError("keep and totals must cover the same sites")
        for key, kept in self.keep.items():
            kept = np.asarray(kept, dtype=np.int64)
            total = self.totals[key]
            if kept.size and (kept.min() < 0 or kept.max() >= total):
                raise ValueError(f"site {key}: kept index out of range")
            if np.any(np.diff(kept) <= 0):
                raise ValueError(f"site {key}: kept indices must be strictly increasing")
            self.keep[key] = kept

    @property
    def n_layers(self) -> int:
        return 1 + max(k[0] for k in self.keep)

    def pruned(self, key) -> np.ndarray:
        mask = np.ones(self.totals[key], dtype=bool)
        mask[self.keep[key]] = False
        return np.flatnonzero(mask)

    def n_pruned(self, key) -> int:
        return self.totals[key] - self.keep[key].size

    def is_identity(self) -> bool:
        return all(self.keep[k].size == self.totals[k] for k in self.keep)

    def to_dict(self) -> dict:
        return {
            "d_head": self.d_head,
            "sites": [
                {"layer": k[0], "site": k[1], "total": int(self.totals[k]),
                 "keep": [int(i) for i in self.keep[k]]}
                for k in sorted(self.keep)
            ],
            "source": self.source,
        }

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())

    def save(self, path) -> None:
        doc = {"format": "prune-plan", "version": FORMAT_VERSION}
        doc.update(self.to_dict())
        doc["fingerprint"] = self.fingerprint()
        save_json(path, doc)


def load_plan(path) -> PrunePlan:
    doc = load_json(path)
    expect_format(doc, "prune-plan", path)
    keep, totals = {}, {}
    for row in doc["sites"]:
        key = (row["layer"], row["site"])
        keep[key] = np.asarray(row["keep"], dtype=np.int64)
        totals[key] = row["total"]
    plan = PrunePlan(keep=keep, totals=totals, d_head=doc["d_head"], source=doc.get("source", {}))
    if plan.fingerprint() != doc.get("fingerprint"):
        raise ArtifactError(f"{path}: plan content does not match fingerprint")
    return plan


def _prune_count(ratio: float, total: int) -> int:
    # guard the floor against float dust (0.3 * 10 must prune 3, not 2)
    return int(math.floor(ratio * total + 1e-9))


def make_plan(scores: ScoreMap, schedule: SparsitySchedule, d_head: int, source: dict | None = None) -> PrunePlan:
    """Keep the highest-scoring units at each site per the schedule's ratio."""
    keep, totals = {}, {}
    for layer in range(schedule.n_layers):
        ratio = float(schedule.ratios[layer])
        for site in SITES:
            key = (layer, site)
            if key not in scores:
                raise ValueError(f"no scores for layer {layer} site {site!r}")
            s = scores[key]
            if site == SITE_ATTN:
                if s.head_scores is None:
                    raise ValueError(f"layer {layer}: attention scores lack head aggregation")
                values = s.head_scores
            else:
                values = s.channel_scores
            total = values.size
            k = _prune_count(ratio, total)
            if k >= total:
                raise ValueError(f"layer {layer} {site}: ratio {ratio} would prune every unit")
            order = np.argsort(values, kind="stable")  # ties: lower index pruned first
            keep[key] = np.sort(order[k:])
            totals[key] = total
    return PrunePlan(keep=keep, totals=totals, d_head=d_head, source=dict(source or {}))


def _head_channels(heads: np.ndarray, d_head: int) -> np.ndarray:
    return (np.asarray(heads, dtype=np.int64)[:, None] * d_head + np.arange(d_head)).ravel()


def _check_fit(model: TinyModel, plan: PrunePlan) -> None:
    if plan.d_head != model.config.d_head:
        raise ValueError("plan d_head does not match model")
    if plan.n_layers != model.config.n_layers:
        raise ValueError(f"plan covers {plan.n_layers} layers but model has {model.config.n_layers}")
    for (layer, site), total in plan.totals.items():
        lw = model.layers[layer]
        have = lw.d_ff if site == SITE_MLP else lw.n_heads(model.config.d_head)
        if have != total:
            raise ValueError(f"layer {layer} {site}: plan expects {total} units, model has {have}")


def apply_mask(model: TinyModel, plan: PrunePlan) -> TinyModel:
    """Zero pruned slices; shapes (and surviving weights) stay bit-identical."""
    _check_fit(model, plan)
    out = model.copy()
    for (layer, site), kept in plan.keep.items():
        lw = out.layers[layer]
        if site == SITE_MLP:
            gone = plan.pruned((layer, site))
            lw.w_gate[:, gone] = 0.0
            lw.w_up[:, gone] = 0.0
            lw.w_down[gone, :] = 0.0
        else:
            gone = _head_channels(plan.pruned((layer, site)), plan.d_head)
            lw.wq[:, gone] = 0.0
            lw.wk[:, gone] = 0.0
            lw.wv[:, gone] = 0.0
            lw.wo[gone, :] = 0.0
    return out


@dataclass
class CompactModel:
    """Physically pruned model plus the plan that produced it."""

    model: TinyModel
    plan: PrunePlan

    @property
    def config(self):
        return self.model.config

    def n_params(self) -> int:
        return self.model.n_params()

    def fingerprint(self) -> str:
        return self.model.fingerprint()


def as_model(m) -> TinyModel:
    return m.model if isinstance(m, CompactModel) else m


def compact(model: TinyModel, plan: PrunePlan) -> CompactModel:
    """Drop pruned channels and heads from the weight matrices."""
    _check_fit(model, plan)
    layers = []
    for layer, lw in enumerate(model.layers):
        mlp_keep = plan.keep[(layer, SITE_MLP)]
        attn_keep = _head_channels(plan.keep[(layer, SITE_ATTN)], plan.d_head)
        if mlp_keep.size == 0 or attn_keep.size == 0:
            raise ValueError(f"layer {layer}: compaction would remove every unit")
        layers.append(
            type(lw)(
                wq=np.ascontiguousarray(lw.wq[:, attn_keep]),
                wk=np.ascontiguousarray(lw.wk[:, attn_keep]),
                wv=np.ascontiguousarray(lw.wv[:, attn_keep]),
                wo=np.ascontiguousarray(lw.wo[attn_keep, :]),
                w_gate=np.ascontiguousarray(lw.w_gate[:, mlp_keep]),
                w_up=np.ascontiguousarray(lw.w_up[:, mlp_keep]),
                w_down=np.ascontiguousarray(lw.w_down[mlp_keep, :]),
                norm_attn=lw.norm_attn.copy(),
                norm_mlp=lw.norm_mlp.copy(),
            )
        )
    pruned_model = TinyModel(
        config=model.config,
        embed=model.embed.copy(),
        layers=layers,
        norm_out=model.norm_out.copy(),
        w_out=model.w_out.copy(),
    )
    return CompactModel(model=pruned_model, plan=plan)


@dataclass
class PlanDiff:
    per_site: dict    # (layer, site) -> Jaccard of the pruned sets
    mean: float


def plan_diff(a: PrunePlan, b: PrunePlan) -> PlanDiff:
    """Jaccard similarity of pruned sets, per site and averaged."""
    if set(a.keep) != set(b.keep):
        raise ValueError("plans cover different (layer, site) sets")
    per_site = {}
    for key in sorted(a.keep):
        if a.totals[key] != b.totals[key]:
            raise ValueError(f"site {key}: plans disagree on unit count")
        pa, pb = set(a.pruned(key).tolist()), set(b.pruned(key).tolist())
        union = pa | pb
        per_site[key] = 1.0 if not union else len(pa & pb) / len(union)
    return PlanDiff(per_site=per_site, mean=float(np.mean(list(per_site.values()))))
