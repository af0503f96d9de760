"""Layer-wise sparsity schedules: logistic curve with a solved amplitude.

The logistic shape assigns low sparsity to early layers and high sparsity to
late ones; a frozen tail stays dense. The amplitude is bisected so the mean
ratio over ALL layers (frozen tail included) hits the requested global
sparsity exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .serialize import FORMAT_VERSION, ArtifactError, expect_format, fingerprint, load_json, save_json

DEFAULT_STEEPNESS = 1.0
DEFAULT_MIDPOINT = 0.3
DEFAULT_FROZEN = 1
DEFAULT_CAP = 0.95

_SOLVE_ITERS = 60
_MEAN_TOL = 1e-6


class InfeasibleError(ValueError):
    """The requested global sparsity cannot be met under cap and frozen tail."""


@dataclass
class SparsitySchedule:
    ratios: np.ndarray
    target: float
    kind: str = "logistic"            # logistic | uniform | probe
    amplitude: float = 0.0
    steepness: float = DEFAULT_STEEPNESS
    midpoint: float = DEFAULT_MIDPOINT
    n_frozen: int = 0
    rho_cap: float = DEFAULT_CAP

    def __post_init__(self):
        self.ratios = np.asarray(self.ratios, dtype=np.float64)
        if self.ratios.ndim != 1 or self.ratios.size < 1:
            raise ValueError("ratios must be a nonempty vector")
        if not np.all(np.isfinite(self.ratios)):
            raise ValueError("ratios must be finite")
        if self.ratios.min() < 0 or self.ratios.max() > self.rho_cap:
            raise ValueError(f"ratios must lie in [0, {self.rho_cap}]")
        if not 0 <= self.n_frozen <= self.ratios.size:
            raise ValueError("n_frozen out of range")
        if self.n_frozen and np.any(self.ratios[self.ratios.size - self.n_frozen :] != 0):
            raise ValueError("frozen tail layers must have ratio 0")
        if abs(float(self.ratios.mean()) - self.target) > 1e-4:
            raise ValueError(f"ratio mean {self.ratios.mean():.6f} does not match target {self.target}")

    @property
    def n_layers(self) -> int:
        return self.ratios.size

    def to_dict(self) -> dict:
        return {
            "ratios": [float(r) for r in self.ratios],
            "target": self.target,
            "kind": self.kind,
            "amplitude": self.amplitude,
            "steepness": self.steepness,
            "midpoint": self.midpoint,
            "n_frozen": self.n_frozen,
            "rho_cap": self.rho_cap,
        }

    def fingerprint(self) -> str:
        return fingerprint(self.to_dict())

    def save(self, path) -> None:
        doc = {"format": "sparsity-schedule", "version": FORMAT_VERSION}
        doc.update(self.to_dict())
        doc["fingerprint"] = self.fingerprint()
        save_json(path, doc)


def load_schedule(path) -> SparsitySchedule:
    doc = load_json(path)
    expect_format(doc, "sparsity-schedule", path)
    sched = SparsitySchedule(
        ratios=np.asarray(doc["ratios"], dtype=np.float64),
        target=doc["target"],
        kind=doc["kind"],
        amplitude=doc["amplitude"],
        steepness=doc["steepness"],
        midpoint=doc["midpoint"],
        n_frozen=doc["n_frozen"],
        rho_cap=doc["rho_cap"],
    )
    if sched.fingerprint() != doc.get("fingerprint"):
        raise ArtifactError(f"{path}: schedule content does not match fingerprint")
    return sched


def logistic_ratio(layer: int, n_layers: int, amplitude: float,
                   steepness: float = DEFAULT_STEEPNESS, midpoint: float = DEFAULT_MIDPOINT) -> float:
    """Amplitude-scaled logistic over normalized depth x = layer / (n_layers - 1)."""
    if n_layers < 2:
        raise ValueError("n_layers must be >= 2")
    if not 0 <= layer < n_layers:
        raise ValueError("layer out of range")
    x = layer / (n_layers - 1)
    return amplitude / (1.0 + math.exp(-steepness * (x - midpoint)))


def solve_schedule(
    n_layers: int,
    target: float,
    steepness: float = DEFAULT_STEEPNESS,
    midpoint: float = DEFAULT_MIDPOINT,
    n_frozen: int = DEFAULT_FROZEN,
    rho_cap: float = DEFAULT_CAP,
) -> SparsitySchedule:
    """Bisect the amplitude so mean(ratios) == target over all layers."""
    if n_layers < 2:
        raise ValueError("n_layers must be >= 2")
    if not 0 <= n_frozen < n_layers:
        raise ValueError("n_frozen must leave at least one prunable layer")
    if not 0 < rho_cap < 1:
        raise ValueError("rho_cap must lie in (0, 1)")
    if target < 0:
        raise ValueError("target must be >= 0")

    active = n_layers - n_frozen
    max_mean = rho_cap * active / n_layers
    if target >= max_mean and target > 0:
        raise InfeasibleError(
            f"global sparsity {target} unreachable with {n_frozen} frozen layers "
            f"and cap {rho_cap}: maximum achievable mean is {max_mean:.6f}"
        )

    shape = np.array(
        [logistic_ratio(l, n_layers, 1.0, steepness, midpoint) for l in range(active)],
        dtype=np.float64,
    )

    def mean_for(amplitude: float) -> float:
        return float(np.minimum(amplitude * shape, rho_cap).sum() / n_layers)

    if target == 0:
        amplitude = 0.0
    else:
        lo, hi = 0.0, rho_cap / float(shape.min())
        for _ in range(_SOLVE_ITERS):
            mid = 0.5 * (lo + hi)
            if mean_for(mid) < target:
                lo = mid
            else:
                hi = mid
        amplitude = 0.5 * (lo + hi)

    ratios = np.concatenate([np.minimum(amplitude * shape, rho_cap), np.zeros(n_frozen)])
    err = abs(float(ratios.mean()) - target)
    if err > _MEAN_TOL:
        raise InfeasibleError(f"amplitude search failed: mean off target by {err:.3g}")
    return SparsitySchedule(
        ratios=ratios,
        target=target,
        kind="logistic",
        amplitude=amplitude,
        steepness=steepness,
        midpoint=midpoint,
        n_frozen=n_frozen,
        rho_cap=rho_cap,
    )


def uniform_schedule(n_layers: int, target: float, rho_cap: float = DEFAULT_CAP) -> SparsitySchedule:
    """Flat baseline: every layer at the global ratio, no frozen tail."""
    if n_layers < 1:
        raise ValueError("n_layers must be >= 1")
    if not 0 <= target <= rho_cap:
        raise InfeasibleError(f"uniform ratio {target} outside [0, {rho_cap}]")
    return SparsitySchedule(
        ratios=np.full(n_layers, float(target)),
        target=float(target),
        kind="uniform",
        amplitude=0.0,
        steepness=0.0,
        midpoint=0.0,
        n_frozen=0,
        rho_cap=rho_cap,
    )


def probe_schedule(n_layers: int, layer: int, ratio: float, rho_cap: float = DEFAULT_CAP) -> SparsitySchedule:
    """Single-layer probe used by the layer-removal sensitivity sweep."""
    if not 0 <= layer < n_layers:
        raise ValueError("layer out of range")
    if not 0 <= ratio <= rho_cap:
        raise InfeasibleError(f"probe ratio {ratio} outside [0, {rho_cap}]")
    ratios = np.zeros(n_layers)
    ratios[layer] = ratio
    return SparsitySchedule(
        ratios=ratios,
        target=float(ratios.mean()),
        kind="probe",
        amplitude=0.0,
        steepness=0.0,
        midpoint=0.0,
        n_frozen=0,
        rho_cap=rho_cap,
    )
