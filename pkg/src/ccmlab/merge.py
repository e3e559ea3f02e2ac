"""Weight-space merges along the endpoint coordinate line, plus reference baselines."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .checkpoints import Checkpoint, LineageError, assert_same_lineage
from .weights import SchemaMismatch, WeightSet, flatten, unflatten


class MergeError(ValueError):
    pass


@dataclass(frozen=True)
class Decomposition:
    anchor: Checkpoint
    expert_low: Checkpoint
    expert_high: Checkpoint
    delta_low: WeightSet
    delta_high: WeightSet
    shared: WeightSet
    signed: WeightSet


def decompose(anchor: Checkpoint, expert_low: Checkpoint, expert_high: Checkpoint) -> Decomposition:
    for a, b in ((anchor, expert_low), (anchor, expert_high), (expert_low, expert_high)):
        assert_same_lineage(a, b)
    th0, sch = flatten(anchor.weights)
    dl = flatten(expert_low.weights)[0] - th0
    dh = flatten(expert_high.weights)[0] - th0
    return Decomposition(anchor, expert_low, expert_high,
                         unflatten(dl, sch), unflatten(dh, sch),
                         unflatten((dl + dh) / 2, sch), unflatten((dh - dl) / 2, sch))


@dataclass(frozen=True)
class CoordinateLine:
    """theta(alpha) = theta_0 + shared + alpha * signed, clipped later by selectors."""

    decomposition: Decomposition
    alpha_min: float = -1.5
    alpha_max: float = 1.5

    def __post_init__(self):
        if not (self.alpha_min <= -1.0 and self.alpha_max >= 1.0):
            raise MergeError(f"clip bounds [{self.alpha_min}, {self.alpha_max}] must contain [-1, 1]")

    @classmethod
    def from_checkpoints(cls, anchor, low, high, alpha_min=-1.5, alpha_max=1.5):
        return cls(decompose(anchor, low, high), alpha_min, alpha_max)

    @property
    def anchor(self) -> Checkpoint:
        return self.decomposition.anchor

    def weights_at(self, alpha: float) -> WeightSet:
        """Convex form ((1-a)/2) theta_low + ((1+a)/2) theta_high; exact at a in {-1, 0, 1}."""
        alpha = float(alpha)
        if not math.isfinite(alpha):
            raise MergeError("alpha must be finite")
        d = self.decomposition
        lo, sch = flatten(d.expert_low.weights)
        hi = flatten(d.expert_high.weights)[0]
        return unflatten(((1 - alpha) / 2) * lo + ((1 + alpha) / 2) * hi, sch)

    def weights_at_anchor_form(self, alpha: float) -> WeightSet:
        d = self.decomposition
        th0, sch = flatten(d.anchor.weights)
        return unflatten(th0 + flatten(d.shared)[0] + float(alpha) * flatten(d.signed)[0], sch)


def _derived(anchor: Checkpoint, weights: WeightSet, role: str, **lineage) -> Checkpoint:
    lin = {"role": role, "anchor": anchor.anchor_hash, **lineage}
    return Checkpoint(weights, anchor.buffers, anchor.config, lin)


def compose_at(line: CoordinateLine, alpha: float) -> Checkpoint:
    d = line.decomposition
    return _derived(d.anchor, line.weights_at(alpha), "merged", alpha=float(alpha), method="ccm",
                    sources=[d.expert_low.content_hash, d.expert_high.content_hash])


def endpoint_average(line: CoordinateLine) -> Checkpoint:
    return compose_at(line, 0.0)


def _flat_deltas(anchor: Checkpoint, deltas) -> list[np.ndarray]:
    out = []
    for dlt in deltas:
        if dlt.schema != anchor.weights.schema:
            raise SchemaMismatch("task vector schema differs from the anchor")
        out.append(flatten(dlt)[0])
    return out


def task_arithmetic(anchor: Checkpoint, terms) -> Checkpoint:
    """theta_0 + sum_i w_i Delta_i for ``terms = [(Delta_i, w_i), ...]``."""
    terms = list(terms)
    th0, sch = flatten(anchor.weights)
    acc = th0.copy()
    for v, (_, w) in zip(_flat_deltas(anchor, [t[0] for t in terms]), terms):
        acc = acc + float(w) * v
    return _derived(anchor, unflatten(acc, sch), "baseline", method="task-arithmetic",
                    coefficients=[float(w) for _, w in terms])


def ties_merge(anchor: Checkpoint, deltas, trim: float = 0.2, scale: float = 1.0) -> Checkpoint:
    """Trim each task vector to its top ``trim`` fraction by magnitude, elect a
    sign per coordinate by summed mass, average the agreeing survivors."""
    if not 0 < trim <= 1:
        raise MergeError("trim fraction must lie in (0, 1]")
    flat = _flat_deltas(anchor, deltas)
    if not flat:
        raise MergeError("no task vectors")
    n = flat[0].size
    keep = int(math.ceil(trim * n))
    trimmed = []
    for v in flat:
        t = np.zeros_like(v)
        idx = np.argsort(-np.abs(v), kind="stable")[:keep]
        t[idx] = v[idx]
        trimmed.append(t)
    tv = np.stack(trimmed)
    sign = np.sign(tv.sum(axis=0))
    agree = (np.sign(tv) == sign) & (tv != 0)
    count = agree.sum(axis=0)
    merged = np.where(count > 0, (tv * agree).sum(axis=0) / np.maximum(count, 1), 0.0)
    th0, sch = flatten(anchor.weights)
    return _derived(anchor, unflatten(th0 + scale * merged, sch), "baseline", method="ties",
                    trim=float(trim), scale=float(scale))


def dare_merge(anchor: Checkpoint, deltas, p: float = 0.9, seed: int = 0, weights=None) -> Checkpoint:
    """Drop each coordinate with probability ``p``, rescale survivors by 1/(1-p), sum."""
    if not 0 <= p < 1:
        raise MergeError("drop probability must lie in [0, 1)")
    flat = _flat_deltas(anchor, deltas)
    weights = [1.0] * len(flat) if weights is None else [float(w) for w in weights]
    rng = np.random.default_rng(seed)
    th0, sch = flatten(anchor.weights)
    acc = th0.copy()
    for v, w in zip(flat, weights):
        mask = rng.random(v.size) >= p
        acc = acc + w * np.where(mask, v / (1 - p), 0.0)
    return _derived(anchor, unflatten(acc, sch), "baseline", method="dare", p=float(p), seed=int(seed),
                    coefficients=weights)


def output_ensemble(step_fns, weights, u0: np.ndarray, T: int) -> np.ndarray:
    """Autoregressive rollout of the prediction-space mixture sum_i w_i f_i(u)."""
    if len(step_fns) != len(weights):
        raise MergeError("one weight per expert")
    u = np.asarray(u0, dtype=np.float64)
    frames = [u]
    for _ in range(T):
        preds = [f(u) for f in step_fns]
        if any(p.shape != u.shape for p in preds):
            raise MergeError("expert predictions must match the state shape")
        u = sum(float(w) * p for w, p in zip(weights, preds))
        frames.append(u)
    return np.stack(frames)


__all__ = ["Decomposition", "CoordinateLine", "decompose", "compose_at", "endpoint_average",
           "task_arithmetic", "ties_merge", "dare_merge", "output_ensemble", "MergeError", "LineageError"]
