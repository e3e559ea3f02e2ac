"""Rollout metrics over index sets, physics diagnostics and summary statistics.

"Benchmark-normalized" rollout L2 is taken to be the per-frame relative L2
norm ratio, averaged over the frames of an index set; samples are averaged
afterwards by the caller.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass

import numpy as np

from .simulators import DOMAIN, RDB_OUTER_HEIGHT


class MetricError(ValueError):
    pass


class DegenerateTruth(MetricError):
    pass


@dataclass(frozen=True)
class IndexSet:
    indices: tuple
    tag: str

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if list(idx) != sorted(set(idx)):
            raise MetricError("indices must be sorted and unique")
        if idx and idx[0] < 1:
            raise MetricError("index sets live in {1..T}")
        if self.tag not in ("full", "calibration", "future"):
            raise MetricError(f"unknown index-set tag {self.tag!r}")
        object.__setattr__(self, "indices", idx)

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)


def full_index(T: int) -> IndexSet:
    return IndexSet(tuple(range(1, T + 1)), "full")


def split_protocol(T: int, K: int) -> tuple[IndexSet, IndexSet]:
    """Calibration frames {1..K} and the reported future window {K+1..T}."""
    if not 1 <= K < T:
        raise MetricError(f"need 1 <= K < T, got K={K}, T={T}")
    return IndexSet(tuple(range(1, K + 1)), "calibration"), IndexSet(tuple(range(K + 1, T + 1)), "future")


def per_frame_l2(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Relative L2 of each frame of ``(F, H, W, C)`` arrays."""
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {truth.shape}")
    den = np.sqrt(np.sum(truth**2, axis=(-3, -2, -1)))
    if np.any(den == 0):
        raise DegenerateTruth("a reference frame has zero norm")
    return np.sqrt(np.sum((pred - truth) ** 2, axis=(-3, -2, -1))) / den


def rollout_l2(pred: np.ndarray, truth: np.ndarray, index) -> float:
    """Mean over t in ``index`` of ||pred_t - truth_t|| / ||truth_t|| (one sample)."""
    idx = list(index)
    if not idx:
        raise MetricError("empty index set")
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise MetricError(f"shape mismatch {pred.shape} vs {truth.shape}")
    return float(np.mean(per_frame_l2(pred[idx], truth[idx])))


# --------------------------------------------------------------------------
# summaries


@dataclass
class MetricReport:
    per_regime: dict      # regime -> mean over samples
    per_sample: dict      # regime -> list of per-sample values
    ood: tuple = ()

    @property
    def ood_mean(self) -> float:
        return float(np.mean([self.per_regime[r] for r in self.ood]))

    @property
    def ood_worst(self) -> float:
        return float(np.max([self.per_regime[r] for r in self.ood]))


def make_report(per_sample: dict, ood=()) -> MetricReport:
    per_regime = {k: float(np.mean(v)) for k, v in per_sample.items()}
    return MetricReport(per_regime, {k: list(map(float, v)) for k, v in per_sample.items()}, tuple(ood))


def relative_gain(base: float, method: float) -> float:
    if base == 0:
        raise MetricError("relative gain against a zero baseline")
    return (base - method) / base


def coordinate_correlation(pairs) -> float:
    """Sample Pearson correlation of ``(s, alpha)`` pairs."""
    a = np.asarray(pairs, dtype=np.float64)
    if a.ndim != 2 or a.shape[1] != 2 or len(a) < 3:
        raise MetricError("need at least 3 (s, alpha) pairs")
    x, y = a[:, 0] - a[:, 0].mean(), a[:, 1] - a[:, 1].mean()
    sx, sy = np.sqrt(np.sum(x * x)), np.sqrt(np.sum(y * y))
    if sx == 0 or sy == 0:
        raise MetricError("correlation undefined for a constant coordinate")
    return float(np.sum(x * y) / (sx * sy))


def win_loss_regret(base, method) -> tuple[int, int, float]:
    base = np.asarray(base, dtype=np.float64)
    method = np.asarray(method, dtype=np.float64)
    if base.shape != method.shape:
        raise MetricError("task lists differ in length")
    wins = int(np.sum(method < base))
    losses = int(np.sum(method > base))
    return wins, losses, float(np.sum(np.maximum(0.0, method - base)))


def bootstrap_ci(values, resamples: int = 10000, level: float = 0.95, seed: int = 0) -> tuple[float, float, float]:
    """Percentile bootstrap of the sample mean: ``(mean, lo, hi)``."""
    x = np.asarray(values, dtype=np.float64)
    if x.ndim != 1 or len(x) < 2:
        raise MetricError("bootstrap needs at least two samples")
    rng = np.random.default_rng(seed)
    idx = rng.integers(0, len(x), size=(resamples, len(x)))
    means = x[idx].mean(axis=1)
    q = (1 - level) / 2
    lo, hi = np.quantile(means, [q, 1 - q])
    return float(x.mean()), float(lo), float(hi)


# --------------------------------------------------------------------------
# physics diagnostics


@dataclass(frozen=True)
class PhysicsReport:
    values: dict

    def __post_init__(self):
        if any(v < 0 for v in self.values.values()):
            raise MetricError("physics diagnostics are nonnegative")


def _radial_profile(h: np.ndarray, L: float):
    H, W = h.shape
    dx = L / W
    c = (np.arange(W) + 0.5) * dx - L / 2
    X, Y = np.meshgrid(c, c)
    r = np.sqrt(X**2 + Y**2)
    bins = np.floor(r / dx).astype(int)
    nb = bins.max() + 1
    sums = np.bincount(bins.ravel(), h.ravel(), minlength=nb)
    counts = np.bincount(bins.ravel(), minlength=nb)
    rr = np.bincount(bins.ravel(), r.ravel(), minlength=nb)
    ok = counts > 0
    return rr[ok] / counts[ok], sums[ok] / counts[ok]


def front_radius(h: np.ndarray, L: float = DOMAIN["rdb"], h_outer: float = RDB_OUTER_HEIGHT) -> float:
    """Largest radius where the azimuthal mean height crosses (h_outer + h_center)/2."""
    r, p = _radial_profile(np.asarray(h, dtype=np.float64), L)
    thr = 0.5 * (h_outer + p[0])
    d = p - thr
    best = 0.0
    for i in range(len(d) - 1):
        if d[i] == 0:
            best = r[i]
        elif d[i] * d[i + 1] < 0:
            best = r[i] + (r[i + 1] - r[i]) * d[i] / (d[i] - d[i + 1])
    return float(best)


def physics_rdb(pred: np.ndarray, truth: np.ndarray, index, L: float = DOMAIN["rdb"]) -> PhysicsReport:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.ndim != 4 or pred.shape[-1] < 1 or pred.shape != truth.shape:
        raise MetricError("RDB diagnostics need matching (T+1, H, W, C>=1) height trajectories")
    idx = list(index)
    hp, ht = pred[idx, ..., 0], truth[idx, ..., 0]
    mass = np.abs(hp.mean(axis=(1, 2)) - ht.mean(axis=(1, 2)))
    std = np.abs(hp.std(axis=(1, 2)) - ht.std(axis=(1, 2)))
    front = np.abs(np.array([front_radius(a, L) - front_radius(b, L) for a, b in zip(hp, ht)]))
    return PhysicsReport({"mass_mae": float(mass.mean()), "std_mae": float(std.mean()),
                          "front_mae": float(front.mean())})


def enstrophy(w: np.ndarray) -> np.ndarray:
    """Spatial mean of squared vorticity, per frame."""
    return np.mean(np.asarray(w) ** 2, axis=(-3, -2, -1))


def physics_ns2d(pred: np.ndarray, truth: np.ndarray, index) -> PhysicsReport:
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.ndim != 4 or pred.shape[-1] != 1 or pred.shape != truth.shape:
        raise MetricError("NS2D diagnostics need matching (T+1, H, W, 1) vorticity trajectories")
    idx = list(index)
    mean_mae = np.abs(pred[idx].mean(axis=(1, 2, 3)) - truth[idx].mean(axis=(1, 2, 3))).mean()
    ens_mae = np.abs(enstrophy(pred[idx]) - enstrophy(truth[idx])).mean()
    return PhysicsReport({"vorticity_mean_mae": float(mean_mae), "enstrophy_mae": float(ens_mae),
                          "final_enstrophy": float(enstrophy(pred[-1]))})


# --------------------------------------------------------------------------
# CSV


def rows_to_csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in r])
    return buf.getvalue()


def read_csv(text: str) -> list[dict]:
    return list(csv.DictReader(io.StringIO(text)))
