"""Coordinate selectors: known coordinate, rescaled coordinate, prefix argmin, oracle, wrong-sign."""
from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field

import numpy as np

MODES = ("coord", "scale", "prefix", "oracle", "wrong-sign")
OBJECTIVES = ("full-prefix", "mean-step", "first-step", "final-step", "recency-weighted")


class SelectionError(ValueError):
    pass


@dataclass(frozen=True)
class AlphaBank:
    values: tuple

    def __post_init__(self):
        v = tuple(float(a) for a in self.values)
        if any(b <= a for a, b in zip(v, v[1:])):
            raise SelectionError("alpha bank must be strictly increasing")
        for need in (-1.0, 0.0, 1.0):
            if need not in v:
                raise SelectionError(f"alpha bank must contain {need}")
        object.__setattr__(self, "values", v)

    @classmethod
    def default(cls) -> "AlphaBank":
        return cls(tuple(k / 4 for k in range(-6, 7)))

    @property
    def bounds(self) -> tuple[float, float]:
        return self.values[0], self.values[-1]

    def __iter__(self):
        return iter(self.values)

    def __len__(self):
        return len(self.values)


@dataclass(frozen=True)
class SelectorConfig:
    mode: str = "prefix"
    gamma: float = 1.0
    K: int = 4
    objective: str = "full-prefix"
    aggregate: str = "per-sample"

    def __post_init__(self):
        if self.mode not in MODES:
            raise SelectionError(f"unknown selector mode {self.mode!r}")
        if self.objective not in OBJECTIVES:
            raise SelectionError(f"unknown prefix objective {self.objective!r}")
        if self.aggregate not in ("per-sample", "per-task"):
            raise SelectionError("aggregate is per-sample or per-task")
        if self.K < 1:
            raise SelectionError("K must be at least 1")
        if not self.gamma > 0:
            raise SelectionError("gamma must be positive")


@dataclass
class SelectionResult:
    alpha: float
    candidates: tuple = ()
    losses: tuple = ()
    digest: str = ""
    mode: str = ""
    extra: dict = field(default_factory=dict)


def _clip(x, bounds):
    lo, hi = bounds
    return float(min(max(x, lo), hi))


def select_coord(s: float, bounds=(-1.5, 1.5)) -> float:
    if not math.isfinite(s):
        raise SelectionError("coordinate must be finite")
    return _clip(s, bounds)


def select_scale(s: float, gamma: float, bounds=(-1.5, 1.5)) -> float:
    if not gamma > 0:
        raise SelectionError("gamma must be positive")
    return select_coord(gamma * s, bounds)


def wrong_sign(s: float, bounds=(-1.5, 1.5)) -> float:
    """Negative control: the coordinate with its sign flipped."""
    return select_coord(-s, bounds)


def argmin_tie(alphas, losses) -> int:
    """Index of the smallest loss; ties prefer smaller |alpha|, then smaller alpha."""
    if len(alphas) == 0 or len(alphas) != len(losses):
        raise SelectionError("need one loss per candidate")
    key = [(l if math.isfinite(l) else math.inf, abs(a), a) for a, l in zip(alphas, losses)]
    return min(range(len(key)), key=key.__getitem__)


def calibrate_gamma(loss_fn, s_values, gamma_grid, bounds=(-1.5, 1.5)) -> tuple[float, list]:
    """Pick gamma minimizing the mean validation loss of theta(clip(gamma s)).

    ``loss_fn(i, alpha)`` is the rollout loss on validation regime ``i``.
    Returns ``(gamma, mean loss per grid value)``; ties go to the smallest gamma.
    """
    grid = sorted(float(g) for g in gamma_grid)
    if not grid or not len(s_values):
        raise SelectionError("calibration needs a gamma grid and validation regimes")
    means = []
    for g in grid:
        vals = [loss_fn(i, select_scale(s, g, bounds)) for i, s in enumerate(s_values)]
        means.append(float(np.mean(vals)))
    best = min(range(len(grid)), key=lambda i: (means[i], grid[i]))
    return grid[best], means


def frame_errors(pred: np.ndarray, truth: np.ndarray) -> np.ndarray:
    """Per-frame relative L2 for ``(..., F, H, W, C)`` arrays; shape ``(..., F)``."""
    num = np.sqrt(np.sum((pred - truth) ** 2, axis=(-3, -2, -1)))
    den = np.sqrt(np.sum(truth**2, axis=(-3, -2, -1)))
    if np.any(den == 0):
        raise SelectionError("zero-norm target frame")
    return num / den


def prefix_objective(pred: np.ndarray, truth: np.ndarray, objective: str) -> np.ndarray:
    """Score predicted frames 1..K against observed frames 1..K (leading axes kept)."""
    if objective == "full-prefix":
        num = np.sqrt(np.sum((pred - truth) ** 2, axis=(-4, -3, -2, -1)))
        return num / np.sqrt(np.sum(truth**2, axis=(-4, -3, -2, -1)))
    e = frame_errors(pred, truth)
    if objective == "mean-step":
        return e.mean(axis=-1)
    if objective == "first-step":
        return e[..., 0]
    if objective == "final-step":
        return e[..., -1]
    if objective == "recency-weighted":
        w = np.arange(1, e.shape[-1] + 1, dtype=np.float64)
        return (e * w).sum(axis=-1) / w.sum()
    raise SelectionError(f"unknown prefix objective {objective!r}")


def _digest(*parts) -> str:
    h = hashlib.sha256()
    for p in parts:
        h.update(np.ascontiguousarray(p).tobytes() if isinstance(p, np.ndarray) else repr(p).encode())
    return h.hexdigest()


def select_prefix(rollout, bank: AlphaBank, prefix: np.ndarray, objective: str = "full-prefix",
                  aggregate: str = "per-sample", T: int | None = None) -> list[SelectionResult]:
    """Argmin over the bank of the prefix loss of theta(alpha) rolled out from u_0.

    ``prefix`` holds the observed frames ``u_{0:K}`` with shape ``(N, K+1, H, W, C)``;
    nothing beyond frame K is ever passed in. ``rollout(alpha, u0, K)`` returns
    predicted frames ``(N, K+1, H, W, C)`` for the composed checkpoint.
    Returns one result per sample (per-sample) or a single result (per-task).
    """
    prefix = np.asarray(prefix, dtype=np.float64)
    if prefix.ndim != 5:
        raise SelectionError("prefix must be (N, K+1, H, W, C)")
    K = prefix.shape[1] - 1
    if K < 1 or (T is not None and K >= T):
        raise SelectionError(f"prefix length K={K} must satisfy 1 <= K < T")
    if not np.all(np.isfinite(prefix)):
        raise SelectionError("non-finite values in the observed prefix")
    alphas = list(bank)
    table = np.stack([prefix_objective(np.asarray(rollout(a, prefix[:, 0], K))[:, 1:], prefix[:, 1:], objective)
                      for a in alphas], axis=1)  # (N, len(bank))
    dig = _digest(prefix, tuple(alphas), objective, aggregate)
    if aggregate == "per-task":
        mean = table.mean(axis=0)
        i = argmin_tie(alphas, mean)
        return [SelectionResult(alphas[i], tuple(alphas), tuple(float(x) for x in mean), dig, "prefix")]
    out = []
    for row in table:
        i = argmin_tie(alphas, row)
        out.append(SelectionResult(alphas[i], tuple(alphas), tuple(float(x) for x in row), dig, "prefix"))
    return out


def oracle_alpha(bank: AlphaBank, loss_fn) -> SelectionResult:
    """Diagnostic argmin of the full evaluation-window loss ``loss_fn(alpha)``."""
    alphas = list(bank)
    losses = [float(loss_fn(a)) for a in alphas]
    i = argmin_tie(alphas, losses)
    return SelectionResult(alphas[i], tuple(alphas), tuple(losses), _digest(tuple(alphas), tuple(losses)), "oracle")


SELECTION_FIELDS = ("family", "lam", "s", "mode", "K", "objective", "sample", "alpha_hat")


def selection_csv(rows, bank: AlphaBank) -> str:
    """CSV text; ``rows`` are dicts with SELECTION_FIELDS and optional ``losses``."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(SELECTION_FIELDS) + [f"loss[{a:g}]" for a in bank])
    for r in rows:
        losses = r.get("losses") or ()
        w.writerow([_fmt(r[k]) for k in SELECTION_FIELDS] + [_fmt(x) for x in losses] + [""] * (len(bank) - len(losses)))
    return buf.getvalue()


def _fmt(x):
    if isinstance(x, float):
        return repr(x)
    return x
