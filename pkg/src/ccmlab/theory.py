"""Numerical checks of the interpolation lemma, the continuation bound and the
finite-difference reading of endpoint task vectors."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np


class TheoryError(ValueError):
    pass


class DegenerateFit(TheoryError):
    pass


def rms_norm(x: np.ndarray) -> float:
    """Empirical mean-square norm over every axis (samples, frames, grid, channels)."""
    x = np.asarray(x, dtype=np.float64)
    return float(np.sqrt(np.mean(x * x)))


def _check_grid(alphas) -> tuple[np.ndarray, float]:
    a = np.asarray(alphas, dtype=np.float64)
    if a.ndim != 1 or len(a) < 3:
        raise TheoryError("grid too coarse: need at least three points")
    d = np.diff(a)
    if np.any(d <= 0):
        raise TheoryError("alpha grid must be strictly increasing")
    if not np.allclose(d, d[0], rtol=1e-9, atol=0):
        raise TheoryError("alpha grid must be uniform")
    return a, float(d[0])


def empirical_curvature(alphas, values, delta: float, norm=rms_norm) -> np.ndarray:
    """||F(a+d) - 2F(a) + F(a-d)|| / d^2 at every grid point whose stencil is on the grid.

    ``values[i]`` is F at ``alphas[i]``; points without a full stencil get NaN.
    """
    a, h = _check_grid(alphas)
    step = delta / h
    k = int(round(step))
    if k < 1 or abs(step - k) > 1e-9 or 2 * k >= len(a):
        raise TheoryError(f"grid too coarse for delta={delta} (spacing {h})")
    out = np.full(len(a), np.nan)
    for i in range(k, len(a) - k):
        out[i] = norm(values[i + k] - 2 * values[i] + values[i - k]) / delta**2
    return out


def continuation_bound(eps_minus, eps_plus, K_E, alpha):
    """|1-a|/2 eps_- + |1+a|/2 eps_+ + |a^2-1|/2 K_E."""
    if min(eps_minus, eps_plus, K_E) < 0:
        raise TheoryError("bound inputs must be nonnegative")
    alpha = np.asarray(alpha, dtype=np.float64)
    b = np.abs(1 - alpha) / 2 * eps_minus + np.abs(1 + alpha) / 2 * eps_plus + np.abs(alpha**2 - 1) / 2 * K_E
    return float(b) if b.ndim == 0 else b


def interval_of(alpha: float) -> tuple[float, float]:
    """Smallest interval holding -1, +1 and alpha."""
    return min(-1.0, alpha), max(1.0, alpha)


# --------------------------------------------------------------------------
# two-point interpolation lemma on analytic curves


@dataclass
class LemmaReport:
    alphas: np.ndarray
    error: np.ndarray
    bound: np.ndarray

    @property
    def slack(self) -> np.ndarray:
        return self.bound - self.error

    @property
    def holds(self) -> bool:
        return bool(np.all(self.slack >= 0))


def verify_lemma_synthetic(phi, dd_sup, alphas, norm=np.linalg.norm) -> LemmaReport:
    """Compare ||phi(a) - l(a)|| with |a^2-1|/2 * sup_{I_a} ||phi''||.

    ``l`` is the line through phi(-1) and phi(1); ``dd_sup(lo, hi)`` returns
    the supremum of ||phi''|| over ``[lo, hi]``.
    """
    p_lo, p_hi = np.asarray(phi(-1.0)), np.asarray(phi(1.0))
    err, bnd = [], []
    for a in alphas:
        a = float(a)
        lin = (1 - a) / 2 * p_lo + (1 + a) / 2 * p_hi
        err.append(float(norm(np.asarray(phi(a)) - lin)))
        bnd.append(abs(a * a - 1) / 2 * dd_sup(*interval_of(a)))
    return LemmaReport(np.asarray(alphas, dtype=float), np.array(err), np.array(bnd))


def sup_abs_sin(lo: float, hi: float) -> float:
    """max |sin t| over [lo, hi]."""
    k = math.ceil((lo - math.pi / 2) / math.pi)
    if k * math.pi + math.pi / 2 <= hi:
        return 1.0
    return max(abs(math.sin(lo)), abs(math.sin(hi)))


# --------------------------------------------------------------------------
# endpoint task vectors as finite differences


@dataclass
class OrderReport:
    hs: np.ndarray
    shared_error: np.ndarray
    directional_error: np.ndarray
    shared_slope: float
    directional_slope: float


def _slope(hs, errs, strict):
    if np.any(errs <= 0):
        if strict:
            raise DegenerateFit("an error curve touches zero; log-log slope undefined")
        return math.nan
    return float(np.polyfit(np.log(hs), np.log(errs), 1)[0])


def finite_difference_orders(U, dU0, hs, r_minus=None, r_plus=None, norm=np.linalg.norm,
                             strict: bool = True) -> OrderReport:
    """Errors of the shared and directional endpoint updates against U(0) and h U'(0).

    Endpoints are U(-h) + r_-, U(h) + r_+ (residuals default to zero).
    """
    hs = np.asarray(hs, dtype=np.float64)
    u0 = np.asarray(U(0.0), dtype=np.float64)
    g0 = np.asarray(dU0, dtype=np.float64)
    rm = 0.0 if r_minus is None else np.asarray(r_minus)
    rp = 0.0 if r_plus is None else np.asarray(r_plus)
    sh, dr = [], []
    for h in hs:
        lo = np.asarray(U(-h)) + rm
        hi = np.asarray(U(h)) + rp
        sh.append(norm((lo + hi) / 2 - u0))
        dr.append(norm((hi - lo) / 2 - h * g0))
    sh, dr = np.array(sh, dtype=float), np.array(dr, dtype=float)
    return OrderReport(hs, sh, dr, _slope(hs, sh, strict), _slope(hs, dr, strict))


def phase_shifted_sine(phase: float = math.pi / 4, e=None):
    """U(q) = sin(q + phase) e and U'(0) = cos(phase) e.

    With phase 0 the shared error vanishes identically, so a nonzero phase is
    needed to observe both orders.
    """
    e = np.array([1.0]) if e is None else np.asarray(e, dtype=np.float64)
    return (lambda q: math.sin(q + phase) * e), math.cos(phase) * e


# --------------------------------------------------------------------------
# a-posteriori audit on sampled curves


@dataclass
class BoundReport:
    alphas: np.ndarray
    measured: np.ndarray
    bound: np.ndarray          # computable form, K_F + K_S
    bound_E: np.ndarray        # same with the direct curvature of E
    K_E: np.ndarray
    K_F: np.ndarray
    K_S: np.ndarray
    tolerance: np.ndarray
    L_S: float
    eps_minus: float
    eps_plus: float
    mismatch: list = field(default_factory=list)  # (alpha, s, measured, bound + L_S |alpha - s|)

    @property
    def slack(self) -> np.ndarray:
        return self.bound - self.measured

    @property
    def flagged(self) -> np.ndarray:
        return self.slack < -self.tolerance

    def rows(self):
        for i, a in enumerate(self.alphas):
            yield (float(a), self.measured[i], self.bound[i], self.bound_E[i], self.slack[i],
                   self.tolerance[i], self.K_E[i], self.K_F[i], self.K_S[i], bool(self.flagged[i]))


BOUND_HEADER = ("alpha", "measured", "bound", "bound_E", "slack", "tolerance", "K_E", "K_F", "K_S", "flagged")


def _sup_on(alphas, K, alpha):
    """Max of K over grid points strictly inside I_alpha (stencils stay inside I_alpha)."""
    lo, hi = interval_of(alpha)
    inside = (alphas > lo + 1e-12) & (alphas < hi - 1e-12) & np.isfinite(K)
    return float(np.max(K[inside])) if np.any(inside) else 0.0


def audit_curves(alphas, F, S, delta: float | None = None, norm=rms_norm, shift: int = 1) -> BoundReport:
    """Bound audit on sampled model curve ``F[i]`` and solution curve ``S[i]``.

    ``alphas`` is a uniform grid containing -1 and +1. The curvature sup over
    I_alpha is the max of the second difference over grid points inside it,
    which makes the discrete bound hold exactly; the reported tolerance is the
    Richardson estimate |K(delta) - K(2 delta)| / 3 scaled by |a^2 - 1| / 2.
    """
    a, h = _check_grid(alphas)
    delta = h if delta is None else delta
    i_lo = int(np.argmin(np.abs(a + 1)))
    i_hi = int(np.argmin(np.abs(a - 1)))
    if a[i_lo] != -1.0 or a[i_hi] != 1.0:
        raise TheoryError("alpha grid must contain -1 and +1")
    E = [F[i] - S[i] for i in range(len(a))]
    measured = np.array([norm(e) for e in E])
    eps_m, eps_p = measured[i_lo], measured[i_hi]
    KF = empirical_curvature(a, F, delta, norm)
    KS = empirical_curvature(a, S, delta, norm)
    KE = empirical_curvature(a, E, delta, norm)
    try:
        KE2 = empirical_curvature(a, E, 2 * delta, norm)
    except TheoryError:
        KE2 = np.full(len(a), np.nan)
    rich = np.abs(KE - KE2) / 3
    bound, bound_E, tol, kE, kF, kS = [], [], [], [], [], []
    for x in a:
        kf, ks, ke = _sup_on(a, KF, x), _sup_on(a, KS, x), _sup_on(a, KE, x)
        kE.append(ke)
        kF.append(kf)
        kS.append(ks)
        bound.append(continuation_bound(eps_m, eps_p, kf + ks, x))
        bound_E.append(continuation_bound(eps_m, eps_p, ke, x))
        tol.append(abs(x * x - 1) / 2 * _sup_on(a, rich, x))
    steps = [norm(S[i + 1] - S[i]) / h for i in range(len(a) - 1)]
    L_S = float(max(steps))
    mismatch = []
    for i in range(len(a) - shift):
        j = i + shift
        mismatch.append((float(a[i]), float(a[j]), norm(F[i] - S[j]), bound[i] + L_S * abs(a[i] - a[j])))
    return BoundReport(a, measured, np.array(bound), np.array(bound_E), np.array(kE), np.array(kF),
                       np.array(kS), np.array(tol), L_S, float(eps_m), float(eps_p), mismatch)
