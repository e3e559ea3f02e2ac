import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccmlab.metrics import (DegenerateTruth, IndexSet, MetricError, bootstrap_ci, coordinate_correlation, enstrophy,
                            front_radius, full_index, make_report, per_frame_l2, physics_ns2d, physics_rdb,
                            relative_gain, rollout_l2, rows_to_csv, read_csv, split_protocol, win_loss_regret)


def traj(rng, T=6, n=4, c=1):
    return rng.standard_normal((T + 1, n, n, c))


def test_rollout_l2_basic(rng):
    u = traj(rng)
    idx = full_index(6)
    assert rollout_l2(u, u, idx) == 0.0
    assert rollout_l2(2 * u, u, idx) == pytest.approx(1.0, rel=1e-15)


def test_rollout_l2_hand_case():
    truth = np.array([[[[1.0], [2.0]], [[3.0], [4.0]]]])
    pred = truth.copy()
    pred[0, 1, 1, 0] = 5.0
    full = np.concatenate([np.zeros_like(truth) + 1, truth])
    fpred = np.concatenate([np.zeros_like(truth) + 1, pred])
    assert rollout_l2(fpred, full, [1]) == pytest.approx(1 / math.sqrt(30), rel=1e-15)


@given(st.floats(0.1, 10) | st.floats(-10, -0.1))
def test_rollout_l2_scale_invariant(c):
    r = np.random.default_rng(5)
    u, v = traj(r), traj(r)
    assert rollout_l2(c * u, c * v, full_index(6)) == pytest.approx(rollout_l2(u, v, full_index(6)), rel=1e-12)


def test_rollout_l2_errors(rng):
    u = traj(rng)
    z = u.copy()
    z[2] = 0
    with pytest.raises(DegenerateTruth):
        rollout_l2(u, z, [2])
    with pytest.raises(MetricError):
        rollout_l2(u, u[:-1], [1])
    with pytest.raises(MetricError):
        rollout_l2(u, u, [])


def test_split_protocol_examples():
    cal, fut = split_protocol(10, 4)
    assert cal.indices == (1, 2, 3, 4) and fut.indices == tuple(range(5, 11))
    cal, fut = split_protocol(7, 1)
    assert cal.indices == (1,) and fut.indices == tuple(range(2, 8))
    for T, K in [(5, 0), (5, 5), (5, 9)]:
        with pytest.raises(MetricError):
            split_protocol(T, K)


def test_split_protocol_exhaustive():
    for T in range(2, 65):
        full = set(full_index(T))
        for K in range(1, T):
            cal, fut = split_protocol(T, K)
            assert set(cal) | set(fut) == full and not set(cal) & set(fut)
            assert cal.tag == "calibration" and fut.tag == "future"


def test_mean_decomposition(rng):
    T, K = 12, 4
    truth = traj(rng, T)
    pred = truth + 0.1 * traj(rng, T)
    cal, fut = split_protocol(T, K)
    whole = rollout_l2(pred, truth, full_index(T))
    parts = len(cal) / T * rollout_l2(pred, truth, cal) + len(fut) / T * rollout_l2(pred, truth, fut)
    assert whole == pytest.approx(parts, rel=1e-13)


def test_future_metric_monotone_and_blind_to_calibration(rng):
    T, K = 10, 4
    truth = traj(rng, T)
    pred = truth + 0.05 * traj(rng, T)
    _, fut = split_protocol(T, K)
    base = rollout_l2(pred, truth, fut)
    noisy_cal = pred.copy()
    noisy_cal[1:K + 1] += 3.0
    assert rollout_l2(noisy_cal, truth, fut) == base
    last = base
    for scale in (0.1, 0.5, 2.0):
        p = pred.copy()
        p[K + 1:] += scale * np.sign(pred[K + 1:] - truth[K + 1:])
        now = rollout_l2(p, truth, fut)
        assert now >= last
        last = now


def test_index_set_validation():
    with pytest.raises(MetricError):
        IndexSet((2, 1), "full")
    with pytest.raises(MetricError):
        IndexSet((0, 1), "full")
    with pytest.raises(MetricError):
        IndexSet((1,), "other")


def test_report_and_gain():
    rep = make_report({"a": [0.1, 0.3], "b": [0.4, 0.4], "c": [0.0, 0.2]}, ood=("a", "b"))
    assert rep.ood_mean == pytest.approx(0.3) and rep.ood_worst == pytest.approx(0.4)
    assert rep.ood_worst >= rep.ood_mean
    assert relative_gain(0.2, 0.15) == pytest.approx(0.25)
    with pytest.raises(MetricError):
        relative_gain(0.0, 0.1)


def test_physics_rdb_shift(rng):
    h = 1 + 0.1 * rng.random((5, 16, 16, 1))
    rep = physics_rdb(h, h, range(1, 5))
    assert all(v == 0 for v in rep.values.values())
    rep = physics_rdb(h + 0.3, h, range(1, 5))
    assert rep.values["mass_mae"] == pytest.approx(0.3, rel=1e-12)
    assert rep.values["std_mae"] == pytest.approx(0.0, abs=1e-14)
    with pytest.raises(MetricError):
        physics_rdb(h[..., 0], h[..., 0], [1])


def test_front_radius_on_a_disk():
    n, L = 64, 5.0
    c = (np.arange(n) + 0.5) * L / n - L / 2
    X, Y = np.meshgrid(c, c)
    r = np.sqrt(X**2 + Y**2)
    h = np.where(r < 1.0, 3.0, 1.0)
    assert front_radius(h, L) == pytest.approx(1.0, abs=L / n)


def test_enstrophy_single_mode():
    n = 32
    x = np.arange(n) * 2 * np.pi / n
    w = np.sin(x)[None, :, None] * np.ones((n, 1, 1))
    assert enstrophy(w) == pytest.approx(0.5, rel=1e-14)
    traj_ = np.stack([w, 0.5 * w])
    rep = physics_ns2d(traj_, traj_, [1])
    assert rep.values["enstrophy_mae"] == 0 and rep.values["final_enstrophy"] == pytest.approx(0.125)


def test_coordinate_correlation():
    s = np.array([-2.0, -1.0, 0.0, 0.5, 1.5])
    assert coordinate_correlation(np.c_[s, s]) == pytest.approx(1.0, abs=1e-15)
    assert coordinate_correlation(np.c_[s, -s]) == pytest.approx(-1.0, abs=1e-15)
    # x = 1,2,3,4; y = 1,3,2,4: deviations (-1.5,-.5,.5,1.5) and (-1.5,.5,-.5,1.5); r = 4/5
    assert coordinate_correlation([(1, 1), (2, 3), (3, 2), (4, 4)]) == pytest.approx(0.8, abs=1e-15)
    with pytest.raises(MetricError):
        coordinate_correlation([(1, 0), (2, 0), (3, 0)])
    with pytest.raises(MetricError):
        coordinate_correlation([(1, 0), (2, 1)])


def test_win_loss_regret():
    assert win_loss_regret([1, 2], [1, 2]) == (0, 0, 0.0)
    assert win_loss_regret([1, 2, 3], [0, 1, 2]) == (3, 0, 0.0)
    w, l, reg = win_loss_regret([0.5, 0.2, 0.4], [0.3, 0.25, 0.7])
    assert (w, l) == (1, 2) and reg == pytest.approx(0.05 + 0.3)
    with pytest.raises(MetricError):
        win_loss_regret([1], [1, 2])


def test_bootstrap_ci():
    assert bootstrap_ci([0.3] * 5) == (0.3, 0.3, 0.3)
    m, lo, hi = bootstrap_ci([0.0, 1.0], resamples=10000)
    # resampled mean ~ Binomial(2, 1/2) / 2: mass 1/4 at 0 and at 1, so the 2.5/97.5 percentiles are 0 and 1
    assert m == 0.5 and abs(lo - 0.0) <= 0.02 and abs(hi - 1.0) <= 0.02
    x = np.random.default_rng(3).standard_normal(20)
    m, lo, hi = bootstrap_ci(x, seed=7)
    assert lo <= m <= hi and bootstrap_ci(x, seed=7) == (m, lo, hi)
    with pytest.raises(MetricError):
        bootstrap_ci([1.0])


def test_csv_helpers():
    text = rows_to_csv(("a", "b"), [("x", 0.1), ("y", np.float64(1 / 3))])
    rows = read_csv(text)
    assert float(rows[1]["b"]) == 1 / 3
    assert rows_to_csv(("a",), []) == "a\n"


def test_per_frame_shape():
    assert per_frame_l2(np.ones((3, 2, 2, 1)), np.ones((3, 2, 2, 1))).shape == (3,)
