import os

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ccmlab.datasets import (DatasetError, build_family, read_dataset, read_trajectory, write_dataset,
                             write_trajectory)
from ccmlab.families import FamilyError, FamilySpec, RegimeTask, load_preset, normalize_coordinate, preset_names


def dense_spec(**kw):
    base = dict(family="diffreact", axis="D_u", lam_low=8e-4, lam_high=1.2e-3, center=1e-3,
                support=(9e-4, 1e-3, 1.1e-3), fixed={"D_v": 5e-3, "k": 5e-3})
    base.update(kw)
    return FamilySpec(**base)


def test_endpoints_and_midpoint():
    sp = FamilySpec("ns2d", "nu", 6e-5, 1.5e-4, (1e-4,))
    assert normalize_coordinate(6e-5, sp) == -1.0
    assert normalize_coordinate(1.5e-4, sp) == 1.0
    assert normalize_coordinate(sp.lam_mid, sp) == pytest.approx(0.0, abs=1e-12)


def test_dense_diffreact_values():
    sp = dense_spec()
    assert normalize_coordinate(1.2e-3, sp) == 1.0
    assert normalize_coordinate(1.4e-3, sp) == pytest.approx(2.0, rel=1e-12)
    assert normalize_coordinate(6e-4, sp) == pytest.approx(-2.0, rel=1e-12)


def test_piecewise_axis_when_half_gaps_differ():
    sp = dense_spec(lam_low=6e-4)  # low half-gap 4e-4, high half-gap 2e-4
    assert normalize_coordinate(6e-4, sp) == -1.0
    assert normalize_coordinate(8e-4, sp) == pytest.approx(-0.5)
    assert normalize_coordinate(1.1e-3, sp) == pytest.approx(0.5)


@given(st.floats(0.1, 10.0), st.floats(0.01, 10.0), st.lists(st.integers(-40, 40), min_size=2, max_size=6, unique=True))
def test_affine_and_increasing(lo, gap, xs):
    sp = FamilySpec("ns2d", "nu", lo, lo + gap, ())
    assert normalize_coordinate(sp.lam_low, sp) == -1.0 and normalize_coordinate(sp.lam_high, sp) == 1.0
    lams = sorted(sp.lam_mid + x / 8 * gap for x in xs)
    s = [normalize_coordinate(l, sp) for l in lams if l > 0]
    assert all(b > a for a, b in zip(s, s[1:]))
    for l, v in zip([l for l in lams if l > 0], s):
        assert v == pytest.approx(2 * (l - sp.lam_mid) / gap, abs=1e-9)


def test_degenerate_and_invalid_axes():
    with pytest.raises(FamilyError):
        FamilySpec("ns2d", "nu", 1e-4, 1e-4, ())
    with pytest.raises(FamilyError):
        FamilySpec("rdb", "h_inner", 1.7, 4.8, (3.0,), ({"lam": 0.9},))
    FamilySpec("rdb", "h_inner", 1.7, 4.8, (2.0, 3.0, 4.2), ({"lam": 1.05}, {"lam": 6.6}))


def test_regime_task_invariants():
    with pytest.raises(FamilyError):
        RegimeTask(1.0, "endpoint-low", -0.5, (0,))
    with pytest.raises(FamilyError):
        RegimeTask(1.0, "interpolation", 1.5, (0,))
    with pytest.raises(FamilyError):
        RegimeTask(1.0, "ood-high", 0.5, (0,))
    with pytest.raises(FamilyError):
        RegimeTask(1.0, "support", 1.0, (0,))


def test_roles_from_coordinate():
    sp = dense_spec(evaluation=({"lam": 1.4e-3}, {"lam": 9.5e-4}, {"lam": 1.2e-3}, {"lam": 6e-4}))
    roles = {t.name: t.role for t in sp.tasks()}
    assert roles["eval_ood-high_0.0014"] == "ood-high"
    assert roles["eval_interpolation_0.00095"] == "interpolation"
    assert roles["eval_endpoint-high_0.0012"] == "endpoint-high"
    assert roles["eval_ood-low_0.0006"] == "ood-low"
    # endpoints come first by construction
    assert [t.role for t in sp.tasks()[:2]] == ["endpoint-low", "endpoint-high"]


def test_presets_load_and_validate():
    names = preset_names()
    assert {"diffreact-dense", "ns2d-viscosity", "rdb-high-center"} <= set(names)
    for n in names:
        FamilySpec.from_dict(load_preset(n)["family"]).tasks()


def test_build_family_counts_and_roundtrip(tmp_path):
    sp = dense_spec(grid=8, T=3, evaluation=({"lam": 6e-4}, {"lam": 1.4e-3}), time={"dt": 0.05})
    data = build_family(sp, samples_per_regime=4)
    assert len(data) == 7
    assert sum(len(d.trajectories) for d in data.values()) == 28
    for name, ds in data.items():
        write_dataset(ds, tmp_path / name, sp)
        back = read_dataset(tmp_path / name)
        assert back.manifest() == ds.manifest()
        assert all(np.array_equal(a, b) for a, b in zip(back.trajectories, ds.trajectories))


def test_ns2d_shared_seed_banks():
    sp = FamilySpec("ns2d", "nu", 6e-5, 1.5e-4, (1e-4,), ({"lam": 3e-4},), grid=16, T=1,
                    time={"frame_dt": 0.05}, train_seeds=(0, 1), eval_seeds=(0,))
    data = build_family(sp)
    first = [ds.trajectories[0][0] for ds in data.values()]
    assert all(np.array_equal(first[0], f) for f in first)


def test_parallel_generation_matches_serial():
    sp = dense_spec(grid=8, T=2, time={"dt": 0.05})
    a = build_family(sp, samples_per_regime=2, jobs=1)
    b = build_family(sp, samples_per_regime=2, jobs=2)
    for k in a:
        assert all(np.array_equal(x, y) for x, y in zip(a[k].trajectories, b[k].trajectories))


def test_trajectory_file_guards(tmp_path):
    p = tmp_path / "t.traj"
    write_trajectory(p, np.arange(2 * 4 * 4 * 1, dtype=float).reshape(2, 4, 4, 1))
    assert read_trajectory(p).shape == (2, 4, 4, 1)
    blob = open(p, "rb").read()
    open(p, "wb").write(blob[:-8])
    with pytest.raises(DatasetError, match="truncated"):
        read_trajectory(p)
    open(p, "wb").write(b"XXXXXXXX" + blob[8:])
    with pytest.raises(DatasetError, match="magic"):
        read_trajectory(p)
