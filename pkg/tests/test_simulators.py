import numpy as np
import pytest

from ccmlab.fields import GridField
from ccmlab.simulators import (DOMAIN, CFLError, PositivityError, SimulationDiverged, sample_initial_condition,
                               simulate_diffreact, simulate_ns2d, simulate_rdb, simulate_shallow_water)


def _mode(N, L, n=1):
    x = np.arange(N) * (L / N)
    X, Y = np.meshgrid(x, x)
    return np.sin(2 * np.pi * n * X / L) * np.sin(2 * np.pi * n * Y / L)


# diffusion-reaction

def test_diffreact_zero_is_a_fixed_point():
    ic = GridField(np.zeros((16, 16, 2)), 2.0, 2.0)
    traj = simulate_diffreact(1e-3, 5e-3, 0.0, ic, 10)
    assert np.max(np.abs(traj)) <= 1e-12


def test_diffreact_heat_decay_without_reaction():
    L, a = 2.0, 0.7
    m = _mode(32, L)
    ic = GridField(np.stack([a * m, 0 * m], axis=-1), L, L)
    D_u = 1e-2
    traj = simulate_diffreact(D_u, 5e-3, 0.0, ic, 2, frame_dt=0.25, reaction=False)
    k2 = 2 * (2 * np.pi / L) ** 2
    expect = a * np.exp(-D_u * k2 * 0.5)
    amp = np.sum(traj[2, ..., 0] * m) / np.sum(m * m)
    assert abs(amp - expect) / expect < 1e-6


def test_diffreact_anchor_coefficients_bounded_and_nonconstant():
    ic = sample_initial_condition("diffreact", 3, 32)
    traj = simulate_diffreact(1e-3, 5e-3, 5e-3, ic, 8)
    assert np.all(np.isfinite(traj)) and np.max(np.abs(traj)) < 10
    assert np.std(traj[-1, ..., 0]) > 1e-3


def test_diffreact_blowup_names_step():
    ic = GridField(np.full((8, 8, 2), -40.0), 2.0, 2.0)
    with pytest.raises(SimulationDiverged, match="step"):
        simulate_diffreact(1e-3, 5e-3, 0.0, ic, 5, dt=0.05)


def test_diffreact_rejects_bad_inputs():
    with pytest.raises(ValueError):
        simulate_diffreact(-1.0, 5e-3, 0.0, GridField(np.zeros((8, 8, 2))), 1)
    with pytest.raises(ValueError):
        simulate_diffreact(1e-3, 5e-3, 0.0, GridField(np.zeros((8, 8, 1))), 1)


# Navier-Stokes

def test_ns2d_single_mode_decay():
    L, nu = 1.0, 1e-3
    m = _mode(32, L)
    traj = simulate_ns2d(nu, GridField(m, L, L), 4, frame_dt=0.5, dt=0.01)
    k2 = 2 * (2 * np.pi / L) ** 2
    for t in range(1, 5):
        amp = np.sum(traj[t, ..., 0] * m) / np.sum(m * m)
        assert abs(amp - np.exp(-nu * k2 * 0.5 * t)) / np.exp(-nu * k2 * 0.5 * t) < 1e-3


def test_ns2d_mean_vorticity_preserved():
    ic = sample_initial_condition("ns2d", 11, 32)
    traj = simulate_ns2d(1e-4, ic, 6, frame_dt=0.5, dt=0.01)
    assert np.max(np.abs(traj.mean(axis=(1, 2, 3)))) < 1e-10


def test_ns2d_strong_viscosity_dissipates_monotonically():
    ic = sample_initial_condition("ns2d", 2, 32)
    traj = simulate_ns2d(0.1, ic, 10, frame_dt=0.05, dt=0.01)
    norms = np.sqrt(np.mean(traj**2, axis=(1, 2, 3)))
    assert np.all(np.diff(norms) <= 0)


def test_ns2d_cfl_violation():
    ic = GridField(50 * _mode(32, 1.0), 1.0, 1.0)
    with pytest.raises(CFLError):
        simulate_ns2d(1e-4, ic, 1, frame_dt=0.1, dt=0.1)


def test_ns2d_rejects_nonzero_mean():
    with pytest.raises(ValueError):
        simulate_ns2d(1e-4, GridField(np.ones((16, 16)), 1.0, 1.0), 1)


@pytest.mark.parametrize("ratio", [0.6, 0.8, 1.0, 1.2, 1.5])
def test_ns2d_support_viscosities_accepted(ratio):
    ic = sample_initial_condition("ns2d", 0, 16)
    traj = simulate_ns2d(ratio * 1e-4, ic, 1, frame_dt=0.1)
    assert np.all(np.isfinite(traj))


# shallow water

def test_rdb_mass_conserved():
    traj = simulate_rdb(3.0, 20, seed=0, grid=32)
    mass = traj[..., 0].sum(axis=(1, 2))
    assert np.max(np.abs(mass - mass[0])) / mass[0] < 1e-6


def test_lake_at_rest_is_stationary():
    state = np.zeros((16, 16, 3))
    state[..., 0] = 1.3
    traj = simulate_shallow_water(state, 5.0, 5)
    assert np.max(np.abs(traj - traj[0])) <= 1e-12


@pytest.mark.parametrize("h", [1.7, 3.0, 4.8, 1.05, 6.6])
def test_rdb_family_heights_accepted(h):
    traj = simulate_rdb(h, 2, grid=16)
    assert np.all(traj > 0)


@pytest.mark.parametrize("h", [0.9, 1.0])
def test_rdb_rejects_heights_at_or_below_outer(h):
    with pytest.raises(ValueError):
        simulate_rdb(h, 2, grid=16)


def test_shallow_water_positivity_error():
    state = np.zeros((8, 8, 3))
    state[..., 0] = 1.0
    state[0, 0, 0] = -0.1
    with pytest.raises(PositivityError):
        simulate_shallow_water(state, 5.0, 1)


# initial conditions

@pytest.mark.parametrize("family", ["diffreact", "ns2d", "rdb"])
def test_initial_conditions_deterministic_and_distinct(family):
    kw = {"h_inner": 2.0} if family == "rdb" else {}
    a = sample_initial_condition(family, 7, 32, **kw).values
    b = sample_initial_condition(family, 7, 32, **kw).values
    c = sample_initial_condition(family, 8, 32, **kw).values
    assert np.array_equal(a, b)
    assert np.max(np.abs(a - c)) > 1e-3


def test_ns2d_ic_zero_mean():
    w = sample_initial_condition("ns2d", 123, 64).values
    assert abs(w.mean()) < 1e-14


def test_seed_accepts_64_bit_values():
    a = sample_initial_condition("diffreact", 2**63 + 5, 8).values
    assert np.all(np.isfinite(a))


@pytest.mark.parametrize("family,kw", [
    ("diffreact", dict(frame_dt=0.25)),
    ("ns2d", dict(frame_dt=0.5)),
    ("rdb", dict(frame_dt=0.05)),
])
def test_halving_time_step_changes_little(family, kw):
    if family == "diffreact":
        ic = sample_initial_condition(family, 0, 32)
        a = simulate_diffreact(1e-3, 5e-3, 5e-3, ic, 8, dt=0.01)[-1]
        b = simulate_diffreact(1e-3, 5e-3, 5e-3, ic, 8, dt=0.005)[-1]
    elif family == "ns2d":
        ic = sample_initial_condition(family, 0, 32)
        a = simulate_ns2d(1e-4, ic, 4, dt=0.01)[-1]
        b = simulate_ns2d(1e-4, ic, 4, dt=0.005)[-1]
    else:
        a = simulate_rdb(3.0, 10, grid=32, cfl=0.4)[-1]
        b = simulate_rdb(3.0, 10, grid=32, cfl=0.2)[-1]
    assert np.linalg.norm(a - b) / np.linalg.norm(b) < 1e-3


def test_domains():
    assert DOMAIN == {"diffreact": 2.0, "ns2d": 1.0, "rdb": 5.0}
