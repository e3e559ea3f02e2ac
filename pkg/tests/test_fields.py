import numpy as np
import pytest

from ccmlab.fields import (FieldError, GridField, apply_mask, dealias_mask, dft2, idft2, spectral_gradient,
                           wavenumbers)


def test_rejects_bad_shapes_and_values():
    with pytest.raises(FieldError):
        GridField(np.zeros((6, 8, 1)))
    with pytest.raises(FieldError):
        GridField(np.zeros((2, 2, 1)))
    bad = np.zeros((8, 8, 1))
    bad[0, 0, 0] = np.nan
    with pytest.raises(FieldError):
        GridField(bad)


def test_values_are_read_only_float64():
    f = GridField(np.ones((4, 4), dtype=np.float32))
    assert f.values.dtype == np.float64 and f.shape == (4, 4, 1)
    with pytest.raises(ValueError):
        f.values[0, 0, 0] = 2.0


def test_round_trip(rng):
    f = GridField(rng.standard_normal((16, 8, 3)), 2.0, 1.0)
    g = idft2(dft2(f))
    assert np.max(np.abs(g.values - f.values)) < 1e-13


def test_gradient_of_sine_mode():
    f = GridField(np.zeros((32, 32)), 2.0, 2.0)
    X, Y = f.coords()
    u = np.sin(2 * np.pi * 3 * X / 2.0) * np.cos(2 * np.pi * Y / 2.0)
    du = spectral_gradient(f.with_values(u), "x").values[..., 0]
    exact = (2 * np.pi * 3 / 2.0) * np.cos(2 * np.pi * 3 * X / 2.0) * np.cos(2 * np.pi * Y / 2.0)
    assert np.max(np.abs(du - exact)) < 1e-11
    dv = spectral_gradient(f.with_values(u), "y").values[..., 0]
    exact_y = -(2 * np.pi / 2.0) * np.sin(2 * np.pi * 3 * X / 2.0) * np.sin(2 * np.pi * Y / 2.0)
    assert np.max(np.abs(dv - exact_y)) < 1e-11


def test_gradient_of_constant_is_zero():
    f = GridField(np.full((8, 8, 2), 3.5))
    assert np.max(np.abs(spectral_gradient(f, "y").values)) < 1e-14


def test_nyquist_mode_has_zero_derivative():
    f = GridField(np.zeros((8, 8)))
    X, _ = f.coords()
    u = np.cos(np.pi * 8 * X)  # n = W/2
    assert np.max(np.abs(spectral_gradient(f.with_values(u), "x").values)) < 1e-12


def test_dealias_mask_counts():
    m = dealias_mask(32, 32)
    # |n| <= 10 on each axis -> 21 modes per axis
    assert m.sum() == 21 * 21
    assert m[0, 0] and not m[16, 0] and not m[0, 11]
    F = dft2(GridField(np.ones((32, 32))))
    assert np.allclose(apply_mask(F, m).coeffs, F.coeffs)


def test_wavenumbers_scale_with_domain():
    KX, KY = wavenumbers(8, 8, 2 * np.pi, 2 * np.pi)
    assert KX[0, 1] == pytest.approx(1.0) and KY[1, 0] == pytest.approx(1.0)
