import numpy as np
import pytest
from numpy.testing import assert_allclose

from bcif.profiles import ClosedForm1D, EnergyProfile, HeatSource, TrigPoly1D
from bcif.series import FieldSeries


def test_trigpoly_eval_and_antiderivative():
    p = TrigPoly1D(mean=0.0, cos_coeffs=(1.0,), sin_coeffs=(0.0, 0.5))
    x = np.linspace(0, 2 * np.pi, 64, endpoint=False)
    assert_allclose(p(x), np.cos(x) + 0.5 * np.sin(2 * x))
    ad = p.antiderivative_from_zero(x)
    assert_allclose(ad, np.sin(x) + 0.25 * (1 - np.cos(2 * x)), atol=1e-14)
    assert ad[0] == 0.0


def test_closedform_integral():
    a = ClosedForm1D(poly=(1.0, 2.0), cos_amp=0.3, freq=2)
    t = np.linspace(0, 1, 11)
    want = t + t**2 + 0.3 * np.sin(4 * np.pi * t) / (4 * np.pi)
    assert_allclose(a.integral_from_zero(t), want, atol=1e-14)


def test_energy_profile_positivity():
    with pytest.raises(ValueError):
        EnergyProfile.affine(0.5, -1.0)  # goes negative on [0, 1]
    e = EnergyProfile.affine(1.0, 0.5)
    assert e.e_min == pytest.approx(1.0)
    assert e.e_max == pytest.approx(1.5)


def test_heat_source_slice():
    src = HeatSource(a=ClosedForm1D(poly=(2.0,)), b=TrigPoly1D(cos_coeffs=(1.0,)))
    x3 = np.linspace(0, 2 * np.pi, 16, endpoint=False)
    assert_allclose(src.slice_values(x3, 0.3), 2.0 * np.cos(x3))


@pytest.mark.parametrize("backing", ["ram", "disk"])
def test_field_series_roundtrip(backing):
    rng = np.random.default_rng(0)
    s = FieldSeries(3, (2, 8, 8, 8), backing=backing)
    arrs = [rng.standard_normal((2, 8, 8, 8)) for _ in range(3)]
    for j, a in enumerate(arrs):
        s.set(j, a)
    for j, a in enumerate(arrs):
        assert np.array_equal(s.get(j), a)
    assert not s.is_zero()


def test_field_series_zeros():
    s = FieldSeries.zeros(4, (8, 8, 8))
    assert s.is_zero()
    assert s.get(2).max() == 0.0
