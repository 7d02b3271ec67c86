import numpy as np
import pytest
from numpy.testing import assert_allclose

from bcif.timeops import TimeGrid, dt_stencil, time_derivative


def test_timegrid_validation():
    with pytest.raises(ValueError):
        TimeGrid(4)
    with pytest.raises(ValueError):
        TimeGrid(1)
    tg = TimeGrid(9)
    assert tg.times[0] == 0.0 and tg.times[-1] == 1.0
    assert_allclose(np.diff(tg.times), tg.dt)


@pytest.mark.parametrize("coeffs", [(1.0, 0.0, 0.0), (0.3, -2.0, 0.0), (0.5, 1.0, 2.0)])
def test_stencils_exact_on_quadratics(coeffs):
    tg = TimeGrid(5)
    a, b, c = coeffs
    vals = [a + b * t + c * t * t for t in tg.times]
    for j in range(tg.n_time):
        d = time_derivative(tg, j, lambda i: np.array(vals[i]))
        want = b + 2 * c * tg.times[j]
        assert abs(float(d) - want) < 1e-12


def test_stencil_weights_sum_to_zero():
    tg = TimeGrid(7)
    for j in range(tg.n_time):
        _, wts = dt_stencil(tg, j)
        assert abs(sum(wts)) < 1e-12
