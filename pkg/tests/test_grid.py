import numpy as np
import pytest
from numpy.testing import assert_allclose

from bcif.grid import CarrierError, DealiasLog, GridSpec, make_grid

from conftest import random_bandlimited


def full(grid, expr):
    n = grid.n
    return np.broadcast_to(expr, (n, n, n)).copy()


def coords(grid):
    n = grid.n
    z = np.zeros((n, n, n))
    return (
        grid.x1[:, None, None] + z,
        grid.x1[None, :, None] + z,
        grid.x1[None, None, :] + z,
    )


def test_gridspec_validation():
    with pytest.raises(ValueError):
        GridSpec(12)
    with pytest.raises(ValueError):
        GridSpec(4)
    with pytest.raises(ValueError):
        GridSpec(16, padding_factor=1.25)
    GridSpec(16, padding_factor=1.5)


def test_derivative_examples(grid16):
    x1, _, _ = coords(grid16)
    assert np.abs(grid16.derivative(np.sin(x1), 0) - np.cos(x1)).max() < 1e-12
    assert np.abs(grid16.derivative(np.full((16, 16, 16), 3.7), 1)).max() < 1e-12
    # derivative output has zero mean
    f = random_bandlimited(grid16, kband=5, seed=1)
    assert abs(grid16.mean(grid16.derivative(f, 2))) < 1e-15


def test_div_of_curl_vanishes(grid32):
    v = random_bandlimited(grid32, kband=6, ncomp=3, seed=2)
    w = grid32.curl(v)
    assert np.abs(grid32.divergence(w)).max() < 1e-11 * max(1.0, np.abs(w).max())


def test_roundtrip_transform(grid32):
    f = random_bandlimited(grid32, kband=10, seed=3)
    assert np.abs(grid32.inv(grid32.fwd(f)) - f).max() < 1e-13 * np.abs(f).max()


def test_dealiased_product_examples(grid16):
    x1, _, _ = coords(grid16)
    log = DealiasLog()
    p = grid16.product(np.sin(x1), np.sin(x1), log=log)
    assert np.abs(p - (1 - np.cos(2 * x1)) / 2).max() < 1e-12
    assert log.overflow_count == 0


def test_product_parseval_oracle(grid32):
    f = random_bandlimited(grid32, kband=7, seed=4)
    g = random_bandlimited(grid32, kband=7, seed=5)
    prod = grid32.product(f, g)
    lhs = grid32.integral(prod)
    fh = grid32.fwd(f) / grid32.n**3
    gh = grid32.fwd(g) / grid32.n**3
    w = np.where((grid32.k3 == 0) | (grid32.k3 == grid32.n // 2), 1.0, 2.0)
    rhs = (2 * np.pi) ** 3 * float(np.sum(w * (fh * np.conj(gh)).real))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(rhs))


def test_overflow_flag_set_beyond_padded_band():
    grid = make_grid(16, padding_factor=1.5)
    x1, _, _ = coords(grid)
    # two band-edge modes whose product mode 14 exceeds the padded Nyquist 12
    f = np.cos(7 * x1)
    log = DealiasLog()
    grid.product(f, f, log=log)
    assert log.overflow_count >= 1
    assert log.max_truncated_rel > 1e-6


def test_product_exact_within_band(grid16):
    # combined bandwidth fits: exact to round-off, flag stays clean
    x1, x2, _ = coords(grid16)
    a = np.cos(3 * x1) * np.sin(2 * x2)
    b = np.sin(x1)
    log = DealiasLog()
    p = grid16.product(a, b, log=log)
    assert np.abs(p - a * b).max() < 1e-13
    assert log.overflow_count == 0


def test_modulated_wave_examples(grid16):
    x1, x2, x3 = coords(grid16)
    env = np.ones((16, 16, 16))
    w = grid16.modulated_wave(env, np.array([0.5, 0, 0], dtype=complex), (0, 0, 1))
    assert np.abs(w[0] - np.cos(x3)).max() < 1e-14
    assert np.abs(w[1:]).max() == 0.0
    assert np.abs(grid16.modulated_wave(np.zeros((16, 16, 16)), 1.0 + 0j, (1, 0, 0))).max() == 0.0
    # mean of a modulated band-limited envelope is zero
    env = 0.5 + 0.1 * np.cos(x2)
    w = grid16.modulated_wave(env, 1.0 + 0j, (3, 0, 0))
    assert abs(grid16.mean(w)) < 1e-12


def test_modulated_wave_carrier_error(grid16):
    with pytest.raises(CarrierError):
        grid16.modulated_wave(np.ones((16, 16, 16)), 1.0 + 0j, (8, 0, 0))


def test_modulated_wave_clips_sidebands(grid16):
    # envelope mode 3 on carrier 5 would land at 8 > kmax = 7: clipped, flagged
    x1, _, _ = coords(grid16)
    env = np.cos(3 * x1)
    log = DealiasLog()
    w = grid16.modulated_wave(env, 1.0 + 0j, (5, 0, 0), log=log)
    spec = grid16.fwd(w)
    assert log.clipped_wave_mass > 1e-3
    # the surviving half-mode at k1 = -3+5 = 2 is intact
    coef = spec[2, 0, 0] / grid16.n**3
    assert abs(coef - 0.5) < 1e-12


def test_mean_and_sup_examples(grid16):
    x1, _, _ = coords(grid16)
    assert abs(grid16.mean(np.cos(x1))) < 1e-15
    assert grid16.mean(np.full((16, 16, 16), 2.5)) == pytest.approx(2.5)
    assert grid16.sup_norm(np.sin(x1)) >= 0.995


def test_real_output_conjugate_symmetry(grid16):
    # modulated assembly keeps fields exactly real by construction
    x1, _, _ = coords(grid16)
    env = 0.2 + 0.1 * np.sin(2 * x1)
    w = grid16.modulated_wave(env, 0.3 + 0.7j, (2, 1, 0), 0.3)
    assert np.isrealobj(w)
    spec = grid16.fwd(w)
    back = grid16.inv(spec)
    assert np.abs(back - w).max() < 1e-13 * max(1.0, np.abs(w).max())
