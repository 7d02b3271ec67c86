"""Anti-divergence operators and stationary-phase integrals.

Two exact Fourier-multiplier right inverses of the divergence:

* :func:`antidiv_matrix` maps a vector field v to a symmetric trace-free
  matrix field S with div S = v - mean(v); per mode the multiplier is the
  minimal three-parameter ansatz

      S(k) = (-i/|k|)(vhat (x) khat + khat (x) vhat)
             + (i/(2|k|)) (vhat . khat) (khat (x) khat + Id),

  which satisfies i S(k) k = vhat, symmetry and zero trace for every mode
  (checked analytically and unit-tested against random modes);

* :func:`antidiv_vector` maps a scalar b to grad(a) where
  Laplace a = b - mean(b), i.e. the multiplier -i k / |k|^2.

Both annihilate the mean (multiplier zero at k = 0).
:func:`stationary_phase_integral` evaluates the oscillatory integrals
whose decay in the carrier frequency drives the whole scheme.
"""

from __future__ import annotations

import numpy as np
import scipy.fft as sfft

from bcif.grid import CarrierError, Grid

__all__ = ["antidiv_matrix", "antidiv_vector", "stationary_phase_integral"]


def _inv_ksq(grid: Grid):
    """Cached per-grid multiplier table 1/|k|^2 (zero mode handled by the
    callers, which zero the k = 0 output explicitly)."""
    cached = getattr(grid, "_inv_ksq_table", None)
    if cached is not None:
        return cached
    k2 = (grid.k1 * grid.k1 + grid.k2 * grid.k2 + grid.k3 * grid.k3).astype(float)
    k2[0, 0, 0] = 1.0
    table = 1.0 / k2
    grid._inv_ksq_table = table
    return table


def antidiv_matrix(grid: Grid, v):
    """The operator R: symmetric trace-free S with div S = v - mean v."""
    vh = grid.fwd(v)
    inv_k2 = _inv_ksq(grid)
    inv_k = np.sqrt(inv_k2)
    kh1 = grid.k1 * inv_k
    kh2 = grid.k2 * inv_k
    kh3 = grid.k3 * inv_k
    vdk = vh[0] * kh1 + vh[1] * kh2 + vh[2] * kh3

    khat = (kh1, kh2, kh3)
    out = np.empty((6,) + vh.shape[1:], dtype=complex)
    half_i = 0.5j
    pairs = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
    for c, (p, q) in enumerate(pairs):
        term = (-1j) * inv_k * (vh[p] * khat[q] + khat[p] * vh[q])
        term += half_i * inv_k * vdk * (khat[p] * khat[q] + (1.0 if p == q else 0.0))
        out[c] = term
    out[:, 0, 0, 0] = 0.0
    return grid.inv(out)


def antidiv_vector(grid: Grid, b):
    """The operator G: grad(a) with Laplace a = b - mean b, mean(a) = 0."""
    bh = grid.fwd(b)
    inv_k2 = _inv_ksq(grid)
    out = np.empty((3,) + bh.shape, dtype=complex)
    out[0] = -1j * grid.k1 * inv_k2 * bh
    out[1] = -1j * grid.k2 * inv_k2 * bh
    out[2] = -1j * grid.k3 * inv_k2 * bh
    out[:, 0, 0, 0] = 0.0
    return grid.inv(out)


def stationary_phase_integral(grid: Grid, c, k, lam: int) -> complex:
    """integral over T^3 of c(x) exp(i lam k.x) dx, evaluated spectrally.

    Equals (2 pi)^3 times the Fourier coefficient of c at -lam*k.  The
    carrier lam*k must fit the grid band.
    """
    k = np.asarray(k, dtype=np.int64)
    if lam < 1:
        raise ValueError("lam must be a positive integer")
    carrier = lam * k
    if np.any(np.abs(carrier) > grid.kmax):
        raise CarrierError(
            "carrier %s exceeds grid band |k| <= %d" % (carrier.tolist(), grid.kmax)
        )
    c = np.asarray(c)
    n = grid.n
    m = (-carrier) % n  # FFT bin of mode -lam*k
    if np.iscomplexobj(c):
        spec = sfft.fftn(c, axes=(-3, -2, -1), workers=grid.workers)
        coef = spec[m[0], m[1], m[2]] / n**3
    else:
        spec = grid.fwd(c)
        if (-carrier)[2] >= 0:
            coef = spec[m[0], m[1], m[2]] / n**3
        else:
            mm = carrier % n
            coef = np.conj(spec[mm[0], mm[1], mm[2]]) / n**3
    return complex((2.0 * np.pi) ** 3 * coef)
