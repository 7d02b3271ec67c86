"""Quadratic partition of unity over the integer lattice.

A radial bump phi equal to 1 on [0, c1], 0 beyond c2, with a smooth
transition in between, is centered at every lattice point and normalized
in quadrature:

    alpha_l(y) = phi(|y - l|) / sqrt(sum_{l'} phi(|y - l'|)^2),

so that sum_l alpha_l(y)^2 = 1 holds exactly at every point.  The radii
satisfy sqrt(3)/2 < c1 < c2 < 1: the lower bound keeps the denominator
positive (c2 exceeds the covering radius of Z^3), the upper bound keeps
bumps at lattice distance >= 2 disjoint.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

__all__ = ["PartitionSpec", "bump", "alpha", "alpha_field", "active_cells"]

_SQRT3_HALF = float(np.sqrt(3.0) / 2.0)


@dataclass(frozen=True)
class PartitionSpec:
    """Inner/outer bump radii; defaults leave margin on both constraints."""

    c1: float = 0.88
    c2: float = 0.95

    def __post_init__(self):
        if not (_SQRT3_HALF < self.c1 < self.c2 < 1.0):
            raise ValueError(
                "radii must satisfy sqrt(3)/2 < c1 < c2 < 1, got c1=%r c2=%r"
                % (self.c1, self.c2)
            )


def bump(spec: PartitionSpec, r):
    """The radial profile phi(r): 1 on [0, c1], exp(1 - 1/(1 - s^2)) on the
    transition s = (r - c1)/(c2 - c1) in (0, 1), 0 beyond c2."""
    r = np.asarray(r, dtype=float)
    s = (r - spec.c1) / (spec.c2 - spec.c1)
    out = np.zeros_like(r)
    out[r <= spec.c1] = 1.0
    mid = (r > spec.c1) & (r < spec.c2)
    if np.any(mid):
        sm = s[mid]
        out[mid] = np.exp(1.0 - 1.0 / (1.0 - sm * sm))
    return out


def _neighbour_cells(y):
    """Lattice points whose bump can be nonzero somewhere on the array y,
    shaped (3, ...)."""
    lo = np.floor(y.reshape(3, -1).min(axis=1) - 0.999).astype(int)
    hi = np.ceil(y.reshape(3, -1).max(axis=1) + 0.999).astype(int)
    return [
        np.array(l, dtype=int)
        for l in itertools.product(*(range(lo[a], hi[a] + 1) for a in range(3)))
    ]


def _norm_sq_sum(spec: PartitionSpec, y, cells):
    total = np.zeros(y.shape[1:], dtype=float)
    for l in cells:
        d = np.sqrt(((y - l.reshape(3, *([1] * (y.ndim - 1)))) ** 2).sum(axis=0))
        total += bump(spec, d) ** 2
    return total


def alpha(spec: PartitionSpec, l, y) -> float:
    """alpha_l evaluated at a single point y in R^3."""
    y = np.asarray(y, dtype=float).reshape(3, 1)
    out = alpha_field(spec, np.asarray(l, dtype=int), y)
    return float(out[0])


def alpha_field(spec: PartitionSpec, l, y):
    """alpha_l evaluated on an array of points y shaped (3, ...)."""
    y = np.asarray(y, dtype=float)
    l = np.asarray(l, dtype=int)
    cells = _neighbour_cells(y)
    total = _norm_sq_sum(spec, y, cells)
    # positive everywhere since c2 > covering radius of the lattice
    d = np.sqrt(((y - l.reshape(3, *([1] * (y.ndim - 1)))) ** 2).sum(axis=0))
    return bump(spec, d) / np.sqrt(total)


def active_cells(spec: PartitionSpec, mu: int, v) -> list[np.ndarray]:
    """All lattice cells l with inf_x |mu v(x) - l| < c2, sorted
    lexicographically.  v is a vector field shaped (3, ...)."""
    y = mu * np.asarray(v, dtype=float)
    out = []
    for l in _neighbour_cells(y):
        d2 = ((y - l.reshape(3, *([1] * (y.ndim - 1)))) ** 2).sum(axis=0)
        if d2.min() < spec.c2**2:
            out.append(l)
    out.sort(key=lambda l: tuple(l))
    return out
