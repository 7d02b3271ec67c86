"""Time sampling on [0, 1] and the shared discrete time derivative.

Every time derivative in the package (both inside the construction of the
transport terms and inside the residual checker) goes through the same
stencil, so the step-closure identity holds to round-off rather than to
the truncation order of the stencil.

Interior samples use centered differences, the endpoints one-sided
second-order stencils; both are exact on polynomials of degree <= 2.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = ["TimeGrid", "dt_stencil", "time_derivative"]


@dataclass(frozen=True)
class TimeGrid:
    """t_j = j / (n_time - 1) for j = 0 .. n_time - 1; n_time odd."""

    n_time: int = 17

    def __post_init__(self):
        if self.n_time < 3 or self.n_time % 2 == 0:
            raise ValueError("n_time must be odd and >= 3, got %r" % self.n_time)

    @property
    def dt(self) -> float:
        return 1.0 / (self.n_time - 1)

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_time) / (self.n_time - 1)


def dt_stencil(tgrid: TimeGrid, j: int):
    """Stencil for d/dt at sample j: (sample indices, weights)."""
    h = tgrid.dt
    last = tgrid.n_time - 1
    if j == 0:
        return (0, 1, 2), (-1.5 / h, 2.0 / h, -0.5 / h)
    if j == last:
        return (last, last - 1, last - 2), (1.5 / h, -2.0 / h, 0.5 / h)
    return (j - 1, j + 1), (-0.5 / h, 0.5 / h)


def time_derivative(tgrid: TimeGrid, j: int, fetch):
    """Discrete d/dt at sample j; *fetch* maps a sample index to its array."""
    idx, wts = dt_stencil(tgrid, j)
    out = wts[0] * fetch(idx[0])
    for i, w in zip(idx[1:], wts[1:]):
        out += w * fetch(i)
    return out
