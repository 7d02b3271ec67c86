"""Closed-form ingredients: energy profiles, heat sources, trig data.

The prescribed kinetic energy e(t), admissible initial temperatures (class
"functions of x3 only") and heat sources of separated form a(t) b(x3) are
all supplied as tagged closed-form expressions so that runs are exactly
reproducible from a flat config file.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = ["TrigPoly1D", "ClosedForm1D", "EnergyProfile", "HeatSource"]

TWO_PI = 2.0 * np.pi


@dataclass(frozen=True)
class TrigPoly1D:
    """mean + sum_m cos_coeffs[m-1] cos(m x) + sin_coeffs[m-1] sin(m x),
    a smooth periodic function of one spatial coordinate."""

    mean: float = 0.0
    cos_coeffs: tuple = ()
    sin_coeffs: tuple = ()

    def __call__(self, x):
        out = np.full_like(np.asarray(x, dtype=float), self.mean)
        for m, c in enumerate(self.cos_coeffs, start=1):
            if c:
                out += c * np.cos(m * x)
        for m, s in enumerate(self.sin_coeffs, start=1):
            if s:
                out += s * np.sin(m * x)
        return out

    def antiderivative_from_zero(self, x):
        """integral from 0 to x; periodic only when mean == 0."""
        x = np.asarray(x, dtype=float)
        out = self.mean * x
        for m, c in enumerate(self.cos_coeffs, start=1):
            if c:
                out += c * np.sin(m * x) / m
        for m, s in enumerate(self.sin_coeffs, start=1):
            if s:
                out += s * (1.0 - np.cos(m * x)) / m
        return out

    @property
    def max_mode(self):
        return max(len(self.cos_coeffs), len(self.sin_coeffs))


@dataclass(frozen=True)
class ClosedForm1D:
    """poly[0] + poly[1] t + poly[2] t^2 + cos_amp cos(2 pi m t)
    + sin_amp sin(2 pi m t), a smooth function of time."""

    poly: tuple = (0.0,)
    cos_amp: float = 0.0
    sin_amp: float = 0.0
    freq: int = 1

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for p, c in enumerate(self.poly):
            if c:
                out += c * t**p
        w = TWO_PI * self.freq
        if self.cos_amp:
            out = out + self.cos_amp * np.cos(w * t)
        if self.sin_amp:
            out = out + self.sin_amp * np.sin(w * t)
        return out

    def integral_from_zero(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        for p, c in enumerate(self.poly):
            if c:
                out += c * t ** (p + 1) / (p + 1)
        w = TWO_PI * self.freq
        if self.cos_amp:
            out = out + self.cos_amp * np.sin(w * t) / w
        if self.sin_amp:
            out = out + self.sin_amp * (1.0 - np.cos(w * t)) / w
        return out


@dataclass(frozen=True)
class EnergyProfile:
    """Prescribed kinetic energy e(t) > 0 on [0, 1]."""

    form: ClosedForm1D

    def __post_init__(self):
        probe = self.form(np.linspace(0.0, 1.0, 1001))
        if probe.min() <= 0:
            raise ValueError("energy profile must be strictly positive on [0,1]")

    def __call__(self, t):
        return self.form(t)

    @property
    def e_min(self) -> float:
        return float(self.form(np.linspace(0.0, 1.0, 1001)).min())

    @property
    def e_max(self) -> float:
        return float(self.form(np.linspace(0.0, 1.0, 1001)).max())

    @classmethod
    def constant(cls, value: float) -> "EnergyProfile":
        return cls(ClosedForm1D(poly=(value,)))

    @classmethod
    def affine(cls, a: float, b: float) -> "EnergyProfile":
        return cls(ClosedForm1D(poly=(a, b)))


@dataclass(frozen=True)
class HeatSource:
    """Separated heat source h(x, t) = a(t) b(x3)."""

    a: ClosedForm1D
    b: TrigPoly1D

    def slice_values(self, x3, t: float):
        """h at one time sample as a function of x3 (broadcastable)."""
        return float(self.a(t)) * self.b(x3)
