"""Periodic fields on [0, 2pi)^3 and their spectral calculus.

Fields are plain float64 arrays: scalars are shaped (n, n, n) with axes
(x1, x2, x3), vectors (3, n, n, n), symmetric matrices (6, n, n, n) in the
packing order of :data:`bcif.geometry.SYM_INDEX`.  The :class:`Grid` object
owns the wavenumber meshes and every spectral operation.

Conventions:

* spectra are raw ``scipy.fft.rfftn`` output; Fourier coefficients in the
  sense ``f = sum_k fhat(k) exp(i k.x)`` are ``raw / n^3``;
* fields are kept band-limited to ``|k_axis| <= kmax = n//2 - 1`` on every
  axis (the lone Nyquist bin of even-length FFTs cannot carry a phase and
  is always projected out);
* quadratic quantities go through :meth:`Grid.product`, which evaluates on
  a zero-padded grid and truncates back to the base band, recording how
  much spectral mass the truncation removed.  Padding factor 2 keeps every
  in-band product mode exact; 3/2 does too (classical dealiasing bound)
  at half the memory.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

__all__ = [
    "GridSpec",
    "Grid",
    "CarrierError",
    "DealiasLog",
    "make_grid",
]


class CarrierError(ValueError):
    """A requested carrier wavevector does not fit the grid band."""


@dataclass(frozen=True)
class GridSpec:
    """Uniform periodic grid parameters.

    n_per_axis must be a power of two >= 8; padding_factor is the
    oversampling ratio for dealiased products (2 or 3/2).
    """

    n_per_axis: int
    padding_factor: float = 2.0
    dim: int = 3

    def __post_init__(self):
        n = self.n_per_axis
        if n < 8 or (n & (n - 1)) != 0:
            raise ValueError("n_per_axis must be a power of two >= 8, got %r" % n)
        if self.padding_factor not in (1.5, 2.0):
            raise ValueError("padding_factor must be 3/2 or 2, got %r" % self.padding_factor)
        if self.dim != 3:
            raise ValueError("only dim = 3 is supported")


@dataclass
class DealiasLog:
    """Accumulates truncation diagnostics across dealiased products."""

    overflow_count: int = 0
    max_truncated_rel: float = 0.0
    clipped_wave_mass: float = 0.0
    # relative spectral mass above which a truncation counts as overflow
    threshold: float = 1e-12

    def record_product(self, truncated_rel: float):
        self.max_truncated_rel = max(self.max_truncated_rel, truncated_rel)
        if truncated_rel > self.threshold:
            self.overflow_count += 1

    def record_clip(self, clipped_rel: float):
        self.clipped_wave_mass = max(self.clipped_wave_mass, clipped_rel)
        if clipped_rel > self.threshold:
            self.overflow_count += 1

    def merge(self, other: "DealiasLog"):
        self.overflow_count += other.overflow_count
        self.max_truncated_rel = max(self.max_truncated_rel, other.max_truncated_rel)
        self.clipped_wave_mass = max(self.clipped_wave_mass, other.clipped_wave_mass)


class Grid:
    """Spectral toolbox bound to one GridSpec."""

    def __init__(self, spec: GridSpec, workers: int = 1):
        self.spec = spec
        self.n = spec.n_per_axis
        self.workers = workers
        n = self.n
        self.kmax = n // 2 - 1
        self.x1 = np.arange(n) * (2.0 * np.pi / n)
        # open wavenumber meshes, broadcastable to (n, n, nk3)
        k = np.fft.fftfreq(n, d=1.0 / n).astype(np.int64)
        self.k1 = k.reshape(n, 1, 1)
        self.k2 = k.reshape(1, n, 1)
        self.k3 = np.arange(n // 2 + 1, dtype=np.int64).reshape(1, 1, n // 2 + 1)
        self.npad = int(round(n * spec.padding_factor))
        self._band_mask = (
            (np.abs(self.k1) <= self.kmax)
            & (np.abs(self.k2) <= self.kmax)
            & (self.k3 <= self.kmax)
        )
        # index blocks used to embed the base band into the padded spectrum
        keep = np.r_[0 : self.kmax + 1, n - self.kmax : n]
        self._src = (keep, keep, np.arange(self.kmax + 1))
        dst = np.r_[0 : self.kmax + 1, self.npad - self.kmax : self.npad]
        self._dst = (dst, dst, np.arange(self.kmax + 1))

    # ------------------------------------------------------------------
    # transforms
    # ------------------------------------------------------------------
    def fwd(self, f):
        """Raw rfftn over the last three axes (component axes broadcast)."""
        return sfft.rfftn(f, axes=(-3, -2, -1), workers=self.workers)

    def inv(self, spec):
        n = self.n
        return sfft.irfftn(spec, s=(n, n, n), axes=(-3, -2, -1), workers=self.workers)

    def project(self, f):
        """Band-limit a field to |k| <= kmax on every axis."""
        spec = self.fwd(f)
        spec *= self._band_mask
        return self.inv(spec)

    # ------------------------------------------------------------------
    # calculus
    # ------------------------------------------------------------------
    def _kaxis(self, axis):
        return (self.k1, self.k2, self.k3)[axis]

    def derivative(self, f, axis: int):
        """Exact spectral d/dx_axis of a real field (last three axes)."""
        spec = self.fwd(f)
        spec *= 1j * self._kaxis(axis)
        return self.inv(spec)

    def gradient(self, f):
        spec = self.fwd(f)
        return np.stack([self.inv(spec * (1j * self._kaxis(a))) for a in range(3)])

    def divergence(self, v):
        spec = self.fwd(v)
        out = spec[0] * (1j * self.k1)
        out += spec[1] * (1j * self.k2)
        out += spec[2] * (1j * self.k3)
        return self.inv(out)

    def curl(self, v):
        spec = self.fwd(v)
        K = (self.k1, self.k2, self.k3)
        out = np.empty_like(spec)
        out[0] = 1j * (K[1] * spec[2] - K[2] * spec[1])
        out[1] = 1j * (K[2] * spec[0] - K[0] * spec[2])
        out[2] = 1j * (K[0] * spec[1] - K[1] * spec[0])
        return self.inv(out)

    def div_sym(self, six):
        """Divergence of a packed symmetric matrix field, (div S)_i = d_j S_ij."""
        spec = self.fwd(six)
        iK = (1j * self.k1, 1j * self.k2, 1j * self.k3)
        # rows of the symmetric matrix in packed order (11,22,33,12,13,23)
        r0 = spec[0] * iK[0] + spec[3] * iK[1] + spec[4] * iK[2]
        r1 = spec[3] * iK[0] + spec[1] * iK[1] + spec[5] * iK[2]
        r2 = spec[4] * iK[0] + spec[5] * iK[1] + spec[2] * iK[2]
        return self.inv(np.stack([r0, r1, r2]))

    # ------------------------------------------------------------------
    # reductions
    # ------------------------------------------------------------------
    @staticmethod
    def mean(f):
        """Mean over the torus per component (= the DC Fourier coefficient)."""
        f = np.asarray(f)
        return f.mean(axis=(-3, -2, -1))

    @staticmethod
    def sup_norm(f):
        """Grid max of |f|; a lower bound for the continuum sup norm."""
        return float(np.abs(f).max())

    def integral(self, f):
        """Integral over T^3 (volume (2pi)^3)."""
        return (2.0 * np.pi) ** 3 * self.mean(f)

    def l2_norm(self, f):
        """sqrt(integral of |f|^2), summed over leading component axes."""
        f = np.asarray(f)
        sq = (f * f).mean(axis=(-3, -2, -1))
        return float(np.sqrt((2.0 * np.pi) ** 3 * sq.sum()))

    # ------------------------------------------------------------------
    # dealiased products
    # ------------------------------------------------------------------
    def pad(self, f):
        """Zero-padded physical samples of a base-band field (real array)."""
        spec = self.fwd(f)
        return self.pad_spectrum(spec)

    def pad_spectrum(self, spec):
        m = self.npad
        shape = spec.shape[:-3] + (m, m, m // 2 + 1)
        out = np.zeros(shape, dtype=complex)
        scale = (m / self.n) ** 3
        out[..., self._dst[0][:, None, None], self._dst[1][None, :, None], self._dst[2][None, None, :]] = (
            spec[..., self._src[0][:, None, None], self._src[1][None, :, None], self._src[2][None, None, :]]
            * scale
        )
        return sfft.irfftn(out, s=(m, m, m), axes=(-3, -2, -1), workers=self.workers)

    def unpad(self, fp, log: DealiasLog | None = None):
        """Forward-transform padded samples and truncate to the base band."""
        m = self.npad
        spec = sfft.rfftn(fp, axes=(-3, -2, -1), workers=self.workers)
        if log is not None:
            total = float(np.sum(np.abs(spec) ** 2))
            kept_block = spec[
                ...,
                self._dst[0][:, None, None],
                self._dst[1][None, :, None],
                self._dst[2][None, None, :],
            ]
            kept = float(np.sum(np.abs(kept_block) ** 2))
            trunc_rel = (total - kept) / total if total > 0 else 0.0
            log.record_product(max(trunc_rel, 0.0))
        else:
            kept_block = spec[
                ...,
                self._dst[0][:, None, None],
                self._dst[1][None, :, None],
                self._dst[2][None, None, :],
            ]
        n = self.n
        base = np.zeros(fp.shape[:-3] + (n, n, n // 2 + 1), dtype=complex)
        base[..., self._src[0][:, None, None], self._src[1][None, :, None], self._src[2][None, None, :]] = (
            kept_block * (n / m) ** 3
        )
        return self.inv(base)

    def product(self, a, b, log: DealiasLog | None = None, a_padded=None, b_padded=None):
        """Dealiased pointwise product of two base-band fields.

        Exact for every retained mode; modes beyond the base band are
        dropped and accounted in *log*.  Pre-padded physical samples can be
        supplied to amortize transforms across several products.
        """
        ap = self.pad(a) if a_padded is None else a_padded
        bp = self.pad(b) if b_padded is None else b_padded
        return self.unpad(ap * bp, log=log)

    # ------------------------------------------------------------------
    # modulated plane waves
    # ------------------------------------------------------------------
    def check_carrier(self, carrier):
        carrier = np.asarray(carrier, dtype=np.int64)
        if np.any(np.abs(carrier) > self.kmax):
            raise CarrierError(
                "carrier %s exceeds grid band |k| <= %d" % (carrier.tolist(), self.kmax)
            )
        return carrier

    def _phase(self, carrier, offset):
        n = self.n
        c = np.asarray(carrier, dtype=float)
        ph = c[0] * self.x1[:, None, None]
        ph = ph + c[1] * self.x1[None, :, None]
        ph = ph + c[2] * self.x1[None, None, :]
        ph += offset
        return ph

    def _clip_envelope(self, env, carrier, log):
        """Return an envelope whose spectrum, shifted by carrier, fits the
        band, plus the relative mass clipped away.

        The clean case (everything fits up to round-off) returns the input
        untouched; otherwise the filtered envelope is complex because the
        admissible mode box is asymmetric around the origin.
        """
        spec = sfft.fftn(env, axes=(-3, -2, -1), workers=self.workers)
        n = self.n
        k = np.fft.fftfreq(n, d=1.0 / n).astype(np.int64)
        ok = (
            (np.abs(k.reshape(n, 1, 1) + carrier[0]) <= self.kmax)
            & (np.abs(k.reshape(1, n, 1) + carrier[1]) <= self.kmax)
            & (np.abs(k.reshape(1, 1, n) + carrier[2]) <= self.kmax)
        )
        total = float(np.sum(np.abs(spec) ** 2))
        lost = float(np.sum(np.abs(spec[..., ~ok]) ** 2)) if total > 0 else 0.0
        rel = lost / total if total > 0 else 0.0
        if log is not None:
            log.record_clip(rel)
        if rel <= 1e-26:
            return env, rel
        spec *= ok
        return sfft.ifftn(spec, axes=(-3, -2, -1), workers=self.workers), rel

    def modulated_wave(self, envelope, amplitude, carrier, phase_offset=0.0,
                       log: DealiasLog | None = None):
        """Real field 2 Re(envelope * amplitude * exp(i(carrier.x + offset))).

        ``amplitude`` may be a complex scalar (scalar output) or a complex
        3-vector (vector output).  The envelope may be real or complex; its
        side-bands are clipped to the grid band so the result is exactly
        band-limited.  A carrier outside the band is a hard error.
        """
        carrier = self.check_carrier(carrier)
        env, _ = self._clip_envelope(envelope, carrier, log)
        ph = self._phase(carrier, phase_offset)
        cos_ph = np.cos(ph)
        sin_ph = np.sin(ph)
        del ph
        if np.iscomplexobj(env):
            er, ei = env.real, env.imag
        else:
            er, ei = env, None
        amp = np.asarray(amplitude, dtype=complex)

        def one(a):
            # 2 Re((er + i ei)(ar + i ai)(cos + i sin))
            ar, ai = a.real, a.imag
            out = er * (2.0 * ar) * cos_ph
            out -= er * (2.0 * ai) * sin_ph
            if ei is not None:
                out -= ei * (2.0 * ar) * sin_ph
                out -= ei * (2.0 * ai) * cos_ph
            return out

        if amp.ndim == 0:
            return one(amp)
        return np.stack([one(a) for a in amp])


def make_grid(n_per_axis: int, padding_factor: float = 2.0, workers: int = 1) -> Grid:
    return Grid(GridSpec(n_per_axis=n_per_axis, padding_factor=padding_factor), workers=workers)
