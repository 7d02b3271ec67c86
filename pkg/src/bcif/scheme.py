"""The convex-integration engine.

One *step* adds, along a single lattice direction k_n, a family of
modulated Beltrami plane waves to the velocity and matching scalar waves
to the temperature, then rebuilds pressure, Reynolds stress and
temperature flux so the new tuple solves the Boussinesq-Reynolds system
*exactly at the discrete level*: every quadratic term is formed with the
shared dealiased product and every time derivative with the shared
stencil, so the residual of the new tuple equals the residual of the old
one up to round-off.

A *stage* runs L = 6 steps, one per direction, consuming the stress
decomposition block by block; the *outer* iteration runs stages with the
halving schedule delta_k = 2^{-k}.

Amplitudes follow the two iteration flavours:

* energy mode ("prop21"): rho(t) is the prescribed-energy gap
  (e(t)(1 - delta/2) - int |v|^2)/(2 pi)^3 frozen at stage start;
* plain mode ("prop22"): rho = delta, no energy profile involved.

Throughout a stage the matrix/vector decompositions are taken of the
*stage-initial* stress and flux; only the partition argument mu_n v moves
with the current velocity.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from bcif.antidiv import antidiv_matrix, antidiv_vector
from bcif.geometry import (
    DirectionFamily,
    GeometryDomainError,
    beltrami_mode,
    pack_sym,
)
from bcif.grid import CarrierError, DealiasLog, Grid
from bcif.partition import PartitionSpec, active_cells, bump, _neighbour_cells
from bcif.profiles import ClosedForm1D, EnergyProfile, HeatSource, TrigPoly1D
from bcif.series import FieldSeries
from bcif.timeops import TimeGrid, time_derivative

__all__ = [
    "StepParams",
    "StageParams",
    "ReynoldsState",
    "StageContext",
    "StepReport",
    "StageReport",
    "OuterReport",
    "StageSetupError",
    "BandViolationError",
    "nu_factor",
    "rho_bar",
    "amplitude_b",
    "amplitude_beta",
    "velocity_wave",
    "temperature_wave",
    "assemble_step",
    "run_stage",
    "run_outer",
    "make_step_params",
    "make_stage_params",
    "preset_thm11",
    "preset_thm12",
    "preset_thm13",
    "preset_cells",
    "eta_constant",
]

_ID6 = np.array([1.0, 1.0, 1.0, 0.0, 0.0, 0.0])
VOL = (2.0 * np.pi) ** 3


class StageSetupError(ValueError):
    """A stage precondition failed (energy band, stress size, parameters)."""


class BandViolationError(RuntimeError):
    """Strict-mode energy band left after a stage."""


def nu_factor(l) -> int:
    """Frequency assigner nu(l) = 2^j, j = (l1 mod 2) + 2 (l2 mod 2)
    + 4 (l3 mod 2); injective on every 3x3x3 lattice neighbourhood and the
    distinct powers of two keep wave sums/differences non-resonant."""
    j = (int(l[0]) % 2) + 2 * (int(l[1]) % 2) + 4 * (int(l[2]) % 2)
    return 1 << j


@dataclass(frozen=True)
class StepParams:
    """Per-step parameters; direction_index is 0-based into the family."""

    n: int
    direction_index: int
    mu: int
    lam: int
    lambda0: float  # = common direction norm; makes w_o + w_oc the exact curl form

    def __post_init__(self):
        if self.mu < 1 or self.lam < 1:
            raise StageSetupError("mu_n and lambda_n must be positive integers")
        if self.lam % self.mu != 0:
            raise StageSetupError(
                "parameter constraint violated: lambda_n/mu_n must be a positive "
                "integer (lambda_n = %d, mu_n = %d)" % (self.lam, self.mu)
            )


@dataclass(frozen=True)
class StageParams:
    steps: tuple
    eta: float
    mode: str = "trend"  # 'strict' enforces the paper bounds, 'trend' records

    def __post_init__(self):
        lams = [s.lam for s in self.steps]
        if any(b <= a for a, b in zip(lams, lams[1:])):
            raise StageSetupError("lambda_n must be strictly increasing across steps")
        if self.mode not in ("strict", "trend"):
            raise StageSetupError("mode must be 'strict' or 'trend'")


def default_mu(lam: int) -> int:
    """mu = max(2, round(lambda^(1/5))), the fifth-root schedule."""
    return max(2, int(round(lam ** 0.2)))


def make_step_params(family: DirectionFamily, n: int, lam: int, mu: int | None = None) -> StepParams:
    mu = default_mu(lam) if mu is None else mu
    if lam % mu != 0:
        lam = lam + (mu - lam % mu)  # round up to the divisibility constraint
    return StepParams(n=n, direction_index=n - 1, mu=mu, lam=lam, lambda0=family.lambda_bar)


def make_stage_params(
    family: DirectionFamily,
    lambdas=None,
    base_lambda: int = 16,
    ratio: float = 2.0,
    mu: int | None = None,
    mode: str = "trend",
    eta: float | None = None,
) -> StageParams:
    """Build the per-step parameter list; default ramp is geometric with
    ratio 2 starting at base_lambda, adjusted upward for divisibility."""
    L = family.n_directions
    if lambdas is None:
        lambdas = [int(round(base_lambda * ratio**i)) for i in range(L)]
    if len(lambdas) != L:
        raise StageSetupError("need one lambda per direction (L = %d)" % L)
    steps = []
    for i, lam in enumerate(lambdas):
        step = make_step_params(family, i + 1, int(lam), mu)
        if steps and step.lam <= steps[-1].lam:
            step = StepParams(
                n=step.n,
                direction_index=step.direction_index,
                mu=step.mu,
                lam=steps[-1].lam + step.mu,
                lambda0=step.lambda0,
            )
        steps.append(step)
    return StageParams(steps=tuple(steps), eta=(eta if eta is not None else float("nan")), mode=mode)


def eta_constant(family: DirectionFamily, mode: str, e: EnergyProfile | None) -> float:
    """The stress-size constant: r0 e_min / (24 (2 pi)^3) in energy mode
    (the admissible band forces rho >= delta e_min / (12 (2 pi)^3), and the
    stress ratio must stay within r0/2 of the identity), r0/2 in plain
    mode."""
    if mode == "prop22":
        return 0.5 * family.r0
    if e is None:
        raise StageSetupError("energy mode requires an energy profile")
    return family.r0 * e.e_min / (24.0 * VOL)


# ----------------------------------------------------------------------
# state
# ----------------------------------------------------------------------
@dataclass
class ReynoldsState:
    """One Boussinesq-Reynolds tuple sampled in time.

    At stage boundaries (stage_position == 0) R is the symmetric
    trace-free Reynolds stress; mid-stage it carries the running
    representation (remaining decomposition blocks plus accumulated
    delta-blocks), which is symmetric but not trace-free.
    """

    grid: Grid
    tgrid: TimeGrid
    delta: float
    v: FieldSeries
    p: FieldSeries
    theta: FieldSeries
    R: FieldSeries
    f: FieldSeries
    mode: str = "prop21"  # amplitude flavour
    heat: HeatSource | None = None
    energy: EnergyProfile | None = None
    stage_position: int = 0

    def kinetic_energy(self, j: int) -> float:
        """int |v|^2 dx at sample j (Parseval-exact for band-limited v)."""
        vj = self.v.get(j)
        return float(VOL * np.mean((vj * vj).sum(axis=0)))

    def field_scale(self) -> float:
        """max(||v||_0^2, ||theta||_0, ||grad p||_0), the residual scale."""
        sup_v = max(float(np.abs(self.v.get(j)).max()) for j in range(self.tgrid.n_time))
        sup_t = max(float(np.abs(self.theta.get(j)).max()) for j in range(self.tgrid.n_time))
        sup_gp = max(
            float(np.abs(self.grid.gradient(self.p.get(j))).max())
            for j in range(self.tgrid.n_time)
        )
        return max(sup_v**2, sup_t, sup_gp, 1e-300)


def _zero_state_series(grid: Grid, tgrid: TimeGrid):
    n = grid.n
    nt = tgrid.n_time
    return dict(
        v=FieldSeries.zeros(nt, (3, n, n, n)),
        p=FieldSeries.zeros(nt, (n, n, n)),
        theta=FieldSeries.zeros(nt, (n, n, n)),
        R=FieldSeries.zeros(nt, (6, n, n, n)),
        f=FieldSeries.zeros(nt, (3, n, n, n)),
    )


# ----------------------------------------------------------------------
# presets (the explicit starting tuples of the three theorems)
# ----------------------------------------------------------------------
def preset_thm11(
    grid: Grid,
    tgrid: TimeGrid,
    theta0: TrigPoly1D,
    e: EnergyProfile,
    delta: float = 1.0,
) -> ReynoldsState:
    """No heat source; initial temperature depends on x3 only; pressure is
    its antiderivative so grad p = theta e3 balances exactly."""
    if theta0.mean != 0.0:
        raise StageSetupError(
            "theta0 must have zero x3-mean for a periodic pressure potential"
        )
    if theta0.max_mode > grid.kmax:
        raise CarrierError("theta0 mode beyond grid band")
    x3 = grid.x1[None, None, :]
    n = grid.n
    th = np.broadcast_to(theta0(x3), (n, n, n)).copy()
    pp = np.broadcast_to(theta0.antiderivative_from_zero(x3), (n, n, n)).copy()
    fields = _zero_state_series(grid, tgrid)
    fields["theta"] = FieldSeries.from_function(tgrid.n_time, (n, n, n), lambda j: th)
    fields["p"] = FieldSeries.from_function(tgrid.n_time, (n, n, n), lambda j: pp)
    return ReynoldsState(
        grid=grid, tgrid=tgrid, delta=delta, mode="prop21", heat=None, energy=e, **fields
    )


def preset_thm12(
    grid: Grid,
    tgrid: TimeGrid,
    source: HeatSource,
    e: EnergyProfile,
    delta: float = 1.0,
) -> ReynoldsState:
    """Separated heat source a(t) b(x3); temperature integrates the source
    in time, pressure integrates the temperature in x3."""
    if source.b.mean != 0.0:
        raise StageSetupError(
            "heat source b(x3) must have zero mean for a periodic pressure potential"
        )
    if source.b.max_mode > grid.kmax:
        raise CarrierError("heat source mode beyond grid band")
    x3 = grid.x1[None, None, :]
    n = grid.n
    bline = source.b(x3)
    bint = source.b.antiderivative_from_zero(x3)
    times = tgrid.times
    A = source.a.integral_from_zero(times)
    fields = _zero_state_series(grid, tgrid)
    fields["theta"] = FieldSeries.from_function(
        tgrid.n_time, (n, n, n), lambda j: np.broadcast_to(A[j] * bline, (n, n, n)).copy()
    )
    fields["p"] = FieldSeries.from_function(
        tgrid.n_time, (n, n, n), lambda j: np.broadcast_to(A[j] * bint, (n, n, n)).copy()
    )
    return ReynoldsState(
        grid=grid, tgrid=tgrid, delta=delta, mode="prop21", heat=source, energy=e, **fields
    )


def preset_thm13(grid: Grid, tgrid: TimeGrid, N: int = 4, delta: float = 1.0) -> ReynoldsState:
    """The shear tuple with oscillation N^2: v = t N sin(N^2 x2) e1 driven
    by the off-diagonal stress, theta = (1-t) N sin(N^2 x3) fed by the
    flux.  Desk-scale N; the theorem's own choice N = max(2/eta, 4*lambda,
    16*M) is far beyond any desk grid and is reported alongside."""
    if N * N > grid.kmax:
        raise CarrierError("N^2 beyond grid band")
    n = grid.n
    x2 = grid.x1[None, :, None]
    x3 = grid.x1[None, None, :]
    times = tgrid.times
    nt = tgrid.n_time
    sin2 = np.broadcast_to(np.sin(N * N * x2), (n, n, n))
    sin3 = np.broadcast_to(np.sin(N * N * x3), (n, n, n))
    cos2 = np.broadcast_to(np.cos(N * N * x2), (n, n, n))
    cos3 = np.broadcast_to(np.cos(N * N * x3), (n, n, n))

    def v_at(j):
        out = np.zeros((3, n, n, n))
        out[0] = times[j] * N * sin2
        return out

    def R_at(j):
        out = np.zeros((6, n, n, n))
        out[3] = -cos2 / N  # the (1,2) entry
        return out

    def f_at(j):
        out = np.zeros((3, n, n, n))
        out[2] = cos3 / N
        return out

    return ReynoldsState(
        grid=grid,
        tgrid=tgrid,
        delta=delta,
        v=FieldSeries.from_function(nt, (3, n, n, n), v_at),
        p=FieldSeries.from_function(
            nt, (n, n, n), lambda j: (-(1.0 - times[j]) / N) * cos3
        ),
        theta=FieldSeries.from_function(
            nt, (n, n, n), lambda j: (1.0 - times[j]) * N * sin3
        ),
        R=FieldSeries.from_function(nt, (6, n, n, n), R_at),
        f=FieldSeries.from_function(nt, (3, n, n, n), f_at),
        mode="prop22",
        heat=None,
        energy=None,
    )


def preset_cells(
    grid: Grid,
    tgrid: TimeGrid,
    v_const=(0.0, 0.0, 0.0),
    stress_amp: float = 0.0,
    flux_amp: float = 0.0,
    theta_amp: float = 1.0,
    v_shear: float = 0.0,
    e: EnergyProfile | None = None,
    delta: float = 1.0,
    mode: str = "prop21",
) -> ReynoldsState:
    """Constant-velocity tuple with small x3-periodic stress and flux;
    solves the system exactly (linear in t) and drives every branch of the
    step construction: nonzero stress varies the matrix coefficients,
    nonzero flux switches on the temperature waves, a nonzero constant
    velocity activates several partition cells, a nonzero solenoidal shear
    v1 += v_shear sin(x2) makes the partition weights vary in space.

    theta = (theta_amp + flux_amp t) cos x3 feeds the flux; matching
    theta_amp to the velocity scale sqrt(e) keeps every stress/flux target
    attainable at desk frequencies."""
    v_const = np.asarray(v_const, dtype=float)
    if v_const[2] != 0.0:
        raise StageSetupError("cells preset requires v3 = 0 (theta varies in x3)")
    n = grid.n
    nt = tgrid.n_time
    x2 = grid.x1[None, :, None]
    x3 = grid.x1[None, None, :]
    times = tgrid.times
    cos3 = np.broadcast_to(np.cos(x3), (n, n, n))
    sin3 = np.broadcast_to(np.sin(x3), (n, n, n))
    shear = np.broadcast_to(v_shear * np.sin(x2), (n, n, n))

    def v_at(j):
        out = np.empty((3, n, n, n))
        for a in range(3):
            out[a] = v_const[a]
        if v_shear:
            out[0] += shear
        return out

    def R_at(j):
        out = np.zeros((6, n, n, n))
        out[3] = stress_amp * cos3
        return out

    def f_at(j):
        # the x1 component is divergence-free padding that gives the flux a
        # component along every frame vector A_i
        out = np.zeros((3, n, n, n))
        out[0] = flux_amp * cos3
        out[2] = flux_amp * sin3
        return out

    return ReynoldsState(
        grid=grid,
        tgrid=tgrid,
        delta=delta,
        v=FieldSeries.from_function(nt, (3, n, n, n), v_at),
        p=FieldSeries.from_function(
            nt, (n, n, n), lambda j: (theta_amp + flux_amp * times[j]) * sin3
        ),
        theta=FieldSeries.from_function(
            nt, (n, n, n), lambda j: (theta_amp + flux_amp * times[j]) * cos3
        ),
        R=FieldSeries.from_function(nt, (6, n, n, n), R_at),
        f=FieldSeries.from_function(nt, (3, n, n, n), f_at),
        mode=mode,
        heat=None,
        energy=e,
    )


# ----------------------------------------------------------------------
# amplitudes and stage context
# ----------------------------------------------------------------------
def rho_bar(e: EnergyProfile, state: ReynoldsState, j: int) -> float:
    """(e(t)(1 - delta/2) - int |v|^2) / (3 (2 pi)^3) at sample j.

    The 1/3 makes the stage close the prescribed energy gap exactly: each
    point of the decomposition contributes trace tr(rho Id - R) = 3 rho,
    so the waves add 3 rho (2 pi)^3 of kinetic energy in total.
    """
    t = state.tgrid.times[j]
    val = (float(e(t)) * (1.0 - state.delta / 2.0) - state.kinetic_energy(j)) / (3.0 * VOL)
    if val <= 0.0:
        raise StageSetupError(
            "energy band violated: negative wave amplitude rho at t = %.4f" % t
        )
    return val


@dataclass
class StageContext:
    """Frozen stage data: amplitude rho(t), stage-initial stress and flux,
    and the coefficient fields derived from them."""

    mode: str
    delta: float
    rho: np.ndarray           # (n_time,)
    R0_stage: FieldSeries     # stage-initial R (trace-free packed)
    f0_stage: FieldSeries
    f0_zero: bool
    family: DirectionFamily
    eta: float

    @classmethod
    def for_state(cls, state: ReynoldsState, family: DirectionFamily) -> "StageContext":
        nt = state.tgrid.n_time
        if state.stage_position != 0:
            raise StageSetupError(
                "mid-stage state needs the stage context it was created with"
            )
        if state.mode == "prop21":
            rho = np.array([rho_bar(state.energy, state, j) for j in range(nt)])
        else:
            rho = np.full(nt, state.delta)
        eta = eta_constant(family, state.mode, state.energy)
        return cls(
            mode=state.mode,
            delta=state.delta,
            rho=rho,
            R0_stage=state.R,
            f0_stage=state.f,
            f0_zero=state.f.is_zero(),
            family=family,
            eta=eta,
        )

    def coeff_fields(self, j: int) -> np.ndarray:
        """All six c_i(R0/rho) fields at sample j; domain-checked."""
        R0 = self.R0_stage.get(j)
        rho = self.rho[j]
        dist = float(np.abs(R0).max()) / rho
        if dist > self.family.r0 * (1.0 + 1e-12):
            raise GeometryDomainError(
                "stress ratio left the certified ball (||R0/rho - Id|| = %.3g > r0 "
                "= %.3g); eta too large for this run" % (dist, self.family.r0)
            )
        ratio = _ID6[:, None, None, None] - R0 / rho
        c = np.einsum("ce,e...->c...", self.family.matrix_solver, ratio)
        if float(c.min()) <= 0.0:
            raise GeometryDomainError("non-positive coefficient in stress decomposition")
        return c

    def gamma_field(self, direction_index: int, j: int) -> np.ndarray:
        return np.sqrt(self.coeff_fields(j)[direction_index])

    def g_fields(self, j: int) -> np.ndarray:
        """g_i(-f0) fields, i = 0..2 (zero for the other directions)."""
        f0 = self.f0_stage.get(j)
        return np.einsum("ce,e...->c...", self.family.g_solver, -f0)


# ----------------------------------------------------------------------
# wave bundles
# ----------------------------------------------------------------------
def _two_re(env, amp, cos_ph, sin_ph):
    """2 Re(env * amp * e^{i phi}) for a scalar field env and complex
    scalar amp; env may be real or complex."""
    a = complex(amp)
    if np.iscomplexobj(env):
        er, ei = env.real, env.imag
        out = (2.0 * a.real) * er * cos_ph
        out -= (2.0 * a.imag) * er * sin_ph
        out -= (2.0 * a.real) * ei * sin_ph
        out -= (2.0 * a.imag) * ei * cos_ph
        return out
    out = (2.0 * a.real) * env * cos_ph
    if a.imag:
        out -= (2.0 * a.imag) * env * sin_ph
    return out


def _two_re_vec(env_vec, cos_ph, sin_ph):
    """2 Re(env_vec * e^{i phi}) for a complex vector envelope (3, ...)."""
    return 2.0 * (env_vec.real * cos_ph - env_vec.imag * sin_ph)


def _shift_clip_rel(grid: Grid, rspec, carrier) -> float:
    """Relative spectral mass of an envelope that cannot ride the carrier
    without leaving the band (both images m +- c must fit)."""
    ok = np.ones(rspec.shape[-3:], dtype=bool)
    for K, c in zip((grid.k1, grid.k2, grid.k3), carrier):
        ok &= (np.abs(K + c) <= grid.kmax) & (np.abs(K - c) <= grid.kmax)
    w = np.where((grid.k3 == 0) | (grid.k3 == grid.n // 2), 1.0, 2.0)
    power = w * np.abs(rspec) ** 2
    total = float(power.sum())
    if total == 0.0:
        return 0.0
    return float(power[..., ~ok].sum() if power.ndim > 3 else power[~ok].sum()) / total


def _envelope_pack(grid: Grid, env, carrier, l_over_mu, log: DealiasLog | None):
    """Spectral preparations for one scalar envelope riding one carrier:
    the (possibly band-filtered) envelope, its gradient, the advective
    derivative d = (l/mu . grad) env and grad d.

    The fast path keeps everything real; if side-bands would spill out of
    the grid band the envelope is filtered (asymmetrically around the
    carrier), which makes the retained envelope complex.
    """
    need_d = l_over_mu is not None and any(l_over_mu)
    rspec = grid.fwd(env)
    clip = _shift_clip_rel(grid, rspec, carrier)
    if log is not None:
        log.record_clip(clip)
    K = (grid.k1, grid.k2, grid.k3)
    if clip <= 1e-26:
        grad = np.stack([grid.inv(1j * K[a] * rspec) for a in range(3)])
        d = grad_d = None
        if need_d:
            kd = 1j * (K[0] * l_over_mu[0] + K[1] * l_over_mu[1] + K[2] * l_over_mu[2])
            dspec = kd * rspec
            d = grid.inv(dspec)
            grad_d = np.stack([grid.inv(1j * K[a] * dspec) for a in range(3)])
        return env, grad, d, grad_d, clip
    # slow path: asymmetric band filter, complex retained envelope
    n = grid.n
    F = sfft.fftn(env, axes=(-3, -2, -1), workers=grid.workers)
    kfull = np.fft.fftfreq(n, d=1.0 / n).astype(np.int64)
    mask = (
        (np.abs(kfull.reshape(n, 1, 1) + carrier[0]) <= grid.kmax)
        & (np.abs(kfull.reshape(1, n, 1) + carrier[1]) <= grid.kmax)
        & (np.abs(kfull.reshape(1, 1, n) + carrier[2]) <= grid.kmax)
    )
    F *= mask
    Kf = (kfull.reshape(n, 1, 1), kfull.reshape(1, n, 1), kfull.reshape(1, 1, n))

    def inv(spec):
        return sfft.ifftn(spec, axes=(-3, -2, -1), workers=grid.workers)

    env_f = inv(F)
    grad = np.stack([inv(1j * Kf[a] * F) for a in range(3)])
    d = grad_d = None
    if need_d:
        kd = 1j * (Kf[0] * l_over_mu[0] + Kf[1] * l_over_mu[1] + Kf[2] * l_over_mu[2])
        D = kd * F
        d = inv(D)
        grad_d = np.stack([inv(1j * Kf[a] * D) for a in range(3)])
    return env_f, grad, d, grad_d, clip


def amplitude_b(state: ReynoldsState, family: DirectionFamily, step: StepParams,
                l, j: int, pspec: PartitionSpec | None = None,
                stage: StageContext | None = None) -> np.ndarray:
    """The wave amplitude b_{nl} = sqrt(rho) alpha_l(mu v) gamma_n(R0/rho)
    at time sample j, as a scalar grid field."""
    stage = stage or StageContext.for_state(state, family)
    pspec = pspec or PartitionSpec()
    rho = float(stage.rho[j])
    gamma = stage.gamma_field(step.direction_index, j)
    alpha_l = _alpha_on_grid(pspec, step.mu, state.v.get(j), np.asarray(l, dtype=int))
    return math.sqrt(rho) * alpha_l * gamma


def amplitude_beta(state: ReynoldsState, family: DirectionFamily, step: StepParams,
                   l, j: int, pspec: PartitionSpec | None = None,
                   stage: StageContext | None = None) -> np.ndarray:
    """The temperature amplitude beta_{nl} = alpha_l/(2 sqrt(rho)) g_n(-f0)
    / gamma_n; identically zero from step 4 on."""
    stage = stage or StageContext.for_state(state, family)
    pspec = pspec or PartitionSpec()
    n = state.grid.n
    if step.n > 3:
        return np.zeros((n, n, n))
    rho = float(stage.rho[j])
    gamma = stage.gamma_field(step.direction_index, j)
    gfield = stage.g_fields(j)[step.direction_index]
    alpha_l = _alpha_on_grid(pspec, step.mu, state.v.get(j), np.asarray(l, dtype=int))
    return alpha_l / (2.0 * math.sqrt(rho)) * gfield / gamma


def _alpha_on_grid(pspec: PartitionSpec, mu: int, v, l) -> np.ndarray:
    n = v.shape[-1]
    if not v.any():
        return np.ones((n, n, n)) if not l.any() else np.zeros((n, n, n))
    y = mu * v
    total = np.zeros((n, n, n))
    for lp in _neighbour_cells(y):
        dist = np.sqrt(((y - lp.reshape(3, 1, 1, 1)) ** 2).sum(axis=0))
        total += bump(pspec, dist) ** 2
    dist = np.sqrt(((y - l.reshape(3, 1, 1, 1)) ** 2).sum(axis=0))
    return bump(pspec, dist) / np.sqrt(total)


def _wave_phase(grid: Grid, step: StepParams, k, l, t: float):
    nu = nu_factor(l)
    carrier = step.lam * nu * np.asarray(k, dtype=np.int64)
    if np.any(np.abs(carrier) > grid.kmax):
        raise CarrierError(
            "wave carrier %s for cell l = %s (nu = %d) exceeds the grid band "
            "|k| <= %d" % (carrier.tolist(), list(l), nu, grid.kmax)
        )
    offset = -float(step.lam * nu * int(np.asarray(k) @ np.asarray(l))) / step.mu * t
    return nu, carrier, offset


def velocity_wave(grid: Grid, envelope, mode, step: StepParams, l, t: float,
                  log: DealiasLog | None = None):
    """(w_ol, w_ocl) for one cell: the principal Beltrami wave and its
    gradient correction, with w_ol + w_ocl equal to the exact curl form
    (1/(lambda lambda0 nu)) curl(envelope B e^{i phi} + c.c.)."""
    l = np.asarray(l, dtype=int)
    nu, carrier, offset = _wave_phase(grid, step, mode.k, l, t)
    benv, grad_b, _, _, _ = _envelope_pack(grid, envelope, carrier, None, log)
    ph = grid._phase(carrier, offset)
    cos_ph, sin_ph = np.cos(ph), np.sin(ph)
    del ph
    B = mode.B
    w_ol = np.stack([_two_re(benv, B[a], cos_ph, sin_ph) for a in range(3)])
    fac = 1.0 / (step.lam * step.lambda0 * nu)
    cross = np.cross(grad_b, B.reshape(3, 1, 1, 1), axis=0) * fac
    w_ocl = _two_re_vec(cross, cos_ph, sin_ph)
    return w_ol, w_ocl


def temperature_wave(grid: Grid, envelope, mode, step: StepParams, l, t: float,
                     log: DealiasLog | None = None):
    """chi_{nl} = 2 beta cos(phi), the scalar wave colocated with the
    velocity wave of the same cell (same carrier, same drift)."""
    if step.n > 3:
        return np.zeros_like(envelope)
    l = np.asarray(l, dtype=int)
    nu, carrier, offset = _wave_phase(grid, step, mode.k, l, t)
    benv, _, _, _, _ = _envelope_pack(grid, envelope, carrier, None, log)
    ph = grid._phase(carrier, offset)
    return _two_re(benv, 1.0, np.cos(ph), np.sin(ph))


@dataclass
class _Bundle:
    """Everything one step needs at one time sample, accumulated over the
    active partition cells."""

    w_o: np.ndarray
    w_oc: np.ndarray | None
    chi: np.ndarray | None
    S_lw: np.ndarray | None       # sum_l sym(w_1l (x) l/mu)
    lw_grad: np.ndarray | None    # sum_l (l/mu . grad) w_1l
    lchi_grad: np.ndarray | None  # sum_l (l/mu . grad) chi_l
    lchi_vec: np.ndarray | None   # sum_l (l/mu) chi_l
    b2sum: np.ndarray
    Sbb: np.ndarray | None        # sum_l beta_l b_l
    b_sup: float
    beta_sup: float
    cells: list
    nus: list
    clip_rel: float

    @property
    def w1(self):
        return self.w_o if self.w_oc is None else self.w_o + self.w_oc


def _build_bundle(
    grid: Grid,
    pspec: PartitionSpec,
    ctx: StageContext,
    step: StepParams,
    v_prev_j: np.ndarray | None,
    j: int,
    t_j: float,
    log: DealiasLog,
) -> _Bundle:
    family = ctx.family
    n = grid.n
    rho = float(ctx.rho[j])
    gamma = ctx.gamma_field(step.direction_index, j)
    mode = beltrami_mode(family, step.direction_index)
    k = mode.k.astype(np.int64)
    B = mode.B
    temp_active = (step.n <= 3) and not ctx.f0_zero
    gfield = None
    if temp_active:
        gfield = ctx.g_fields(j)[step.direction_index]

    if v_prev_j is None or not v_prev_j.any():
        cells = [np.zeros(3, dtype=int)]
        y = None
    else:
        cells = active_cells(pspec, step.mu, v_prev_j)
        y = step.mu * v_prev_j

    if y is not None:
        total = np.zeros((n, n, n))
        for lp in _neighbour_cells(y):
            dist = np.sqrt(((y - lp.reshape(3, 1, 1, 1)) ** 2).sum(axis=0))
            total += bump(pspec, dist) ** 2
        inv_sqrt_total = 1.0 / np.sqrt(total)

    w_o = np.zeros((3, n, n, n))
    w_oc = None
    chi = None
    S_lw = None
    lw_grad = None
    lchi_grad = None
    lchi_vec = None
    b2sum = np.zeros((n, n, n))
    Sbb = None
    b_sup = 0.0
    beta_sup = 0.0
    nus = []
    clip_rel = 0.0
    sqrt_rho = math.sqrt(rho)

    for l in cells:
        nu = nu_factor(l)
        nus.append(nu)
        carrier = step.lam * nu * k
        if np.any(np.abs(carrier) > grid.kmax):
            raise CarrierError(
                "wave carrier %s for cell l = %s (nu = %d) exceeds the grid band "
                "|k| <= %d" % (carrier.tolist(), l.tolist(), nu, grid.kmax)
            )
        moving = bool(l.any())
        l_over_mu = l.astype(float) / step.mu if moving else None
        # phase lam nu k . (x - l t / mu)
        offset = -float(step.lam * nu * int(k @ l)) / step.mu * t_j
        ph = grid._phase(carrier, offset)
        cos_ph = np.cos(ph)
        sin_ph = np.sin(ph)
        del ph

        if y is None:
            alpha_l = np.ones((n, n, n))
        else:
            dist = np.sqrt(((y - l.reshape(3, 1, 1, 1)) ** 2).sum(axis=0))
            alpha_l = bump(pspec, dist) * inv_sqrt_total
        b = sqrt_rho * alpha_l * gamma
        b_sup = max(b_sup, float(np.abs(b).max()))
        b2sum += b * b

        fac = 1.0 / (step.lam * step.lambda0 * nu)
        benv, grad_b, d, grad_d, clip = _envelope_pack(grid, b, carrier, l_over_mu, log)
        clip_rel = max(clip_rel, clip)
        const_env = float(np.abs(grad_b).max()) <= 1e-14 * max(b_sup, 1e-300)

        # main wave 2 Re(b B e^{i phi})
        for a in range(3):
            w_o[a] += _two_re(benv, B[a], cos_ph, sin_ph)
        # correction 2 Re((grad b x B) fac e^{i phi})
        if not const_env:
            cross = np.cross(grad_b, B.reshape(3, 1, 1, 1), axis=0) * fac
            if w_oc is None:
                w_oc = np.zeros((3, n, n, n))
            w_oc += _two_re_vec(cross, cos_ph, sin_ph)
            w1l = None
        else:
            cross = None

        if moving:
            # w_1l itself (needed against l/mu) and its advective gradient
            V = benv[None] * B.reshape(3, 1, 1, 1)
            if cross is not None:
                V = V + cross
            w1l = _two_re_vec(V, cos_ph, sin_ph)
            if S_lw is None:
                S_lw = np.zeros((6, n, n, n))
            lom = l.astype(float) / step.mu
            pairs = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
            for c6, (pp, qq) in enumerate(pairs):
                S_lw[c6] += w1l[pp] * lom[qq] + w1l[qq] * lom[pp]
            # (l/mu . grad) w_1l = 2 Re((d B + (grad d x B) fac + i s V) e^{i phi})
            s = float(step.lam * nu * int(k @ l)) / step.mu
            T = d[None] * B.reshape(3, 1, 1, 1)
            if grad_d is not None and not const_env:
                T = T + np.cross(grad_d, B.reshape(3, 1, 1, 1), axis=0) * fac
            T = T + 1j * s * V
            if lw_grad is None:
                lw_grad = np.zeros((3, n, n, n))
            lw_grad += _two_re_vec(T, cos_ph, sin_ph)
            del V, T

        if temp_active:
            beta = alpha_l / (2.0 * sqrt_rho) * gfield / gamma
            beta_sup = max(beta_sup, float(np.abs(beta).max()))
            if chi is None:
                chi = np.zeros((n, n, n))
                Sbb = np.zeros((n, n, n))
            benv_t, _, d_t, _, clip_t = _envelope_pack(
                grid, beta, carrier, l_over_mu, log
            )
            clip_rel = max(clip_rel, clip_t)
            chi_l = _two_re(benv_t, 1.0, cos_ph, sin_ph)
            chi += chi_l
            Sbb += beta * b
            if moving:
                s = float(step.lam * nu * int(k @ l)) / step.mu
                env_t = (d_t if d_t is not None else 0.0) + 1j * s * benv_t
                if lchi_grad is None:
                    lchi_grad = np.zeros((n, n, n))
                    lchi_vec = np.zeros((3, n, n, n))
                lchi_grad += _two_re(env_t, 1.0, cos_ph, sin_ph)
                lom = l.astype(float) / step.mu
                for a in range(3):
                    if lom[a]:
                        lchi_vec[a] += lom[a] * chi_l

    return _Bundle(
        w_o=w_o,
        w_oc=w_oc,
        chi=chi,
        S_lw=S_lw,
        lw_grad=lw_grad,
        lchi_grad=lchi_grad,
        lchi_vec=lchi_vec,
        b2sum=b2sum,
        Sbb=Sbb,
        b_sup=b_sup,
        beta_sup=beta_sup,
        cells=[tuple(int(x) for x in l) for l in cells],
        nus=nus,
        clip_rel=clip_rel,
    )


# ----------------------------------------------------------------------
# step assembly
# ----------------------------------------------------------------------
_SYM_PAIRS = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))


def _self_outer6(grid: Grid, pads, log):
    """Packed u (x) u from pre-padded components."""
    out = []
    for p, q in _SYM_PAIRS:
        out.append(grid.unpad(pads[p] * pads[q], log=log))
    return np.stack(out)


def _sym_cross6(grid: Grid, pads_u, pads_v, log, extra=None):
    """Packed u (x) v + v (x) u (+ optionally w (x) w) from padded parts."""
    out = []
    for p, q in _SYM_PAIRS:
        term = pads_u[p] * pads_v[q] + pads_u[q] * pads_v[p]
        if extra is not None:
            term = term + extra[p] * extra[q]
        out.append(grid.unpad(term, log=log))
    return np.stack(out)


@dataclass
class StepReport:
    """Measured sup norms of every constructed object, per time sample."""

    n: int
    lam: int
    mu: int
    direction: tuple
    cells: list = field(default_factory=list)       # per j
    nus: list = field(default_factory=list)         # per j
    norms: dict = field(default_factory=dict)       # name -> list per j
    measured_M: float = 0.0
    dealias: DealiasLog = field(default_factory=DealiasLog)
    nu_note: str = (
        "frequency assigner nu(l) = 2^((l1 mod 2) + 2(l2 mod 2) + 4(l3 mod 2)) "
        "stands in for the ill-defined 2^|l| factor"
    )

    def add(self, name: str, value: float):
        self.norms.setdefault(name, []).append(float(value))

    def sup(self, name: str) -> float:
        vals = self.norms.get(name)
        return max(vals) if vals else 0.0


def _sup(arr) -> float:
    return 0.0 if arr is None else float(np.abs(arr).max())


def _const_vector(v):
    """The (3,) constant value of a spatially constant vector field, else
    None.  Products with constants need no dealiasing."""
    out = np.empty(3)
    for a in range(3):
        mn, mx = float(v[a].min()), float(v[a].max())
        if mn != mx:
            return None
        out[a] = mn
    return out


def assemble_step(
    state: ReynoldsState,
    family: DirectionFamily,
    step: StepParams,
    pspec: PartitionSpec | None = None,
    stage: StageContext | None = None,
    keep_deltas: bool = False,
):
    """Apply one perturbation step; returns (new_state, StepReport).

    For a stage-boundary state only step n = 1 is admissible and the stage
    context is built on the fly; mid-stage states must come with the
    context of their stage.
    """
    pspec = pspec or PartitionSpec()
    grid, tg = state.grid, state.tgrid
    nt = tg.n_time
    n = grid.n
    if stage is None:
        if step.n != 1:
            raise StageSetupError("step n = %d on a stage-boundary state" % step.n)
        stage = StageContext.for_state(state, family)
    if state.stage_position not in (step.n - 1,):
        raise StageSetupError(
            "state at stage position %d cannot take step n = %d"
            % (state.stage_position, step.n)
        )

    mode = beltrami_mode(family, step.direction_index)
    khat = mode.k / np.linalg.norm(mode.k)
    mode6 = pack_sym(np.eye(3) - np.outer(khat, khat))
    A_n = mode.A

    report = StepReport(
        n=step.n, lam=step.lam, mu=step.mu, direction=tuple(int(x) for x in mode.k)
    )
    log = report.dealias
    temp_update = step.n <= 3

    # pass 1: waves (cached for the shared time stencil)
    w1_series = FieldSeries(nt, (3, n, n, n))
    chi_series = FieldSeries(nt, (n, n, n))
    any_chi = False
    for j in range(nt):
        v_prev = state.v.get(j)
        bundle = _build_bundle(grid, pspec, stage, step, v_prev, j, tg.times[j], log)
        w1_series.set(j, bundle.w1)
        chi_series.set(j, bundle.chi if bundle.chi is not None else np.zeros((n, n, n)))
        any_chi = any_chi or (bundle.chi is not None)
        del bundle

    # pass 2: assemble the new tuple slice by slice
    new = dict(
        v=FieldSeries(nt, (3, n, n, n)),
        p=FieldSeries(nt, (n, n, n)),
        theta=FieldSeries(nt, (n, n, n)),
        R=FieldSeries(nt, (6, n, n, n)),
        f=FieldSeries(nt, (3, n, n, n)),
    )
    deltas = None
    if keep_deltas:
        deltas = dict(
            R=FieldSeries(nt, (6, n, n, n)), f=FieldSeries(nt, (3, n, n, n))
        )

    for j in range(nt):
        v_prev = state.v.get(j)
        v_zero = not v_prev.any()
        v_const = _const_vector(v_prev) if not v_zero else None
        theta_prev = state.theta.get(j)
        theta_zero = not theta_prev.any()
        bundle = _build_bundle(grid, pspec, stage, step, v_prev, j, tg.times[j], log)
        report.cells.append(bundle.cells)
        report.nus.append(bundle.nus)
        rho_j = float(stage.rho[j])

        w1 = w1_series.get(j)
        chi = bundle.chi
        chi_mean = float(grid.mean(chi)) if chi is not None else 0.0

        # --- padded products, ordered to cap the number of live pad sets
        pads_wo = grid.pad(bundle.w_o)
        pads_woc = grid.pad(bundle.w_oc) if bundle.w_oc is not None else None

        # oscillation: R(div M) with M = w_o (x) w_o - sum_l b_l^2 2Re(B (x) conj B)
        rep_add = bundle.b2sum[None] * mode6[:, None, None, None]
        M6 = _self_outer6(grid, pads_wo, log) - rep_add
        osc_R = antidiv_matrix(grid, grid.div_sym(M6))
        del M6

        # error II: w_o (x) w_oc + w_oc (x) w_o + w_oc (x) w_oc
        if pads_woc is not None:
            E6 = _sym_cross6(grid, pads_wo, pads_woc, log, extra=pads_woc)
        else:
            E6 = None

        # temperature-wave products: K = w_o chi - 2 (sum beta b) A and the
        # error part (v - l/mu) chi + w_oc chi
        osc_f = None
        err_f = None
        if chi is not None:
            pads_chi = grid.pad(chi)
            K1 = np.stack(
                [grid.unpad(pads_wo[a] * pads_chi, log=log) for a in range(3)]
            )
            K1 -= 2.0 * bundle.Sbb[None] * A_n[:, None, None, None]
            osc_f = antidiv_vector(grid, grid.divergence(K1))
            del K1
            if pads_woc is not None:
                err_f = np.stack(
                    [grid.unpad(pads_woc[a] * pads_chi, log=log) for a in range(3)]
                )
            if v_const is not None:
                vc_chi = v_const[:, None, None, None] * chi[None]
                err_f = vc_chi if err_f is None else err_f + vc_chi
            elif not v_zero:
                pads_v = grid.pad(v_prev)
                vchi = np.stack(
                    [grid.unpad(pads_v[a] * pads_chi, log=log) for a in range(3)]
                )
                err_f = vchi if err_f is None else err_f + vchi
                del pads_v
            if bundle.lchi_vec is not None:
                err_f = -bundle.lchi_vec if err_f is None else err_f - bundle.lchi_vec
            del pads_chi

        # advective flux source G(w1 . grad theta); the theta gradient is
        # padded one axis at a time to cap memory
        g_wtheta = None
        if not theta_zero:
            th_spec = grid.fwd(theta_prev)
            adv_pad = None
            for a, K in enumerate((grid.k1, grid.k2, grid.k3)):
                gp = grid.pad_spectrum(1j * K * th_spec)
                gp *= pads_wo[a] if pads_woc is None else (pads_wo[a] + pads_woc[a])
                adv_pad = gp if adv_pad is None else adv_pad + gp
                del gp
            del th_spec
            g_wtheta = antidiv_vector(grid, grid.unpad(adv_pad, log=log))
            del adv_pad
            osc_f = g_wtheta if osc_f is None else osc_f + g_wtheta

        # error I: N = w1 (x) v + v (x) w1 - sum_l sym(w_1l (x) l/mu)
        if v_const is not None:
            N6 = np.empty((6, n, n, n))
            for c6, (pp, qq) in enumerate(_SYM_PAIRS):
                N6[c6] = w1[pp] * v_const[qq] + w1[qq] * v_const[pp]
            if bundle.S_lw is not None:
                N6 -= bundle.S_lw
        elif not v_zero:
            if pads_woc is not None:
                pads_wo += pads_woc  # becomes the w1 pad set; w_o pads done
            pads_v = grid.pad(v_prev)
            N6 = _sym_cross6(grid, pads_wo, pads_v, log)
            if bundle.S_lw is not None:
                N6 -= bundle.S_lw
            del pads_v
        else:
            N6 = -bundle.S_lw if bundle.S_lw is not None else None
        del pads_wo, pads_woc

        # oscillation from the temperature wave: -R((chi - mean chi) e3)
        if chi is not None:
            rhs = np.zeros((3, n, n, n))
            rhs[2] = chi - chi_mean
            osc_chi = -antidiv_matrix(grid, rhs)
            del rhs
        else:
            osc_chi = None

        # transport: R(D_t w1 + sum_l (l/mu . grad) w_1l)
        trans_in = time_derivative(tg, j, w1_series.get)
        if bundle.lw_grad is not None:
            trans_in += bundle.lw_grad
        if trans_in.any():
            trans_R = antidiv_matrix(grid, trans_in)
        else:
            trans_R = None
        del trans_in

        # pressure and the trace-free completion of the error parts
        p_new = state.p.get(j).copy()
        delta_R = osc_R
        if osc_chi is not None:
            delta_R += osc_chi
        if trans_R is not None:
            delta_R += trans_R
        for part in (N6, E6):
            if part is not None:
                tr = (part[0] + part[1] + part[2]) / 3.0
                part[0] -= tr
                part[1] -= tr
                part[2] -= tr
                delta_R += part
                p_new -= tr

        # transport: G(D_t chi + sum_l (l/mu . grad) chi_l)
        trans_f = None
        if any_chi and temp_update:
            chi_dt = time_derivative(tg, j, chi_series.get)
            if bundle.lchi_grad is not None:
                chi_dt += bundle.lchi_grad
            if chi_dt.any():
                trans_f = antidiv_vector(grid, chi_dt)
            del chi_dt

        delta_f = None
        for part in (osc_f, trans_f, err_f):
            if part is not None:
                delta_f = part.copy() if delta_f is None else delta_f + part

        # running representation of the stress
        R_prev = state.R.get(j)
        if state.stage_position == 0:
            R_run = R_prev - rho_j * _ID6[:, None, None, None]
        else:
            R_run = R_prev
        R_new = R_run + rep_add + delta_R

        f_prev = state.f.get(j)
        f_new = f_prev.copy()
        if bundle.Sbb is not None:
            f_new += 2.0 * bundle.Sbb[None] * A_n[:, None, None, None]
        if delta_f is not None:
            f_new += delta_f

        theta_new = theta_prev
        if chi is not None and temp_update:
            theta_new = theta_prev + (chi - chi_mean)

        new["v"].set(j, v_prev + w1)
        new["p"].set(j, p_new)
        new["theta"].set(j, theta_new)
        new["R"].set(j, R_new)
        new["f"].set(j, f_new)
        if deltas is not None:
            deltas["R"].set(j, delta_R)
            deltas["f"].set(
                j, delta_f if delta_f is not None else np.zeros((3, n, n, n))
            )

        # measured norms for the report
        report.add("w_o", _sup(bundle.w_o))
        report.add("w_oc", _sup(bundle.w_oc))
        report.add("w1", _sup(w1))
        report.add("chi", _sup(chi))
        report.add("b_amp", bundle.b_sup)
        report.add("beta_amp", bundle.beta_sup)
        report.add("oscillation_R", _sup(osc_R) + _sup(osc_chi))
        report.add("transport_R", _sup(trans_R))
        report.add("errorI_R", _sup(N6))
        report.add("errorII_R", _sup(E6))
        report.add("delta_R", _sup(delta_R))
        report.add("oscillation_f", _sup(osc_f))
        report.add("transport_f", _sup(trans_f))
        report.add("error_f", _sup(err_f))
        report.add("delta_f", _sup(delta_f))
        report.add("chi_mean", abs(chi_mean))
        report.add("mean_w", float(np.abs(grid.mean(w1)).max()))
        report.add(
            "energy_new", float(VOL * np.mean(((v_prev + w1) ** 2).sum(axis=0)))
        )
        del bundle, delta_R, delta_f, osc_R, osc_chi, trans_R, N6, E6

    L = family.n_directions
    b_max = max(max(report.norms["b_amp"]), max(report.norms["beta_amp"]))
    report.measured_M = 10.0 * L * b_max / math.sqrt(stage.delta)

    new_state = ReynoldsState(
        grid=grid,
        tgrid=tg,
        delta=state.delta,
        v=new["v"],
        p=new["p"],
        theta=new["theta"],
        R=new["R"],
        f=new["f"],
        mode=state.mode,
        heat=state.heat,
        energy=state.energy,
        stage_position=step.n,
    )
    if keep_deltas:
        return new_state, report, deltas
    return new_state, report


# ----------------------------------------------------------------------
# stage and outer iteration
# ----------------------------------------------------------------------
@dataclass
class StageReport:
    eta: float
    delta: float
    mode: str
    step_reports: list = field(default_factory=list)
    pre_violations: list = field(default_factory=list)
    post: dict = field(default_factory=dict)
    dealias: DealiasLog = field(default_factory=DealiasLog)

    @property
    def measured_M(self) -> float:
        return max((r.measured_M for r in self.step_reports), default=0.0)


def _check_stage_pre(state: ReynoldsState, ctx: StageContext, params: StageParams):
    """Energy band / stress size preconditions; strict mode raises."""
    viol = []
    eta_delta = ctx.eta * state.delta
    supR = max(_sup(state.R.get(j)) for j in range(state.tgrid.n_time))
    supf = max(_sup(state.f.get(j)) for j in range(state.tgrid.n_time))
    if supR > eta_delta * (1 + 1e-12):
        viol.append("||R||_0 = %.3g > eta delta = %.3g" % (supR, eta_delta))
    if supf > eta_delta * (1 + 1e-12):
        viol.append("||f||_0 = %.3g > eta delta = %.3g" % (supf, eta_delta))
    if state.mode == "prop21":
        for j in range(state.tgrid.n_time):
            t = state.tgrid.times[j]
            gap = float(state.energy(t)) - state.kinetic_energy(j)
            lo = 0.75 * state.delta * float(state.energy(t))
            hi = 1.25 * state.delta * float(state.energy(t))
            if not (lo * (1 - 1e-12) <= gap <= hi * (1 + 1e-12)):
                viol.append(
                    "energy band violated at t = %.3f: gap = %.6g not in [%.6g, %.6g]"
                    % (t, gap, lo, hi)
                )
                break
    if viol and params.mode == "strict":
        raise StageSetupError("; ".join(viol))
    return viol


def run_stage(
    state: ReynoldsState,
    family: DirectionFamily,
    params: StageParams,
    pspec: PartitionSpec | None = None,
    keep_deltas: bool = False,
):
    """Run all L steps; returns (new_state, StageReport) with the final
    stress equal to the accumulated delta-blocks (trace-free again)."""
    pspec = pspec or PartitionSpec()
    ctx = StageContext.for_state(state, family)
    eta = ctx.eta
    report = StageReport(eta=eta, delta=state.delta, mode=params.mode)
    report.pre_violations = _check_stage_pre(state, ctx, params)

    current = state
    all_deltas = [] if keep_deltas else None
    for step in params.steps:
        out = assemble_step(current, family, step, pspec, stage=ctx, keep_deltas=keep_deltas)
        if keep_deltas:
            current, step_rep, deltas = out
            all_deltas.append(deltas)
        else:
            current, step_rep = out
        report.step_reports.append(step_rep)
        report.dealias.merge(step_rep.dealias)

    current.stage_position = 0  # R is sum of trace-free delta-blocks again
    nt = state.tgrid.n_time

    supR = max(_sup(current.R.get(j)) for j in range(nt))
    supf = max(_sup(current.f.get(j)) for j in range(nt))
    sup_dv = max(
        float(np.abs(current.v.get(j) - state.v.get(j)).max()) for j in range(nt)
    )
    sup_dth = max(
        float(np.abs(current.theta.get(j) - state.theta.get(j)).max()) for j in range(nt)
    )
    sup_dp = max(
        float(np.abs(current.p.get(j) - state.p.get(j)).max()) for j in range(nt)
    )
    trace_sup = max(
        float(np.abs(current.R.get(j)[0] + current.R.get(j)[1] + current.R.get(j)[2]).max())
        for j in range(nt)
    )
    post = dict(
        sup_R=supR,
        sup_f=supf,
        sup_dv=sup_dv,
        sup_dtheta=sup_dth,
        sup_dp=sup_dp,
        trace_sup=trace_sup,
        target_R=eta * state.delta / 2.0,
        target_f=eta * state.delta / 2.0,
        stress_halved=supR <= eta * state.delta / 2.0,
        flux_halved=supf <= eta * state.delta / 2.0,
    )
    if state.mode == "prop21":
        gaps = []
        band_ok = True
        for j in range(nt):
            t = state.tgrid.times[j]
            et = float(state.energy(t))
            gap = et * (1.0 - state.delta / 2.0) - current.kinetic_energy(j)
            gaps.append(gap)
            rem = et - current.kinetic_energy(j)
            if not (0.375 * state.delta * et <= rem <= 0.625 * state.delta * et):
                band_ok = False
        post["energy_gap_sup"] = max(abs(g) for g in gaps)
        post["energy_gaps"] = gaps
        post["band_ok"] = band_ok
        if params.mode == "strict" and not band_ok:
            raise BandViolationError(
                "post-stage energy left the band [3 delta/8 e, 5 delta/8 e]"
            )
    if params.mode == "strict" and not (post["stress_halved"] and post["flux_halved"]):
        raise BandViolationError(
            "post-stage stress/flux did not halve: ||R|| = %.3g, ||f|| = %.3g, "
            "target %.3g" % (supR, supf, eta * state.delta / 2.0)
        )
    report.post = post
    if keep_deltas:
        return current, report, all_deltas
    return current, report


@dataclass
class OuterReport:
    iterations: list = field(default_factory=list)  # StageReport per iteration
    v_increments: list = field(default_factory=list)
    theta_increments: list = field(default_factory=list)
    stress_sups: list = field(default_factory=list)
    deltas: list = field(default_factory=list)


def run_outer(
    initial: ReynoldsState,
    family: DirectionFamily,
    n_iterations: int,
    stage_params_for,
    pspec: PartitionSpec | None = None,
):
    """Iterate stages with the halving schedule delta_k = 2^{-k}.

    *stage_params_for(k)* supplies the per-iteration StageParams (the
    frequency ramp usually grows with k).  Returns the list of states
    (initial included) and an OuterReport with the measured Cauchy
    increments against the M sqrt(delta) targets.
    """
    states = [initial]
    report = OuterReport()
    current = initial
    for k in range(n_iterations):
        current.delta = initial.delta * 2.0**-k
        params = stage_params_for(k)
        new_state, stage_rep = run_stage(current, family, params, pspec=pspec)
        nt = current.tgrid.n_time
        report.iterations.append(stage_rep)
        report.deltas.append(current.delta)
        report.v_increments.append(
            max(
                float(np.abs(new_state.v.get(j) - current.v.get(j)).max())
                for j in range(nt)
            )
        )
        report.theta_increments.append(
            max(
                float(np.abs(new_state.theta.get(j) - current.theta.get(j)).max())
                for j in range(nt)
            )
        )
        report.stress_sups.append(
            max(_sup(new_state.R.get(j)) for j in range(nt))
        )
        states.append(new_state)
        current = new_state
    return states, report
