"""Residual verification, energy bookkeeping and trend experiments.

The residual checker assembles the three Boussinesq-Reynolds equations
with exactly the same discrete operators the constructor uses (spectral
space derivatives, dealiased products, the shared time stencil), so a
tuple produced by the scheme closes to round-off and any nonzero residual
is a genuine defect, not discretization noise.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from bcif.grid import DealiasLog, Grid
from bcif.scheme import ReynoldsState, VOL, assemble_step, StageContext, make_step_params
from bcif.timeops import time_derivative

__all__ = [
    "ResidualReport",
    "EnergyReport",
    "system_residual",
    "energy_gap",
    "holder_estimate",
    "stress_decay_experiment",
    "DecayRow",
    "fit_loglog_slope",
    "write_csv",
]


@dataclass
class ResidualReport:
    momentum_sup: list = field(default_factory=list)
    momentum_l2: list = field(default_factory=list)
    incompressibility_sup: list = field(default_factory=list)
    temperature_sup: list = field(default_factory=list)
    temperature_l2: list = field(default_factory=list)
    scale: float = 1.0
    dealias_overflow: int = 0

    @property
    def momentum_rel(self) -> float:
        return max(self.momentum_sup) / self.scale

    @property
    def temperature_rel(self) -> float:
        return max(self.temperature_sup) / self.scale

    @property
    def incompressibility_rel(self) -> float:
        return max(self.incompressibility_sup) / self.scale

    @property
    def worst_rel(self) -> float:
        return max(self.momentum_rel, self.temperature_rel, self.incompressibility_rel)


def system_residual(state: ReynoldsState, log: DealiasLog | None = None) -> ResidualReport:
    """Per-equation residual norms of a state under its own heat source."""
    grid, tg = state.grid, state.tgrid
    nt = tg.n_time
    report = ResidualReport(scale=state.field_scale())
    own_log = log if log is not None else DealiasLog()
    x3 = grid.x1[None, None, :]

    for j in range(nt):
        v = state.v.get(j)
        theta = state.theta.get(j)
        v_zero = not v.any()

        mom = time_derivative(tg, j, state.v.get)
        if not v_zero:
            pads_v = grid.pad(v)
            pairs = ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
            vv = np.stack(
                [grid.unpad(pads_v[p] * pads_v[q], log=own_log) for p, q in pairs]
            )
            mom += grid.div_sym(vv)
            del vv
        mom += grid.gradient(state.p.get(j))
        mom[2] -= theta
        mom -= grid.div_sym(state.R.get(j))
        report.momentum_sup.append(float(np.abs(mom).max()))
        report.momentum_l2.append(grid.l2_norm(mom))
        del mom

        report.incompressibility_sup.append(float(np.abs(grid.divergence(v)).max()))

        temp = time_derivative(tg, j, state.theta.get)
        if not v_zero and theta.any():
            pads_th = grid.pad(theta)
            vth = np.stack(
                [grid.unpad(pads_v[a] * pads_th, log=own_log) for a in range(3)]
            )
            temp += grid.divergence(vth)
            del vth, pads_th
        if not v_zero:
            del pads_v
        if state.heat is not None:
            temp -= state.heat.slice_values(x3, tg.times[j])
        temp -= grid.divergence(state.f.get(j))
        report.temperature_sup.append(float(np.abs(temp).max()))
        report.temperature_l2.append(grid.l2_norm(temp))
        del temp

    report.dealias_overflow = own_log.overflow_count
    return report


@dataclass
class EnergyReport:
    gaps: list = field(default_factory=list)        # e(t)(1 - delta/2) - int |v|^2
    remainders: list = field(default_factory=list)  # e(t) - int |v|^2
    in_half_band: bool = True                       # [3d/8 e, 5d/8 e]
    in_input_band: bool = True                      # [3d/4 e, 5d/4 e]

    @property
    def gap_sup(self) -> float:
        return max(abs(g) for g in self.gaps)


def energy_gap(state: ReynoldsState, e=None) -> EnergyReport:
    e = e if e is not None else state.energy
    tg = state.tgrid
    report = EnergyReport()
    for j in range(tg.n_time):
        t = tg.times[j]
        et = float(e(t))
        kin = state.kinetic_energy(j)
        report.gaps.append(et * (1.0 - state.delta / 2.0) - kin)
        rem = et - kin
        report.remainders.append(rem)
        d = state.delta
        if not (0.375 * d * et <= rem <= 0.625 * d * et):
            report.in_half_band = False
        if not (0.75 * d * et <= rem <= 1.25 * d * et):
            report.in_input_band = False
    return report


def holder_estimate(grid: Grid, f, m: int = 0, alpha: float | None = None,
                    n_pairs: int = 100_000, seed: int = 0) -> float:
    """Hoelder (semi)norm estimates from grid data.

    m = 0, alpha None: the sup norm (grid max).  alpha None, m >= 1: the
    seminorm max over |beta| = m of sup |D^beta f|, derivatives spectral.
    With alpha in (0, 1): a sampled lower bound of the difference quotient
    seminorm over n_pairs random grid-point pairs (periodic distance).
    """
    if m not in (0, 1, 2):
        raise ValueError("m must be 0, 1 or 2")
    f = np.asarray(f)
    if m == 0:
        derivs = [f]
    elif m == 1:
        derivs = [grid.derivative(f, a) for a in range(3)]
    else:
        derivs = []
        for a in range(3):
            fa = grid.derivative(f, a)
            for b in range(a, 3):
                derivs.append(grid.derivative(fa, b))
    if alpha is None:
        return max(float(np.abs(d).max()) for d in derivs)
    if not 0.0 < alpha < 1.0:
        raise ValueError("alpha must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    n = grid.n
    h = 2.0 * np.pi / n
    ii = rng.integers(0, n, size=(6, n_pairs))
    jj = rng.integers(0, n, size=(6, n_pairs))
    diff = (ii[:3] - jj[:3] + n // 2) % n - n // 2  # periodic image
    dist = h * np.sqrt((diff.astype(float) ** 2).sum(axis=0))
    keep = dist > 0
    best = 0.0
    for d in derivs:
        num = np.abs(
            d[ii[0], ii[1], ii[2]] - d[jj[0], jj[1], jj[2]]
        )
        best = max(best, float((num[keep] / dist[keep] ** alpha).max()))
    return best


def fit_loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(y) against log(x)."""
    xs = np.log(np.asarray(xs, dtype=float))
    ys = np.log(np.maximum(np.asarray(ys, dtype=float), 1e-300))
    return float(np.polyfit(xs, ys, 1)[0])


@dataclass
class DecayRow:
    lam: int
    mu: int
    grid_n: int
    t_index: int
    norms: dict


def stress_decay_experiment(make_state, family, lam_mu_grid, pspec=None,
                            step_n: int = 1) -> list[DecayRow]:
    """Run one perturbation step per (lambda, mu, grid size) and tabulate
    the measured sup norms of each stress/flux part.

    *make_state(n_grid)* builds a fresh solving tuple on the requested
    grid; *lam_mu_grid* is a list of (lambda, mu, n_grid) triples.
    Heavy states are processed one at a time so desk machines survive.
    """
    rows = []
    for lam, mu, n_grid in lam_mu_grid:
        state = make_state(n_grid)
        step = make_step_params(family, step_n, lam, mu)
        if step.lam != lam:
            raise ValueError("lambda %d incompatible with mu %d" % (lam, mu))
        _, report = assemble_step(state, family, step, pspec)
        for j in range(state.tgrid.n_time):
            norms = {name: vals[j] for name, vals in report.norms.items()}
            norms["dealias_overflow"] = report.dealias.overflow_count
            rows.append(DecayRow(lam=lam, mu=mu, grid_n=n_grid, t_index=j, norms=norms))
        del state
    return rows


def write_csv(path, rows: list[DecayRow], experiment: str):
    """One row per (experiment, lambda, mu, t sample); the leading comment
    line documents every column."""
    names = sorted({k for r in rows for k in r.norms})
    with open(path, "w") as fh:
        fh.write(
            "# columns: experiment, lambda, mu, grid_n, t_index, then measured "
            "sup norms per named part: %s\n" % ", ".join(names)
        )
        fh.write("experiment,lambda,mu,grid_n,t_index," + ",".join(names) + "\n")
        for r in rows:
            vals = ",".join("%.17g" % r.norms.get(k, float("nan")) for k in names)
            fh.write("%s,%d,%d,%d,%d,%s\n" % (experiment, r.lam, r.mu, r.grid_n, r.t_index, vals))
