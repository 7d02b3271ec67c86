"""Config-driven experiment runner.

Configs are flat ``key=value`` text files (# comments allowed); every key
has a matching CLI flag that overrides it.  Experiments:

* ``step``           one perturbation step on a preset, residual-checked
* ``stage``          a full L-step stage
* ``outer``          the delta-halving outer iteration
* ``decay``          the stress-decay sweep over lambda
* ``check_residual`` residual report for a saved state directory

Outputs land in the configured directory: ``report.txt`` with measured
values against their targets, ``diagnostics.csv`` rows per (experiment,
lambda, mu, t sample), and ``snapshots/`` with the binary fields.
Identical configs produce bit-identical outputs.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass, field, fields as dc_fields

import numpy as np

from bcif import diagnostics as diag
from bcif.geometry import build_family, GeometryDomainError
from bcif.grid import CarrierError, Grid, GridSpec
from bcif.partition import PartitionSpec
from bcif.profiles import ClosedForm1D, EnergyProfile, HeatSource, TrigPoly1D
from bcif.scheme import (
    BandViolationError,
    StageSetupError,
    VOL,
    assemble_step,
    eta_constant,
    make_stage_params,
    make_step_params,
    preset_cells,
    preset_thm11,
    preset_thm12,
    preset_thm13,
    run_outer,
    run_stage,
)
from bcif.snapshot import load_state, save_state
from bcif.timeops import TimeGrid

__all__ = ["RunConfig", "parse_config", "run_from_config", "main"]


@dataclass
class RunConfig:
    experiment: str = "step"
    preset: str = "thm11"
    grid: int = 64
    tsamples: int = 9
    padding: float = 2.0
    delta: float = 1.0
    lam: str = "16"            # comma list or single value ("lambda" in files)
    mu: int = 0                # 0 = fifth-root rule
    steps: int = 1
    mode: str = "trend"
    energy: str = "const:248.0502134423985"   # kind:params, (2 pi)^3 by default
    theta0_cos: str = "1.0"
    theta0_sin: str = ""
    heat_a_poly: str = "1.0"
    heat_b_cos: str = "1.0"
    heat_b_sin: str = ""
    N: int = 4
    v_const: str = "0,0,0"
    v_shear: float = 0.0
    stress_amp: float = 0.0
    flux_amp: float = 0.0
    theta_amp: float = 1.0
    lambda_scales: str = "1,2,3"
    n_iterations: int = 1
    out: str = "bcif_out"
    seed: int = 0
    check_residual: int = 1
    snapshots: int = 1
    snapshot_in: str = ""
    workers: int = 1

    def lam_list(self):
        return [int(x) for x in str(self.lam).split(",") if x != ""]


_FIELD_TYPES = {f.name: f.type for f in dc_fields(RunConfig)}
_FILE_KEYS = {("lam" if f.name == "lam" else f.name): f.name for f in dc_fields(RunConfig)}
_FILE_KEYS["lambda"] = "lam"  # the config file spells it lambda


def parse_config(path) -> RunConfig:
    cfg = RunConfig()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError("%s:%d: expected key=value, got %r" % (path, lineno, line))
            key, _, val = line.partition("=")
            key = key.strip()
            val = val.strip()
            if key not in _FILE_KEYS:
                raise ValueError("%s:%d: unknown config key %r" % (path, lineno, key))
            _set(cfg, _FILE_KEYS[key], val)
    return cfg


def _set(cfg: RunConfig, name: str, val: str):
    kind = _FIELD_TYPES[name]
    if kind in ("int", int):
        setattr(cfg, name, int(val))
    elif kind in ("float", float):
        setattr(cfg, name, float(val))
    else:
        setattr(cfg, name, val)


def _parse_energy(spec: str) -> EnergyProfile:
    kind, _, params = spec.partition(":")
    vals = [float(x) for x in params.split(",")] if params else []
    if kind == "const":
        return EnergyProfile.constant(vals[0])
    if kind == "affine":
        return EnergyProfile.affine(vals[0], vals[1])
    if kind == "cosine":
        return EnergyProfile(ClosedForm1D(poly=(vals[0],), cos_amp=vals[1], freq=int(vals[2])))
    raise ValueError("unknown energy form %r (use const:/affine:/cosine:)" % spec)


def _trig_from(cos_str: str, sin_str: str) -> TrigPoly1D:
    cc = tuple(float(x) for x in cos_str.split(",") if x != "")
    ss = tuple(float(x) for x in sin_str.split(",") if x != "")
    return TrigPoly1D(mean=0.0, cos_coeffs=cc, sin_coeffs=ss)


def build_state(cfg: RunConfig):
    grid = Grid(GridSpec(cfg.grid, padding_factor=cfg.padding), workers=cfg.workers)
    tgrid = TimeGrid(cfg.tsamples)
    e = _parse_energy(cfg.energy)
    if cfg.preset == "thm11":
        return preset_thm11(grid, tgrid, _trig_from(cfg.theta0_cos, cfg.theta0_sin), e, cfg.delta)
    if cfg.preset == "thm12":
        a = ClosedForm1D(poly=tuple(float(x) for x in cfg.heat_a_poly.split(",")))
        src = HeatSource(a=a, b=_trig_from(cfg.heat_b_cos, cfg.heat_b_sin))
        return preset_thm12(grid, tgrid, src, e, cfg.delta)
    if cfg.preset == "thm13":
        return preset_thm13(grid, tgrid, N=cfg.N, delta=cfg.delta)
    if cfg.preset == "cells":
        vc = tuple(float(x) for x in cfg.v_const.split(","))
        return preset_cells(
            grid,
            tgrid,
            v_const=vc,
            stress_amp=cfg.stress_amp,
            flux_amp=cfg.flux_amp,
            theta_amp=cfg.theta_amp,
            v_shear=cfg.v_shear,
            e=e,
            delta=cfg.delta,
        )
    raise ValueError("unknown preset %r" % cfg.preset)


def _report_lines_residual(r) -> list:
    return [
        "residual momentum    sup = %.6g  (rel %.3g)" % (max(r.momentum_sup), r.momentum_rel),
        "residual temperature sup = %.6g  (rel %.3g)" % (max(r.temperature_sup), r.temperature_rel),
        "residual div v       sup = %.6g  (rel %.3g)"
        % (max(r.incompressibility_sup), r.incompressibility_rel),
        "field scale          %.6g" % r.scale,
        "dealias overflow count %d" % r.dealias_overflow,
    ]


def run_from_config(cfg: RunConfig) -> int:
    os.makedirs(cfg.out, exist_ok=True)
    lines = ["bcif run", "config:"]
    for f in dc_fields(RunConfig):
        lines.append("  %s = %r" % (f.name, getattr(cfg, f.name)))
    family = build_family()
    pspec = PartitionSpec()
    rows = []
    status = 0

    try:
        if cfg.experiment == "check_residual":
            state = load_state(cfg.snapshot_in, workers=cfg.workers)
            rep = diag.system_residual(state)
            lines += _report_lines_residual(rep)
        elif cfg.experiment == "step":
            state = build_state(cfg)
            lam = cfg.lam_list()[0]
            step = make_step_params(family, 1, lam, cfg.mu or None)
            new_state, srep = assemble_step(state, family, step, pspec)
            lines.append("step n=1 lambda=%d mu=%d" % (step.lam, step.mu))
            lines.append("cells per sample: %s" % srep.cells)
            lines.append("nu factors: %s (%s)" % (srep.nus, srep.nu_note))
            for name in sorted(srep.norms):
                lines.append("  sup %s = %.6g" % (name, srep.sup(name)))
            lines.append("measured M = %.6g" % srep.measured_M)
            for j in range(state.tgrid.n_time):
                rows.append(
                    diag.DecayRow(
                        lam=step.lam,
                        mu=step.mu,
                        grid_n=cfg.grid,
                        t_index=j,
                        norms={k: v[j] for k, v in srep.norms.items()},
                    )
                )
            if cfg.check_residual:
                rep = diag.system_residual(new_state)
                lines += _report_lines_residual(rep)
            if cfg.snapshots:
                save_state(os.path.join(cfg.out, "snapshots"), new_state)
        elif cfg.experiment in ("stage", "outer"):
            state = build_state(cfg)
            lams = cfg.lam_list()
            if len(lams) == 1:
                lams = None

            def params_for(k):
                # successive iterations shift the ramp upward so wave carriers
                # of different iterations stay spectrally disjoint
                if lams is not None:
                    shift = k * (max(lams) - min(lams) + 2 * len(lams))
                    return make_stage_params(
                        family, lambdas=[l + shift for l in lams], mu=cfg.mu or None, mode=cfg.mode
                    )
                return make_stage_params(
                    family, base_lambda=cfg.lam_list()[0] * 2**k, mu=cfg.mu or None, mode=cfg.mode
                )

            n_iter = cfg.n_iterations if cfg.experiment == "outer" else 1
            states, orep = run_outer(state, family, n_iter, params_for, pspec=pspec)
            eta = orep.iterations[0].eta
            lines.append("eta = %.6g (mode %s)" % (eta, state.mode))
            for k, it in enumerate(orep.iterations):
                post = it.post
                lines.append("iteration %d (delta=%.4g):" % (k, orep.deltas[k]))
                lines.append(
                    "  ||R||_0 = %.6g  target eta*delta/2 = %.6g  halved=%s"
                    % (post["sup_R"], post["target_R"], post["stress_halved"])
                )
                lines.append(
                    "  ||f||_0 = %.6g  target %.6g  halved=%s"
                    % (post["sup_f"], post["target_f"], post["flux_halved"])
                )
                lines.append(
                    "  ||v_new - v||_0 = %.6g  vs M sqrt(delta) = %.6g (measured M %.4g)"
                    % (post["sup_dv"], it.measured_M * np.sqrt(orep.deltas[k]), it.measured_M)
                )
                if "energy_gap_sup" in post:
                    lines.append(
                        "  energy gap sup = %.6g  band [3d/8 e, 5d/8 e] ok = %s"
                        % (post["energy_gap_sup"], post["band_ok"])
                    )
                for srep in it.step_reports:
                    for j in range(states[0].tgrid.n_time):
                        rows.append(
                            diag.DecayRow(
                                lam=srep.lam,
                                mu=srep.mu,
                                grid_n=cfg.grid,
                                t_index=j,
                                norms={kk: vv[j] for kk, vv in srep.norms.items()},
                            )
                        )
            if cfg.check_residual:
                rep = diag.system_residual(states[-1])
                lines += _report_lines_residual(rep)
            if cfg.snapshots:
                save_state(os.path.join(cfg.out, "snapshots"), states[-1])
        elif cfg.experiment == "decay":
            e = cfg.energy

            def make_state(n_grid):
                sub = RunConfig(**{f.name: getattr(cfg, f.name) for f in dc_fields(RunConfig)})
                sub.grid = n_grid
                return build_state(sub)

            lams = cfg.lam_list()
            mu = cfg.mu or 2
            triples = [(lam, mu, cfg.grid) for lam in lams]
            rows = diag.stress_decay_experiment(make_state, family, triples, pspec)
            sup_by_lam = {}
            for r in rows:
                d = sup_by_lam.setdefault(r.lam, {})
                for k, v in r.norms.items():
                    d[k] = max(d.get(k, 0.0), v)
            lines.append("decay sweep lambda=%s mu=%d grid=%d" % (lams, mu, cfg.grid))
            for lam in lams:
                d = sup_by_lam[lam]
                lines.append(
                    "  lambda=%3d  deltaR=%.6g  deltaf=%.6g  osc=%.6g trans=%.6g"
                    % (
                        lam,
                        d.get("delta_R", 0),
                        d.get("delta_f", 0),
                        d.get("oscillation_R", 0),
                        d.get("transport_R", 0),
                    )
                )
            if len(lams) >= 2:
                xs = lams
                for name in ("delta_R", "delta_f", "oscillation_R", "transport_R"):
                    ys = [sup_by_lam[l].get(name, 0.0) for l in lams]
                    if min(ys) > 0:
                        lines.append(
                            "  log-log slope of %s: %.3f" % (name, diag.fit_loglog_slope(xs, ys))
                        )
        else:
            raise ValueError("unknown experiment %r" % cfg.experiment)
    except (StageSetupError, GeometryDomainError, CarrierError, BandViolationError) as ex:
        lines.append("RUN FAILED: %s: %s" % (type(ex).__name__, ex))
        status = 2
    except (OSError, ValueError) as ex:
        lines.append("RUN FAILED: %s: %s" % (type(ex).__name__, ex))
        status = 2

    if rows:
        diag.write_csv(os.path.join(cfg.out, "diagnostics.csv"), rows, cfg.experiment)
    with open(os.path.join(cfg.out, "report.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    for ln in lines:
        print(ln)
    return status


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="bcif", description=__doc__)
    ap.add_argument("--config", help="key=value config file")
    ap.add_argument("--experiment")
    ap.add_argument("--preset")
    ap.add_argument("--grid", type=int)
    ap.add_argument("--tsamples", type=int)
    ap.add_argument("--delta", type=float)
    ap.add_argument("--lambda", dest="lam")
    ap.add_argument("--mu", type=int)
    ap.add_argument("--steps", type=int)
    ap.add_argument("--mode")
    ap.add_argument("--out")
    ap.add_argument("--seed", type=int)
    ap.add_argument("--check-residual", dest="check_residual", type=int)
    ap.add_argument("--snapshot-in", dest="snapshot_in")
    ap.add_argument("--n-iterations", dest="n_iterations", type=int)
    args = ap.parse_args(argv)

    cfg = parse_config(args.config) if args.config else RunConfig()
    for name in (
        "experiment",
        "preset",
        "grid",
        "tsamples",
        "delta",
        "lam",
        "mu",
        "steps",
        "mode",
        "out",
        "seed",
        "check_residual",
        "snapshot_in",
        "n_iterations",
    ):
        val = getattr(args, name, None)
        if val is not None:
            setattr(cfg, name, val)
    try:
        return run_from_config(cfg)
    except ValueError as ex:
        print("config error: %s" % ex, file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
