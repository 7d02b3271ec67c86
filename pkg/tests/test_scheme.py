import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose

from bcif.geometry import GeometryDomainError, beltrami_mode, pack_sym
from bcif.grid import CarrierError, make_grid
from bcif.partition import PartitionSpec
from bcif.profiles import ClosedForm1D, EnergyProfile, HeatSource, TrigPoly1D
from bcif.scheme import (
    VOL,
    BandViolationError,
    StageContext,
    StageSetupError,
    StepParams,
    amplitude_b,
    amplitude_beta,
    assemble_step,
    eta_constant,
    make_stage_params,
    make_step_params,
    nu_factor,
    preset_cells,
    preset_thm11,
    preset_thm12,
    preset_thm13,
    rho_bar,
    run_outer,
    run_stage,
    temperature_wave,
    velocity_wave,
)
from bcif.series import FieldSeries
from bcif.diagnostics import energy_gap, system_residual
from bcif.timeops import TimeGrid


TINY_E = 1e-5 * VOL


def thm11_state(grid, tg, e_value=VOL, theta_amp=1.0):
    return preset_thm11(
        grid, tg, TrigPoly1D(cos_coeffs=(theta_amp,)), EnergyProfile.constant(e_value)
    )


def test_nu_factor_values():
    assert nu_factor((0, 0, 0)) == 1
    assert nu_factor((1, 0, 0)) == 2
    assert nu_factor((0, 1, 0)) == 4
    assert nu_factor((1, 1, 1)) == 128
    assert nu_factor((-1, 0, 0)) == 2
    assert nu_factor((2, 0, 0)) == 1


def test_nu_distinct_on_overlapping_cells():
    # any two cells whose bumps can overlap (|l - l'|_inf <= 1) get
    # distinct frequencies
    for base in ((0, 0, 0), (3, -2, 5)):
        nu0 = nu_factor(base)
        for d in itertools.product((-1, 0, 1), repeat=3):
            if d == (0, 0, 0):
                continue
            l = tuple(b + x for b, x in zip(base, d))
            assert nu_factor(l) != nu0


def test_step_params_divisibility():
    with pytest.raises(StageSetupError, match="lambda_n/mu_n"):
        StepParams(n=1, direction_index=0, mu=3, lam=16, lambda0=np.sqrt(2))


def test_make_step_params_rounds_up(family):
    step = make_step_params(family, 1, 17, 4)
    assert step.lam == 20 and step.lam % step.mu == 0


def test_default_mu_rule(family):
    assert make_step_params(family, 1, 16).mu == 2
    assert make_step_params(family, 1, 100000).mu == 10


def test_rho_bar_examples(grid16, family):
    tg = TimeGrid(3)
    # v = 0, delta = 1, e = VOL: rho = (VOL/2) / (3 VOL) = 1/6; the 1/3
    # comes from tr(rho Id - R) = 3 rho, the energy the stage injects
    st = thm11_state(grid16, tg, VOL)
    assert rho_bar(st.energy, st, 0) == pytest.approx(1.0 / 6.0)
    st2 = thm11_state(grid16, tg, 2 * VOL)
    assert rho_bar(st2.energy, st2, 0) == pytest.approx(1.0 / 3.0)


def test_rho_bar_band_violation(grid16, family):
    tg = TimeGrid(3)
    st = thm11_state(grid16, tg, VOL)
    n = grid16.n

    def v_at(j):
        out = np.zeros((3, n, n, n))
        out[0] = 1.0  # int |v|^2 = VOL > e (1 - delta/2)
        return out

    st.v = FieldSeries.from_function(tg.n_time, (3, n, n, n), v_at)
    with pytest.raises(StageSetupError):
        rho_bar(st.energy, st, 0)


def test_amplitude_b_example(grid16, family):
    # R = 0, v = 0, delta = 1, e = VOL: only l = 0 active and
    # b = sqrt(1/6) * 1 * (1/2), constant over the grid
    tg = TimeGrid(3)
    st = thm11_state(grid16, tg)
    step = make_step_params(family, 1, 4, 2)
    b = amplitude_b(st, family, step, (0, 0, 0), 0)
    assert_allclose(b, np.sqrt(1.0 / 6.0) / 2.0, atol=1e-14)
    assert np.abs(amplitude_b(st, family, step, (1, 0, 0), 0)).max() == 0.0


def test_amplitude_beta_examples(grid16, family):
    tg = TimeGrid(3)
    st = thm11_state(grid16, tg)
    step = make_step_params(family, 1, 4, 2)
    # f_prev = 0 -> beta = 0
    assert np.abs(amplitude_beta(st, family, step, (0, 0, 0), 0)).max() == 0.0
    # constant f0 = A_1: g_1 = 1, rho = 1/6, gamma = 1/2:
    # beta = (1/(2 sqrt(1/6))) (-1)/(1/2) = -sqrt(6)
    n = grid16.n

    def f_at(j):
        out = np.empty((3, n, n, n))
        for a in range(3):
            out[a] = family.a_vectors[0][a]
        return out

    st.f = FieldSeries.from_function(tg.n_time, (3, n, n, n), f_at)
    beta = amplitude_beta(st, family, step, (0, 0, 0), 0)
    assert_allclose(beta, -np.sqrt(6.0), atol=1e-12)
    # step n >= 4 switches the temperature waves off
    step4 = make_step_params(family, 4, 8, 2)
    assert np.abs(amplitude_beta(st, family, step4, (0, 0, 0), 0)).max() == 0.0


def test_amplitude_bound(grid16, family):
    tg = TimeGrid(3)
    e = EnergyProfile.affine(VOL, 0.3 * VOL)
    st = preset_cells(grid16, tg, v_const=(0.3, 0, 0), stress_amp=2e-3, e=e)
    ctx = StageContext.for_state(st, family)
    step = make_step_params(family, 1, 4, 2)
    rho_max = ctx.rho.max()
    gam_max = max(ctx.gamma_field(0, j).max() for j in range(3))
    for j in range(3):
        for l in ((0, 0, 0), (1, 0, 0)):
            b = amplitude_b(st, family, step, l, j, stage=ctx)
            assert np.abs(b).max() <= np.sqrt(rho_max) * gam_max + 1e-12


def test_velocity_wave_const_envelope_is_beltrami(grid16, family):
    step = make_step_params(family, 1, 4, 2)
    mode = beltrami_mode(family, 0)
    env = np.full((16, 16, 16), 0.25)
    w_ol, w_ocl = velocity_wave(grid16, env, mode, step, (0, 0, 0), 0.0)
    assert np.abs(w_ocl).max() == 0.0
    w = w_ol + w_ocl
    eig = step.lam * 1 * np.sqrt(2.0)
    assert np.abs(grid16.curl(w) - eig * w).max() < 1e-12
    assert np.abs(grid16.divergence(w)).max() < 1e-12


def test_velocity_wave_curl_form_agreement(grid16, family):
    step = make_step_params(family, 1, 4, 2)
    mode = beltrami_mode(family, 2)
    x2 = grid16.x1[None, :, None] + np.zeros((16, 16, 16))
    env = 0.3 + 0.07 * np.sin(x2)
    l = (0, 0, 0)
    w_ol, w_ocl = velocity_wave(grid16, env, mode, step, l, 0.0)
    carrier = step.lam * nu_factor(l) * mode.k
    pure = grid16.modulated_wave(env, mode.B, tuple(int(c) for c in carrier))
    curl_form = grid16.curl(pure) / (step.lam * step.lambda0 * nu_factor(l))
    assert np.abs(curl_form - (w_ol + w_ocl)).max() < 1e-11
    assert np.abs(grid16.divergence(w_ol + w_ocl)).max() < 1e-10 * np.abs(w_ol).max()


def test_velocity_wave_nyquist_error(grid16, family):
    step = make_step_params(family, 1, 8, 2)
    mode = beltrami_mode(family, 0)
    env = np.ones((16, 16, 16))
    with pytest.raises(CarrierError, match="nu"):
        velocity_wave(grid16, env, mode, step, (1, 0, 0), 0.0)  # nu = 2, carrier 16


def test_temperature_wave_example(grid16, family):
    step = make_step_params(family, 1, 4, 2)
    mode = beltrami_mode(family, 0)
    z = np.zeros((16, 16, 16))
    x1 = grid16.x1[:, None, None] + z
    x2 = grid16.x1[None, :, None] + z
    chi = temperature_wave(grid16, np.ones((16, 16, 16)), mode, step, (0, 0, 0), 0.0)
    assert np.abs(chi - 2 * np.cos(4 * (x1 + x2))).max() < 1e-12
    assert abs(grid16.mean(chi)) < 1e-14


def test_temperature_consistency_identity(grid32, family):
    # 2 sum_l beta_l b_l = -g_n(f0) pointwise (the flux block the step consumes)
    tg = TimeGrid(3)
    e = EnergyProfile.constant(VOL)
    st = preset_cells(grid32, tg, v_const=(0.3, 0, 0), stress_amp=2e-3, flux_amp=2e-3, e=e)
    ctx = StageContext.for_state(st, family)
    step = make_step_params(family, 1, 4, 2)
    pspec = PartitionSpec()
    from bcif.partition import active_cells

    j = 1
    total = np.zeros((32, 32, 32))
    for l in active_cells(pspec, step.mu, st.v.get(j)):
        b = amplitude_b(st, family, step, l, j, stage=ctx)
        beta = amplitude_beta(st, family, step, l, j, stage=ctx)
        total += 2.0 * beta * b
    g_n = ctx.g_fields(j)[0]  # already g(-f0)
    assert np.abs(total - g_n).max() < 1e-12 * max(1.0, np.abs(g_n).max())


def test_cancellation_identity(grid32, family):
    # div(M) + div(2 sum b^2 Re(B x conj B)) = div(w_o x w_o) with M taken
    # from the analytic modulated form, everything resolved on the grid
    tg = TimeGrid(3)
    st = thm11_state(grid32, tg)
    ctx = StageContext.for_state(st, family)
    step = make_step_params(family, 1, 4, 2)
    mode = beltrami_mode(family, 0)
    j = 0
    b = amplitude_b(st, family, step, (0, 0, 0), j, stage=ctx)
    w_ol, _ = velocity_wave(grid32, b, mode, step, (0, 0, 0), 0.0)
    # analytic oscillatory part: 2 Re(b^2 B_p B_q e^{2 i phi})
    carrier = 2 * step.lam * mode.k
    M6 = np.stack(
        [
            grid32.modulated_wave(b * b, mode.B[p] * mode.B[q], tuple(int(c) for c in carrier))
            for p, q in ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
        ]
    )
    khat = mode.k / np.linalg.norm(mode.k)
    mode6 = pack_sym(np.eye(3) - np.outer(khat, khat))
    rep = (b * b)[None] * mode6[:, None, None, None]
    lhs = grid32.div_sym(M6) + grid32.div_sym(rep)
    ww = np.stack(
        [
            grid32.product(w_ol[p], w_ol[q])
            for p, q in ((0, 0), (1, 1), (2, 2), (0, 1), (0, 2), (1, 2))
        ]
    )
    rhs = grid32.div_sym(ww)
    assert np.abs(lhs - rhs).max() < 1e-10 * max(1.0, np.abs(rhs).max())


# ----------------------------------------------------------------------
# step closure
# ----------------------------------------------------------------------
def test_step_closure_thm11(grid32, family):
    tg = TimeGrid(5)
    st = thm11_state(grid32, tg)
    new, rep = assemble_step(st, family, make_step_params(family, 1, 8, 2))
    r = system_residual(new)
    assert r.worst_rel < 1e-11
    assert max(r.incompressibility_sup) < 1e-11 * r.scale
    assert rep.sup("mean_w") < 1e-13
    # theta mean is preserved by the mean-free temperature update
    assert abs(grid32.mean(new.theta.get(2)) - grid32.mean(st.theta.get(2))) < 1e-13


def test_step_closure_cells_moving(grid32, family):
    # constant velocity activates two drifting cells with distinct nu
    tg = TimeGrid(5)
    e = EnergyProfile.affine(1.1 * VOL, 0.25 * VOL)
    st = preset_cells(
        grid32, tg, v_const=(0.3, 0, 0), stress_amp=4e-3, flux_amp=4e-3, e=e
    )
    assert system_residual(st).worst_rel < 1e-12
    ctx = StageContext.for_state(st, family)
    new, rep = assemble_step(st, family, make_step_params(family, 1, 4, 2), stage=ctx)
    assert rep.cells[0] == [(0, 0, 0), (1, 0, 0)]
    assert rep.nus[0] == [1, 2]
    assert rep.sup("chi") > 0  # temperature waves active
    assert rep.sup("transport_R") > 0
    r = system_residual(new)
    assert r.worst_rel < 1e-11


def test_step_closure_shear_velocity(grid32, family):
    tg = TimeGrid(5)
    e = EnergyProfile.affine(1.1 * VOL, 0.25 * VOL)
    st = preset_cells(
        grid32,
        tg,
        v_const=(0.3, 0, 0),
        v_shear=0.12,
        stress_amp=4e-3,
        flux_amp=4e-3,
        e=e,
    )
    ctx = StageContext.for_state(st, family)
    new, rep = assemble_step(st, family, make_step_params(family, 1, 4, 2), stage=ctx)
    assert rep.sup("w_oc") > 0  # spatially varying partition weights
    assert system_residual(new).worst_rel < 1e-11


def test_step_requires_matching_stage_position(grid16, family):
    tg = TimeGrid(3)
    st = thm11_state(grid16, tg)
    with pytest.raises(StageSetupError):
        assemble_step(st, family, make_step_params(family, 2, 6, 2))


def test_gamma_domain_error_signals_eta(grid16, family):
    tg = TimeGrid(3)
    e = EnergyProfile.constant(VOL)
    st = preset_cells(grid16, tg, stress_amp=0.2, e=e)  # far outside the ball
    with pytest.raises(GeometryDomainError, match="eta"):
        assemble_step(st, family, make_step_params(family, 1, 4, 2))


# ----------------------------------------------------------------------
# stages and the outer iteration
# ----------------------------------------------------------------------
def tiny_cells_state(grid, tg, family, flux=False):
    e = EnergyProfile.constant(TINY_E)
    eta = eta_constant(family, "prop21", e)
    return preset_cells(
        grid,
        tg,
        stress_amp=0.5 * eta,
        flux_amp=0.3 * eta if flux else 0.0,
        theta_amp=1e-5,
        e=e,
    )


def test_stage_representation_exactness(grid32, family):
    # after step n the running stress minus the accumulated delta-blocks
    # equals the remaining decomposition blocks, pointwise
    tg = TimeGrid(3)
    st = tiny_cells_state(grid32, tg, family, flux=True)
    ctx = StageContext.for_state(st, family)
    cur = st
    accR = [np.zeros((6, 32, 32, 32)) for _ in range(tg.n_time)]
    accF = [np.zeros((3, 32, 32, 32)) for _ in range(tg.n_time)]
    n_done = 0
    for n, lam in ((1, 4), (2, 6)):
        cur, rep, dd = assemble_step(
            cur, family, make_step_params(family, n, lam, 2), stage=ctx, keep_deltas=True
        )
        for j in range(tg.n_time):
            accR[j] += dd["R"].get(j)
            accF[j] += dd["f"].get(j)
        n_done = n
    mode6s = np.stack([pack_sym(family.matrices[i]) for i in range(6)])
    for j in range(tg.n_time):
        c = ctx.coeff_fields(j)
        oracle_R = -ctx.rho[j] * np.einsum("i...,ie->e...", c[n_done:], mode6s[n_done:])
        lhs = cur.R.get(j) - accR[j]
        scale = max(np.abs(oracle_R).max(), 1e-300)
        assert np.abs(lhs - oracle_R).max() < 1e-10 * scale
        g3 = np.einsum("ce,e...->c...", family.g_solver, st.f.get(j))
        oracle_f = np.einsum("i...,ie->e...", g3[n_done:3], family.a_vectors[n_done:3])
        lhs_f = cur.f.get(j) - accF[j]
        fscale = max(np.abs(oracle_f).max(), 1e-300)
        assert np.abs(lhs_f - oracle_f).max() < 1e-10 * fscale


def test_run_stage_trend(grid32, family):
    tg = TimeGrid(3)
    st = tiny_cells_state(grid32, tg, family)
    params = make_stage_params(family, lambdas=[4, 6, 8, 10, 12, 14], mu=2, mode="trend")
    new, rep = run_stage(st, family, params)
    assert new.stage_position == 0
    # final stress is the sum of trace-free delta blocks
    assert rep.post["trace_sup"] < 1e-14
    assert system_residual(new).worst_rel < 1e-10
    eg = energy_gap(new)
    assert eg.gap_sup < 1e-5 * TINY_E
    assert eg.in_half_band
    assert rep.post["flux_halved"]


def test_run_stage_strict_raises_on_stress_floor(grid32, family):
    # the lambda-independent error-I floor keeps strict mode honest at desk
    # frequencies: the halving target cannot be met and the run says so
    tg = TimeGrid(3)
    st = tiny_cells_state(grid32, tg, family)
    params = make_stage_params(family, lambdas=[4, 6, 8, 10, 12, 14], mu=2, mode="strict")
    with pytest.raises(BandViolationError, match="halve"):
        run_stage(st, family, params)


def test_run_stage_strict_precondition(grid32, family):
    tg = TimeGrid(3)
    e = EnergyProfile.constant(TINY_E)
    eta = eta_constant(family, "prop21", e)
    st = preset_cells(grid32, tg, stress_amp=3.0 * eta, theta_amp=1e-5, e=e)
    params = make_stage_params(family, lambdas=[4, 6, 8, 10, 12, 14], mu=2, mode="strict")
    with pytest.raises(StageSetupError, match="eta"):
        run_stage(st, family, params)


def test_run_outer_one_iteration(grid32, family):
    tg = TimeGrid(3)
    st = tiny_cells_state(grid32, tg, family)

    def spf(k):
        return make_stage_params(family, lambdas=[4, 6, 8, 10, 12, 14], mu=2, mode="trend")

    states, rep = run_outer(st, family, 1, spf)
    assert len(states) == 2
    assert rep.deltas == [1.0]
    assert rep.v_increments[0] > 0
    assert rep.v_increments[0] <= rep.iterations[0].measured_M * 1.0 + 1e-12
    assert system_residual(states[-1]).worst_rel < 1e-10


def test_run_outer_second_iteration_hits_amplitude_domain(grid32, family):
    # documented desk-scale limit: the stress floor left by error I exceeds
    # what the halved amplitude can decompose, so iteration 2 cannot start
    tg = TimeGrid(3)
    st = tiny_cells_state(grid32, tg, family)

    def spf(k):
        lams = [[4, 6, 8, 10, 12, 14], [16, 18, 20, 22, 24, 26]][k]
        return make_stage_params(family, lambdas=lams, mu=2, mode="trend")

    with pytest.raises(GeometryDomainError):
        run_outer(st, family, 2, spf)


# ----------------------------------------------------------------------
# presets
# ----------------------------------------------------------------------
def test_preset_thm11_residual(grid32, family):
    tg = TimeGrid(5)
    st = thm11_state(grid32, tg)
    assert system_residual(st).worst_rel < 1e-12


def test_preset_thm11_requires_mean_zero():
    grid = make_grid(16)
    with pytest.raises(StageSetupError):
        preset_thm11(
            grid, TimeGrid(3), TrigPoly1D(mean=0.5, cos_coeffs=(1.0,)), EnergyProfile.constant(VOL)
        )


def test_preset_thm12_residual(grid32, family):
    tg = TimeGrid(5)
    src = HeatSource(a=ClosedForm1D(poly=(1.0,)), b=TrigPoly1D(cos_coeffs=(1.0,)))
    st = preset_thm12(grid32, tg, src, EnergyProfile.constant(VOL))
    # theta = t cos x3 solves exactly; the shared stencil is exact on t
    assert system_residual(st).worst_rel < 1e-12


def test_preset_thm13_residual(family):
    tg = TimeGrid(5)
    st = preset_thm13(make_grid(64), tg, N=4)
    assert st.mode == "prop22"
    r = system_residual(st)
    assert r.worst_rel < 1e-10
    # trace-free stress with the paper's off-diagonal entry
    R = st.R.get(0)
    assert np.abs(R[0] + R[1] + R[2]).max() == 0.0


def test_preset_thm13_carrier_check():
    grid = make_grid(16)
    with pytest.raises(CarrierError):
        preset_thm13(grid, TimeGrid(3), N=4)  # N^2 = 16 > kmax = 7
