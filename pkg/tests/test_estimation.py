import math

import numpy as np
import pytest

from lienav import estimation, ins, lie
from lienav.estimation import (
    FilterEpoch,
    GateConfig,
    default_kappa,
    ekf_predict,
    ekf_update,
    lie_predict,
    lie_update,
    nees,
    nrs,
    rts_smooth,
    run_filter,
)
from lienav.ins import GnssFix, ImuNoiseParams, ImuSample, LeverArm
from lienav.lie import DBA, ConcentratedGaussian, GroupElement

from oracles import chi2_quantile_by_inversion, classic_kalman_filter, classic_rts

from test_ins import equilibrium_input, level_state, table_params


class TestDefaultKappa:
    def test_95_percent(self):
        oracle = chi2_quantile_by_inversion(0.95, 3)
        assert abs(default_kappa(0.95) - 7.815) < 0.01
        assert abs(default_kappa(0.95) - oracle) < 1e-6

    def test_999_permille(self):
        oracle = chi2_quantile_by_inversion(0.999, 3)
        assert abs(default_kappa(0.999) - 16.27) < 0.02
        assert abs(default_kappa(0.999) - oracle) < 1e-6

    def test_monotone(self):
        values = [default_kappa(c) for c in (0.5, 0.9, 0.95, 0.99, 0.999)]
        assert all(a < b for a, b in zip(values, values[1:]))

    def test_rejects_bad_confidence(self):
        with pytest.raises(ValueError):
            default_kappa(1.0)


class TestNrs:
    def test_zero_innovation(self):
        assert nrs(np.zeros(3), np.eye(3)) == 0.0

    def test_identity_covariance(self):
        assert nrs(np.array([3.0, 0.0, 0.0]), np.eye(3)) == pytest.approx(9.0)

    def test_matches_solve_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a = rng.standard_normal((3, 3))
            xi = a @ a.T + 0.1 * np.eye(3)
            z = rng.standard_normal(3)
            expected = float(z @ np.linalg.inv(xi) @ z)
            assert abs(nrs(z, xi) - expected) < 1e-10 * max(1.0, expected)

    def test_singular_covariance_raises(self):
        with pytest.raises(ValueError):
            nrs(np.ones(3), np.zeros((3, 3)))


def small_cgd(rng=None, scale=1e-4):
    state = level_state(yaw=0.4)
    return ConcentratedGaussian(state, scale * np.eye(15))


class TestPredict:
    def test_pure_adjoint_transport_when_c_and_q_vanish(self):
        rng = np.random.default_rng(1)
        state = small_cgd()
        omega = rng.standard_normal(15) * 0.1
        predicted, omega_dt, f = lie_predict(state, omega, np.zeros((15, 15)), np.zeros((15, 15)), 0.5)
        ad = lie.adjoint(lie.group_exp(-omega_dt))
        assert np.allclose(f, ad, atol=1e-15)
        assert np.max(np.abs(predicted.cov - ad @ state.cov @ ad.T)) < 1e-18

    def test_equilibrium_keeps_mean_and_adds_q(self):
        mean = level_state(yaw=-0.2)
        state = ConcentratedGaussian(mean, np.zeros((15, 15)))
        u = equilibrium_input(mean)
        params = table_params()
        dt = 1.0 / 200.0
        predicted, omega_dt, _ = ekf_predict(state, u, dt, params)
        assert np.array_equal(omega_dt, np.zeros(15))
        assert np.max(np.abs(predicted.mean.pos - mean.pos)) < 1e-12
        assert np.max(np.abs(predicted.mean.rot - mean.rot)) < 1e-12
        assert np.max(np.abs(predicted.cov - ins.process_noise_Q(params, dt))) < 1e-30

    def test_monte_carlo_push_forward(self):
        # sampling oracle for the covariance propagation, small-noise regime
        rng = np.random.default_rng(2)
        mean = level_state(yaw=0.8)
        cov = 1e-6 * np.eye(15)
        state = ConcentratedGaussian(mean, cov)
        u = ImuSample(0.0, np.array([0.01, -0.02, 0.3]), np.array([0.1, 9.7, 0.4]))
        dt = 0.1
        params = ImuNoiseParams(2e-4, 2e-3, 1e-4, 1e-5)
        predicted, _, _ = ekf_predict(state, u, dt, params)

        q = ins.process_noise_Q(params, dt)
        chol_q = np.linalg.cholesky(q + 1e-300 * np.eye(15))
        pred_inv = lie.inverse(predicted.mean)
        n = 100_000
        eps = np.empty((n, 15))
        for i in range(n):
            x = lie.cgd_sample(state, rng)
            w = chol_q @ rng.standard_normal(15)
            x_next = lie.compose(x, lie.group_exp(ins.omega_fn(x, u) * dt + w))
            eps[i] = lie.group_log(lie.compose(pred_inv, x_next))
        emp_cov = eps.T @ eps / n
        scale = np.max(np.abs(predicted.cov))
        assert np.max(np.abs(emp_cov - predicted.cov)) < 0.03 * scale
        assert np.max(np.abs(eps.mean(axis=0))) < 0.03 * math.sqrt(scale)

    def test_rejects_nonpositive_dt(self):
        with pytest.raises(ValueError):
            lie_predict(small_cgd(), np.zeros(15), np.zeros((15, 15)), np.zeros((15, 15)), 0.0)


class TestUpdate:
    def test_exact_measurement_leaves_mean(self):
        state = small_cgd()
        fix = GnssFix(0.0, state.mean.pos.copy(), np.array([0.01, 0.01, 0.03]))
        updated, report = ekf_update(state, fix, LeverArm())
        assert report.zeta == 0.0
        assert report.gamma == 1.0
        assert report.accepted
        assert np.array_equal(updated.mean.pos, state.mean.pos)
        assert np.array_equal(updated.mean.rot, state.mean.rot)

    def test_gamma_formula_at_twice_kappa(self):
        state = ConcentratedGaussian(GroupElement.identity(), np.zeros((15, 15)))
        z = np.array([2.0, 0.0, 0.0])  # zeta = 4 with identity R
        gate = GateConfig(kappa=2.0, mode="soft")
        _, report = lie_update(state, z, np.zeros(3), ins.jacobian_H(state.mean, LeverArm()), np.eye(3), gate)
        assert report.zeta == pytest.approx(4.0)
        assert report.gamma == 0.5
        assert not report.accepted

    def test_scalar_kalman_blend(self):
        p, r = 0.04, 0.01
        mean = level_state(yaw=0.0)
        state = ConcentratedGaussian(mean, p * np.eye(15))
        truth_offset = np.array([0.5, -0.3, 0.2])
        fix = GnssFix(0.0, mean.pos + truth_offset, np.full(3, math.sqrt(r)))
        updated, _ = ekf_update(state, fix, LeverArm())
        expected = mean.pos + p / (p + r) * truth_offset
        assert np.max(np.abs(updated.mean.pos - expected)) < 1e-9

    def test_infinite_r_leaves_state(self):
        state = small_cgd()
        fix = GnssFix(0.0, state.mean.pos + 1.0, np.full(3, 1e6))  # R = 1e12 I
        updated, _ = ekf_update(state, fix, LeverArm())
        assert np.max(np.abs(updated.mean.pos - state.mean.pos)) < 1e-9
        assert np.max(np.abs(updated.cov - state.cov)) < 1e-6 * np.max(np.abs(state.cov))

    def test_soft_gate_passes_through_when_accepted(self):
        state = small_cgd()
        fix = GnssFix(0.0, state.mean.pos + 1e-3, np.array([0.01, 0.01, 0.03]))
        gated, rep1 = ekf_update(state, fix, LeverArm(), GateConfig(kappa=1e9, mode="soft"))
        plain, rep2 = ekf_update(state, fix, LeverArm(), None)
        assert rep1.accepted and rep2.accepted
        assert np.array_equal(gated.mean.pos, plain.mean.pos)
        assert np.array_equal(gated.cov, plain.cov)

    def test_hard_gate_rejects(self):
        state = small_cgd()
        fix = GnssFix(0.0, state.mean.pos + 100.0, np.array([0.01, 0.01, 0.03]))
        updated, report = ekf_update(state, fix, LeverArm(), GateConfig(kappa=16.27, mode="hard"))
        assert not report.accepted
        assert updated is state

    def test_soft_gate_scales_innovation_not_covariance(self):
        state = small_cgd()
        offset = np.array([1.0, 0.0, 0.0])
        fix = GnssFix(0.0, state.mean.pos + offset, np.array([0.01, 0.01, 0.03]))
        gate = GateConfig(kappa=16.266, mode="soft")
        soft, report = ekf_update(state, fix, LeverArm(), gate)
        full, _ = ekf_update(state, fix, LeverArm(), None)
        assert report.gamma < 0.01
        moved_soft = np.linalg.norm(soft.mean.pos - state.mean.pos)
        moved_full = np.linalg.norm(full.mean.pos - state.mean.pos)
        assert moved_soft < report.gamma * moved_full * 1.01 + 1e-12
        assert np.array_equal(soft.cov, full.cov)

    def test_rejects_nonfinite_fix(self):
        state = small_cgd()
        fix = GnssFix(0.0, np.array([np.nan, 0.0, 0.0]), np.ones(3))
        with pytest.raises(ValueError):
            ekf_update(state, fix, LeverArm())

    def test_rejects_nonpositive_sigma(self):
        state = small_cgd()
        fix = GnssFix(0.0, state.mean.pos, np.array([0.01, 0.0, 0.03]))
        with pytest.raises(ValueError):
            ekf_update(state, fix, LeverArm())


def t6_filter_run(rng, n_steps=40, with_truth=False):
    """Drive the Lie filter on a pure T(6) model, mirrored by a linear model.

    Dynamics: bias random walk around a constant drift input; measurements
    observe the accel-bias block directly. On the abelian factor the group
    recursion must coincide with a textbook linear Kalman filter.
    """
    dt = 0.5
    drift = lie.tangent(dba=[0.01, -0.02, 0.005], dbg=[0.001, 0.0, -0.002])
    q = np.zeros((15, 15))
    q[9:15, 9:15] = np.diag([1e-4, 2e-4, 1e-4, 1e-5, 1e-5, 2e-5]) * dt
    h_mat = np.zeros((3, 15))
    h_mat[:, DBA] = np.eye(3)
    r = np.diag([0.01, 0.02, 0.015])
    p0 = np.diag(np.concatenate([np.full(9, 1e-12), [0.5, 0.4, 0.3, 0.2, 0.1, 0.6]]))
    state = ConcentratedGaussian(GroupElement.identity(), p0)

    truth = np.zeros(15)
    chol_q = np.linalg.cholesky(q[9:15, 9:15])
    epochs = [FilterEpoch(0.0, state, state, np.zeros(15), np.eye(15), None)]
    zs, truths = [None], [truth.copy()]
    for k in range(1, n_steps + 1):
        truth[9:15] = truth[9:15] + drift[9:15] * dt + chol_q @ rng.standard_normal(6)
        predicted, omega_dt, f = lie_predict(state, drift, np.zeros((15, 15)), q, dt)
        if k % 2 == 0:
            z = truth[DBA] + np.linalg.cholesky(r) @ rng.standard_normal(3)
            y_hat = predicted.mean.bias[0:3]
            state, _ = lie_update(predicted, z, y_hat, h_mat, r, None)
            zs.append(z)
        else:
            state = predicted
            zs.append(None)
        epochs.append(FilterEpoch(k * dt, predicted, state, omega_dt, f, None))
        truths.append(truth.copy())
    return epochs, zs, truths, dict(dt=dt, drift=drift, q=q, h=h_mat, r=r, p0=p0)


class TestLinearEquivalence:
    def test_filter_matches_classic_kalman(self):
        rng = np.random.default_rng(3)
        epochs, zs, _, model = t6_filter_run(rng)
        n = len(epochs)
        phis = [np.eye(15)] * (n - 1)
        qs = [model["q"]] * (n - 1)
        us = [model["drift"] * model["dt"]] * (n - 1)
        hs = [model["h"]] * n
        rs = [model["r"]] * n
        xs_f, ps_f, _, _ = classic_kalman_filter(
            np.zeros(15), model["p0"], phis, qs, zs, hs, rs, us=us
        )
        for k, epoch in enumerate(epochs):
            tangent_state = np.concatenate([np.zeros(9), epoch.updated.mean.bias])
            assert np.max(np.abs(tangent_state - xs_f[k])) < 1e-9
            assert np.max(np.abs(epoch.updated.cov - ps_f[k])) < 1e-9

    def test_smoother_matches_classic_rts(self):
        rng = np.random.default_rng(4)
        epochs, zs, _, model = t6_filter_run(rng)
        n = len(epochs)
        phis = [np.eye(15)] * (n - 1)
        qs = [model["q"]] * (n - 1)
        us = [model["drift"] * model["dt"]] * (n - 1)
        hs = [model["h"]] * n
        rs = [model["r"]] * n
        xs_f, ps_f, xs_p, ps_p = classic_kalman_filter(
            np.zeros(15), model["p0"], phis, qs, zs, hs, rs, us=us
        )
        xs_s, ps_s = classic_rts(xs_f, ps_f, xs_p, ps_p, phis)
        smoothed = rts_smooth(epochs)
        for k in range(n):
            tangent_state = np.concatenate([np.zeros(9), smoothed[k].mean.bias])
            assert np.max(np.abs(tangent_state - xs_s[k])) < 1e-9
            assert np.max(np.abs(smoothed[k].cov - ps_s[k])) < 1e-9


class TestSmoother:
    def test_single_epoch_history_returns_filtered(self):
        state = small_cgd()
        epochs = [FilterEpoch(0.0, state, state, np.zeros(15), np.eye(15), None)]
        smoothed = rts_smooth(epochs)
        assert len(smoothed) == 1
        assert np.array_equal(smoothed[0].mean.pos, state.mean.pos)
        assert np.array_equal(smoothed[0].cov, state.cov)

    def test_empty_history_raises(self):
        with pytest.raises(ValueError):
            rts_smooth([])

    def test_degenerate_noise_free_limit(self):
        # with Q and R both vanishing the filtered, smoothed and true
        # trajectories coincide
        rng = np.random.default_rng(5)
        drift = lie.tangent(dba=[0.01, 0.0, -0.01], dbg=[0.0, 0.002, 0.0])
        dt = 0.5
        q = 1e-20 * np.eye(15)
        r = 1e-20 * np.eye(3)
        h_mat = np.zeros((3, 15))
        h_mat[:, DBA] = np.eye(3)
        state = ConcentratedGaussian(GroupElement.identity(), 1e-20 * np.eye(15))
        truth = np.zeros(15)
        epochs = [FilterEpoch(0.0, state, state, np.zeros(15), np.eye(15), None)]
        for k in range(1, 21):
            truth[9:15] = truth[9:15] + drift[9:15] * dt
            predicted, omega_dt, f = lie_predict(state, drift, np.zeros((15, 15)), q, dt)
            state, _ = lie_update(predicted, truth[DBA], predicted.mean.bias[0:3], h_mat, r, None)
            epochs.append(FilterEpoch(k * dt, predicted, state, omega_dt, f, None))
        smoothed = rts_smooth(epochs)
        assert np.max(np.abs(smoothed[20].mean.bias - truth[9:15])) < 1e-6
        assert np.max(np.abs(smoothed[0].mean.bias)) < 1e-6

    def test_smoothed_covariances_stay_spd(self):
        rng = np.random.default_rng(6)
        epochs, _, _, _ = t6_filter_run(rng, n_steps=60)
        smoothed = rts_smooth(epochs)
        for k in range(len(smoothed)):
            w = np.linalg.eigvalsh(smoothed[k].cov)
            assert w.min() > 0.0
            assert np.array_equal(smoothed[k].cov, smoothed[k].cov.T)


class TestNees:
    def test_perfect_estimate_gives_zero(self):
        state = small_cgd()
        epochs = [FilterEpoch(0.0, state, state, np.zeros(15), np.eye(15), None)]
        out = nees(epochs, [state.mean])
        assert out[0] == 0.0

    def test_unit_error_identity_covariance(self):
        state = ConcentratedGaussian(GroupElement.identity(), np.eye(15))
        epochs = [FilterEpoch(0.0, state, state, np.zeros(15), np.eye(15), None)]
        truth = lie.group_exp(lie.tangent(nu=[1.0, 0.0, 0.0]))
        assert nees(epochs, [truth])[0] == pytest.approx(1.0)

    def test_misaligned_lengths_raise(self):
        state = small_cgd()
        epochs = [FilterEpoch(0.0, state, state, np.zeros(15), np.eye(15), None)]
        with pytest.raises(ValueError):
            nees(epochs, [])


def static_dataset(n_seconds=4.0, fs=50.0, fix_rate=1.0):
    """Stationary scenario with equilibrium inputs and exact fixes."""
    mean = level_state(yaw=0.1)
    u = equilibrium_input(mean)
    n = int(n_seconds * fs) + 1
    imu = [ImuSample(k / fs, u.gyro, u.accel) for k in range(n)]
    stride = int(fs / fix_rate)
    fixes = [
        GnssFix(k / fs, mean.pos.copy(), np.array([0.01, 0.01, 0.03]))
        for k in range(0, n, stride)
    ]
    p0 = np.diag(np.full(15, 1e-6))
    return imu, fixes, ConcentratedGaussian(mean, p0)


class TestRunFilter:
    def test_updated_equals_predicted_without_fix(self):
        imu, fixes, init = static_dataset()
        hist = run_filter(imu, fixes, init, table_params(), use_fast=False)
        for k in range(len(hist)):
            epoch = hist[k]
            if epoch.gate is None:
                assert np.array_equal(epoch.updated.cov, epoch.predicted.cov)
                assert np.array_equal(epoch.updated.mean.pos, epoch.predicted.mean.pos)
            else:
                assert epoch.gate.accepted

    def test_static_run_stays_put(self):
        imu, fixes, init = static_dataset()
        hist = run_filter(imu, fixes, init, table_params(), use_fast=False)
        last = hist[len(hist) - 1]
        assert np.linalg.norm(last.updated.mean.pos - init.mean.pos) < 1e-3
        assert np.linalg.norm(last.updated.mean.vel) < 1e-3

    def test_covariances_stay_symmetric_spd(self):
        imu, fixes, init = static_dataset()
        hist = run_filter(imu, fixes, init, table_params(), use_fast=False)
        for k in range(0, len(hist), 17):
            cov = hist[k].updated.cov
            assert np.array_equal(cov, cov.T)
            assert np.linalg.eigvalsh(cov).min() > 0.0

    def test_rejects_nonmonotone_timestamps(self):
        imu, fixes, init = static_dataset()
        bad = list(imu)
        bad[3] = ImuSample(bad[2].t, bad[3].gyro, bad[3].accel)
        with pytest.raises(ValueError):
            run_filter(bad, fixes, init, table_params(), use_fast=False)

    def test_misaligned_fix_dropped_with_count(self):
        imu, fixes, init = static_dataset()
        # fs=50: next epoch after t=1.005 is 1.02, a gap of 0.015 > dt/2
        off_grid = GnssFix(1.005, fixes[0].pos.copy(), np.array([0.01, 0.01, 0.03]))
        hist = run_filter(imu, [off_grid], init, table_params(), use_fast=False)
        assert hist.dropped_fixes == 1
        assert len(hist.gates) == 0

    def test_likelihood_cost_accumulates(self):
        imu, fixes, init = static_dataset()
        hist = run_filter(imu, fixes, init, table_params(), use_fast=False, collect_likelihood=True)
        assert np.isfinite(hist.likelihood_cost)
        assert hist.likelihood_cost != 0.0
