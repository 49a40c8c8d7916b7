"""Pin the compiled whole-pass kernels against the reference step functions."""

import numpy as np
import pytest

from lienav import estimation
from lienav.estimation import GateConfig, rts_smooth, run_filter
from lienav.ins import LeverArm
from lienav.lie import ConcentratedGaussian
from lienav.simulator import SimNoiseConfig, simulate_dataset

pytestmark = pytest.mark.skipif(estimation._fast is None, reason="numba unavailable")


@pytest.fixture(scope="module")
def small_run():
    cfg = SimNoiseConfig(seed=42)
    data = simulate_dataset("circular", cfg, fs=50.0, duration_s=60.0, static_s=4.0)
    from lienav.lie import GroupElement

    init = ConcentratedGaussian(
        GroupElement(data.ref.rot[0], data.ref.vel[0], data.ref.pos[0], np.zeros(6)),
        np.diag(np.full(15, 1e-4)),
    )
    lever = LeverArm(np.array([0.05, -0.02, 0.1]))
    return data, init, lever


def _compare_histories(fast, ref, atol=1e-9):
    assert len(fast) == len(ref)
    scale = np.max(np.abs(ref.pos_upd))
    assert np.max(np.abs(fast.rot_upd - ref.rot_upd)) < atol
    assert np.max(np.abs(fast.vel_upd - ref.vel_upd)) < atol * 10
    assert np.max(np.abs(fast.pos_upd - ref.pos_upd)) < atol * scale
    assert np.max(np.abs(fast.bias_upd - ref.bias_upd)) < atol
    assert np.max(np.abs(fast.cov_upd - ref.cov_upd)) < atol
    assert np.max(np.abs(fast.cov_pred - ref.cov_pred)) < atol
    assert np.max(np.abs(fast.trans - ref.trans)) < atol
    assert np.max(np.abs(fast.omega_dt - ref.omega_dt)) < atol


class TestFilterParity:
    @pytest.mark.parametrize("gate", [None, GateConfig(16.27, "soft"), GateConfig(16.27, "hard")])
    def test_matches_reference_path(self, small_run, gate):
        data, init, lever = small_run
        params = data.cfg.imu_params()
        fast = run_filter(data.imu, data.gnss, init, params, lever, gate, use_fast=True)
        ref = run_filter(data.imu, data.gnss, init, params, lever, gate, use_fast=False)
        _compare_histories(fast, ref)
        assert fast.gates.keys() == ref.gates.keys()
        for k in fast.gates:
            assert fast.gates[k].zeta == pytest.approx(ref.gates[k].zeta, rel=1e-9, abs=1e-12)
            assert fast.gates[k].gamma == pytest.approx(ref.gates[k].gamma, rel=1e-9)
            assert fast.gates[k].accepted == ref.gates[k].accepted

    def test_likelihood_cost_matches(self, small_run):
        data, init, lever = small_run
        params = data.cfg.imu_params()
        fast = run_filter(data.imu, data.gnss, init, params, lever, None,
                          collect_likelihood=True, use_fast=True)
        ref = run_filter(data.imu, data.gnss, init, params, lever, None,
                         collect_likelihood=True, use_fast=False)
        assert fast.likelihood_cost == pytest.approx(ref.likelihood_cost, rel=1e-9)


class TestSmootherParity:
    def test_matches_reference_path(self, small_run):
        data, init, lever = small_run
        params = data.cfg.imu_params()
        hist = run_filter(data.imu, data.gnss, init, params, lever,
                          GateConfig(16.27, "soft"), use_fast=True)
        fast = rts_smooth(hist)
        ref = estimation._rts_smooth_numpy(hist)
        scale = np.max(np.abs(ref.pos))
        assert np.max(np.abs(fast.rot - ref.rot)) < 1e-9
        assert np.max(np.abs(fast.vel - ref.vel)) < 1e-8
        assert np.max(np.abs(fast.pos - ref.pos)) < 1e-9 * scale
        assert np.max(np.abs(fast.bias - ref.bias)) < 1e-9
        assert np.max(np.abs(fast.cov - ref.cov)) < 1e-9
