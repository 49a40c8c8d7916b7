import math

import numpy as np
import pytest

from lienav import frames, ins, lie
from lienav.ins import GnssFix, ImuNoiseParams, ImuSample, LeverArm
from lienav.lie import DBA, DBG, NU, PHI, RHO, GroupElement

from oracles import rk4_nav_step

DEG = math.pi / 180.0


def table_params():
    return ImuNoiseParams.from_datasheet(
        ng_deg_sqrt_h=0.09, na_mps_sqrt_h=0.008, ba_ug=3.2, bg_deg_h=0.8
    )


def level_state(lat=0.7, lon=0.2, height=500.0, yaw=0.3):
    """Stationary state with a level body frame at a geodetic point."""
    pos = frames.geodetic_to_ecef(lat, lon, height)
    c_ne = frames.ned_to_ecef_matrix(lat, lon)
    rot = c_ne @ frames.euler_to_matrix(0.0, 0.0, yaw)
    return GroupElement(rot, np.zeros(3), pos, np.zeros(6))


def random_state(rng):
    lat = rng.uniform(-1.2, 1.2)
    lon = rng.uniform(-np.pi, np.pi)
    h = rng.uniform(0.0, 3000.0)
    pos = frames.geodetic_to_ecef(lat, lon, h)
    phi = rng.standard_normal(3)
    phi *= rng.uniform(0.0, 2.5) / np.linalg.norm(phi)
    rot = lie.so3_exp(phi)
    vel = rng.normal(0.0, 10.0, 3)
    bias = np.concatenate([rng.normal(0.0, 5e-3, 3), rng.normal(0.0, 1e-4, 3)])
    return GroupElement(rot, vel, pos, bias)


def random_imu(rng):
    return ImuSample(t=0.0, gyro=rng.normal(0.0, 0.5, 3), accel=rng.normal(0.0, 5.0, 3))


class TestEarthRate:
    def test_value(self):
        assert np.array_equal(ins.earth_rate_ecef(), [0.0, 0.0, 7.292115e-5])

    def test_norm(self):
        assert np.linalg.norm(ins.earth_rate_ecef()) == 7.292115e-5

    def test_skew_antisymmetric(self):
        k = lie.skew(ins.earth_rate_ecef())
        assert np.array_equal(k, -k.T)


class TestGravity:
    def test_equator_magnitude_and_direction(self):
        p = frames.geodetic_to_ecef(0.0, 0.0, 0.0)
        g = ins.gravity_ecef(p)
        assert abs(np.linalg.norm(g) - 9.7803) < 1e-3
        # at the equator the ellipsoid normal passes through the center
        assert np.allclose(g / np.linalg.norm(g), -p / np.linalg.norm(p), atol=1e-12)

    def test_pole_magnitude(self):
        p = frames.geodetic_to_ecef(np.pi / 2.0, 0.0, 0.0)
        g = ins.gravity_ecef(p)
        assert abs(np.linalg.norm(g) - 9.8322) < 1e-3

    def test_free_air_gradient(self):
        lat = 0.8
        g0 = np.linalg.norm(ins.gravity_ecef(frames.geodetic_to_ecef(lat, 0.0, 0.0)))
        g1 = np.linalg.norm(ins.gravity_ecef(frames.geodetic_to_ecef(lat, 0.0, 1000.0)))
        drop = g0 - g1
        assert abs(drop - 3.086e-3) < 0.05 * 3.086e-3

    def test_rejects_core_positions(self):
        with pytest.raises(ValueError):
            ins.gravity_ecef(np.array([1e6, 0.0, 0.0]))


def equilibrium_input(state: GroupElement) -> ImuSample:
    """IMU input that freezes a stationary state exactly."""
    rot_t = state.rot.T
    gyro = rot_t @ ins.earth_rate_ecef() + state.bias[3:6]
    accel = state.bias[0:3] - rot_t @ ins.gravity_ecef(state.pos)
    return ImuSample(t=0.0, gyro=gyro, accel=accel)


class TestOmega:
    def test_equilibrium_is_exactly_zero(self):
        state = level_state()
        u = equilibrium_input(state)
        omega = ins.omega_fn(state, u)
        assert np.array_equal(omega, np.zeros(15))

    def test_bias_slots_always_zero(self):
        rng = np.random.default_rng(2)
        for _ in range(20):
            omega = ins.omega_fn(random_state(rng), random_imu(rng))
            assert np.array_equal(omega[9:15], np.zeros(6))

    def test_discrete_propagation_matches_ode_oracle(self):
        # Yawing, slowly climbing hover: per-step inputs keep the true motion
        # analytic so the 10 s comparison isolates integrator error.
        fs = 200.0
        dt = 1.0 / fs
        yaw_rate = 0.01
        climb = 0.02
        lat, lon = 0.7, 0.2
        c_ne = frames.ned_to_ecef_matrix(lat, lon)
        pos0 = frames.geodetic_to_ecef(lat, lon, 800.0)
        vel = c_ne @ np.array([0.0, 0.0, -climb])
        state = GroupElement(c_ne, vel, pos0, np.zeros(6))
        rot_o, vel_o, pos_o = state.rot.copy(), state.vel.copy(), state.pos.copy()
        w_e = ins.earth_rate_ecef()
        for _ in range(int(10.0 * fs)):
            rot_t = state.rot.T
            gyro = rot_t @ w_e + np.array([0.0, 0.0, yaw_rate])
            accel = rot_t @ (2.0 * np.cross(w_e, state.vel) - ins.gravity_ecef(state.pos))
            u = ImuSample(0.0, gyro, accel)
            omega = ins.omega_fn(state, u)
            state = lie.compose(state, lie.group_exp(omega * dt))
            for _ in range(10):
                rot_o, vel_o, pos_o = rk4_nav_step(
                    rot_o, vel_o, pos_o, gyro, accel, ins.gravity_ecef, w_e, dt / 10.0
                )
        assert np.linalg.norm(state.pos - pos_o) < 1e-5

    def test_repeated_equilibrium_propagation_is_fixed(self):
        state = level_state(lat=-0.3, yaw=1.0)
        u = equilibrium_input(state)
        pos0 = state.pos.copy()
        dt = 1.0 / 200.0
        for _ in range(200):
            omega = ins.omega_fn(state, u)
            state = lie.compose(state, lie.group_exp(omega * dt))
            assert np.linalg.norm(state.pos - pos0) < 1e-9


class TestProcessNoise:
    def test_zero_params_give_zero(self):
        q = ins.process_noise_Q(ImuNoiseParams(0.0, 0.0, 0.0, 0.0), 0.005)
        assert np.array_equal(q, np.zeros((15, 15)))

    def test_linear_in_dt(self):
        params = table_params()
        q1 = ins.process_noise_Q(params, 0.005)
        q2 = ins.process_noise_Q(params, 0.010)
        assert np.allclose(q2, 2.0 * q1, rtol=1e-15)

    def test_table_values_at_200hz(self):
        # unit-conversion oracle: 0.09 deg/sqrt(h) = 0.09*(pi/180)/60 rad/s/sqrt(Hz)
        params = table_params()
        q = ins.process_noise_Q(params, 1.0 / 200.0)
        expected_gyro = (0.09 * (np.pi / 180.0) / 60.0) ** 2 / 200.0
        expected_accel = (0.008 / 60.0) ** 2 / 200.0
        assert np.allclose(np.diag(q)[0:3], expected_gyro, rtol=1e-12)
        assert np.allclose(np.diag(q)[3:6], expected_accel, rtol=1e-12)

    def test_psd_with_position_null_space(self):
        q = ins.process_noise_Q(table_params(), 0.005)
        w = np.linalg.eigvalsh(q)
        assert w.min() >= 0.0
        assert np.linalg.matrix_rank(q) == 12
        assert np.array_equal(q[RHO, RHO], np.zeros((3, 3)))


def fd_jacobian_C(state, u, h=1e-6):
    jac = np.zeros((15, 15))
    for i in range(15):
        step = np.zeros(15)
        step[i] = h
        plus = ins.omega_fn(lie.compose(state, lie.group_exp(step)), u)
        minus = ins.omega_fn(lie.compose(state, lie.group_exp(-step)), u)
        jac[:, i] = (plus - minus) / (2.0 * h)
    return jac


def fd_jacobian_H(state, lever, h=1e-6):
    jac = np.zeros((3, 15))
    for i in range(15):
        step = np.zeros(15)
        step[i] = h
        plus = ins.measurement_h(lie.compose(state, lie.group_exp(step)), lever)
        minus = ins.measurement_h(lie.compose(state, lie.group_exp(-step)), lever)
        jac[:, i] = (plus - minus) / (2.0 * h)
    return jac


class TestJacobianC:
    def test_gyro_bias_block(self):
        rng = np.random.default_rng(3)
        c = ins.jacobian_C(random_state(rng), random_imu(rng))
        assert np.array_equal(c[PHI, DBG], -np.eye(3))

    def test_accel_bias_block(self):
        rng = np.random.default_rng(4)
        c = ins.jacobian_C(random_state(rng), random_imu(rng))
        assert np.array_equal(c[NU, DBA], -np.eye(3))

    def test_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        worst = 0.0
        for _ in range(100):
            state = random_state(rng)
            u = random_imu(rng)
            analytic = ins.jacobian_C(state, u)
            fd = fd_jacobian_C(state, u)
            worst = max(worst, np.max(np.abs(analytic - fd)) / np.max(np.abs(fd)))
        assert worst < 1e-5


class TestMeasurement:
    def test_zero_lever_returns_position(self):
        rng = np.random.default_rng(6)
        state = random_state(rng)
        assert np.array_equal(ins.measurement_h(state, LeverArm()), state.pos)

    def test_identity_attitude_offsets_by_lever(self):
        state = GroupElement(np.eye(3), np.zeros(3), np.array([1.0, 2.0, 3.0]), np.zeros(6))
        y = ins.measurement_h(state, LeverArm(np.array([0.0, 0.0, -0.1])))
        assert np.allclose(y, [1.0, 2.0, 2.9], atol=1e-15)

    def test_matches_dense_matvec(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            state = random_state(rng)
            lever = LeverArm(rng.normal(0.0, 0.5, 3))
            expected = state.pos + state.rot @ lever.offset
            assert np.array_equal(ins.measurement_h(state, lever), expected)


class TestJacobianH:
    def test_trivial_case(self):
        state = GroupElement(np.eye(3), np.zeros(3), np.zeros(3), np.zeros(6))
        h = ins.jacobian_H(state, LeverArm())
        assert np.array_equal(h[:, RHO], np.eye(3))
        assert np.array_equal(h[:, PHI], np.zeros((3, 3)))

    def test_velocity_and_bias_blocks_zero(self):
        rng = np.random.default_rng(8)
        h = ins.jacobian_H(random_state(rng), LeverArm(rng.normal(0.0, 1.0, 3)))
        assert np.array_equal(h[:, NU], np.zeros((3, 3)))
        assert np.array_equal(h[:, 9:15], np.zeros((3, 6)))

    def test_matches_finite_differences(self):
        # small positions keep the finite-difference oracle well conditioned;
        # the Jacobian itself does not depend on position
        rng = np.random.default_rng(9)
        worst = 0.0
        for _ in range(100):
            phi = rng.standard_normal(3)
            phi *= rng.uniform(0.0, 2.5) / np.linalg.norm(phi)
            state = GroupElement(
                lie.so3_exp(phi), rng.normal(0.0, 5.0, 3), rng.normal(0.0, 50.0, 3),
                rng.normal(0.0, 1e-3, 6),
            )
            lever = LeverArm(rng.normal(0.0, 0.5, 3))
            analytic = ins.jacobian_H(state, lever)
            fd = fd_jacobian_H(state, lever)
            worst = max(worst, np.max(np.abs(analytic - fd)) / np.max(np.abs(fd)))
        assert worst < 1e-6


class TestDataTypes:
    def test_noise_params_from_datasheet(self):
        p = table_params()
        assert p.sigma_g == pytest.approx(0.09 * DEG / 60.0, rel=1e-12)
        assert p.sigma_a == pytest.approx(0.008 / 60.0, rel=1e-12)
        assert p.Ba == pytest.approx(3.2e-6 * 9.80665, rel=1e-12)
        assert p.Bg == pytest.approx(0.8 * DEG / 3600.0, rel=1e-12)

    def test_gnss_fix_fields(self):
        fix = GnssFix(1.0, [1.0, 2.0, 3.0], [0.01, 0.01, 0.03])
        assert fix.pos.dtype == float
        assert np.array_equal(fix.sigma, [0.01, 0.01, 0.03])
