"""Synthetic flight-data generation.

Builds smooth reference trajectories anchored at a geodetic origin, recovers
the ideal IMU signals that reproduce them exactly under the discrete group
propagation (inverse mechanization), corrupts them with white noise and
Ornstein-Uhlenbeck bias processes, and down-samples noisy GNSS fixes.

All randomness derives from the single seed in :class:`SimNoiseConfig`.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import frames, ins
from .ins import GnssFix, ImuNoiseParams, ImuSample, LeverArm
from .lie import OutOfChartError

_G0 = 9.80665
DEG = math.pi / 180.0

DEFAULT_ORIGIN = (45.0 * DEG, 9.0 * DEG, 500.0)


@dataclass(frozen=True)
class SimNoiseConfig:
    """Sensor-error configuration in datasheet units.

    na: velocity random walk ((m/s)/sqrt(h)); ng: angular random walk
    (deg/sqrt(h)); ba/bg: bias instability (ug, deg/h); beta_a/beta_g:
    turn-on bias scale (ug, deg/h), drawn per run; tau_a/tau_g: bias
    mean-reversion rates (1/s); sigma_xyz: GNSS std (m).
    """

    na: float = 0.008
    ng: float = 0.09
    ba: float = 3.2
    bg: float = 0.8
    beta_a: float = 500.0
    beta_g: float = 10.0
    tau_a: float = 1.0
    tau_g: float = 1.0
    sigma_xyz: tuple = (0.01, 0.01, 0.03)
    seed: int = 0

    def imu_params(self) -> ImuNoiseParams:
        return ImuNoiseParams.from_datasheet(self.ng, self.na, self.ba, self.bg)

    def per_sample_sigma(self, fs: float) -> tuple[float, float]:
        """Per-sample (gyro, accel) white-noise std at sampling rate fs."""
        p = self.imu_params()
        return p.sigma_g * math.sqrt(fs), p.sigma_a * math.sqrt(fs)

    def beta_si(self) -> tuple[np.ndarray, np.ndarray]:
        """Turn-on bias 1-sigma scales in SI units (accel, gyro)."""
        return (
            np.full(3, self.beta_a * 1e-6 * _G0),
            np.full(3, self.beta_g * DEG / 3600.0),
        )


@dataclass
class ReferenceTrajectory:
    """Uniformly sampled truth: attitude, ECEF velocity and position."""

    fs: float
    t: np.ndarray
    rot: np.ndarray
    vel: np.ndarray
    pos: np.ndarray
    profile: str
    static_s: float
    origin: tuple
    params: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.t)


def _ramp_weight(u):
    """C2 velocity easing on [0, 1]."""
    u = np.clip(u, 0.0, 1.0)
    return u ** 3 * (10.0 - 15.0 * u + 6.0 * u * u)


def _ramp_distance(u):
    """Integral of the easing weight from 0 to u (times the ramp length)."""
    u = np.clip(u, 0.0, 1.0)
    return u ** 4 * (2.5 - 3.0 * u + u * u)


def _speed_profile(t, t0, ramp_s, speed):
    """Along-track distance and rate for a rest-to-cruise speed profile."""
    u = (t - t0) / ramp_s
    s = np.where(
        t < t0,
        0.0,
        np.where(
            u < 1.0,
            speed * ramp_s * _ramp_distance(u),
            speed * ramp_s * 0.5 + speed * (t - t0 - ramp_s),
        ),
    )
    sdot = np.where(t < t0, 0.0, speed * _ramp_weight(u))
    return s, sdot


def make_reference(
    profile: str,
    fs: float,
    duration_s: float = 60.0,
    static_s: float = 30.0,
    speed: float = 5.0,
    heading0: float = 0.0,
    origin: tuple = DEFAULT_ORIGIN,
    radius: float = 100.0,
    climb_rate: float = 1.0,
    leg_s: float = 12.0,
    corner_s: float = 5.0,
    ramp_s: float = 10.0,
    bank_scale: float = 0.0,
) -> ReferenceTrajectory:
    """Parametric reference trajectory with a stationary alignment prefix.

    profile is one of "circular", "helicoidal", "rectangular". The path is
    built in the local tangent frame at the origin and rigidly mapped to
    ECEF; attitude heading follows the path tangent with an optional
    coordinated bank.
    """
    if fs < 50.0:
        raise ValueError("sample rate must be at least 50 Hz")
    if duration_s < 60.0:
        raise ValueError("flight duration must be at least 60 s")
    if profile not in ("circular", "helicoidal", "rectangular"):
        raise ValueError(f"unknown profile {profile!r}")
    if radius <= 0.0 or speed <= 0.0 or ramp_s <= 0.0:
        raise ValueError("profile parameters must be positive")

    n = int(round((static_s + duration_s) * fs)) + 1
    t = np.arange(n) / fs
    t0 = static_s
    s, sdot = _speed_profile(t, t0, ramp_s, speed)

    if profile in ("circular", "helicoidal"):
        alpha0 = math.atan2(-math.cos(heading0), math.sin(heading0))
        alpha = alpha0 + s / radius
        center = -radius * np.array([math.cos(alpha0), math.sin(alpha0), 0.0])
        pos_n = center[None, :] + radius * np.stack(
            [np.cos(alpha), np.sin(alpha), np.zeros(n)], axis=1
        )
        vel_n = sdot[:, None] * np.stack([-np.sin(alpha), np.cos(alpha), np.zeros(n)], axis=1)
        yaw = np.arctan2(np.cos(alpha), -np.sin(alpha))
        turn_rate = sdot / radius
        if profile == "helicoidal":
            zs, zdot = _speed_profile(t, t0, ramp_s, climb_rate)
            pos_n[:, 2] = -zs
            vel_n[:, 2] = -zdot
    else:
        corners = _corner_times(t[-1], t0, ramp_s, leg_s, corner_s)
        yaw = _rect_course(t, heading0, corners, corner_s)
        turn_rate = _rect_course_rate(t, corners, corner_s)
        vel_n = sdot[:, None] * np.stack([np.cos(yaw), np.sin(yaw), np.zeros(n)], axis=1)
        pos_n = _integrate_velocity(t, fs, t0, ramp_s, speed, heading0, corners, corner_s)

    roll = np.arctan2(bank_scale * sdot * turn_rate, _G0) if bank_scale else np.zeros(n)
    pitch = np.zeros(n)

    lat0, lon0, h0 = origin
    c_ne = frames.ned_to_ecef_matrix(lat0, lon0)
    p0 = frames.geodetic_to_ecef(lat0, lon0, h0)
    rot = np.empty((n, 3, 3))
    for k in range(n):
        rot[k] = c_ne @ frames.euler_to_matrix(roll[k], pitch[k], yaw[k])
    pos = p0[None, :] + pos_n @ c_ne.T
    vel = _screw_consistent_velocity(rot, pos, 1.0 / fs)

    return ReferenceTrajectory(
        fs=fs,
        t=t,
        rot=rot,
        vel=vel,
        pos=pos,
        profile=profile,
        static_s=static_s,
        origin=origin,
        params=dict(
            duration_s=duration_s, speed=speed, heading0=heading0, radius=radius,
            climb_rate=climb_rate, leg_s=leg_s, corner_s=corner_s, ramp_s=ramp_s,
            bank_scale=bank_scale,
        ),
    )


def _corner_times(t_end, t0, ramp_s, leg_s, corner_s):
    """Start times of the 90-degree corner turns of the rectangular pattern."""
    times = []
    start = t0 + ramp_s + leg_s
    while start < t_end:
        times.append(start)
        start += leg_s + corner_s
    return times


def _rect_course(tq, heading0, corners, corner_s):
    """Course angle: raised-cosine turn profile, constant on the straights."""
    yaw = np.full(len(tq), heading0, dtype=float)
    for start in corners:
        u = np.clip((tq - start) / corner_s, 0.0, 1.0)
        yaw += (math.pi / 2.0) * (u - np.sin(2.0 * np.pi * u) / (2.0 * np.pi))
    return yaw


def _rect_course_rate(tq, corners, corner_s):
    rate = np.zeros(len(tq))
    for start in corners:
        u = (tq - start) / corner_s
        inside = (u >= 0.0) & (u < 1.0)
        rate[inside] += (math.pi / 2.0) / corner_s * (1.0 - np.cos(2.0 * np.pi * u[inside]))
    return rate


def _integrate_velocity(t, fs, t0, ramp_s, speed, heading0, corners, corner_s):
    """Simpson integration of the rectangular-profile velocity at substeps."""

    def velocity(tq):
        _, sdot = _speed_profile(tq, t0, ramp_s, speed)
        chi = _rect_course(tq, heading0, corners, corner_s)
        return sdot[:, None] * np.stack([np.cos(chi), np.sin(chi), np.zeros(len(tq))], axis=1)

    n = len(t)
    dt = 1.0 / fs
    v0 = velocity(t)
    vh = velocity(t[:-1] + 0.5 * dt)
    pos = np.zeros((n, 3))
    steps = dt / 6.0 * (v0[:-1] + 4.0 * vh + v0[1:])
    pos[1:] = np.cumsum(steps, axis=0)
    return pos


def _screw_consistent_velocity(rot, pos, dt) -> np.ndarray:
    """Velocity sequence that makes the pose sequence exactly reachable.

    The discrete model advances position by the body-frozen screw of the
    stored velocity, so the truth velocity is defined through the relative
    pose log rather than the instantaneous path derivative. On constant-rate
    segments the two coincide; during speed ramps they differ at order
    (acceleration x dt / 2).
    """
    rot_t = np.swapaxes(rot[:-1], 1, 2)
    phi = _batch_so3_log(rot_t @ rot[1:])
    dpos_b = np.einsum("kij,kj->ki", rot_t, pos[1:] - pos[:-1])
    vel_b = _batch_left_jacobian_inv_apply(phi, dpos_b) / dt
    vel = np.einsum("kij,kj->ki", rot[:-1], vel_b)
    return np.vstack([vel, vel[-1]])


def _batch_so3_log(rots) -> np.ndarray:
    """Rotation vectors of a stack of small rotations (angle well below pi)."""
    trace = np.einsum("kii->k", rots)
    angle = np.arccos(np.clip(0.5 * (trace - 1.0), -1.0, 1.0))
    if np.any(angle >= math.pi - 1e-6):
        raise OutOfChartError("attitude step reached the chart boundary")
    s = 0.5 * np.stack(
        [
            rots[:, 2, 1] - rots[:, 1, 2],
            rots[:, 0, 2] - rots[:, 2, 0],
            rots[:, 1, 0] - rots[:, 0, 1],
        ],
        axis=1,
    )
    small = angle < 1e-7
    factor = np.where(small, 1.0 + angle * angle / 6.0, angle / np.where(small, 1.0, np.sin(angle)))
    return s * factor[:, None]


def _batch_left_jacobian_inv_apply(phi, vecs) -> np.ndarray:
    """Apply the inverse SO(3) left Jacobian of each phi to each vector."""
    angle2 = np.einsum("ki,ki->k", phi, phi)
    angle = np.sqrt(angle2)
    small = angle < 1e-7
    safe2 = np.where(small, 1.0, angle2)
    d = np.where(
        small,
        1.0 / 12.0 + angle2 / 720.0,
        1.0 / safe2 - (1.0 + np.cos(angle)) / np.where(small, 1.0, 2.0 * angle * np.sin(angle)),
    )
    cross1 = np.cross(phi, vecs)
    cross2 = np.cross(phi, cross1)
    return vecs - 0.5 * cross1 + d[:, None] * cross2


def inverse_mechanization(ref: ReferenceTrajectory) -> list[ImuSample]:
    """Ideal IMU stream that reproduces the reference under group propagation.

    Sample k holds the rates over [t_k, t_{k+1}); the final sample repeats the
    previous rates so the stream stays aligned with the reference epochs (its
    values never drive a propagation step).
    """
    rot, vel, pos, t = ref.rot, ref.vel, ref.pos, ref.t
    n = len(t)
    if n < 2:
        raise ValueError("reference needs at least two epochs")
    dt = np.diff(t)[:, None]

    rot_t = np.swapaxes(rot[:-1], 1, 2)
    drot = rot_t @ rot[1:]
    dvel = np.einsum("kij,kj->ki", rot_t, vel[1:] - vel[:-1])
    dpos = np.einsum("kij,kj->ki", rot_t, pos[1:] - pos[:-1])

    phi = _batch_so3_log(drot)
    omega_phi = phi / dt
    omega_nu = _batch_left_jacobian_inv_apply(phi, dvel) / dt
    # position slot of the log is needed only through the velocity recovery

    w_e = ins.earth_rate_ecef()
    gravity = np.empty_like(pos[:-1])
    for k in range(n - 1):
        gravity[k] = ins.gravity_ecef(pos[k])

    coriolis = np.cross(np.broadcast_to(w_e, (n - 1, 3)), vel[:-1])
    gyro = omega_phi + np.einsum("kij,j->ki", rot_t, w_e)
    accel = omega_nu + np.einsum("kij,kj->ki", rot_t, 2.0 * coriolis - gravity)

    samples = [ImuSample(float(t[k]), gyro[k], accel[k]) for k in range(n - 1)]
    samples.append(ImuSample(float(t[-1]), gyro[-1].copy(), accel[-1].copy()))
    return samples


def ou_bias_step(b, tau: float, beta, diffusion: float, dt: float, rng) -> np.ndarray:
    """One explicit Ornstein-Uhlenbeck step toward the turn-on value beta."""
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    if not tau * dt < 1.0:
        raise ValueError("tau * dt must stay below 1 for the explicit step")
    b = np.asarray(b, dtype=float)
    beta = np.asarray(beta, dtype=float)
    return b + tau * (beta - b) * dt + diffusion * math.sqrt(dt) * rng.standard_normal(b.shape)


def corrupt_imu(
    ideal: list[ImuSample], cfg: SimNoiseConfig
) -> tuple[list[ImuSample], np.ndarray, np.ndarray]:
    """Add white noise and OU bias processes to an ideal IMU stream.

    Returns the corrupted stream and the true accel / gyro bias sequences,
    one row per sample. Turn-on biases are drawn once per run from the
    configured scales and serve as the OU reversion means.
    """
    n = len(ideal)
    if n == 0:
        return [], np.zeros((0, 3)), np.zeros((0, 3))
    fs = 1.0 / (ideal[1].t - ideal[0].t) if n > 1 else 1.0
    params = cfg.imu_params()
    sg, sa = cfg.per_sample_sigma(fs)
    rng = np.random.default_rng([cfg.seed, 1])
    beta_a_scale, beta_g_scale = cfg.beta_si()
    beta_a = beta_a_scale * rng.standard_normal(3)
    beta_g = beta_g_scale * rng.standard_normal(3)
    dt = 1.0 / fs

    bias_a = np.empty((n, 3))
    bias_g = np.empty((n, 3))
    bias_a[0] = beta_a
    bias_g[0] = beta_g
    for k in range(1, n):
        bias_a[k] = ou_bias_step(bias_a[k - 1], cfg.tau_a, beta_a, params.Ba, dt, rng)
        bias_g[k] = ou_bias_step(bias_g[k - 1], cfg.tau_g, beta_g, params.Bg, dt, rng)

    noisy = []
    for k, s in enumerate(ideal):
        gyro = s.gyro + bias_g[k] + sg * rng.standard_normal(3)
        accel = s.accel + bias_a[k] + sa * rng.standard_normal(3)
        noisy.append(ImuSample(s.t, gyro, accel))
    return noisy, bias_a, bias_g


def gen_gnss(
    ref: ReferenceTrajectory,
    lever: LeverArm,
    cfg: SimNoiseConfig,
    rate_hz: float = 1.0,
    sigma_frame: str = "ecef",
) -> list[GnssFix]:
    """Down-sample the reference to GNSS fixes with lever arm and white noise.

    sigma_xyz is interpreted as per-ECEF-axis stds by default; "ned" draws
    the noise in the local frame instead and reports the projected stds.
    """
    stride = ref.fs / rate_hz
    if abs(stride - round(stride)) > 1e-9:
        raise ValueError("GNSS rate must divide the IMU rate")
    stride = int(round(stride))
    rng = np.random.default_rng([cfg.seed, 2])
    sigma = np.asarray(cfg.sigma_xyz, dtype=float)
    fixes = []
    for k in range(0, len(ref), stride):
        truth = ref.pos[k] + ref.rot[k] @ lever.offset
        if sigma_frame == "ned":
            lat, lon, _ = frames.ecef_to_geodetic(ref.pos[k])
            c_ne = frames.ned_to_ecef_matrix(lat, lon)
            noise = c_ne @ (sigma * rng.standard_normal(3))
            sig_out = np.sqrt(np.diag(c_ne @ np.diag(sigma ** 2) @ c_ne.T))
        elif sigma_frame == "ecef":
            noise = sigma * rng.standard_normal(3)
            sig_out = sigma.copy()
        else:
            raise ValueError(f"unknown sigma frame {sigma_frame!r}")
        fixes.append(GnssFix(float(ref.t[k]), truth + noise, sig_out))
    return fixes


def inject_outliers(
    fixes: list[GnssFix], epochs, magnitude_m: float, rng
) -> list[GnssFix]:
    """Add a bias of the given size in a random direction at the listed fixes.

    The reported sigmas are left untouched: outliers are unmodeled errors.
    """
    epochs = set(int(e) for e in epochs)
    if epochs and (min(epochs) < 0 or max(epochs) >= len(fixes)):
        raise ValueError("outlier epoch outside the fix sequence")
    out = []
    for i, fix in enumerate(fixes):
        if i in epochs:
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            out.append(GnssFix(fix.t, fix.pos + magnitude_m * direction, fix.sigma.copy()))
        else:
            out.append(fix)
    return out


@dataclass
class SimulatedDataset:
    """One synthetic run: truth, noisy sensors and the true bias tracks."""

    ref: ReferenceTrajectory
    imu: list
    gnss: list
    bias_acc: np.ndarray
    bias_gyro: np.ndarray
    lever: LeverArm
    cfg: SimNoiseConfig


def simulate_dataset(
    profile: str,
    cfg: SimNoiseConfig,
    fs: float = 200.0,
    duration_s: float = 60.0,
    static_s: float = 30.0,
    heading0: float = 0.0,
    lever: LeverArm = LeverArm(),
    gnss_rate_hz: float = 1.0,
    origin: tuple = DEFAULT_ORIGIN,
    **profile_kwargs,
) -> SimulatedDataset:
    """Generate a complete synthetic dataset for one seed."""
    ref = make_reference(
        profile, fs, duration_s=duration_s, static_s=static_s, heading0=heading0,
        origin=origin, **profile_kwargs,
    )
    ideal = inverse_mechanization(ref)
    noisy, bias_a, bias_g = corrupt_imu(ideal, cfg)
    gnss = gen_gnss(ref, lever, cfg, rate_hz=gnss_rate_hz)
    return SimulatedDataset(ref, noisy, gnss, bias_a, bias_g, lever, cfg)
