"""Initialization: static detection, leveling, and heading alignment.

Roll and pitch come from the gravity direction sensed while stationary; the
initial heading is found by running the full filter for three candidate
headings, fitting a parabola to the resulting measurement-likelihood costs
and taking its minimizer. Gyro biases are initialized from the stationary
average, the position from averaged GNSS fixes.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import estimation, frames, ins
from .ins import GnssFix, ImuNoiseParams, ImuSample, LeverArm
from .lie import ConcentratedGaussian, GroupElement

logger = logging.getLogger(__name__)

DEG = math.pi / 180.0
_G0 = 9.80665


class AlignmentError(RuntimeError):
    """Initialization could not be completed from the given data."""


@dataclass(frozen=True)
class StaticInterval:
    """Detected stationary prefix with its channel averages."""

    t_start: float
    t_end: float
    mean_accel: np.ndarray
    mean_gyro: np.ndarray
    sample_count: int


@dataclass(frozen=True)
class HeadingPosterior:
    """Quadratic approximation of the heading posterior.

    psi_star minimizes the fitted parabola; curvature is its leading
    coefficient and sigma_psi_star the Laplace-approximation standard
    deviation 1/sqrt(curvature). samples holds the three (candidate, cost)
    pairs the fit went through.
    """

    psi_star: float
    curvature: float
    samples: tuple
    sigma_psi_star: float


@dataclass(frozen=True)
class AlignmentConfig:
    """Knobs for the heading search and the alignment data window."""

    guesses: tuple = (-30.0 * DEG, 0.0, 30.0 * DEG)
    prior_sigma: float = 60.0 * DEG
    prior_mean: float = 0.0
    prefix_s: float = 120.0
    allow_extrapolation: bool = False


def default_initial_covariance(gyro_bias_sigma: Optional[float] = None) -> np.ndarray:
    """Diagonal initial covariance: three-sigma bounds per state family.

    1/3 deg roll and pitch, 5/3 deg heading, 1/3 mm/s velocity, 1/30 m
    position, 1/3 mg accelerometer bias and 5 deg/s gyroscope bias.

    The stock gyro-bias sigma is far above MEMS turn-on levels; with it, a
    heading error is indistinguishable from a phantom yaw-rate bias over
    short windows. Pass gyro_bias_sigma (rad/s) to tighten that prior; the
    pipeline defaults to the same bound read as deg/h.
    """
    att = np.array([1.0 / 3.0, 1.0 / 3.0, 5.0 / 3.0]) * DEG
    vel = np.full(3, 0.001 / 3.0)
    pos = np.full(3, 0.1 / 3.0)
    bias_a = np.full(3, (1.0 / 3.0) * 1e-3 * _G0)
    bias_g = np.full(3, (15.0 / 3.0) * DEG if gyro_bias_sigma is None else gyro_bias_sigma)
    return np.concatenate([att, vel, pos, bias_a, bias_g]) ** 2


def detect_static(
    imu: Sequence[ImuSample],
    window_s: float = 1.0,
    min_samples: int = 2000,
    gyro_std_max: float = 0.02,
    accel_std_max: float = 0.15,
) -> StaticInterval:
    """Longest stationary prefix, judged window by window.

    A window qualifies when the RMS deviations of the gyro and accel
    magnitudes around the accumulated prefix means stay below the
    thresholds, so both fluctuation and a shifted constant rate end the
    prefix. Unaccelerated straight motion is inertially invisible here;
    pipelines should additionally bound the interval with GNSS displacement
    (see refine_static_with_gnss).
    """
    if not imu:
        raise AlignmentError("empty IMU stream")
    t = np.array([s.t for s in imu])
    if t[-1] - t[0] < window_s:
        raise AlignmentError("IMU stream shorter than one detection window")
    gyro_norm = np.linalg.norm([s.gyro for s in imu], axis=1)
    accel_norm = np.linalg.norm([s.accel for s in imu], axis=1)

    n_keep = 0
    start = t[0]
    while True:
        in_window = (t >= start) & (t < start + window_s)
        count = int(np.count_nonzero(in_window))
        if count == 0:
            break
        base_g = gyro_norm[: n_keep + count].mean() if n_keep == 0 else gyro_norm[:n_keep].mean()
        base_a = accel_norm[: n_keep + count].mean() if n_keep == 0 else accel_norm[:n_keep].mean()
        if np.sqrt(np.mean((gyro_norm[in_window] - base_g) ** 2)) >= gyro_std_max:
            break
        if np.sqrt(np.mean((accel_norm[in_window] - base_a) ** 2)) >= accel_std_max:
            break
        n_keep += count
        start += window_s
    if n_keep < min_samples:
        raise AlignmentError(
            f"no stationary prefix: {n_keep} qualifying samples, need {min_samples}"
        )
    gyro = np.array([imu[k].gyro for k in range(n_keep)])
    accel = np.array([imu[k].accel for k in range(n_keep)])
    return StaticInterval(
        t_start=float(t[0]),
        t_end=float(t[n_keep - 1]),
        mean_accel=accel.mean(axis=0),
        mean_gyro=gyro.mean(axis=0),
        sample_count=n_keep,
    )


def refine_static_with_gnss(
    imu: Sequence[ImuSample],
    static: StaticInterval,
    gnss: Sequence[GnssFix],
    displacement_max_m: float = 0.25,
) -> StaticInterval:
    """Clamp a static interval at the first visible GNSS displacement.

    Constant-velocity level flight produces the same IMU readings as rest,
    so the inertial detector alone can overrun into a straight takeoff; the
    position record disambiguates.
    """
    inside = [f for f in gnss if static.t_start <= f.t <= static.t_end]
    if len(inside) < 2:
        return static
    origin = inside[0].pos
    t_clamp = static.t_end
    for fix in inside[1:]:
        if np.linalg.norm(fix.pos - origin) > displacement_max_m:
            t_clamp = fix.t - 1e-9
            break
    if t_clamp >= static.t_end:
        return static
    samples = [s for s in imu if static.t_start <= s.t <= t_clamp]
    if not samples:
        return static
    gyro = np.array([s.gyro for s in samples])
    accel = np.array([s.accel for s in samples])
    return StaticInterval(
        t_start=static.t_start,
        t_end=float(samples[-1].t),
        mean_accel=accel.mean(axis=0),
        mean_gyro=gyro.mean(axis=0),
        sample_count=len(samples),
    )


def leveling(mean_accel, gravity_mag: float = _G0) -> tuple[float, float]:
    """Initial pitch and roll from the averaged stationary specific force."""
    f = np.asarray(mean_accel, dtype=float)
    norm = float(np.linalg.norm(f))
    if abs(norm - gravity_mag) > 0.2 * gravity_mag:
        raise AlignmentError(
            f"specific force magnitude {norm:.3f} is not near gravity; not stationary"
        )
    pitch = math.atan2(f[0], math.sqrt(f[1] ** 2 + f[2] ** 2))
    roll = math.atan2(-f[1], -f[2])
    return pitch, roll


def init_state(
    static: StaticInterval,
    gnss: Sequence[GnssFix],
    psi0: float,
    lever: LeverArm = LeverArm(),
    p0_diag: Optional[np.ndarray] = None,
) -> ConcentratedGaussian:
    """Initial filter distribution from the stationary interval.

    Position averages the fixes inside the interval (lever arm removed with
    the leveled attitude), velocity starts at zero, gyro bias at the
    stationary gyro mean and accel bias at zero.
    """
    fixes = [f for f in gnss if static.t_start <= f.t <= static.t_end]
    if len(fixes) < 3:
        raise AlignmentError(
            f"need at least 3 GNSS fixes in the static interval, found {len(fixes)}"
        )
    antenna = np.mean([f.pos for f in fixes], axis=0)
    lat, lon, _ = frames.ecef_to_geodetic(antenna)
    gravity_mag = float(np.linalg.norm(ins.gravity_ecef(antenna)))
    pitch, roll = leveling(static.mean_accel, gravity_mag)
    c_ne = frames.ned_to_ecef_matrix(lat, lon)
    rot = c_ne @ frames.euler_to_matrix(roll, pitch, psi0)
    pos = antenna - rot @ lever.offset
    bias = np.concatenate([np.zeros(3), static.mean_gyro])
    cov = np.diag(default_initial_covariance() if p0_diag is None else np.asarray(p0_diag))
    return ConcentratedGaussian(GroupElement(rot, np.zeros(3), pos, bias), cov)


def _alignment_window(imu, gnss, static: StaticInterval, prefix_s: float):
    t_max = static.t_end + prefix_s
    imu_w = [s for s in imu if s.t <= t_max]
    gnss_w = [f for f in gnss if f.t <= t_max]
    return imu_w, gnss_w


def heading_log_likelihood(
    imu: Sequence[ImuSample],
    gnss: Sequence[GnssFix],
    params: ImuNoiseParams,
    psi0: float,
    static: Optional[StaticInterval] = None,
    lever: LeverArm = LeverArm(),
    config: AlignmentConfig = AlignmentConfig(),
    p0_diag: Optional[np.ndarray] = None,
) -> float:
    """Negative log posterior of one heading candidate.

    Runs the filter with the heading fixed at initialization, gating
    disabled, and accumulates the innovation negative log likelihood plus
    the Gaussian heading prior. A diverged run reports an infinite cost.
    """
    if static is None:
        static = detect_static(imu)
    imu_w, gnss_w = _alignment_window(imu, gnss, static, config.prefix_s)
    init = init_state(static, gnss_w, psi0, lever, p0_diag)
    try:
        hist = estimation.run_filter(
            imu_w, gnss_w, init, params, lever, gate=None, collect_likelihood=True
        )
        cost = hist.likelihood_cost
    except ValueError as exc:
        logger.warning("heading candidate %.2f deg diverged: %s", psi0 / DEG, exc)
        return math.inf
    if not math.isfinite(cost):
        return math.inf
    dpsi = psi0 - config.prior_mean
    return cost + 0.5 * dpsi * dpsi / (config.prior_sigma ** 2)


def heading_align(
    imu: Sequence[ImuSample],
    gnss: Sequence[GnssFix],
    params: ImuNoiseParams,
    static: Optional[StaticInterval] = None,
    lever: LeverArm = LeverArm(),
    config: AlignmentConfig = AlignmentConfig(),
    p0_diag: Optional[np.ndarray] = None,
) -> HeadingPosterior:
    """Three-candidate heading search with an exact parabola fit.

    The three filter evaluations are independent; the fitted quadratic's
    minimizer is the heading estimate and its curvature gives the
    approximate posterior standard deviation.
    """
    guesses = tuple(float(g) for g in config.guesses)
    if len(guesses) != 3 or len(set(guesses)) != 3:
        raise AlignmentError("heading search needs three distinct guesses")
    if static is None:
        static = detect_static(imu)
    costs = [
        heading_log_likelihood(imu, gnss, params, g, static, lever, config, p0_diag)
        for g in guesses
    ]
    if not all(math.isfinite(c) for c in costs):
        raise AlignmentError(f"candidate filter run diverged; costs {costs}")
    vander = np.array([[g * g, g, 1.0] for g in guesses])
    m = np.linalg.solve(vander, np.array(costs))
    if not m[0] > 0.0:
        raise AlignmentError(
            f"cost samples are not convex (curvature {m[0]:.3e}); "
            "guesses bracket no minimum"
        )
    psi_star = -m[1] / (2.0 * m[0])
    lo, hi = min(guesses), max(guesses)
    if not config.allow_extrapolation and not lo <= psi_star <= hi:
        raise AlignmentError(
            f"fitted heading {psi_star / DEG:.2f} deg falls outside the guess interval"
        )
    return HeadingPosterior(
        psi_star=float(psi_star),
        curvature=float(m[0]),
        samples=tuple(zip(guesses, costs)),
        sigma_psi_star=float(1.0 / math.sqrt(m[0])),
    )
