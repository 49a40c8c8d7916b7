"""ECEF strapdown navigation model.

Provides the Earth-rate and gravity models, the left-velocity function that
drives group-valued propagation, the process-noise map, the GNSS position
measurement and the analytic Jacobians of both with respect to right
perturbations of the state.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import frames
from .lie import DBA, DBG, NDIM, NU, PHI, RHO, GroupElement, skew

EARTH_RATE = 7.292115e-5  # rad/s, WGS-84 value

# Somigliana constants for WGS-84 normal gravity.
_GAMMA_E = 9.7803253359
_SOMIGLIANA_K = 1.931852652458e-3
_GRAV_M = 3.449786506841e-3  # omega^2 a^2 b / GM

_G0 = 9.80665

DEG = math.pi / 180.0


@dataclass(frozen=True)
class ImuSample:
    """One IMU record: time (s), angular rate (rad/s), specific force (m/s^2)."""

    t: float
    gyro: np.ndarray
    accel: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "gyro", np.asarray(self.gyro, dtype=float))
        object.__setattr__(self, "accel", np.asarray(self.accel, dtype=float))


@dataclass(frozen=True)
class ImuNoiseParams:
    """White-noise densities and bias-instability diffusions, SI units.

    sigma_g: gyro noise density (rad/s/sqrt(Hz)), from the angular random walk.
    sigma_a: accel noise density (m/s^2/sqrt(Hz)), from the velocity random walk.
    Ba: accel bias diffusion (m/s^2/sqrt(s)).
    Bg: gyro bias diffusion (rad/s/sqrt(s)).
    """

    sigma_g: float
    sigma_a: float
    Ba: float
    Bg: float

    @staticmethod
    def from_datasheet(
        ng_deg_sqrt_h: float,
        na_mps_sqrt_h: float,
        ba_ug: float,
        bg_deg_h: float,
    ) -> "ImuNoiseParams":
        """Convert datasheet units (deg/sqrt(h), (m/s)/sqrt(h), ug, deg/h)."""
        return ImuNoiseParams(
            sigma_g=ng_deg_sqrt_h * DEG / 60.0,
            sigma_a=na_mps_sqrt_h / 60.0,
            Ba=ba_ug * 1e-6 * _G0,
            Bg=bg_deg_h * DEG / 3600.0,
        )


@dataclass(frozen=True)
class GnssFix:
    """One GNSS position solution: time (s), ECEF position (m), per-axis std (m)."""

    t: float
    pos: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "pos", np.asarray(self.pos, dtype=float))
        object.__setattr__(self, "sigma", np.asarray(self.sigma, dtype=float))


@dataclass(frozen=True)
class LeverArm:
    """IMU-to-antenna offset in the body frame (m)."""

    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        object.__setattr__(self, "offset", np.asarray(self.offset, dtype=float))


def earth_rate_ecef() -> np.ndarray:
    """Earth rotation rate resolved in ECEF: (0, 0, omega_e)."""
    return np.array([0.0, 0.0, EARTH_RATE])


def gravity_ecef(pos) -> np.ndarray:
    """Plumb-bob gravity vector in ECEF at an ECEF position.

    Somigliana normal gravity on the WGS-84 ellipsoid with the standard
    altitude correction, pointed along the local ellipsoidal down direction.
    Includes the centrifugal contribution, so the velocity dynamics only add
    the Coriolis term.
    """
    pos = np.asarray(pos, dtype=float)
    r = float(np.linalg.norm(pos))
    if not r > 6.2e6:
        raise ValueError(f"position norm {r:.3e} m is not a terrestrial position")
    lat, lon, height = frames.ecef_to_geodetic(pos)
    sin2 = math.sin(lat) ** 2
    gamma = _GAMMA_E * (1.0 + _SOMIGLIANA_K * sin2) / math.sqrt(1.0 - frames.WGS84_E2 * sin2)
    a = frames.WGS84_A
    f = frames.WGS84_F
    gamma_h = gamma * (
        1.0
        - 2.0 * (1.0 + f + _GRAV_M - 2.0 * f * sin2) * height / a
        + 3.0 * height * height / (a * a)
    )
    return frames.ned_to_ecef_matrix(lat, lon) @ np.array([0.0, 0.0, gamma_h])


def omega_fn(state: GroupElement, u: ImuSample) -> np.ndarray:
    """Left-velocity function of the navigation dynamics, per-second units.

    Attitude slot: bias-corrected body rate minus the Earth rate seen in the
    body frame; velocity slot: bias-corrected specific force plus gravity and
    Coriolis resolved in the body frame; position slot: body-resolved ECEF
    velocity. The bias slots are identically zero.
    """
    rot_t = state.rot.T
    w_e = earth_rate_ecef()
    out = np.zeros(NDIM)
    out[PHI] = u.gyro - state.bias[3:6] - rot_t @ w_e
    out[NU] = (
        u.accel
        - state.bias[0:3]
        - 2.0 * (rot_t @ np.cross(w_e, state.vel))
        + rot_t @ gravity_ecef(state.pos)
    )
    out[RHO] = rot_t @ state.vel
    return out


def process_noise_Q(params: ImuNoiseParams, dt: float) -> np.ndarray:
    """Discrete process noise Q_k = Gamma Gamma^T dt, block diagonal.

    Gyro white noise drives the attitude slot, accel white noise the velocity
    slot, the bias diffusions their own slots; the position slot is exactly
    zero (no direct position noise channel).
    """
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    q = np.zeros((NDIM, NDIM))
    q[PHI, PHI] = params.sigma_g ** 2 * dt * np.eye(3)
    q[NU, NU] = params.sigma_a ** 2 * dt * np.eye(3)
    q[DBA, DBA] = params.Ba ** 2 * dt * np.eye(3)
    q[DBG, DBG] = params.Bg ** 2 * dt * np.eye(3)
    return q


def jacobian_C(state: GroupElement, u: ImuSample) -> np.ndarray:
    """Derivative of omega_fn under right perturbation of the state at zero.

    The gravity gradient with respect to the position slot (order 3e-6 1/s^2)
    is neglected; it is far below the retained terms at the stated tolerances.
    """
    rot_t = state.rot.T
    w_e = earth_rate_ecef()
    g_e = gravity_ecef(state.pos)
    c = np.zeros((NDIM, NDIM))
    c[PHI, PHI] = -skew(rot_t @ w_e)
    c[PHI, DBG] = -np.eye(3)
    c[NU, PHI] = skew(rot_t @ (g_e - 2.0 * np.cross(w_e, state.vel)))
    c[NU, NU] = -2.0 * rot_t @ skew(w_e) @ state.rot
    c[NU, DBA] = -np.eye(3)
    c[RHO, PHI] = skew(rot_t @ state.vel)
    c[RHO, NU] = np.eye(3)
    return c


def measurement_h(state: GroupElement, lever: LeverArm) -> np.ndarray:
    """Predicted GNSS antenna position: IMU position plus the rotated lever arm."""
    return state.pos + state.rot @ lever.offset


def jacobian_H(state: GroupElement, lever: LeverArm) -> np.ndarray:
    """Derivative of measurement_h under right perturbation of the state."""
    h = np.zeros((3, NDIM))
    h[:, PHI] = -state.rot @ skew(lever.offset)
    h[:, RHO] = state.rot
    return h
