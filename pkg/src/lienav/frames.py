"""Geodetic conversions and frame rotations on the WGS-84 ellipsoid.

All angles are in radians unless a function name says otherwise; positions
are ECEF meters. NED is the local North-East-Down frame at a geodetic point.
"""

from __future__ import annotations

import math

import numpy as np

WGS84_A = 6378137.0
WGS84_F = 1.0 / 298.257223563
WGS84_B = WGS84_A * (1.0 - WGS84_F)
WGS84_E2 = WGS84_F * (2.0 - WGS84_F)


def geodetic_to_ecef(lat: float, lon: float, height: float) -> np.ndarray:
    """ECEF position (m) from geodetic latitude, longitude (rad), height (m)."""
    sin_lat = math.sin(lat)
    cos_lat = math.cos(lat)
    n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
    return np.array(
        [
            (n + height) * cos_lat * math.cos(lon),
            (n + height) * cos_lat * math.sin(lon),
            (n * (1.0 - WGS84_E2) + height) * sin_lat,
        ]
    )


def ecef_to_geodetic(pos) -> tuple[float, float, float]:
    """Geodetic (lat, lon, height) from an ECEF position.

    Fixed-point iteration on the prime-vertical radius; converges well below
    1e-6 m for any point outside the Earth's core region.
    """
    x, y, z = float(pos[0]), float(pos[1]), float(pos[2])
    lon = math.atan2(y, x)
    rho = math.hypot(x, y)
    lat = math.atan2(z, rho * (1.0 - WGS84_E2))
    height = 0.0
    for _ in range(10):
        sin_lat = math.sin(lat)
        n = WGS84_A / math.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
        if rho > abs(z):
            height = rho / math.cos(lat) - n
        else:
            height = z / sin_lat - n * (1.0 - WGS84_E2)
        lat = math.atan2(z, rho * (1.0 - WGS84_E2 * n / (n + height)))
    return lat, lon, height


def ned_to_ecef_matrix(lat: float, lon: float) -> np.ndarray:
    """Rotation C_n^e whose columns are the NED axes expressed in ECEF."""
    sl, cl = math.sin(lat), math.cos(lat)
    so, co = math.sin(lon), math.cos(lon)
    return np.array(
        [
            [-sl * co, -so, -cl * co],
            [-sl * so, co, -cl * so],
            [cl, 0.0, -sl],
        ]
    )


def euler_to_matrix(roll: float, pitch: float, yaw: float) -> np.ndarray:
    """Body-to-NED rotation from ZYX Euler angles (yaw about down first)."""
    sr, cr = math.sin(roll), math.cos(roll)
    sp, cp = math.sin(pitch), math.cos(pitch)
    sy, cy = math.sin(yaw), math.cos(yaw)
    return np.array(
        [
            [cy * cp, cy * sp * sr - sy * cr, cy * sp * cr + sy * sr],
            [sy * cp, sy * sp * sr + cy * cr, sy * sp * cr - cy * sr],
            [-sp, cp * sr, cp * cr],
        ]
    )


def euler_from_matrix(c_bn: np.ndarray) -> tuple[float, float, float]:
    """(roll, pitch, yaw) of a body-to-NED rotation, pitch in [-pi/2, pi/2]."""
    pitch = -math.asin(max(-1.0, min(1.0, float(c_bn[2, 0]))))
    roll = math.atan2(c_bn[2, 1], c_bn[2, 2])
    yaw = math.atan2(c_bn[1, 0], c_bn[0, 0])
    return roll, pitch, yaw


def wrap_angle(angle):
    """Wrap an angle (rad) to (-pi, pi]."""
    wrapped = np.mod(-np.asarray(angle) + np.pi, 2.0 * np.pi)
    return -(wrapped - np.pi)


def ecef_to_geodetic_many(pos: np.ndarray):
    """Vectorized geodetic conversion of an (N, 3) ECEF array."""
    pos = np.asarray(pos, dtype=float)
    x, y, z = pos[:, 0], pos[:, 1], pos[:, 2]
    lon = np.arctan2(y, x)
    rho = np.hypot(x, y)
    lat = np.arctan2(z, rho * (1.0 - WGS84_E2))
    height = np.zeros_like(lat)
    for _ in range(10):
        sin_lat = np.sin(lat)
        n = WGS84_A / np.sqrt(1.0 - WGS84_E2 * sin_lat * sin_lat)
        height = np.where(
            rho > np.abs(z),
            rho / np.cos(lat) - n,
            z / np.where(sin_lat == 0.0, 1.0, sin_lat) - n * (1.0 - WGS84_E2),
        )
        lat = np.arctan2(z, rho * (1.0 - WGS84_E2 * n / (n + height)))
    return lat, lon, height


def ned_to_ecef_many(lat: np.ndarray, lon: np.ndarray) -> np.ndarray:
    """Stack of NED-to-ECEF rotations for latitude/longitude arrays."""
    sl, cl = np.sin(lat), np.cos(lat)
    so, co = np.sin(lon), np.cos(lon)
    out = np.empty((len(lat), 3, 3))
    out[:, 0, 0] = -sl * co
    out[:, 0, 1] = -so
    out[:, 0, 2] = -cl * co
    out[:, 1, 0] = -sl * so
    out[:, 1, 1] = co
    out[:, 1, 2] = -cl * so
    out[:, 2, 0] = cl
    out[:, 2, 1] = 0.0
    out[:, 2, 2] = -sl
    return out


def euler_from_matrix_many(c_bn: np.ndarray):
    """Vectorized (roll, pitch, yaw) extraction from (N, 3, 3) rotations."""
    pitch = -np.arcsin(np.clip(c_bn[:, 2, 0], -1.0, 1.0))
    roll = np.arctan2(c_bn[:, 2, 1], c_bn[:, 2, 2])
    yaw = np.arctan2(c_bn[:, 1, 0], c_bn[:, 0, 0])
    return roll, pitch, yaw
