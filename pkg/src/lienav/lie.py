"""Matrix Lie group machinery for the compound group SE2(3) x T(6).

A group element carries an attitude matrix, an ECEF velocity and position
(the SE2(3) factor) and six sensor-bias states (the abelian T(6) factor).
Tangent vectors are 15-dimensional, ordered

    (phi, nu, rho, dba, dbg)

with attitude coordinates first, then velocity, position, accelerometer-bias
and gyroscope-bias coordinates, three each. The dense 12x12 matrix form of a
group element is only materialized by test oracles; the library keeps the
factored block representation throughout.

All operations are pure and all types are immutable value types; RNG state is
owned by the caller.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

NDIM = 15

PHI = slice(0, 3)
NU = slice(3, 6)
RHO = slice(6, 9)
DBA = slice(9, 12)
DBG = slice(12, 15)

_CHART_LIMIT = math.pi - 1e-6
_ORTHO_TOL = 1e-9
_SMALL_ANGLE = 1e-7


class OutOfChartError(ValueError):
    """The rotation angle left the neighborhood where exp/log is bijective."""


def skew(v) -> np.ndarray:
    """Cross-product matrix [v]x of a 3-vector."""
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def tangent(phi=None, nu=None, rho=None, dba=None, dbg=None) -> np.ndarray:
    """Assemble a 15-vector from named blocks; missing blocks are zero."""
    x = np.zeros(NDIM)
    for sl, val in ((PHI, phi), (NU, nu), (RHO, rho), (DBA, dba), (DBG, dbg)):
        if val is not None:
            x[sl] = val
    return x


@dataclass(frozen=True)
class GroupElement:
    """Factored element of SE2(3) x T(6).

    rot is the body-to-ECEF direction cosine matrix, vel and pos are ECEF
    velocity and position, bias stacks the accelerometer bias (first three)
    and gyroscope bias (last three).
    """

    rot: np.ndarray
    vel: np.ndarray
    pos: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "rot", np.asarray(self.rot, dtype=float))
        object.__setattr__(self, "vel", np.asarray(self.vel, dtype=float))
        object.__setattr__(self, "pos", np.asarray(self.pos, dtype=float))
        object.__setattr__(self, "bias", np.asarray(self.bias, dtype=float))

    @staticmethod
    def identity() -> "GroupElement":
        return GroupElement(np.eye(3), np.zeros(3), np.zeros(3), np.zeros(6))


@dataclass(frozen=True)
class ConcentratedGaussian:
    """Distribution on the group: mean element and 15x15 tangent covariance."""

    mean: GroupElement
    cov: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "cov", np.asarray(self.cov, dtype=float))


def hat(x) -> np.ndarray:
    """15-vector to its 12x12 Lie-algebra matrix."""
    x = np.asarray(x, dtype=float)
    m = np.zeros((12, 12))
    m[0:3, 0:3] = skew(x[PHI])
    m[0:3, 3] = x[NU]
    m[0:3, 4] = x[RHO]
    m[5:11, 11] = x[9:15]
    return m


def vee(m) -> np.ndarray:
    """Inverse of hat; rejects matrices off the algebra sparsity pattern."""
    m = np.asarray(m, dtype=float)
    x = np.zeros(NDIM)
    x[0] = m[2, 1]
    x[1] = m[0, 2]
    x[2] = m[1, 0]
    x[NU] = m[0:3, 3]
    x[RHO] = m[0:3, 4]
    x[9:15] = m[5:11, 11]
    if np.max(np.abs(m - hat(x))) > 1e-12:
        raise ValueError("matrix does not lie on the algebra sparsity pattern")
    return x


def so3_exp(phi) -> np.ndarray:
    """Rodrigues formula with a second-order series below 1e-7 rad."""
    phi = np.asarray(phi, dtype=float)
    angle = math.sqrt(float(phi @ phi))
    k = skew(phi)
    if angle < _SMALL_ANGLE:
        a = 1.0 - angle * angle / 6.0
        b = 0.5 - angle * angle / 24.0
    else:
        a = math.sin(angle) / angle
        b = (1.0 - math.cos(angle)) / (angle * angle)
    return np.eye(3) + a * k + b * (k @ k)


def so3_log(rot) -> np.ndarray:
    """Rotation vector of a rotation matrix; errors at angles >= pi - 1e-6."""
    rot = np.asarray(rot, dtype=float)
    trace = float(np.trace(rot))
    angle = math.acos(max(-1.0, min(1.0, 0.5 * (trace - 1.0))))
    if angle >= _CHART_LIMIT:
        raise OutOfChartError(f"rotation angle {angle:.9f} too close to pi")
    s = 0.5 * np.array(
        [rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0], rot[1, 0] - rot[0, 1]]
    )
    if angle < _SMALL_ANGLE:
        return s * (1.0 + angle * angle / 6.0)
    if angle > 2.9:
        # Axis from the symmetric part; sin(angle) is small so the usual
        # antisymmetric extraction loses accuracy here.
        nnt = (rot + rot.T - 2.0 * math.cos(angle) * np.eye(3)) / (
            2.0 * (1.0 - math.cos(angle))
        )
        i = int(np.argmax(np.diag(nnt)))
        n = nnt[:, i] / math.sqrt(max(nnt[i, i], 1e-300))
        if float(n @ s) < 0.0:
            n = -n
        return angle * n / np.linalg.norm(n)
    return s * (angle / math.sin(angle))


def so3_left_jacobian(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    angle = math.sqrt(float(phi @ phi))
    k = skew(phi)
    if angle < _SMALL_ANGLE:
        b = 0.5 - angle * angle / 24.0
        c = 1.0 / 6.0 - angle * angle / 120.0
    else:
        b = (1.0 - math.cos(angle)) / (angle * angle)
        c = (angle - math.sin(angle)) / (angle ** 3)
    return np.eye(3) + b * k + c * (k @ k)


def so3_left_jacobian_inv(phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=float)
    angle = math.sqrt(float(phi @ phi))
    k = skew(phi)
    if angle < _SMALL_ANGLE:
        d = 1.0 / 12.0 + angle * angle / 720.0
    else:
        d = 1.0 / (angle * angle) - (1.0 + math.cos(angle)) / (
            2.0 * angle * math.sin(angle)
        )
    return np.eye(3) - 0.5 * k + d * (k @ k)


def group_exp(x) -> GroupElement:
    """Exponential map of a 15-vector; closed form through the SO(3) kernels."""
    x = np.asarray(x, dtype=float)
    phi = x[PHI]
    if math.sqrt(float(phi @ phi)) >= _CHART_LIMIT:
        raise OutOfChartError("attitude coordinates exceed the chart radius")
    jl = so3_left_jacobian(phi)
    return GroupElement(so3_exp(phi), jl @ x[NU], jl @ x[RHO], x[9:15].copy())


def group_log(g: GroupElement) -> np.ndarray:
    """Logarithm map, exact inverse of group_exp inside the chart."""
    phi = so3_log(g.rot)
    jli = so3_left_jacobian_inv(phi)
    x = np.empty(NDIM)
    x[PHI] = phi
    x[NU] = jli @ g.vel
    x[RHO] = jli @ g.pos
    x[9:15] = g.bias
    return x


def _reorthonormalized(rot: np.ndarray) -> np.ndarray:
    if np.max(np.abs(rot.T @ rot - np.eye(3))) <= _ORTHO_TOL:
        return rot
    u, _, vt = np.linalg.svd(rot)
    return u @ vt


def compose(a: GroupElement, b: GroupElement) -> GroupElement:
    """Group product; equivalent to the 12x12 block-matrix product."""
    return GroupElement(
        _reorthonormalized(a.rot @ b.rot),
        a.rot @ b.vel + a.vel,
        a.rot @ b.pos + a.pos,
        a.bias + b.bias,
    )


def inverse(g: GroupElement) -> GroupElement:
    rt = g.rot.T
    return GroupElement(rt, -(rt @ g.vel), -(rt @ g.pos), -g.bias)


def adjoint(g: GroupElement) -> np.ndarray:
    """Adjoint representation Ad(g) in closed block form."""
    a = np.zeros((NDIM, NDIM))
    a[PHI, PHI] = g.rot
    a[NU, PHI] = skew(g.vel) @ g.rot
    a[NU, NU] = g.rot
    a[RHO, PHI] = skew(g.pos) @ g.rot
    a[RHO, RHO] = g.rot
    a[9:15, 9:15] = np.eye(6)
    return a


def ad_small(x) -> np.ndarray:
    """Algebra adjoint ad(x), the matrix of the commutator with x."""
    x = np.asarray(x, dtype=float)
    a = np.zeros((NDIM, NDIM))
    kphi = skew(x[PHI])
    a[PHI, PHI] = kphi
    a[NU, PHI] = skew(x[NU])
    a[NU, NU] = kphi
    a[RHO, PHI] = skew(x[RHO])
    a[RHO, RHO] = kphi
    return a


def right_jacobian(x) -> np.ndarray:
    """Right Jacobian as the alternating ad-power series.

    Terms are added until their max-norm falls below 1e-14 or 30 terms have
    been summed; valid on the full 15-dimensional compound algebra.
    """
    neg_ad = -ad_small(x)
    j = np.eye(NDIM)
    term = np.eye(NDIM)
    for k in range(1, 31):
        term = term @ neg_ad / (k + 1.0)
        j = j + term
        if np.max(np.abs(term)) < 1e-14:
            break
    return j


def cgd_sample(d: ConcentratedGaussian, rng: np.random.Generator) -> GroupElement:
    """Draw mean * exp(eps) with eps ~ N(0, cov) via the Cholesky factor."""
    cov = d.cov
    if np.max(np.abs(cov - cov.T)) > 1e-12 * max(1.0, float(np.max(np.abs(cov)))):
        raise ValueError("covariance is not symmetric")
    try:
        chol = np.linalg.cholesky(cov)
    except np.linalg.LinAlgError as exc:
        raise ValueError("covariance is not positive definite") from exc
    eps = chol @ rng.standard_normal(NDIM)
    return compose(d.mean, group_exp(eps))
