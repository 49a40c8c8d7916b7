"""Compiled whole-pass kernels for the filter and smoother.

Same math as the step functions in estimation.py / ins.py / lie.py, fused
into per-dataset loops so Monte Carlo batches run on interactive timescales.
estimation.run_filter and estimation.rts_smooth dispatch here when numba is
importable; the test suite pins this module against the reference path.
"""

import math

import numpy as np
from numba import njit

_WGS84_A = 6378137.0
_WGS84_F = 1.0 / 298.257223563
_WGS84_E2 = _WGS84_F * (2.0 - _WGS84_F)
_GAMMA_E = 9.7803253359
_SOMIGLIANA_K = 1.931852652458e-3
_GRAV_M = 3.449786506841e-3
_EARTH_RATE = 7.292115e-5


@njit(cache=True)
def _gravity_ecef(pos):
    x, y, z = pos[0], pos[1], pos[2]
    lon = math.atan2(y, x)
    rho = math.hypot(x, y)
    lat = math.atan2(z, rho * (1.0 - _WGS84_E2))
    height = 0.0
    for _ in range(10):
        sin_lat = math.sin(lat)
        n = _WGS84_A / math.sqrt(1.0 - _WGS84_E2 * sin_lat * sin_lat)
        if rho > abs(z):
            height = rho / math.cos(lat) - n
        else:
            height = z / sin_lat - n * (1.0 - _WGS84_E2)
        lat = math.atan2(z, rho * (1.0 - _WGS84_E2 * n / (n + height)))
    sin_lat = math.sin(lat)
    sin2 = sin_lat * sin_lat
    gamma = _GAMMA_E * (1.0 + _SOMIGLIANA_K * sin2) / math.sqrt(1.0 - _WGS84_E2 * sin2)
    gamma_h = gamma * (
        1.0
        - 2.0 * (1.0 + _WGS84_F + _GRAV_M - 2.0 * _WGS84_F * sin2) * height / _WGS84_A
        + 3.0 * height * height / (_WGS84_A * _WGS84_A)
    )
    cl, sl = math.cos(lat), math.sin(lat)
    co, so = math.cos(lon), math.sin(lon)
    out = np.empty(3)
    out[0] = -cl * co * gamma_h
    out[1] = -cl * so * gamma_h
    out[2] = -sl * gamma_h
    return out


@njit(cache=True)
def _skew(v):
    out = np.zeros((3, 3))
    out[0, 1] = -v[2]
    out[0, 2] = v[1]
    out[1, 0] = v[2]
    out[1, 2] = -v[0]
    out[2, 0] = -v[1]
    out[2, 1] = v[0]
    return out


@njit(cache=True)
def _so3_exp(phi):
    angle = math.sqrt(phi[0] ** 2 + phi[1] ** 2 + phi[2] ** 2)
    k = _skew(phi)
    if angle < 1e-7:
        a = 1.0 - angle * angle / 6.0
        b = 0.5 - angle * angle / 24.0
    else:
        a = math.sin(angle) / angle
        b = (1.0 - math.cos(angle)) / (angle * angle)
    return np.eye(3) + a * k + b * (k @ k)


@njit(cache=True)
def _so3_log(rot):
    trace = rot[0, 0] + rot[1, 1] + rot[2, 2]
    arg = 0.5 * (trace - 1.0)
    if arg > 1.0:
        arg = 1.0
    if arg < -1.0:
        arg = -1.0
    angle = math.acos(arg)
    if angle >= math.pi - 1e-6:
        # chart boundary: flagged by the caller through the ok channel
        return np.full(3, np.nan)
    s = np.empty(3)
    s[0] = 0.5 * (rot[2, 1] - rot[1, 2])
    s[1] = 0.5 * (rot[0, 2] - rot[2, 0])
    s[2] = 0.5 * (rot[1, 0] - rot[0, 1])
    if angle < 1e-7:
        return s * (1.0 + angle * angle / 6.0)
    if angle > 2.9:
        cos_a = math.cos(angle)
        nnt = (rot + rot.T - 2.0 * cos_a * np.eye(3)) / (2.0 * (1.0 - cos_a))
        i = 0
        if nnt[1, 1] > nnt[i, i]:
            i = 1
        if nnt[2, 2] > nnt[i, i]:
            i = 2
        n = nnt[:, i] / math.sqrt(max(nnt[i, i], 1e-300))
        if n[0] * s[0] + n[1] * s[1] + n[2] * s[2] < 0.0:
            n = -n
        norm = math.sqrt(n[0] ** 2 + n[1] ** 2 + n[2] ** 2)
        return angle * n / norm
    return s * (angle / math.sin(angle))


@njit(cache=True)
def _left_jacobian(phi):
    angle = math.sqrt(phi[0] ** 2 + phi[1] ** 2 + phi[2] ** 2)
    k = _skew(phi)
    if angle < 1e-7:
        b = 0.5 - angle * angle / 24.0
        c = 1.0 / 6.0 - angle * angle / 120.0
    else:
        b = (1.0 - math.cos(angle)) / (angle * angle)
        c = (angle - math.sin(angle)) / (angle ** 3)
    return np.eye(3) + b * k + c * (k @ k)


@njit(cache=True)
def _left_jacobian_inv(phi):
    angle = math.sqrt(phi[0] ** 2 + phi[1] ** 2 + phi[2] ** 2)
    k = _skew(phi)
    if angle < 1e-7:
        d = 1.0 / 12.0 + angle * angle / 720.0
    else:
        d = 1.0 / (angle * angle) - (1.0 + math.cos(angle)) / (
            2.0 * angle * math.sin(angle)
        )
    return np.eye(3) - 0.5 * k + d * (k @ k)


@njit(cache=True)
def _group_exp(x):
    phi = x[0:3]
    jl = _left_jacobian(phi)
    return _so3_exp(phi), jl @ x[3:6], jl @ x[6:9], x[9:15].copy()


@njit(cache=True)
def _compose(rot_a, vel_a, pos_a, bias_a, rot_b, vel_b, pos_b, bias_b):
    rot = rot_a @ rot_b
    # re-orthonormalize when accumulated drift exceeds tolerance
    drift = 0.0
    rtr = rot.T @ rot
    for i in range(3):
        for j in range(3):
            target = 1.0 if i == j else 0.0
            d = abs(rtr[i, j] - target)
            if d > drift:
                drift = d
    if drift > 1e-9:
        u, _, vt = np.linalg.svd(rot)
        rot = u @ vt
    return rot, rot_a @ vel_b + vel_a, rot_a @ pos_b + pos_a, bias_a + bias_b


@njit(cache=True)
def _right_jacobian(x):
    # powers of ad(x) never leave the top-left 9x9 block, so the series
    # runs there and the bias block stays identity
    neg_ad = np.zeros((9, 9))
    kphi = _skew(x[0:3])
    neg_ad[0:3, 0:3] = -kphi
    neg_ad[3:6, 0:3] = -_skew(x[3:6])
    neg_ad[3:6, 3:6] = -kphi
    neg_ad[6:9, 0:3] = -_skew(x[6:9])
    neg_ad[6:9, 6:9] = -kphi
    j9 = np.eye(9)
    term = np.eye(9)
    for k in range(1, 31):
        term = term @ neg_ad / (k + 1.0)
        j9 = j9 + term
        mx = 0.0
        for i in range(9):
            for jj in range(9):
                v = abs(term[i, jj])
                if v > mx:
                    mx = v
        if mx < 1e-14:
            break
    j = np.eye(15)
    j[0:9, 0:9] = j9
    return j


@njit(cache=True)
def _adjoint(rot, vel, pos):
    a = np.zeros((15, 15))
    a[0:3, 0:3] = rot
    a[3:6, 0:3] = _skew(vel) @ rot
    a[3:6, 3:6] = rot
    a[6:9, 0:3] = _skew(pos) @ rot
    a[6:9, 6:9] = rot
    for i in range(9, 15):
        a[i, i] = 1.0
    return a


@njit(cache=True)
def _omega(rot, vel, bias, gyro, accel, w_e, g_e):
    rot_t = rot.T
    out = np.zeros(15)
    w_cross_v = np.empty(3)
    w_cross_v[0] = w_e[1] * vel[2] - w_e[2] * vel[1]
    w_cross_v[1] = w_e[2] * vel[0] - w_e[0] * vel[2]
    w_cross_v[2] = w_e[0] * vel[1] - w_e[1] * vel[0]
    out[0:3] = gyro - bias[3:6] - rot_t @ w_e
    out[3:6] = accel - bias[0:3] - 2.0 * (rot_t @ w_cross_v) + rot_t @ g_e
    out[6:9] = rot_t @ vel
    return out


@njit(cache=True)
def _jacobian_C(rot, vel, w_e, g_e):
    rot_t = rot.T
    c = np.zeros((15, 15))
    w_cross_v = np.empty(3)
    w_cross_v[0] = w_e[1] * vel[2] - w_e[2] * vel[1]
    w_cross_v[1] = w_e[2] * vel[0] - w_e[0] * vel[2]
    w_cross_v[2] = w_e[0] * vel[1] - w_e[1] * vel[0]
    c[0:3, 0:3] = -_skew(rot_t @ w_e)
    for i in range(3):
        c[i, 12 + i] = -1.0
    c[3:6, 0:3] = _skew(rot_t @ (g_e - 2.0 * w_cross_v))
    c[3:6, 3:6] = -2.0 * rot_t @ _skew(w_e) @ rot
    for i in range(3):
        c[3 + i, 9 + i] = -1.0
    c[6:9, 0:3] = _skew(rot_t @ vel)
    for i in range(3):
        c[6 + i, 3 + i] = 1.0
    return c


@njit(cache=True)
def _finite_state(rot, vel, pos, bias):
    for i in range(3):
        if not (math.isfinite(vel[i]) and math.isfinite(pos[i])):
            return False
        for j in range(3):
            if not math.isfinite(rot[i, j]):
                return False
    for i in range(6):
        if not math.isfinite(bias[i]):
            return False
    return True


@njit(cache=True)
def run_filter(
    t,
    gyro,
    accel,
    fix_epoch,
    fix_pos,
    fix_var,
    rot0,
    vel0,
    pos0,
    bias0,
    p0,
    sigma_g,
    sigma_a,
    diff_ba,
    diff_bg,
    lever,
    kappa,
    mode,
    collect_likelihood,
):
    n = len(t)
    m = len(fix_epoch)
    rot_p = np.empty((n, 3, 3))
    vel_p = np.empty((n, 3))
    pos_p = np.empty((n, 3))
    bias_p = np.empty((n, 6))
    rot_u = np.empty((n, 3, 3))
    vel_u = np.empty((n, 3))
    pos_u = np.empty((n, 3))
    bias_u = np.empty((n, 6))
    cov_p = np.empty((n, 15, 15))
    cov_u = np.empty((n, 15, 15))
    omega_dt_hist = np.zeros((n, 15))
    trans = np.empty((n, 15, 15))
    zetas = np.empty(m)
    gammas = np.empty(m)
    innovations = np.empty((m, 3))

    w_e = np.zeros(3)
    w_e[2] = _EARTH_RATE

    qc = np.zeros(15)
    qc[0:3] = sigma_g * sigma_g
    qc[3:6] = sigma_a * sigma_a
    qc[9:12] = diff_ba * diff_ba
    qc[12:15] = diff_bg * diff_bg

    rot = rot0.copy()
    vel = vel0.copy()
    pos = pos0.copy()
    bias = bias0.copy()
    p = p0.copy()
    trans[0] = np.eye(15)
    cost = 0.0
    ok = True
    gi = 0
    eye15 = np.eye(15)

    for k in range(n):
        if k > 0:
            dt = t[k] - t[k - 1]
            g_e = _gravity_ecef(pos)
            omega = _omega(rot, vel, bias, gyro[k - 1], accel[k - 1], w_e, g_e)
            omega_dt = omega * dt
            c_dt = _jacobian_C(rot, vel, w_e, g_e) * dt
            er, ev, ep, eb = _group_exp(omega_dt)
            nr, nv, npos, nb = _compose(rot, vel, pos, bias, er, ev, ep, eb)
            mr, mv, mp, mb = _group_exp(-omega_dt)
            f = _adjoint(mr, mv, mp)
            jr = _right_jacobian(omega_dt)
            f = f + jr @ c_dt
            p = f @ p @ f.T + (jr * (qc * dt)) @ jr.T
            p = 0.5 * (p + p.T)
            rot, vel, pos, bias = nr, nv, npos, nb
            omega_dt_hist[k] = omega_dt
            trans[k] = f
            if not _finite_state(rot, vel, pos, bias):
                ok = False
                break
        rot_p[k] = rot
        vel_p[k] = vel
        pos_p[k] = pos
        bias_p[k] = bias
        cov_p[k] = p

        while gi < m and fix_epoch[gi] == k:
            h = np.zeros((3, 15))
            h[:, 0:3] = -rot @ _skew(lever)
            h[:, 6:9] = rot
            y_hat = pos + rot @ lever
            z = fix_pos[gi] - y_hat
            r = np.diag(fix_var[gi])
            hp = h @ p
            xi = r + hp @ h.T
            sol = np.linalg.solve(xi, z)
            zeta = z[0] * sol[0] + z[1] * sol[1] + z[2] * sol[2]
            gamma = 1.0 if zeta <= kappa else kappa / zeta
            zetas[gi] = zeta
            gammas[gi] = gamma
            innovations[gi] = z
            if collect_likelihood:
                det = np.linalg.det(xi)
                cost += 0.5 * (math.log(2.0 * math.pi) + math.log(det) + zeta)
            apply_update = not (mode == 1 and zeta > kappa)
            if apply_update:
                k_gain = np.linalg.solve(xi, hp).T
                er, ev, ep, eb = _group_exp(gamma * (k_gain @ z))
                rot, vel, pos, bias = _compose(rot, vel, pos, bias, er, ev, ep, eb)
                a = eye15 - k_gain @ h
                p = a @ p @ a.T + k_gain @ r @ k_gain.T
                p = 0.5 * (p + p.T)
            gi += 1

        rot_u[k] = rot
        vel_u[k] = vel
        pos_u[k] = pos
        bias_u[k] = bias
        cov_u[k] = p

    return (
        rot_p, vel_p, pos_p, bias_p, rot_u, vel_u, pos_u, bias_u,
        cov_p, cov_u, omega_dt_hist, trans, zetas, gammas, innovations, cost, ok,
    )


@njit(cache=True)
def _group_log(rot, vel, pos, bias):
    phi = _so3_log(rot)
    out = np.empty(15)
    if not math.isfinite(phi[0]):
        return np.full(15, np.nan)
    jli = _left_jacobian_inv(phi)
    out[0:3] = phi
    out[3:6] = jli @ vel
    out[6:9] = jli @ pos
    out[9:15] = bias
    return out


@njit(cache=True)
def _cholesky_ok(p):
    """Plain Cholesky feasibility check without exceptions."""
    n = p.shape[0]
    chol = np.zeros((n, n))
    for i in range(n):
        for j in range(i + 1):
            acc = p[i, j]
            for k in range(j):
                acc -= chol[i, k] * chol[j, k]
            if i == j:
                if acc <= 0.0:
                    return False
                chol[i, i] = math.sqrt(acc)
            else:
                chol[i, j] = acc / chol[j, j]
    return True


@njit(cache=True)
def rts_smooth(
    rot_p, vel_p, pos_p, bias_p, rot_u, vel_u, pos_u, bias_u, cov_p, cov_u, trans
):
    n = rot_p.shape[0]
    rot_s = np.empty((n, 3, 3))
    vel_s = np.empty((n, 3))
    pos_s = np.empty((n, 3))
    bias_s = np.empty((n, 6))
    cov_s = np.empty((n, 15, 15))
    rot_s[n - 1] = rot_u[n - 1]
    vel_s[n - 1] = vel_u[n - 1]
    pos_s[n - 1] = pos_u[n - 1]
    bias_s[n - 1] = bias_u[n - 1]
    cov_s[n - 1] = cov_u[n - 1]
    ok = True
    bad_epoch = -1

    for k in range(n - 2, -1, -1):
        pp = cov_p[k + 1]
        det = np.linalg.det(pp)
        if det == 0.0 or not math.isfinite(det):
            ok = False
            bad_epoch = k + 1
            break
        a = cov_u[k] @ trans[k + 1].T
        gain = np.linalg.solve(pp, a.T).T

        # delta = log(pred[k+1]^-1 * smoothed[k+1])
        rt = rot_p[k + 1].T
        dr = rt @ rot_s[k + 1]
        dv = rt @ (vel_s[k + 1] - vel_p[k + 1])
        dp = rt @ (pos_s[k + 1] - pos_p[k + 1])
        db = bias_s[k + 1] - bias_p[k + 1]
        delta = _group_log(dr, dv, dp, db)
        if not math.isfinite(delta[0]):
            ok = False
            bad_epoch = k + 1
            break
        er, ev, ep, eb = _group_exp(gain @ delta)
        nr, nv, npos, nb = _compose(rot_u[k], vel_u[k], pos_u[k], bias_u[k], er, ev, ep, eb)
        rot_s[k] = nr
        vel_s[k] = nv
        pos_s[k] = npos
        bias_s[k] = nb

        p = cov_u[k] + gain @ (cov_s[k + 1] - pp) @ gain.T
        p = 0.5 * (p + p.T)
        if not _cholesky_ok(p):
            w, v = np.linalg.eigh(p)
            trace = 0.0
            for i in range(15):
                trace += p[i, i]
            floor = 1e-15 * max(trace / 15.0, 1e-300)
            for i in range(15):
                if w[i] < floor:
                    w[i] = floor
            p = (v * w) @ v.T
        cov_s[k] = p

    return rot_s, vel_s, pos_s, bias_s, cov_s, ok, bad_epoch
