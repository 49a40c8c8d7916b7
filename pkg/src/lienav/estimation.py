"""Discrete EKF and RTS smoother on SE2(3) x T(6).

The predict/update core is generic over any dynamics supplied as a left
velocity vector and its state Jacobian, so the same recursion runs both the
navigation filter and the reduced test models. INS-specific wrappers bind the
strapdown model from :mod:`lienav.ins`.

Filter runs over whole datasets go through :func:`run_filter`, which uses a
compiled fast path when available; the step functions here are the reference
semantics the fast path is tested against.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import chi2

from . import ins, lie
from .ins import GnssFix, ImuNoiseParams, ImuSample, LeverArm
from .lie import NDIM, ConcentratedGaussian, GroupElement

logger = logging.getLogger(__name__)

try:
    from . import _fast
except ImportError:  # pragma: no cover - numba not installed
    _fast = None


@dataclass(frozen=True)
class GateConfig:
    """Innovation gate: chi-square threshold and rejection mode.

    mode "hard" discards gated measurements entirely; mode "soft" scales the
    innovation by min(1, kappa/zeta) instead.
    """

    kappa: float
    mode: str = "soft"

    def __post_init__(self):
        if not self.kappa > 0.0:
            raise ValueError("kappa must be positive")
        if self.mode not in ("hard", "soft"):
            raise ValueError(f"unknown gate mode {self.mode!r}")


@dataclass(frozen=True)
class GateReport:
    """Per-measurement gating diagnostics."""

    zeta: float
    gamma: float
    accepted: bool
    innovation: np.ndarray


@dataclass(frozen=True)
class FilterEpoch:
    """One epoch of filter output, the unit consumed by the smoother.

    omega_dt and F belong to the predict step that produced this epoch's
    predicted distribution; the first epoch carries zeros and identity.
    """

    t: float
    predicted: ConcentratedGaussian
    updated: ConcentratedGaussian
    omega_dt: np.ndarray
    F: np.ndarray
    gate: Optional[GateReport] = None


def default_kappa(confidence: float) -> float:
    """Chi-square quantile with 3 degrees of freedom at the given confidence."""
    if not 0.0 < confidence < 1.0:
        raise ValueError("confidence must be in (0, 1)")
    return float(chi2.ppf(confidence, df=3))


def nrs(innovation, xi) -> float:
    """Normalized residue squared: innovation' * inv(xi) * innovation."""
    innovation = np.asarray(innovation, dtype=float)
    try:
        sol = np.linalg.solve(np.asarray(xi, dtype=float), innovation)
    except np.linalg.LinAlgError as exc:
        raise ValueError("singular innovation covariance") from exc
    return float(innovation @ sol)


def lie_predict(
    state: ConcentratedGaussian,
    omega: np.ndarray,
    c_mat: np.ndarray,
    q: np.ndarray,
    dt: float,
) -> tuple[ConcentratedGaussian, np.ndarray, np.ndarray]:
    """Generic one-step predict given the velocity vector and its Jacobian.

    Returns the predicted distribution, the applied tangent increment
    omega * dt and the error transition matrix F.
    """
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    if not (np.all(np.isfinite(omega)) and np.all(np.isfinite(state.cov))):
        raise ValueError("non-finite filter state or velocity")
    omega_dt = np.asarray(omega, dtype=float) * dt
    mean = lie.compose(state.mean, lie.group_exp(omega_dt))
    jr = lie.right_jacobian(omega_dt)
    f = lie.adjoint(lie.group_exp(-omega_dt)) + jr @ (np.asarray(c_mat) * dt)
    cov = f @ state.cov @ f.T + jr @ q @ jr.T
    cov = 0.5 * (cov + cov.T)
    return ConcentratedGaussian(mean, cov), omega_dt, f


def ekf_predict(
    state: ConcentratedGaussian,
    u: ImuSample,
    dt: float,
    params: ImuNoiseParams,
) -> tuple[ConcentratedGaussian, np.ndarray, np.ndarray]:
    """Strapdown predict: bind the INS velocity function and Jacobian."""
    omega = ins.omega_fn(state.mean, u)
    c_mat = ins.jacobian_C(state.mean, u)
    q = ins.process_noise_Q(params, dt)
    return lie_predict(state, omega, c_mat, q, dt)


def lie_update(
    state: ConcentratedGaussian,
    y: np.ndarray,
    y_hat: np.ndarray,
    h_mat: np.ndarray,
    r: np.ndarray,
    gate: Optional[GateConfig] = None,
) -> tuple[ConcentratedGaussian, GateReport]:
    """Generic measurement update with Joseph-form covariance and gating.

    The state correction is exp of gamma * K * innovation; the covariance is
    always updated with the unscaled gain when the update is applied. In hard
    mode a gated measurement leaves the state untouched.
    """
    y = np.asarray(y, dtype=float)
    if not np.all(np.isfinite(y)):
        raise ValueError("non-finite measurement")
    z = y - np.asarray(y_hat, dtype=float)
    p = state.cov
    xi = np.asarray(r, dtype=float) + h_mat @ p @ h_mat.T
    zeta = nrs(z, xi)
    kappa = gate.kappa if gate is not None else math.inf
    gamma = 1.0 if zeta <= kappa else kappa / zeta
    accepted = zeta <= kappa
    report = GateReport(zeta=zeta, gamma=gamma, accepted=accepted, innovation=z)
    if gate is not None and gate.mode == "hard" and not accepted:
        return state, report
    k_gain = np.linalg.solve(xi, h_mat @ p).T
    mean = lie.compose(state.mean, lie.group_exp(gamma * (k_gain @ z)))
    a = np.eye(NDIM) - k_gain @ h_mat
    cov = a @ p @ a.T + k_gain @ r @ k_gain.T
    cov = 0.5 * (cov + cov.T)
    return ConcentratedGaussian(mean, cov), report


def ekf_update(
    state: ConcentratedGaussian,
    fix: GnssFix,
    lever: LeverArm,
    gate: Optional[GateConfig] = None,
) -> tuple[ConcentratedGaussian, GateReport]:
    """GNSS position update against the lever-arm corrected antenna position."""
    if not np.all(fix.sigma > 0.0):
        raise ValueError("GNSS sigma must be positive")
    if not np.all(np.isfinite(fix.pos)):
        raise ValueError("non-finite GNSS position")
    y_hat = ins.measurement_h(state.mean, lever)
    h_mat = ins.jacobian_H(state.mean, lever)
    r = np.diag(fix.sigma.astype(float) ** 2)
    return lie_update(state, fix.pos, y_hat, h_mat, r, gate)


@dataclass
class FilterHistory:
    """Packed per-epoch filter output over a whole dataset.

    Sequence of :class:`FilterEpoch` by indexing; the packed arrays are what
    the smoother and the report writers consume directly.
    """

    t: np.ndarray
    rot_pred: np.ndarray
    vel_pred: np.ndarray
    pos_pred: np.ndarray
    bias_pred: np.ndarray
    rot_upd: np.ndarray
    vel_upd: np.ndarray
    pos_upd: np.ndarray
    bias_upd: np.ndarray
    cov_pred: np.ndarray
    cov_upd: np.ndarray
    omega_dt: np.ndarray
    trans: np.ndarray
    gates: dict = field(default_factory=dict)
    likelihood_cost: float = 0.0
    dropped_fixes: int = 0

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, k: int) -> FilterEpoch:
        if k < 0:
            k += len(self.t)
        if not 0 <= k < len(self.t):
            raise IndexError(k)
        predicted = ConcentratedGaussian(
            GroupElement(self.rot_pred[k], self.vel_pred[k], self.pos_pred[k], self.bias_pred[k]),
            self.cov_pred[k],
        )
        updated = ConcentratedGaussian(
            GroupElement(self.rot_upd[k], self.vel_upd[k], self.pos_upd[k], self.bias_upd[k]),
            self.cov_upd[k],
        )
        return FilterEpoch(
            t=float(self.t[k]),
            predicted=predicted,
            updated=updated,
            omega_dt=self.omega_dt[k],
            F=self.trans[k],
            gate=self.gates.get(k),
        )

    def updated_state(self, k: int) -> ConcentratedGaussian:
        return self[k].updated


def _store(history: FilterHistory, k: int, pred: ConcentratedGaussian, upd: ConcentratedGaussian):
    history.rot_pred[k] = pred.mean.rot
    history.vel_pred[k] = pred.mean.vel
    history.pos_pred[k] = pred.mean.pos
    history.bias_pred[k] = pred.mean.bias
    history.cov_pred[k] = pred.cov
    history.rot_upd[k] = upd.mean.rot
    history.vel_upd[k] = upd.mean.vel
    history.pos_upd[k] = upd.mean.pos
    history.bias_upd[k] = upd.mean.bias
    history.cov_upd[k] = upd.cov


def _alloc_history(t: np.ndarray) -> FilterHistory:
    n = len(t)
    return FilterHistory(
        t=t,
        rot_pred=np.empty((n, 3, 3)),
        vel_pred=np.empty((n, 3)),
        pos_pred=np.empty((n, 3)),
        bias_pred=np.empty((n, 6)),
        rot_upd=np.empty((n, 3, 3)),
        vel_upd=np.empty((n, 3)),
        pos_upd=np.empty((n, 3)),
        bias_upd=np.empty((n, 6)),
        cov_pred=np.empty((n, NDIM, NDIM)),
        cov_upd=np.empty((n, NDIM, NDIM)),
        omega_dt=np.zeros((n, NDIM)),
        trans=np.empty((n, NDIM, NDIM)),
    )


def run_filter(
    imu: Sequence[ImuSample],
    gnss: Sequence[GnssFix],
    init: ConcentratedGaussian,
    params: ImuNoiseParams,
    lever: LeverArm = LeverArm(),
    gate: Optional[GateConfig] = None,
    collect_likelihood: bool = False,
    use_fast: Optional[bool] = None,
) -> FilterHistory:
    """Run the forward filter over an IMU stream with asynchronous GNSS fixes.

    Epochs are the IMU timestamps; the sample at epoch k drives the step from
    k to k+1, so the final sample contributes only its timestamp. A fix is
    fused at the first epoch at or after its timestamp when the gap is below
    half the IMU period, and dropped with a warning otherwise.
    """
    if len(imu) < 2:
        raise ValueError("need at least two IMU samples")
    t = np.array([s.t for s in imu], dtype=float)
    if np.any(np.diff(t) <= 0.0):
        raise ValueError("IMU timestamps must be strictly increasing")
    if use_fast is None:
        use_fast = _fast is not None
    if use_fast and _fast is not None:
        return _run_filter_fast(imu, t, gnss, init, params, lever, gate, collect_likelihood)
    return _run_filter_numpy(imu, t, gnss, init, params, lever, gate, collect_likelihood)


def _fix_schedule(t: np.ndarray, gnss: Sequence[GnssFix]) -> tuple[list, int]:
    """Assign each fix to the first epoch at/after it, within half a period."""
    half_dt = 0.5 * float(t[1] - t[0])
    schedule: list = [[] for _ in range(len(t))]
    dropped = 0
    k = 0
    for fix in gnss:
        while k < len(t) and t[k] < fix.t - 1e-12:
            k += 1
        if k < len(t) and t[k] - fix.t < half_dt:
            schedule[k].append(fix)
        else:
            dropped += 1
            logger.warning("dropping GNSS fix at t=%.6f: no aligned IMU epoch", fix.t)
            if k >= len(t):
                k = len(t) - 1
    return schedule, dropped


def _run_filter_numpy(imu, t, gnss, init, params, lever, gate, collect_likelihood):
    n = len(t)
    history = _alloc_history(t)
    schedule, dropped = _fix_schedule(t, gnss)
    history.dropped_fixes = dropped
    history.trans[0] = np.eye(NDIM)

    state = ConcentratedGaussian(init.mean, 0.5 * (init.cov + init.cov.T))
    cost = 0.0
    for k in range(n):
        if k > 0:
            dt = float(t[k] - t[k - 1])
            state, omega_dt, f = ekf_predict(state, imu[k - 1], dt, params)
            history.omega_dt[k] = omega_dt
            history.trans[k] = f
        pred = state
        for fix in schedule[k]:
            if collect_likelihood:
                cost += _innovation_nll(state, fix, lever)
            state, report = ekf_update(state, fix, lever, gate)
            history.gates[k] = report
        _store(history, k, pred, state)
    history.likelihood_cost = cost
    return history


def _innovation_nll(state: ConcentratedGaussian, fix: GnssFix, lever: LeverArm) -> float:
    """Negative log of the innovation likelihood, 0.5*(log(2 pi |S|) + z'S^-1 z)."""
    z = fix.pos - ins.measurement_h(state.mean, lever)
    h_mat = ins.jacobian_H(state.mean, lever)
    xi = np.diag(fix.sigma ** 2) + h_mat @ state.cov @ h_mat.T
    sign, logdet = np.linalg.slogdet(xi)
    if sign <= 0.0:
        raise ValueError("singular innovation covariance")
    return 0.5 * (math.log(2.0 * math.pi) + logdet + nrs(z, xi))


def _run_filter_fast(imu, t, gnss, init, params, lever, gate, collect_likelihood):
    gyro = np.array([s.gyro for s in imu[:-1]], dtype=float)
    accel = np.array([s.accel for s in imu[:-1]], dtype=float)
    schedule, dropped = _fix_schedule(t, gnss)
    fix_epoch = []
    fix_pos = []
    fix_var = []
    for k, fixes in enumerate(schedule):
        for fix in fixes:
            if not np.all(fix.sigma > 0.0):
                raise ValueError("GNSS sigma must be positive")
            if not np.all(np.isfinite(fix.pos)):
                raise ValueError("non-finite GNSS position")
            fix_epoch.append(k)
            fix_pos.append(fix.pos)
            fix_var.append(fix.sigma ** 2)
    fix_epoch = np.array(fix_epoch, dtype=np.int64)
    fix_pos = np.array(fix_pos, dtype=float).reshape(-1, 3)
    fix_var = np.array(fix_var, dtype=float).reshape(-1, 3)

    mode = 0 if gate is None else (1 if gate.mode == "hard" else 2)
    kappa = math.inf if gate is None else gate.kappa
    out = _fast.run_filter(
        t,
        gyro,
        accel,
        fix_epoch,
        fix_pos,
        fix_var,
        init.mean.rot,
        init.mean.vel,
        init.mean.pos,
        init.mean.bias,
        0.5 * (init.cov + init.cov.T),
        params.sigma_g,
        params.sigma_a,
        params.Ba,
        params.Bg,
        lever.offset,
        kappa,
        mode,
        collect_likelihood,
    )
    (rot_p, vel_p, pos_p, bias_p, rot_u, vel_u, pos_u, bias_u,
     cov_p, cov_u, omega_dt, trans, zetas, gammas, innovations, cost, ok) = out
    if not ok:
        raise ValueError("non-finite state encountered in filter run")
    history = FilterHistory(
        t=t,
        rot_pred=rot_p, vel_pred=vel_p, pos_pred=pos_p, bias_pred=bias_p,
        rot_upd=rot_u, vel_upd=vel_u, pos_upd=pos_u, bias_upd=bias_u,
        cov_pred=cov_p, cov_upd=cov_u, omega_dt=omega_dt, trans=trans,
    )
    history.dropped_fixes = dropped
    history.likelihood_cost = float(cost)
    for i, k in enumerate(fix_epoch):
        history.gates[int(k)] = GateReport(
            zeta=float(zetas[i]),
            gamma=float(gammas[i]),
            accepted=bool(zetas[i] <= kappa),
            innovation=innovations[i].copy(),
        )
    return history


def rts_smooth(history) -> "SmoothedTrajectory":
    """Backward RTS pass over a filter history.

    Returns the smoothed distributions, last epoch equal to the last filtered
    state. Covariances are symmetrized and repaired to stay positive definite.
    """
    n = len(history)
    if n == 0:
        raise ValueError("empty filter history")
    if isinstance(history, FilterHistory) and _fast is not None:
        rot_s, vel_s, pos_s, bias_s, cov_s, ok, bad = _fast.rts_smooth(
            history.rot_pred, history.vel_pred, history.pos_pred, history.bias_pred,
            history.rot_upd, history.vel_upd, history.pos_upd, history.bias_upd,
            history.cov_pred, history.cov_upd, history.trans,
        )
        if not ok:
            raise ValueError(f"singular predicted covariance at epoch {bad}")
        return SmoothedTrajectory(np.asarray(history.t), rot_s, vel_s, pos_s, bias_s, cov_s)
    return _rts_smooth_numpy(history)


def _spd_repair(p: np.ndarray) -> np.ndarray:
    """Symmetrize; if definiteness was lost, clamp eigenvalues near zero."""
    p = 0.5 * (p + p.T)
    try:
        np.linalg.cholesky(p)
        return p
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(p)
        floor = 1e-15 * max(float(np.trace(p)) / NDIM, 1e-300)
        w = np.maximum(w, floor)
        return (v * w) @ v.T


def _rts_smooth_numpy(history) -> "SmoothedTrajectory":
    n = len(history)
    t = np.array([history[k].t for k in range(n)])
    out = SmoothedTrajectory(
        t=t,
        rot=np.empty((n, 3, 3)),
        vel=np.empty((n, 3)),
        pos=np.empty((n, 3)),
        bias=np.empty((n, 6)),
        cov=np.empty((n, NDIM, NDIM)),
    )
    last = history[n - 1].updated
    out.set_epoch(n - 1, last.mean, last.cov)
    cov_next = last.cov
    mean_next = last.mean
    for k in range(n - 2, -1, -1):
        nxt = history[k + 1]
        cur = history[k].updated
        try:
            gain = np.linalg.solve(nxt.predicted.cov, nxt.F @ cur.cov).T
        except np.linalg.LinAlgError as exc:
            raise ValueError(f"singular predicted covariance at epoch {k + 1}") from exc
        delta = lie.group_log(lie.compose(lie.inverse(nxt.predicted.mean), mean_next))
        mean_next = lie.compose(cur.mean, lie.group_exp(gain @ delta))
        cov_next = _spd_repair(cur.cov + gain @ (cov_next - nxt.predicted.cov) @ gain.T)
        out.set_epoch(k, mean_next, cov_next)
    return out


@dataclass
class SmoothedTrajectory:
    """Smoothed distributions as packed arrays; indexable as a CGD sequence."""

    t: np.ndarray
    rot: np.ndarray
    vel: np.ndarray
    pos: np.ndarray
    bias: np.ndarray
    cov: np.ndarray

    def __len__(self) -> int:
        return len(self.t)

    def __getitem__(self, k: int) -> ConcentratedGaussian:
        if k < 0:
            k += len(self.t)
        if not 0 <= k < len(self.t):
            raise IndexError(k)
        return ConcentratedGaussian(
            GroupElement(self.rot[k], self.vel[k], self.pos[k], self.bias[k]), self.cov[k]
        )

    def set_epoch(self, k: int, mean: GroupElement, cov: np.ndarray):
        self.rot[k] = mean.rot
        self.vel[k] = mean.vel
        self.pos[k] = mean.pos
        self.bias[k] = mean.bias
        self.cov[k] = cov


def nees(history, truth: Sequence[GroupElement]) -> np.ndarray:
    """Per-epoch normalized estimation error squared against a truth sequence."""
    n = len(history)
    if len(truth) != n:
        raise ValueError("truth sequence does not match history length")
    out = np.empty(n)
    for k in range(n):
        upd = history[k].updated
        err = lie.group_log(lie.compose(lie.inverse(upd.mean), truth[k]))
        out[k] = float(err @ np.linalg.solve(upd.cov, err))
    return out
