"""The align-filter-smooth pipeline, RMSE reporting and the Monte Carlo harness."""

from __future__ import annotations

import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import alignment, dataio, estimation, frames, simulator
from .alignment import AlignmentConfig, AlignmentError
from .estimation import FilterHistory, GateConfig, SmoothedTrajectory, default_kappa
from .ins import GnssFix, ImuNoiseParams, ImuSample, LeverArm
from .simulator import SimNoiseConfig

DEG = math.pi / 180.0

CHANNELS = ("roll_deg", "pitch_deg", "heading_deg",
            "longitude_m", "latitude_m", "altitude_m")


class PipelineError(RuntimeError):
    """A pipeline stage failed; the stage name prefixes the message."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage


@dataclass
class PipelineConfig:
    """Everything a pipeline run needs beyond the sensor files themselves."""

    imu_path: Optional[str] = None
    gnss_path: Optional[str] = None
    truth_path: Optional[str] = None
    out_dir: str = "out"
    lever_arm: np.ndarray = field(default_factory=lambda: np.zeros(3))
    noise: ImuNoiseParams = field(
        default_factory=lambda: ImuNoiseParams.from_datasheet(0.09, 0.008, 3.2, 0.8)
    )
    gnss_sigma_default: tuple = (0.01, 0.01, 0.03)
    gate_mode: str = "soft"  # soft | hard | off
    gate_confidence: float = 0.999
    gate_kappa: Optional[float] = None
    align: AlignmentConfig = field(default_factory=AlignmentConfig)
    p0_diag: np.ndarray = field(
        default_factory=lambda: alignment.default_initial_covariance(
            gyro_bias_sigma=(15.0 / 3.0) * DEG / 3600.0
        )
    )
    skip_s: float = 30.0
    static_min_samples: int = 2000
    static_gyro_std_max: float = 0.02
    static_accel_std_max: float = 0.15
    static_displacement_max_m: float = 0.25
    imu_gyro_unit: str = "rad/s"
    imu_accel_unit: str = "m/s^2"
    sim_fs: float = 100.0
    sim_duration_s: float = 60.0
    sim_static_s: float = 30.0
    sim_heading0: float = 0.0
    sim_profile_kwargs: dict = field(default_factory=dict)
    sim_noise: SimNoiseConfig = field(default_factory=SimNoiseConfig)

    def gate(self) -> Optional[GateConfig]:
        if self.gate_mode == "off":
            return None
        kappa = self.gate_kappa if self.gate_kappa is not None else default_kappa(self.gate_confidence)
        return GateConfig(kappa=kappa, mode=self.gate_mode)

    def lever(self) -> LeverArm:
        return LeverArm(np.asarray(self.lever_arm, dtype=float))

    @staticmethod
    def from_file(path) -> "PipelineConfig":
        return config_from_mapping(dataio.read_config(path), base_dir=Path(path).parent)


def config_from_mapping(raw: dict, base_dir: Optional[Path] = None) -> PipelineConfig:
    """Build a config from flat key/value strings (the config-file contents)."""
    cfg = PipelineConfig()
    base = Path(base_dir) if base_dir is not None else Path(".")

    def path_of(value: str) -> str:
        p = Path(value)
        return str(p if p.is_absolute() else base / p)

    handlers = {
        "imu": lambda v: setattr(cfg, "imu_path", path_of(v)),
        "gnss": lambda v: setattr(cfg, "gnss_path", path_of(v)),
        "truth": lambda v: setattr(cfg, "truth_path", path_of(v)),
        "out": lambda v: setattr(cfg, "out_dir", path_of(v)),
        "lever_arm": lambda v: setattr(
            cfg, "lever_arm", _expect(dataio.parse_quantity(v, "m"), 3, "lever_arm")
        ),
        "gyro_noise_density": lambda v: setattr(
            cfg, "noise", replace(cfg.noise, sigma_g=float(dataio.parse_quantity(v, "deg/sqrt(h)")[0]))
        ),
        "accel_noise_density": lambda v: setattr(
            cfg, "noise", replace(cfg.noise, sigma_a=float(dataio.parse_quantity(v, "(m/s)/sqrt(h)")[0]))
        ),
        "gyro_bias_diffusion": lambda v: setattr(
            cfg, "noise", replace(cfg.noise, Bg=float(dataio.parse_quantity(v, "deg/h")[0]))
        ),
        "accel_bias_diffusion": lambda v: setattr(
            cfg, "noise", replace(cfg.noise, Ba=float(dataio.parse_quantity(v, "ug")[0]))
        ),
        "gnss_sigma": lambda v: setattr(
            cfg, "gnss_sigma_default", tuple(_expect(dataio.parse_quantity(v, "m"), 3, "gnss_sigma"))
        ),
        "gate_mode": lambda v: setattr(cfg, "gate_mode", v),
        "gate_confidence": lambda v: setattr(cfg, "gate_confidence", float(v)),
        "gate_kappa": lambda v: setattr(cfg, "gate_kappa", float(v)),
        "align_guesses": lambda v: setattr(
            cfg, "align", replace(cfg.align, guesses=tuple(_expect(dataio.parse_quantity(v, "deg"), 3, "align_guesses")))
        ),
        "align_prior_sigma": lambda v: setattr(
            cfg, "align", replace(cfg.align, prior_sigma=float(dataio.parse_quantity(v, "deg")[0]))
        ),
        "align_prior_mean": lambda v: setattr(
            cfg, "align", replace(cfg.align, prior_mean=float(dataio.parse_quantity(v, "deg")[0]))
        ),
        "align_prefix": lambda v: setattr(
            cfg, "align", replace(cfg.align, prefix_s=float(dataio.parse_quantity(v, "s")[0]))
        ),
        "p0_attitude": lambda v: _set_p0(cfg, 0, dataio.parse_quantity(v, "deg"), "p0_attitude"),
        "p0_velocity": lambda v: _set_p0(cfg, 3, dataio.parse_quantity(v, "m/s"), "p0_velocity"),
        "p0_position": lambda v: _set_p0(cfg, 6, dataio.parse_quantity(v, "m"), "p0_position"),
        "p0_accel_bias": lambda v: _set_p0(cfg, 9, dataio.parse_quantity(v, "mg"), "p0_accel_bias"),
        "p0_gyro_bias": lambda v: _set_p0(cfg, 12, dataio.parse_quantity(v, "deg/h"), "p0_gyro_bias"),
        "skip_seconds": lambda v: setattr(cfg, "skip_s", float(dataio.parse_quantity(v, "s")[0])),
        "static_min_samples": lambda v: setattr(cfg, "static_min_samples", int(v)),
        "imu_gyro_unit": lambda v: setattr(cfg, "imu_gyro_unit", v),
        "imu_accel_unit": lambda v: setattr(cfg, "imu_accel_unit", v),
        "sim_fs": lambda v: setattr(cfg, "sim_fs", float(dataio.parse_quantity(v, "hz")[0])),
        "sim_duration": lambda v: setattr(cfg, "sim_duration_s", float(dataio.parse_quantity(v, "s")[0])),
        "sim_static": lambda v: setattr(cfg, "sim_static_s", float(dataio.parse_quantity(v, "s")[0])),
        "sim_heading0": lambda v: setattr(cfg, "sim_heading0", float(dataio.parse_quantity(v, "deg")[0])),
    }
    for key, value in raw.items():
        if key not in handlers:
            raise dataio.DataError(f"unknown config key {key!r}")
        handlers[key](value)
    return cfg


def _expect(values: np.ndarray, n: int, key: str) -> np.ndarray:
    if len(values) != n:
        raise dataio.DataError(f"{key} needs {n} values, got {len(values)}")
    return values


def _set_p0(cfg: PipelineConfig, offset: int, sigmas: np.ndarray, key: str):
    sigmas = _expect(sigmas, 3, key) if len(sigmas) == 3 else np.full(3, float(sigmas[0]))
    diag = cfg.p0_diag.copy()
    diag[offset:offset + 3] = np.asarray(sigmas) ** 2
    cfg.p0_diag = diag


@dataclass
class RmseReport:
    """Per-channel RMSE of the filtered and smoothed trajectories."""

    filtered: dict
    smoothed: dict
    trials: int
    divergent: int = 0
    runtime_s: float = 0.0

    def render(self) -> str:
        lines = [f"# trials={self.trials} divergent={self.divergent}"]
        lines.append("channel,filtered,smoothed")
        for ch in CHANNELS:
            lines.append(
                f"{ch},{format(self.filtered[ch], '.12g')},{format(self.smoothed[ch], '.12g')}"
            )
        return "\n".join(lines) + "\n"


@dataclass
class DatasetResult:
    """In-memory outcome of one align-filter-smooth pass."""

    static: alignment.StaticInterval
    heading: alignment.HeadingPosterior
    history: FilterHistory
    smoothed: SmoothedTrajectory


def run_dataset(
    imu: Sequence[ImuSample],
    gnss: Sequence[GnssFix],
    cfg: PipelineConfig,
) -> DatasetResult:
    """Execute static detection, heading alignment, filtering and smoothing."""
    if not gnss:
        raise PipelineError("ingest", "no measurements: GNSS stream is empty")
    if len(imu) < 2:
        raise PipelineError("ingest", "IMU stream needs at least two samples")

    try:
        static = alignment.detect_static(
            imu,
            min_samples=cfg.static_min_samples,
            gyro_std_max=cfg.static_gyro_std_max,
            accel_std_max=cfg.static_accel_std_max,
        )
        static = alignment.refine_static_with_gnss(
            imu, static, gnss, cfg.static_displacement_max_m
        )
    except AlignmentError as exc:
        raise PipelineError("detect_static", str(exc)) from exc

    lever = cfg.lever()
    try:
        heading = alignment.heading_align(
            imu, gnss, cfg.noise, static, lever, cfg.align, cfg.p0_diag
        )
        init = alignment.init_state(static, gnss, heading.psi_star, lever, cfg.p0_diag)
    except AlignmentError as exc:
        raise PipelineError("heading_align", str(exc)) from exc

    try:
        history = estimation.run_filter(imu, gnss, init, cfg.noise, lever, cfg.gate())
    except ValueError as exc:
        raise PipelineError("filter", str(exc)) from exc

    try:
        smoothed = estimation.rts_smooth(history)
    except ValueError as exc:
        raise PipelineError("smooth", str(exc)) from exc

    return DatasetResult(static, heading, history, smoothed)


def _trajectory_table(t, rot, vel, pos, bias, cov) -> np.ndarray:
    """Geodetic/NED/Euler export table from packed ECEF trajectories."""
    lat, lon, height = frames.ecef_to_geodetic_many(pos)
    c_ne = frames.ned_to_ecef_many(lat, lon)
    c_bn = np.einsum("kji,kjl->kil", c_ne, rot)
    roll, pitch, yaw = frames.euler_from_matrix_many(c_bn)
    v_ned = np.einsum("kji,kj->ki", c_ne, vel)
    n = len(t)
    out = np.empty((n, 16 + (15 if cov is not None else 0)))
    out[:, 0] = t
    out[:, 1] = lat / DEG
    out[:, 2] = lon / DEG
    out[:, 3] = height
    out[:, 4:7] = v_ned
    out[:, 7] = roll / DEG
    out[:, 8] = pitch / DEG
    out[:, 9] = yaw / DEG
    out[:, 10:16] = bias
    if cov is not None:
        out[:, 16:31] = np.diagonal(cov, axis1=1, axis2=2)
    return out


def filtered_table(history: FilterHistory) -> np.ndarray:
    return _trajectory_table(
        history.t, history.rot_upd, history.vel_upd, history.pos_upd,
        history.bias_upd, history.cov_upd,
    )


def smoothed_table(smoothed: SmoothedTrajectory) -> np.ndarray:
    return _trajectory_table(
        smoothed.t, smoothed.rot, smoothed.vel, smoothed.pos, smoothed.bias,
        smoothed.cov,
    )


def truth_table(ref: simulator.ReferenceTrajectory, bias_acc, bias_gyro) -> np.ndarray:
    bias = np.hstack([bias_acc, bias_gyro])
    return _trajectory_table(ref.t, ref.rot, ref.vel, ref.pos, bias, None)


def rmse(est_table: np.ndarray, truth_table_: np.ndarray, skip_s: float = 0.0) -> dict:
    """Per-channel RMSE between trajectory tables on an aligned time grid.

    Attitude channels are wrapped angle differences in degrees; position
    channels are local north/east/down errors in meters evaluated at the
    truth's geodetic position.
    """
    if est_table.shape[0] != truth_table_.shape[0]:
        raise ValueError("estimate and truth tables are not aligned")
    if np.max(np.abs(est_table[:, 0] - truth_table_[:, 0])) > 1e-9:
        raise ValueError("estimate and truth timestamps differ")
    keep = est_table[:, 0] >= skip_s
    est = est_table[keep]
    truth = truth_table_[keep]
    sq = _squared_errors(est, truth)
    return {ch: float(np.sqrt(np.mean(sq[ch]))) for ch in CHANNELS}


def _squared_errors(est: np.ndarray, truth: np.ndarray) -> dict:
    out = {}
    for idx, ch in ((7, "roll_deg"), (8, "pitch_deg"), (9, "heading_deg")):
        diff = frames.wrap_angle((est[:, idx] - truth[:, idx]) * DEG) / DEG
        out[ch] = diff ** 2
    lat_t = truth[:, 1] * DEG
    lon_t = truth[:, 2] * DEG
    pos_est = _geodetic_to_ecef_many(est[:, 1] * DEG, est[:, 2] * DEG, est[:, 3])
    pos_true = _geodetic_to_ecef_many(lat_t, lon_t, truth[:, 3])
    c_ne = frames.ned_to_ecef_many(lat_t, lon_t)
    err_ned = np.einsum("kji,kj->ki", c_ne, pos_est - pos_true)
    out["latitude_m"] = err_ned[:, 0] ** 2
    out["longitude_m"] = err_ned[:, 1] ** 2
    out["altitude_m"] = err_ned[:, 2] ** 2
    return out


def _geodetic_to_ecef_many(lat, lon, height):
    sin_lat = np.sin(lat)
    cos_lat = np.cos(lat)
    n = frames.WGS84_A / np.sqrt(1.0 - frames.WGS84_E2 * sin_lat ** 2)
    return np.stack(
        [
            (n + height) * cos_lat * np.cos(lon),
            (n + height) * cos_lat * np.sin(lon),
            (n * (1.0 - frames.WGS84_E2) + height) * sin_lat,
        ],
        axis=1,
    )


def run_pipeline(cfg: PipelineConfig) -> tuple[list[str], Optional[RmseReport]]:
    """File-level pipeline: parse inputs, run, export, optionally report.

    Returns the list of written files. On any stage failure the partial
    outputs are removed and a PipelineError naming the stage propagates.
    """
    t_start = time.perf_counter()
    try:
        if cfg.imu_path is None or cfg.gnss_path is None:
            raise PipelineError("ingest", "imu and gnss paths are required")
        imu = dataio.parse_imu_csv(cfg.imu_path, cfg.imu_gyro_unit, cfg.imu_accel_unit)
        gnss = dataio.parse_gnss_csv(cfg.gnss_path, cfg.gnss_sigma_default)
    except (OSError, dataio.DataError) as exc:
        raise PipelineError("ingest", str(exc)) from exc

    result = run_dataset(imu, gnss, cfg)

    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written: list[str] = []

    def _cleanup():
        for path in written:
            try:
                os.remove(path)
            except OSError:
                pass

    try:
        filtered_path = out_dir / "filtered.csv"
        dataio.write_trajectory_csv(filtered_path, filtered_table(result.history), True)
        written.append(str(filtered_path))
        smoothed_path = out_dir / "smoothed.csv"
        dataio.write_trajectory_csv(smoothed_path, smoothed_table(result.smoothed), True)
        written.append(str(smoothed_path))
    except (OSError, ValueError) as exc:
        _cleanup()
        raise PipelineError("export", str(exc)) from exc

    report = None
    if cfg.truth_path is not None:
        try:
            truth = dataio.parse_trajectory_csv(cfg.truth_path)
            est_f = filtered_table(result.history)
            est_s = smoothed_table(result.smoothed)
            truth_aligned = _align_truth(truth, est_f[:, 0])
            report = RmseReport(
                filtered=rmse(est_f, truth_aligned, cfg.skip_s),
                smoothed=rmse(est_s, truth_aligned, cfg.skip_s),
                trials=1,
                runtime_s=time.perf_counter() - t_start,
            )
            report_path = out_dir / "rmse_report.csv"
            report_path.write_text(report.render(), encoding="utf-8")
            written.append(str(report_path))
        except (OSError, ValueError, dataio.DataError) as exc:
            _cleanup()
            raise PipelineError("report", str(exc)) from exc
    return written, report


def _align_truth(truth: np.ndarray, t_est: np.ndarray) -> np.ndarray:
    """Select the truth rows matching the estimate timestamps."""
    idx = np.searchsorted(truth[:, 0], t_est)
    idx = np.clip(idx, 0, len(truth) - 1)
    if np.max(np.abs(truth[idx, 0] - t_est)) > 1e-6:
        raise ValueError("truth timestamps do not cover the estimate epochs")
    return truth[idx]


def _montecarlo_trial(args) -> tuple[int, Optional[dict], Optional[dict], Optional[str]]:
    trial, profile, cfg, seed = args
    sim_cfg = replace(cfg.sim_noise, seed=seed + trial)
    data = simulator.simulate_dataset(
        profile,
        sim_cfg,
        fs=cfg.sim_fs,
        duration_s=cfg.sim_duration_s,
        static_s=cfg.sim_static_s,
        heading0=cfg.sim_heading0,
        lever=cfg.lever(),
        **cfg.sim_profile_kwargs,
    )
    try:
        result = run_dataset(data.imu, data.gnss, cfg)
    except PipelineError as exc:
        return trial, None, None, str(exc)
    truth = truth_table(data.ref, data.bias_acc, data.bias_gyro)
    keep = truth[:, 0] >= cfg.skip_s
    est_f = filtered_table(result.history)
    est_s = smoothed_table(result.smoothed)
    sq_f = _squared_errors(est_f[keep], truth[keep])
    sq_s = _squared_errors(est_s[keep], truth[keep])
    sums_f = {ch: (float(np.sum(v)), len(v)) for ch, v in sq_f.items()}
    sums_s = {ch: (float(np.sum(v)), len(v)) for ch, v in sq_s.items()}
    return trial, sums_f, sums_s, None


def _worker_count(trials: int) -> int:
    env = os.environ.get("LIE_NAV_THREADS")
    cap = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(trials, cap, os.cpu_count() or 1))


def monte_carlo(
    cfg: PipelineConfig,
    profile: str,
    trials: int,
    seed: int = 0,
) -> RmseReport:
    """Simulate-and-run batches with per-trial seeds; RMSE over all epochs.

    Trials that diverge are excluded and counted; more than 5% divergence
    fails the batch. Identical seeds reproduce identical reports.
    """
    if trials < 1:
        raise ValueError("need at least one trial")
    t_start = time.perf_counter()
    jobs = [(i, profile, cfg, seed) for i in range(trials)]
    workers = _worker_count(trials)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_montecarlo_trial, jobs))
    else:
        results = [_montecarlo_trial(job) for job in jobs]

    acc_f = {ch: [0.0, 0] for ch in CHANNELS}
    acc_s = {ch: [0.0, 0] for ch in CHANNELS}
    divergent = 0
    for trial, sums_f, sums_s, err in results:
        if err is not None:
            divergent += 1
            continue
        for ch in CHANNELS:
            acc_f[ch][0] += sums_f[ch][0]
            acc_f[ch][1] += sums_f[ch][1]
            acc_s[ch][0] += sums_s[ch][0]
            acc_s[ch][1] += sums_s[ch][1]
    if divergent > 0.05 * trials:
        raise RuntimeError(
            f"{divergent} of {trials} Monte Carlo trials diverged (limit 5%)"
        )
    filtered = {ch: math.sqrt(acc_f[ch][0] / acc_f[ch][1]) for ch in CHANNELS}
    smoothed = {ch: math.sqrt(acc_s[ch][0] / acc_s[ch][1]) for ch in CHANNELS}
    return RmseReport(
        filtered=filtered,
        smoothed=smoothed,
        trials=trials - divergent,
        divergent=divergent,
        runtime_s=time.perf_counter() - t_start,
    )
