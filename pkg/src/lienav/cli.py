"""Command-line entry point.

Subcommands: simulate, align, filter, smooth, run, montecarlo. All numeric
output files carry 12 significant digits; exit code 0 means every stage
succeeded.
"""

from __future__ import annotations

import argparse
import math
import sys
from dataclasses import replace
from pathlib import Path

from . import alignment, dataio, pipeline, simulator
from .pipeline import PipelineConfig, PipelineError

DEG = math.pi / 180.0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lienav",
        description="Post-processing GNSS/INS fusion on SE2(3) x T(6)",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="flat key=value config file")
        p.add_argument("--imu", help="IMU CSV path")
        p.add_argument("--gnss", help="GNSS CSV path")
        p.add_argument("--truth", help="truth CSV path for RMSE reporting")
        p.add_argument("--out", help="output directory")
        p.add_argument("--gate", choices=("hard", "soft", "off"), help="gating mode")
        p.add_argument("--kappa", type=float, help="chi-square gate threshold")
        p.add_argument("--skip-seconds", type=float, dest="skip_seconds",
                       help="exclude this initial span from RMSE")

    for name, descr in (
        ("align", "static detection, leveling and heading alignment only"),
        ("filter", "alignment plus forward filtering"),
        ("smooth", "alignment, filtering and RTS smoothing"),
        ("run", "full pipeline with RMSE report when truth is given"),
    ):
        p = sub.add_parser(name, help=descr)
        add_common(p)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    add_common(p)
    p.add_argument("--profile", choices=("helicoidal", "rectangular", "circular"),
                   default="circular")
    p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("montecarlo", help="Monte Carlo RMSE evaluation")
    add_common(p)
    p.add_argument("--profile", choices=("helicoidal", "rectangular", "circular"),
                   default="circular")
    p.add_argument("--trials", type=int, default=25)
    p.add_argument("--seed", type=int, default=0)
    return parser


def _config_from_args(args) -> PipelineConfig:
    cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
    if args.imu:
        cfg.imu_path = args.imu
    if args.gnss:
        cfg.gnss_path = args.gnss
    if args.truth:
        cfg.truth_path = args.truth
    if args.out:
        cfg.out_dir = args.out
    if args.gate:
        cfg.gate_mode = args.gate
    if args.kappa is not None:
        cfg.gate_kappa = args.kappa
    if args.skip_seconds is not None:
        cfg.skip_s = args.skip_seconds
    return cfg


def _cmd_simulate(cfg: PipelineConfig, args) -> int:
    sim_cfg = replace(cfg.sim_noise, seed=args.seed)
    data = simulator.simulate_dataset(
        args.profile,
        sim_cfg,
        fs=cfg.sim_fs,
        duration_s=cfg.sim_duration_s,
        static_s=cfg.sim_static_s,
        heading0=cfg.sim_heading0,
        lever=cfg.lever(),
        **cfg.sim_profile_kwargs,
    )
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_imu_csv(out / "imu.csv", data.imu)
    dataio.write_gnss_csv(out / "gnss.csv", data.gnss)
    truth = pipeline.truth_table(data.ref, data.bias_acc, data.bias_gyro)
    dataio.write_trajectory_csv(out / "truth.csv", truth, False)
    print(f"wrote {out / 'imu.csv'}, {out / 'gnss.csv'}, {out / 'truth.csv'}")
    return 0


def _load_inputs(cfg: PipelineConfig):
    if cfg.imu_path is None or cfg.gnss_path is None:
        raise PipelineError("ingest", "imu and gnss paths are required")
    try:
        imu = dataio.parse_imu_csv(cfg.imu_path, cfg.imu_gyro_unit, cfg.imu_accel_unit)
        gnss = dataio.parse_gnss_csv(cfg.gnss_path, cfg.gnss_sigma_default)
    except (OSError, dataio.DataError) as exc:
        raise PipelineError("ingest", str(exc)) from exc
    return imu, gnss


def _cmd_align(cfg: PipelineConfig, args) -> int:
    imu, gnss = _load_inputs(cfg)
    try:
        static = alignment.detect_static(imu, min_samples=cfg.static_min_samples,
                                         gyro_std_max=cfg.static_gyro_std_max,
                                         accel_std_max=cfg.static_accel_std_max)
        static = alignment.refine_static_with_gnss(imu, static, gnss,
                                                   cfg.static_displacement_max_m)
        pitch, roll = alignment.leveling(static.mean_accel)
        heading = alignment.heading_align(imu, gnss, cfg.noise, static,
                                          cfg.lever(), cfg.align, cfg.p0_diag)
    except alignment.AlignmentError as exc:
        raise PipelineError("heading_align", str(exc)) from exc
    print(f"static interval: [{static.t_start:.3f}, {static.t_end:.3f}] s "
          f"({static.sample_count} samples)")
    print(f"leveling: roll {roll / DEG:+.4f} deg, pitch {pitch / DEG:+.4f} deg")
    print(f"heading:  {heading.psi_star / DEG:+.4f} deg "
          f"(sigma {heading.sigma_psi_star / DEG:.4f} deg, "
          f"curvature {heading.curvature:.6g})")
    return 0


def _cmd_filter(cfg: PipelineConfig, args, smooth: bool) -> int:
    imu, gnss = _load_inputs(cfg)
    result = pipeline.run_dataset(imu, gnss, cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    dataio.write_trajectory_csv(out / "filtered.csv",
                                pipeline.filtered_table(result.history), True)
    written = [out / "filtered.csv"]
    if smooth:
        dataio.write_trajectory_csv(out / "smoothed.csv",
                                    pipeline.smoothed_table(result.smoothed), True)
        written.append(out / "smoothed.csv")
    print("wrote " + ", ".join(str(p) for p in written))
    return 0


def _cmd_run(cfg: PipelineConfig, args) -> int:
    written, report = pipeline.run_pipeline(cfg)
    print("wrote " + ", ".join(written))
    if report is not None:
        print(report.render(), end="")
        print(f"# runtime {report.runtime_s:.2f} s", file=sys.stderr)
    return 0


def _cmd_montecarlo(cfg: PipelineConfig, args) -> int:
    report = pipeline.monte_carlo(cfg, args.profile, args.trials, args.seed)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "rmse_report.csv"
    path.write_text(report.render(), encoding="utf-8")
    print(report.render(), end="")
    print(f"# runtime {report.runtime_s:.2f} s over {args.trials} trials",
          file=sys.stderr)
    print(f"wrote {path}")
    return 0


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = _config_from_args(args)
        if args.command == "simulate":
            return _cmd_simulate(cfg, args)
        if args.command == "align":
            return _cmd_align(cfg, args)
        if args.command == "filter":
            return _cmd_filter(cfg, args, smooth=False)
        if args.command == "smooth":
            return _cmd_filter(cfg, args, smooth=True)
        if args.command == "run":
            return _cmd_run(cfg, args)
        if args.command == "montecarlo":
            return _cmd_montecarlo(cfg, args)
        raise AssertionError(args.command)
    except (PipelineError, dataio.DataError, RuntimeError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
