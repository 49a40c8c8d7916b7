"""Post-processing GNSS/INS sensor fusion on the matrix Lie group SE2(3) x T(6)."""

from .lie import ConcentratedGaussian, GroupElement, OutOfChartError
from .ins import GnssFix, ImuNoiseParams, ImuSample, LeverArm
from .estimation import (
    FilterEpoch,
    FilterHistory,
    GateConfig,
    GateReport,
    default_kappa,
    ekf_predict,
    ekf_update,
    nees,
    rts_smooth,
    run_filter,
)

__all__ = [
    "ConcentratedGaussian",
    "GroupElement",
    "OutOfChartError",
    "GnssFix",
    "ImuNoiseParams",
    "ImuSample",
    "LeverArm",
    "FilterEpoch",
    "FilterHistory",
    "GateConfig",
    "GateReport",
    "default_kappa",
    "ekf_predict",
    "ekf_update",
    "nees",
    "rts_smooth",
    "run_filter",
]

__version__ = "0.1.0"
