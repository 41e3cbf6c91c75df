"""Nonlinear unknown input and state estimation (NUISE) with a mode bank for
actuator and sensor anomaly detection on mobile robots."""
from .bank import (
    AnomalyDecision,
    BankStepResult,
    ModeBank,
    bank_step,
    test_actuator_anomaly,
    test_sensor_anomaly,
    update_posteriors,
)
from .estimator import (
    GainVariant,
    ModeModel,
    NuiseStepOutput,
    StateEstimate,
    StepFailure,
    nuise_step,
)
from .numerics import (
    chi_square_quantile,
    gaussian_likelihood,
    pdet_psd,
    pinv_psd,
    wrap_angle,
)
from .robots import KheperaParams, NoiseConfig, TamiyaParams, make_mode_set

__all__ = [
    "AnomalyDecision",
    "BankStepResult",
    "ModeBank",
    "bank_step",
    "test_actuator_anomaly",
    "test_sensor_anomaly",
    "update_posteriors",
    "GainVariant",
    "ModeModel",
    "NuiseStepOutput",
    "StateEstimate",
    "StepFailure",
    "nuise_step",
    "chi_square_quantile",
    "gaussian_likelihood",
    "pdet_psd",
    "pinv_psd",
    "wrap_angle",
    "KheperaParams",
    "NoiseConfig",
    "TamiyaParams",
    "make_mode_set",
]
