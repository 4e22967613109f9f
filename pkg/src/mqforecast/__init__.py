"""Multi-horizon quantile forecasting with attention decoders.

Seq2seq forecaster with event-indicator position encodings, a dilated
convolutional encoder, horizon-specific decoder-encoder attention and
feedback-aware decoder self-attention, plus martingale-based diagnostics
for excess forecast volatility.
"""

__version__ = "0.1.0"

from .data import (
    DataError,
    ForecastCube,
    SeriesDataset,
    SyntheticSpec,
    generate_synthetic,
    load_dataset,
    normalized_quantile_loss,
    save_dataset,
    sliced_metrics,
)
from .diagnostics import (
    DiagnosticTrajectory,
    VolatilityReport,
    aggregate_volatility,
    build_trajectories,
    coverage_process,
    diagnose,
    martingale_fixture,
)
from .gamma import GammaParams, fit_gamma_from_quantiles, gamma_cdf, gamma_ppf
from .model import ModelConfig, MQForecaster
from .training import (
    Scaler,
    TrainConfig,
    TrainReport,
    forecast,
    forecast_naive,
    load_model,
    save_model,
    train,
)

__all__ = [
    "DataError",
    "DiagnosticTrajectory",
    "ForecastCube",
    "GammaParams",
    "ModelConfig",
    "MQForecaster",
    "Scaler",
    "SeriesDataset",
    "SyntheticSpec",
    "TrainConfig",
    "TrainReport",
    "VolatilityReport",
    "aggregate_volatility",
    "build_trajectories",
    "coverage_process",
    "diagnose",
    "fit_gamma_from_quantiles",
    "forecast",
    "forecast_naive",
    "gamma_cdf",
    "gamma_ppf",
    "generate_synthetic",
    "load_dataset",
    "load_model",
    "martingale_fixture",
    "normalized_quantile_loss",
    "save_dataset",
    "save_model",
    "sliced_metrics",
    "train",
]
