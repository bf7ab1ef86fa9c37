# SPDX-License-Identifier: Apache-2.0
"""Sparse mixture-of-experts time-series forecasting."""

from ._core import (
    ConfigError,
    FormatError,
    IoError,
    Model,
    NumericalError,
    aggregate_geomean,
    cluster_gate,
    crps,
    generate_synthetic,
    linear_gate,
    load_balance_loss,
    mase,
    mixture_log_prob,
    patchify,
    seasonal_naive,
    train,
)

__all__ = [
    "ConfigError",
    "FormatError",
    "IoError",
    "Model",
    "NumericalError",
    "aggregate_geomean",
    "cluster_gate",
    "crps",
    "generate_synthetic",
    "linear_gate",
    "load_balance_loss",
    "mase",
    "mixture_log_prob",
    "patchify",
    "seasonal_naive",
    "train",
]
