"""Markov neighborhood regression: confidence intervals and p-values for
high-dimensional linear, logistic and Cox models via low-dimensional
subset regressions."""

__version__ = "0.1.0"

from .datagen import CovSpec, Dataset, ModelSpec, simulate, standardize  # noqa: E402
from .mnr import MnrConfig, MnrReport, joint_infer, run_causal, run_mnr  # noqa: E402

__all__ = ["CovSpec", "Dataset", "ModelSpec", "simulate", "standardize",
           "MnrConfig", "MnrReport", "joint_infer", "run_causal", "run_mnr"]
