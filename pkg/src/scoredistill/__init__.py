"""Score-distillation guidance estimators on analytic Gaussian-mixture targets."""

__version__ = "0.1.0"
