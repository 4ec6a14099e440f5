"""projda: particle and Kalman filtering with observations projected onto a
tracked unstable subspace, plus the twin-experiment harness to evaluate
them."""

from . import diagnostics, filters, harness, kernels, models, projection

__all__ = ["models", "projection", "filters", "diagnostics", "harness", "kernels"]
__version__ = "0.1.0"
