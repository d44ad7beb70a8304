"""Data-driven discovery of regulated observable combinations.

The library searches multivariate time series for a scalar combination of
the observed channels that tightly tracks a learned dynamic reference,
using a two-player scheme: a differentiable combination/filter model that
minimizes the coefficient of regulation (CR), and an adversarial shuffle
player that resamples time-randomized surrogates through a density-ratio
function estimated on the 1-D prediction-error axis.
"""

__version__ = "0.1.0"

from . import diffnet, metrics, model, simulators, surrogate, trainer  # noqa: F401
