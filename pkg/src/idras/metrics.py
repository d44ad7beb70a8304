"""Normalized error energy between two series, plus z-scoring utilities.

Both series are z-scored with population (1/N) statistics; the score is the
sum of squared z-scored differences divided by the squared z-scored
reference energy. After z-scoring the reference energy is exactly N, so the
score reduces to the mean squared z-scored difference, which also equals
2*(1 - corr). A score of 0 means an exact positive-affine match, 4 an exact
mirror image, and values below 0.5 flag a tight tracking relationship.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

PREDICTION_SUCCESS_THRESHOLD = 0.5


@dataclass(frozen=True)
class ScoredPair:
    """Result of a normalized-error-energy comparison.

    rho is None exactly when `degenerate` is set (an input had zero
    variance); sign_flipped records whether the mirrored orientation won a
    sign-minimized comparison.
    """

    rho: float | None
    sign_flipped: bool = False
    degenerate: bool = False


def zscore(x: np.ndarray) -> tuple[np.ndarray, bool]:
    """Population z-score; returns (scored, degenerate) without dividing by 0."""
    x = np.asarray(x, dtype=float)
    mu = x.mean()
    sd = x.std()  # population (1/N)
    if sd == 0.0 or not np.isfinite(sd):
        return x - mu, True
    return (x - mu) / sd, False


def rho(x: np.ndarray, x_hat: np.ndarray) -> ScoredPair:
    """Normalized error energy between a series and its estimate."""
    x = np.asarray(x, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    if x.shape != x_hat.shape or x.ndim != 1:
        raise ValueError(f"series shapes differ: {x.shape} vs {x_hat.shape}")
    if x.size < 2:
        raise ValueError("need at least 2 samples")
    xz, bad_x = zscore(x)
    hz, bad_h = zscore(x_hat)
    if bad_x or bad_h:
        return ScoredPair(rho=None, degenerate=True)
    return ScoredPair(rho=float(np.mean((xz - hz) ** 2)))


def rho_validation(c: np.ndarray, c_star: np.ndarray) -> ScoredPair:
    """Orientation-minimized score against a ground-truth series.

    The learned combination is identifiable only up to orientation, so the
    reported value is min(rho(c, c*), rho(-c, c*)) with the winning sign
    recorded.
    """
    direct = rho(c, c_star)
    if direct.degenerate:
        return direct
    mirrored = rho(-np.asarray(c, dtype=float), c_star)
    if mirrored.rho < direct.rho:
        return ScoredPair(rho=mirrored.rho, sign_flipped=True)
    return direct
