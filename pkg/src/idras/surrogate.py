"""Shuffle player: time-randomized draws, density-ratio estimation, and
constrained resampling.

Naive surrogates replace the observation at step k with one drawn at a
uniformly random time. The resampling function zeta reweights those draws
on the 1-D axis of the surrogate filtering error so that, at the optimum,
the surrogate error distribution matches the true one; it is estimated as
a clipped ratio of smoothed histograms of the two error series.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import model as model_mod
from .model import ModelConfig

DRAW_MODES = ("whole_vector", "per_component")


@dataclass(frozen=True)
class SurrogatePool:
    """Empirical time-marginal of one system's observations."""

    Z: np.ndarray                    # (N, m)
    draw_mode: str = "whole_vector"

    def __post_init__(self):
        Z = np.asarray(self.Z, dtype=float)
        if Z.ndim != 2 or Z.shape[0] < 1:
            raise ValueError("pool must be a non-empty (N, m) array")
        if self.draw_mode not in DRAW_MODES:
            raise ValueError(f"draw_mode must be one of {DRAW_MODES}")
        object.__setattr__(self, "Z", Z)

    @property
    def size(self) -> int:
        return self.Z.shape[0]


def naive_shuffle(pool: SurrogatePool, k: int, rng: np.random.Generator) -> np.ndarray:
    """One time-randomized draw for target step k.

    whole_vector: the complete observation at a random time; per_component:
    each component independently from its own random time.
    """
    n, m = pool.Z.shape
    if not 0 <= k:
        raise ValueError("k must be a non-negative time index")
    if pool.draw_mode == "whole_vector":
        return pool.Z[int(rng.integers(n))].copy()
    idx = rng.integers(n, size=m)
    return pool.Z[idx, np.arange(m)].copy()


def naive_shuffle_indices(pool: SurrogatePool, shape, rng: np.random.Generator) -> np.ndarray:
    """Vectorized index draws; whole_vector mode only (one index per draw)."""
    if pool.draw_mode != "whole_vector":
        raise ValueError("index draws are defined for whole_vector mode")
    return rng.integers(pool.size, size=shape)


# ---------------------------------------------------------------------------
# Density-ratio resampling function on the error axis
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ResampleFn:
    """Piecewise-constant ratio over the surrogate-error axis.

    Evaluation outside the binned range returns the edge bin's ratio, so the
    function is total. `degenerate` marks an identity fallback built from
    variance-free inputs.
    """

    bin_edges: np.ndarray     # (n_bins + 1,), strictly increasing
    ratios: np.ndarray        # (n_bins,), in [0, clip_max]
    clip_max: float = 20.0
    eps: float = 1.0
    degenerate: bool = False

    def __post_init__(self):
        edges = np.asarray(self.bin_edges, dtype=float)
        ratios = np.asarray(self.ratios, dtype=float)
        if edges.ndim != 1 or edges.size != ratios.size + 1:
            raise ValueError("need n_bins+1 edges for n_bins ratios")
        if np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must strictly increase")
        if np.any(ratios < 0) or np.any(ratios > self.clip_max):
            raise ValueError("ratios must lie in [0, clip_max]")
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "ratios", ratios)

    def ratio(self, values) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        idx = np.searchsorted(self.bin_edges, values, side="right") - 1
        idx = np.clip(idx, 0, self.ratios.size - 1)
        return self.ratios[idx]

    def dump_csv(self, path) -> None:
        """(bin_left, bin_right, ratio) rows for run inspection."""
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            fh.write("bin_left,bin_right,ratio\n")
            for i, r in enumerate(self.ratios):
                fh.write(f"{self.bin_edges[i]:.17g},{self.bin_edges[i + 1]:.17g},"
                         f"{r:.17g}\n")


def identity_resample_fn(clip_max: float = 20.0, eps: float = 1.0,
                         degenerate: bool = False) -> ResampleFn:
    return ResampleFn(bin_edges=np.array([-1.0, 1.0]), ratios=np.array([1.0]),
                      clip_max=clip_max, eps=eps, degenerate=degenerate)


def estimate_zeta(e_series, e_star_series, n_bins: int = 50,
                  clip_max: float = 20.0, eps: float = 1.0) -> ResampleFn:
    """Histogram density ratio of the true errors over the naive-surrogate
    errors, on shared bins spanning their union range.

    Counts are Laplace-smoothed with eps pseudo-counts and normalized per
    series before the ratio, so series of different lengths compare fairly;
    the ratio is clipped to [0, clip_max].
    """
    e = np.asarray(e_series, dtype=float).ravel()
    es = np.asarray(e_star_series, dtype=float).ravel()
    if e.size == 0 or es.size == 0:
        raise ValueError("both error series must be non-empty")
    lo = min(e.min(), es.min())
    hi = max(e.max(), es.max())
    if not np.isfinite(lo) or not np.isfinite(hi):
        raise ValueError("error series contain non-finite values")
    if hi <= lo:
        # both series constant at one value: nothing to reweight
        return identity_resample_fn(clip_max, eps, degenerate=True)
    edges = np.linspace(lo, hi, n_bins + 1)
    h_e, _ = np.histogram(e, bins=edges)
    h_s, _ = np.histogram(es, bins=edges)
    p_e = (h_e + eps) / (e.size + n_bins * eps)
    p_s = (h_s + eps) / (es.size + n_bins * eps)
    ratios = np.clip(p_e / p_s, 0.0, clip_max)
    return ResampleFn(bin_edges=edges, ratios=ratios, clip_max=clip_max, eps=eps)


# ---------------------------------------------------------------------------
# Constrained draw
# ---------------------------------------------------------------------------

def weighted_pick(weights: np.ndarray, rng: np.random.Generator) -> tuple[int, bool]:
    """Index sampled proportionally to weights; uniform fallback when the
    weights all vanish (returns starved=True)."""
    total = float(weights.sum())
    if total <= 0.0:
        return int(rng.integers(weights.size)), True
    u = rng.random() * total
    return int(np.searchsorted(np.cumsum(weights), u, side="right")
               .clip(0, weights.size - 1)), False


def resample(pool: SurrogatePool, history_obs: np.ndarray, cfg: ModelConfig,
             omega: np.ndarray, zeta: ResampleFn, rng: np.random.Generator,
             m_candidates: int = 64, iras: bool = False
             ) -> tuple[np.ndarray, bool]:
    """One constrained surrogate draw for the window ending at history_obs.

    Draws min(pool, m_candidates) naive candidates, weights each by
    zeta(surrogate error), and samples one; a zero-weight candidate set
    falls back to a uniform pick and reports starvation.
    """
    m = min(pool.size, m_candidates)
    cands = np.stack([naive_shuffle(pool, 0, rng) for _ in range(m)])
    # the prediction is shared by every candidate: error = c(candidate) - c_hat
    if iras:
        c_hat = 0.0
    else:
        c_hist = model_mod.combine_series(cfg, omega, np.asarray(history_obs, dtype=float))
        c_hat = model_mod.predict(model_mod.filter_block(cfg, omega), c_hist)
    c_cands = model_mod.combine_series(cfg, omega, cands)
    weights = zeta.ratio(c_cands - c_hat)
    pick, starved = weighted_pick(weights, rng)
    return cands[pick], starved


# ---------------------------------------------------------------------------
# Distribution distances (diagnostics)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class DistanceReport:
    statistic: float
    kind: str  # "w1" or "ks"


def _wasserstein1(a: np.ndarray, b: np.ndarray) -> float:
    """Mean absolute difference of equal-quantile sorted samples; the shorter
    sample is read at the longer one's midpoint quantiles."""
    a = np.sort(a)
    b = np.sort(b)
    if a.size == b.size:
        return float(np.mean(np.abs(a - b)))
    longer, shorter = (a, b) if a.size > b.size else (b, a)
    q = (np.arange(longer.size) + 0.5) / longer.size
    resampled = np.quantile(shorter, q)
    return float(np.mean(np.abs(longer - resampled)))


def _ks_statistic(a: np.ndarray, b: np.ndarray) -> float:
    a = np.sort(a)
    b = np.sort(b)
    grid = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, grid, side="right") / a.size
    cdf_b = np.searchsorted(b, grid, side="right") / b.size
    return float(np.max(np.abs(cdf_a - cdf_b)))


def distribution_distance(a, b, kind: str = "w1") -> DistanceReport:
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("distance of an empty sample is undefined")
    if kind == "w1":
        return DistanceReport(_wasserstein1(a, b), "w1")
    if kind == "ks":
        return DistanceReport(_ks_statistic(a, b), "ks")
    raise ValueError(f"unknown distance kind {kind!r}; use 'w1' or 'ks'")
