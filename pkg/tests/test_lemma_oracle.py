"""Exact-resampling oracle on a 2-state Markov toy.

The observable is a binary Markov chain and the error map is a fixed linear
function of the last T+1 = 3 values, chosen so every (z_{k-2}, z_{k-1}, z_k)
window maps to a distinct error value. The optimal resampling ratio can then
be computed exactly from sequence probabilities:

    zeta(e(a,b,c)) = P(a,b,c) / (P(a,b) * pi(c)) = Q[b,c] / pi(c)

Resampling naive draws through this ratio must reproduce the true error
distribution, with the empirical KS gap shrinking as the series grows.
"""

import time

import numpy as np

from idras.surrogate import ResampleFn, distribution_distance, estimate_zeta

Q = np.array([[0.7, 0.3],
              [0.2, 0.8]])
PI = np.array([0.4, 0.6])  # stationary distribution of Q
W_HIST = np.array([0.5, 0.25])  # e_k = z_k - 0.5 z_{k-1} - 0.25 z_{k-2}


def error_value(z2, z1, z0):
    """e for window (z_{k-2}=z2, z_{k-1}=z1, z_k=z0)."""
    return z0 - 0.5 * z1 - 0.25 * z2


def simulate_chain(n, seed):
    rng = np.random.default_rng(seed)
    z = np.empty(n, dtype=np.int64)
    z[0] = rng.random() < PI[1]
    u = rng.random(n)
    for k in range(1, n):
        z[k] = u[k] < Q[z[k - 1], 1]
    return z


def brute_force_zeta() -> dict[float, float]:
    """Exact ratio per error value from enumerated sequence probabilities."""
    table = {}
    for a in (0, 1):
        for b in (0, 1):
            for c in (0, 1):
                e = error_value(a, b, c)
                p_num = PI[a] * Q[a, b] * Q[b, c]
                p_den = PI[a] * Q[a, b] * PI[c]
                assert e not in table
                table[e] = p_num / p_den  # = Q[b, c] / PI[c]
    return table


def zeta_as_resample_fn(table) -> ResampleFn:
    values = np.array(sorted(table))
    mids = (values[:-1] + values[1:]) / 2.0
    edges = np.concatenate([[values[0] - 0.1], mids, [values[-1] + 0.1]])
    ratios = np.array([table[v] for v in values])
    return ResampleFn(bin_edges=edges, ratios=ratios, clip_max=20.0)


def true_and_naive_errors(z):
    e = z[2:] - 0.5 * z[1:-1] - 0.25 * z[:-2]
    return e.astype(float)


def resample_errors(z, zeta: ResampleFn, m_candidates, seed):
    """Vectorized constrained draw: per window, m candidates from the pool,
    one picked with probability proportional to zeta(candidate error)."""
    rng = np.random.default_rng(seed)
    n = z.size
    rows = n - 2
    cand_idx = rng.integers(n, size=(rows, m_candidates))
    cand = z[cand_idx].astype(float)
    hist_part = 0.5 * z[1:-1] + 0.25 * z[:-2]
    e_cand = cand - hist_part[:, None].astype(float)
    w = zeta.ratio(e_cand)
    totals = w.sum(axis=1, keepdims=True)
    u = rng.random((rows, 1)) * totals
    pick = (np.cumsum(w, axis=1) > u).argmax(axis=1)
    return e_cand[np.arange(rows), pick]


def test_exact_zeta_reproduces_error_distribution_and_improves_with_n():
    t0 = time.time()
    zeta = zeta_as_resample_fn(brute_force_zeta())
    ks_by_n = {}
    for n, seed in ((10**3, 31), (10**4, 32), (10**5, 33)):
        z = simulate_chain(n, seed)
        e = true_and_naive_errors(z)
        e_tilde = resample_errors(z, zeta, m_candidates=128, seed=seed + 100)
        ks_by_n[n] = distribution_distance(e, e_tilde, kind="ks").statistic
    assert ks_by_n[10**4] < 0.05
    assert ks_by_n[10**3] > ks_by_n[10**4] > ks_by_n[10**5]
    assert time.time() - t0 < 30.0


def test_naive_resampling_does_not_match():
    # sanity contrast: without zeta the surrogate distribution differs by a
    # visible margin at large N
    n = 10**4
    z = simulate_chain(n, 34)
    e = true_and_naive_errors(z)
    flat = zeta_as_resample_fn({v: 1.0 for v in brute_force_zeta()})
    e_naive = resample_errors(z, flat, m_candidates=128, seed=35)
    assert distribution_distance(e, e_naive, kind="ks").statistic > 0.05


def test_estimated_zeta_converges_to_brute_force():
    table = brute_force_zeta()
    values = np.array(sorted(table))
    errors = {}
    for n, seed in ((10**4, 36), (10**5, 37)):
        z = simulate_chain(n, seed)
        e = true_and_naive_errors(z)
        rng = np.random.default_rng(seed + 1)
        naive_draw = z[rng.integers(z.size, size=e.size)].astype(float)
        e_star = naive_draw - (0.5 * z[1:-1] + 0.25 * z[:-2]).astype(float)
        est = estimate_zeta(e, e_star, n_bins=56, clip_max=20.0, eps=1.0)
        rel = [abs(est.ratio(v) - table[v]) / table[v] for v in values]
        errors[n] = float(np.max(rel))
    assert errors[10**5] < 0.05
    assert errors[10**5] < errors[10**4]
