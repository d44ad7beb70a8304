"""Hand-set parameter vectors used as oracles in model/trainer tests.

A Leaky-ReLU pair passes a signal through a hidden layer exactly:
l(x) - l(-x) = (1 + slope) * x for every real x. Stacking pairs lets us
build an MLP that computes an arbitrary linear map exactly, which gives
closed-form references for the filter and combination networks.
"""

import numpy as np

from idras.diffnet import MlpSpec, flat_index, param_count


def linear_mlp_params(spec: MlpSpec, out_map, out_bias=None) -> np.ndarray:
    """Parameters making the network compute y = out_map @ x (+ out_bias)
    before its head activation.

    Layer 0 forms the requested combinations s_j = (out_map @ x)_j as pairs
    (l(s_j), l(-s_j)); later layers rebuild the pairs; the head recombines
    them. Requires every hidden width >= 2*output_dim.
    """
    out_map = np.atleast_2d(np.asarray(out_map, dtype=float))
    n_out, n_in = out_map.shape
    assert n_in == spec.input_dim and n_out == spec.output_dim
    assert all(h >= 2 * n_out for h in spec.hidden_dims)
    a = spec.leaky_slope
    params = np.zeros(param_count(spec))

    for j in range(n_out):
        for i in range(n_in):
            params[flat_index(spec, 0, "w", i, 2 * j)] = out_map[j, i]
            params[flat_index(spec, 0, "w", i, 2 * j + 1)] = -out_map[j, i]
    for layer in range(1, spec.n_layers - 1):
        for j in range(n_out):
            params[flat_index(spec, layer, "w", 2 * j, 2 * j)] = 1.0 / (1 + a)
            params[flat_index(spec, layer, "w", 2 * j + 1, 2 * j)] = -1.0 / (1 + a)
            params[flat_index(spec, layer, "w", 2 * j, 2 * j + 1)] = -1.0 / (1 + a)
            params[flat_index(spec, layer, "w", 2 * j + 1, 2 * j + 1)] = 1.0 / (1 + a)
    last = spec.n_layers - 1
    for j in range(n_out):
        params[flat_index(spec, last, "w", 2 * j, j)] = 1.0 / (1 + a)
        params[flat_index(spec, last, "w", 2 * j + 1, j)] = -1.0 / (1 + a)
        if out_bias is not None:
            params[flat_index(spec, last, "b", j)] = np.atleast_1d(out_bias)[j]
    return params


def set_section(cfg, omega, name, values) -> None:
    """Overwrite one sub-network's slice of the full parameter vector."""
    for sec, spec, off in cfg.sections():
        if sec == name:
            omega[off:off + param_count(spec)] = values
            return
    raise KeyError(name)
