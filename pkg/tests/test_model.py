import math

import numpy as np
import pytest

from idras.diffnet import ShapeError, backward, param_count
from idras.model import (CombinationNet, ModelConfig, combination_net, combine,
                         combine_series, error_series, filter_block, load_omega,
                         predict, save_omega, surrogate_error,
                         taped_error_series)
from idras.simulators import KineticParams, simulate_kinetic

from nethelp import linear_mlp_params, set_section


def small_cfg(**kw):
    defaults = dict(m=2, T=5, n_y=2, hidden=(8, 6), dt=1.0, substeps=4)
    defaults.update(kw)
    return ModelConfig(**defaults)


def random_omega(cfg, seed, scale=0.3):
    return np.random.default_rng(seed).normal(scale=scale, size=cfg.n_params)


# ---------------------------------------------------------------------------
# combine
# ---------------------------------------------------------------------------

def test_combine_zero_params_is_half():
    cfg = small_cfg()
    net = combination_net(cfg, np.zeros(cfg.n_params))
    for z in (np.zeros(2), np.array([3.0, -4.0]), np.array([100.0, 100.0])):
        assert combine(net, z) == 0.5


def test_combine_pure_and_bounded():
    cfg = small_cfg()
    net = combination_net(cfg, random_omega(cfg, 0, scale=1.0))
    z = np.array([0.3, -1.4])
    c1, c2 = combine(net, z), combine(net, z)
    assert c1 == c2
    assert 0.0 < c1 < 1.0


def test_combine_parameter_sensitivity():
    # perturbing a combiner entry moves the output for a generic input
    cfg = small_cfg()
    omega = random_omega(cfg, 1)
    z = np.array([0.7, -0.2])
    base = combine(combination_net(cfg, omega), z)
    bumped = omega.copy()
    bumped[0] += 0.5
    assert combine(combination_net(cfg, bumped), z) != base


def test_combine_rejects_wrong_width():
    cfg = small_cfg()
    net = combination_net(cfg, np.zeros(cfg.n_params))
    with pytest.raises(ShapeError):
        combine(net, np.zeros(3))


# ---------------------------------------------------------------------------
# predict / integrator
# ---------------------------------------------------------------------------

def test_predict_zero_drift_reduces_to_encoder_decoder():
    cfg = small_cfg()
    omega = random_omega(cfg, 2)
    set_section(cfg, omega, "drift", np.zeros(param_count(cfg.drift_spec)))
    history = np.random.default_rng(3).uniform(size=cfg.T)
    fb1 = filter_block(cfg, omega)
    got = predict(fb1, history)
    cfg_many = small_cfg(substeps=100)
    fb2 = filter_block(cfg_many, omega)
    assert predict(fb2, history) == got  # substep count is irrelevant at zero drift


def test_predict_exponential_decay_oracle():
    # encoder emits (last history value, 0); drift dy/dt = -y; decoder reads y1
    cfg = ModelConfig(m=2, T=5, n_y=2, hidden=(8, 6), dt=0.1, substeps=1000)
    omega = np.zeros(cfg.n_params)
    enc_map = np.zeros((2, cfg.T))
    enc_map[0, -1] = 1.0
    set_section(cfg, omega, "encoder", linear_mlp_params(cfg.encoder_spec, enc_map))
    set_section(cfg, omega, "drift",
                linear_mlp_params(cfg.drift_spec, -np.eye(2)))
    set_section(cfg, omega, "decoder",
                linear_mlp_params(cfg.decoder_spec, np.array([[1.0, 0.0]])))
    history = np.array([0.1, 0.2, 0.3, 0.4, 0.8])
    got = predict(filter_block(cfg, omega), history)
    want = 0.8 * math.exp(-0.1)
    assert abs(got - want) / want < 1e-3


def test_rk4_integrator_more_accurate_than_euler():
    base = dict(m=2, T=5, n_y=2, hidden=(8, 6), dt=0.5, substeps=2)
    want = 0.8 * math.exp(-0.5)
    errs = {}
    for method in ("euler", "rk4"):
        cfg = ModelConfig(integrator=method, **base)
        omega = np.zeros(cfg.n_params)
        enc_map = np.zeros((2, cfg.T))
        enc_map[0, -1] = 1.0
        set_section(cfg, omega, "encoder", linear_mlp_params(cfg.encoder_spec, enc_map))
        set_section(cfg, omega, "drift", linear_mlp_params(cfg.drift_spec, -np.eye(2)))
        set_section(cfg, omega, "decoder",
                    linear_mlp_params(cfg.decoder_spec, np.array([[1.0, 0.0]])))
        got = predict(filter_block(cfg, omega), np.array([0.0, 0.0, 0.0, 0.0, 0.8]))
        errs[method] = abs(got - want)
    assert errs["rk4"] < errs["euler"] / 100


# ---------------------------------------------------------------------------
# error series
# ---------------------------------------------------------------------------

def test_error_series_shape_and_minimum_length():
    cfg = small_cfg()
    omega = random_omega(cfg, 4)
    rng = np.random.default_rng(5)
    for n in (cfg.T + 1, cfg.T + 7, 40):
        e = error_series(cfg, omega, rng.normal(size=(n, 2)))
        assert e.shape == (n - cfg.T,)
    with pytest.raises(ValueError):
        error_series(cfg, omega, rng.normal(size=(cfg.T, 2)))


def test_error_series_zero_when_prediction_matches_constant_combination():
    # zero combiner -> c = 0.5 everywhere; decoder biased to emit exactly 0.5
    cfg = small_cfg()
    omega = np.zeros(cfg.n_params)
    dec = np.zeros(param_count(cfg.decoder_spec))
    bias_pos = param_count(cfg.decoder_spec) - 1  # last entry is the head bias
    dec[bias_pos] = 0.5
    set_section(cfg, omega, "decoder", dec)
    Z = np.random.default_rng(6).normal(size=(30, 2))
    e = error_series(cfg, omega, Z)
    assert np.allclose(e, 0.0, atol=1e-15)


def test_error_series_iras_mode_is_raw_combination():
    cfg = small_cfg()
    omega = random_omega(cfg, 7)
    Z = np.random.default_rng(8).normal(size=(25, 2))
    e = error_series(cfg, omega, Z, iras=True)
    c = combine_series(cfg, omega, Z)
    assert np.array_equal(e, c[cfg.T:])


# ---------------------------------------------------------------------------
# surrogate error
# ---------------------------------------------------------------------------

def test_surrogate_error_with_true_observation_matches_series():
    cfg = small_cfg()
    omega = random_omega(cfg, 9)
    Z = np.random.default_rng(10).normal(size=(20, 2))
    e = error_series(cfg, omega, Z)
    for k in (cfg.T, cfg.T + 3, 19):
        ẽ = surrogate_error(cfg, omega, Z[k - cfg.T:k], Z[k])
        assert ẽ == pytest.approx(e[k - cfg.T], abs=1e-15)


def test_surrogate_error_zero_combiner_ignores_the_draw():
    cfg = small_cfg()
    omega = np.zeros(cfg.n_params)
    omega[param_count(cfg.combiner_spec):] = random_omega(cfg, 11)[param_count(cfg.combiner_spec):]
    Z = np.random.default_rng(12).normal(size=(15, 2))
    hist = Z[:cfg.T]
    base = surrogate_error(cfg, omega, hist, Z[cfg.T])
    for z in (np.zeros(2), np.array([5.0, -3.0])):
        assert surrogate_error(cfg, omega, hist, z) == base


def test_surrogate_error_history_stays_true():
    # only the final observation is replaced: prediction must not change
    cfg = small_cfg()
    omega = random_omega(cfg, 13)
    Z = np.random.default_rng(14).normal(size=(12, 2))
    hist = Z[:cfg.T]
    net = combination_net(cfg, omega)
    z_tilde = np.array([9.0, -9.0])
    ẽ = surrogate_error(cfg, omega, hist, z_tilde)
    e_true = surrogate_error(cfg, omega, hist, Z[cfg.T])
    # the two differ exactly by the combination difference
    want = combine(net, z_tilde) - combine(net, Z[cfg.T])
    assert ẽ - e_true == pytest.approx(want, abs=1e-15)


# ---------------------------------------------------------------------------
# taped path
# ---------------------------------------------------------------------------

def test_taped_errors_match_plain_forward_bitwise():
    cfg = small_cfg()
    omega = random_omega(cfg, 15)
    Z = np.random.default_rng(16).normal(size=(30, 2))
    _, e_t = taped_error_series(cfg, omega, Z)
    assert np.array_equal(e_t.value, error_series(cfg, omega, Z))
    _, e_i = taped_error_series(cfg, omega, Z, iras=True)
    assert np.array_equal(e_i.value, error_series(cfg, omega, Z, iras=True))


def test_error_gradient_matches_finite_differences_through_integrator():
    cfg = small_cfg(substeps=3)
    omega = random_omega(cfg, 17)
    Z = np.random.default_rng(18).normal(size=(15, 2))
    up = np.random.default_rng(19).normal(size=15 - cfg.T)

    tape, _ = taped_error_series(cfg, omega, Z)
    grad = backward(tape, up)

    def loss(om):
        return float(up @ error_series(cfg, om, Z))

    rng = np.random.default_rng(20)
    h = 1e-5
    for i in rng.choice(cfg.n_params, size=40, replace=False):
        hi, lo = omega.copy(), omega.copy()
        hi[i] += h
        lo[i] -= h
        fd = (loss(hi) - loss(lo)) / (2 * h)
        if abs(grad[i] - fd) < 1e-8:
            continue
        assert abs(grad[i] - fd) / max(abs(grad[i]), abs(fd)) < 1e-4, i


def test_iras_tape_never_touches_filter_sections():
    cfg = small_cfg()
    omega = random_omega(cfg, 21)
    Z = np.random.default_rng(22).normal(size=(20, 2))
    tape, _ = taped_error_series(cfg, omega, Z, iras=True)
    grad = backward(tape, np.ones(20 - cfg.T))
    n_theta = param_count(cfg.combiner_spec)
    assert np.count_nonzero(grad[:n_theta]) > 0
    assert np.array_equal(grad[n_theta:], np.zeros(cfg.n_params - n_theta))


# ---------------------------------------------------------------------------
# surrogate contrast on simulated data
# ---------------------------------------------------------------------------

def test_random_time_surrogates_have_larger_errors_on_regulated_data():
    # hand-set model: c = sigmoid of the (standardized) regulated sum, filter
    # copies the previous value; random-time draws then mispredict badly
    kp = KineticParams(n_systems=1, n_samples=100, f_s=200.0)
    obs = simulate_kinetic(kp, 42)
    Z = obs.systems[0].z
    Zs = (Z - Z.mean(axis=0)) / Z.std(axis=0)

    cfg = ModelConfig(m=2, T=5, n_y=2, hidden=(8, 6), dt=1.0, substeps=1)
    omega = np.zeros(cfg.n_params)
    set_section(cfg, omega, "combiner",
                linear_mlp_params(cfg.combiner_spec, np.array([[0.5, 0.5]])))
    enc_map = np.zeros((2, cfg.T))
    enc_map[0, -1] = 1.0
    set_section(cfg, omega, "encoder", linear_mlp_params(cfg.encoder_spec, enc_map))
    set_section(cfg, omega, "decoder",
                linear_mlp_params(cfg.decoder_spec, np.array([[1.0, 0.0]])))

    e = error_series(cfg, omega, Zs)
    rng = np.random.default_rng(7)
    draws = rng.integers(0, Zs.shape[0], size=400)
    e_tilde = []
    for j, k in enumerate(rng.integers(cfg.T, Zs.shape[0], size=400)):
        e_tilde.append(surrogate_error(cfg, omega, Zs[k - cfg.T:k], Zs[draws[j]]))
    assert np.mean(np.abs(e_tilde)) > 1.5 * np.mean(np.abs(e))


# ---------------------------------------------------------------------------
# parameter file
# ---------------------------------------------------------------------------

def test_omega_file_roundtrip(tmp_path):
    cfg = ModelConfig(m=3, T=7, n_y=2, hidden=(32, 16), dt=0.5, substeps=2,
                      integrator="rk4")
    omega = random_omega(cfg, 23, scale=1.0)
    path = tmp_path / "omega.params"
    save_omega(path, cfg, omega, meta={"mode": "IDRAS", "features": "a,b,c"})
    cfg2, omega2, meta = load_omega(path)
    assert cfg2 == cfg
    assert np.array_equal(omega2, omega)
    assert meta["mode"] == "IDRAS"
    assert meta["features"] == "a,b,c"


def test_omega_file_sigmoid_all_heads_roundtrip(tmp_path):
    cfg = ModelConfig(m=2, T=4, n_y=3, hidden=(8, 8), sigmoid_all_heads=True)
    omega = random_omega(cfg, 24)
    path = tmp_path / "omega.params"
    save_omega(path, cfg, omega)
    cfg2, omega2, _ = load_omega(path)
    assert cfg2.sigmoid_all_heads
    assert cfg2 == cfg
    assert np.array_equal(omega2, omega)
