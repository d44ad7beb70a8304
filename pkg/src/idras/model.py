"""Combination network, latent-dynamics filter, and filtering errors.

A scalar combination c_k of each observation vector is produced by a
sigmoid-headed MLP. A filter block predicts c_k one step ahead from its T
previous values: an encoder maps the history to a latent state, a learned
drift advances the state across one sampling interval by explicit
fixed-step integration, and a decoder emits the prediction. The filtering
error e_k = c_k - c_hat_k is the 1-D projection everything downstream
(surrogates, CR, scores) works on.

All entry points expect observations already standardized per dataset
statistics (see trainer.standardize).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .diffnet import (GradientTape, MlpSpec, NumpyOps, ShapeError, TapeOps,
                      format_spec_header, mlp_apply, param_count,
                      parse_spec_header, unflatten)

SECTION_NAMES = ("combiner", "encoder", "drift", "decoder")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture of the full parameter vector and its four sub-networks."""

    m: int                      # observation dimension
    T: int = 10                 # history length fed to the encoder
    n_y: int = 2                # latent state dimension
    hidden: tuple[int, ...] = (32, 16)
    leaky: float = 0.01
    dt: float = 1.0             # sampling interval on the dataset's time axis
    substeps: int = 4           # integration steps per sampling interval
    integrator: str = "euler"   # "euler" or "rk4"
    sigmoid_all_heads: bool = False

    def __post_init__(self):
        if self.m < 1 or self.T < 1 or self.n_y < 1:
            raise ValueError("m, T, and n_y must be >= 1")
        if self.dt <= 0 or self.substeps < 1:
            raise ValueError("dt must be > 0 and substeps >= 1")
        if self.integrator not in ("euler", "rk4"):
            raise ValueError(f"unknown integrator {self.integrator!r}")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def _filter_head(self) -> str:
        return "sigmoid" if self.sigmoid_all_heads else "linear"

    @property
    def combiner_spec(self) -> MlpSpec:
        return MlpSpec(self.m, self.hidden, 1, "sigmoid", self.leaky)

    @property
    def encoder_spec(self) -> MlpSpec:
        return MlpSpec(self.T, self.hidden, self.n_y, self._filter_head, self.leaky)

    @property
    def drift_spec(self) -> MlpSpec:
        return MlpSpec(self.n_y, self.hidden, self.n_y, self._filter_head, self.leaky)

    @property
    def decoder_spec(self) -> MlpSpec:
        return MlpSpec(self.n_y, self.hidden, 1, self._filter_head, self.leaky)

    def section_specs(self) -> dict[str, MlpSpec]:
        return {"combiner": self.combiner_spec, "encoder": self.encoder_spec,
                "drift": self.drift_spec, "decoder": self.decoder_spec}

    def sections(self) -> list[tuple[str, MlpSpec, int]]:
        """(name, spec, flat offset) in layout order."""
        out = []
        off = 0
        for name, spec in self.section_specs().items():
            out.append((name, spec, off))
            off += param_count(spec)
        return out

    @property
    def n_params(self) -> int:
        return sum(param_count(s) for s in self.section_specs().values())


@dataclass(frozen=True)
class CombinationNet:
    spec: MlpSpec
    params: np.ndarray  # combiner slice of the full vector


@dataclass(frozen=True)
class FilterBlock:
    encoder: MlpSpec
    drift: MlpSpec
    decoder: MlpSpec
    T: int
    n_y: int
    dt: float
    substeps: int
    integrator: str
    params_encoder: np.ndarray
    params_drift: np.ndarray
    params_decoder: np.ndarray


def _check_omega(cfg: ModelConfig, omega: np.ndarray) -> np.ndarray:
    omega = np.asarray(omega, dtype=float)
    if omega.shape != (cfg.n_params,):
        raise ShapeError(
            f"parameter vector has shape {omega.shape}, expected ({cfg.n_params},)")
    return omega


def section_slice(cfg: ModelConfig, omega: np.ndarray, name: str) -> np.ndarray:
    omega = _check_omega(cfg, omega)
    for sec, spec, off in cfg.sections():
        if sec == name:
            return omega[off:off + param_count(spec)]
    raise KeyError(name)


def combination_net(cfg: ModelConfig, omega: np.ndarray) -> CombinationNet:
    return CombinationNet(cfg.combiner_spec, section_slice(cfg, omega, "combiner"))


def filter_block(cfg: ModelConfig, omega: np.ndarray) -> FilterBlock:
    return FilterBlock(cfg.encoder_spec, cfg.drift_spec, cfg.decoder_spec,
                       cfg.T, cfg.n_y, cfg.dt, cfg.substeps, cfg.integrator,
                       section_slice(cfg, omega, "encoder"),
                       section_slice(cfg, omega, "drift"),
                       section_slice(cfg, omega, "decoder"))


# ---------------------------------------------------------------------------
# Forward machinery, written once over either backend
# ---------------------------------------------------------------------------

def np_weights(cfg: ModelConfig, omega: np.ndarray) -> dict[str, list]:
    omega = _check_omega(cfg, omega)
    return {name: unflatten(spec, omega[off:off + param_count(spec)])
            for name, spec, off in cfg.sections()}


def attach_weights(tape: GradientTape, cfg: ModelConfig, omega: np.ndarray,
                   only: tuple[str, ...] = SECTION_NAMES) -> dict[str, list]:
    """Register parameter leaves on a tape; sections not in `only` are skipped
    so their gradients stay identically zero."""
    omega = _check_omega(cfg, omega)
    return {name: tape.attach_mlp(omega, spec, offset=off)
            for name, spec, off in cfg.sections() if name in only}


def integrate_drift(ops, y, drift_weights, cfg: ModelConfig):
    """Advance the latent state across one sampling interval.

    Explicit fixed-step integration with cfg.substeps steps of size
    dt/substeps; "euler" takes one drift evaluation per step, "rk4" four.
    """
    h = cfg.dt / cfg.substeps

    def f(state):
        return mlp_apply(ops, state, drift_weights, cfg.drift_spec)

    for _ in range(cfg.substeps):
        if cfg.integrator == "euler":
            y = ops.add(y, ops.scale(f(y), h))
        else:
            k1 = f(y)
            k2 = f(ops.add(y, ops.scale(k1, h / 2.0)))
            k3 = f(ops.add(y, ops.scale(k2, h / 2.0)))
            k4 = f(ops.add(y, ops.scale(k3, h)))
            incr = ops.add(ops.add(k1, ops.scale(k2, 2.0)),
                           ops.add(ops.scale(k3, 2.0), k4))
            y = ops.add(y, ops.scale(incr, h / 6.0))
    return y


def filter_apply(ops, hist, weights: dict, cfg: ModelConfig):
    """hist (R, T) -> one-step predictions (R, 1)."""
    y_plus = mlp_apply(ops, hist, weights["encoder"], cfg.encoder_spec)
    y_minus = integrate_drift(ops, y_plus, weights["drift"], cfg)
    return mlp_apply(ops, y_minus, weights["decoder"], cfg.decoder_spec)


def history_indices(n: int, T: int, base: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Window index arrays for one series of length n.

    Returns (hist_idx (n-T, T), target_idx (n-T,)) into the flat series,
    offset by `base`; row r covers targets k = T + r.
    """
    if n <= T:
        raise ValueError(f"series length {n} must exceed the history length {T}")
    k = np.arange(T, n)
    hist = k[:, None] + np.arange(-T, 0)[None, :]
    return hist + base, k + base


# ---------------------------------------------------------------------------
# Spec'd operations (single-window, plain numpy)
# ---------------------------------------------------------------------------

def combine(net: CombinationNet, z: np.ndarray) -> float:
    """Scalar combination of one standardized observation vector."""
    z = np.asarray(z, dtype=float).ravel()
    if z.shape != (net.spec.input_dim,):
        raise ShapeError(f"observation has shape {z.shape}, "
                         f"expected ({net.spec.input_dim},)")
    out = mlp_apply(NumpyOps, z.reshape(1, -1), unflatten(net.spec, net.params),
                    net.spec)
    return float(out[0, 0])


def predict(fb: FilterBlock, history: np.ndarray) -> float:
    """One-step prediction of the combination from its T previous values."""
    history = np.asarray(history, dtype=float).ravel()
    if history.shape != (fb.T,):
        raise ShapeError(f"history has shape {history.shape}, expected ({fb.T},)")
    cfg = ModelConfig(m=1, T=fb.T, n_y=fb.n_y, hidden=fb.encoder.hidden_dims,
                      leaky=fb.encoder.leaky_slope, dt=fb.dt, substeps=fb.substeps,
                      integrator=fb.integrator,
                      sigmoid_all_heads=(fb.decoder.output_activation == "sigmoid"))
    weights = {"encoder": unflatten(fb.encoder, fb.params_encoder),
               "drift": unflatten(fb.drift, fb.params_drift),
               "decoder": unflatten(fb.decoder, fb.params_decoder)}
    out = filter_apply(NumpyOps, history.reshape(1, -1), weights, cfg)
    return float(out[0, 0])


def combine_series(cfg: ModelConfig, omega: np.ndarray, Z: np.ndarray) -> np.ndarray:
    """c_k for every row of Z (N, m)."""
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[1] != cfg.m:
        raise ShapeError(f"observations have shape {Z.shape}, expected (*, {cfg.m})")
    w = np_weights(cfg, omega)
    return mlp_apply(NumpyOps, Z, w["combiner"], cfg.combiner_spec)[:, 0]


def predict_series(cfg: ModelConfig, omega: np.ndarray, c: np.ndarray) -> np.ndarray:
    """c_hat_k for k = T..N-1 given the full combination series."""
    c = np.asarray(c, dtype=float).ravel()
    hist_idx, _ = history_indices(c.size, cfg.T)
    w = np_weights(cfg, omega)
    return filter_apply(NumpyOps, c[hist_idx], w, cfg)[:, 0]


def error_series(cfg: ModelConfig, omega: np.ndarray, Z: np.ndarray,
                 iras: bool = False) -> np.ndarray:
    """Filtering errors e_k = c_k - c_hat_k for k = T..N-1.

    With iras=True the filter is replaced by the constant 0, so e_k = c_k.
    """
    c = combine_series(cfg, omega, Z)
    if c.size <= cfg.T:
        raise ValueError(f"need more than T={cfg.T} observations, got {c.size}")
    if iras:
        return c[cfg.T:].copy()
    return c[cfg.T:] - predict_series(cfg, omega, c)


def surrogate_error(cfg: ModelConfig, omega: np.ndarray, history_obs: np.ndarray,
                    z_tilde: np.ndarray, iras: bool = False) -> float:
    """Error with the final observation replaced by a surrogate draw.

    The history fed to the filter is always built from true observations;
    only the combination at the target step uses z_tilde.
    """
    history_obs = np.asarray(history_obs, dtype=float)
    if history_obs.shape != (cfg.T, cfg.m):
        raise ShapeError(f"history_obs has shape {history_obs.shape}, "
                         f"expected ({cfg.T}, {cfg.m})")
    net = combination_net(cfg, omega)
    c_tilde = combine(net, z_tilde)
    if iras:
        return c_tilde
    c_hist = combine_series(cfg, omega, history_obs)
    return c_tilde - predict(filter_block(cfg, omega), c_hist)


def taped_error_series(cfg: ModelConfig, omega: np.ndarray, Z: np.ndarray,
                       iras: bool = False):
    """Single-series filtering errors as a differentiable graph.

    Returns (tape, error tensor); tape.output is the error series, so
    diffnet.backward(tape, upstream) yields d(upstream . e)/d(omega).
    """
    Z = np.asarray(Z, dtype=float)
    if Z.ndim != 2 or Z.shape[1] != cfg.m:
        raise ShapeError(f"observations have shape {Z.shape}, expected (*, {cfg.m})")
    n = Z.shape[0]
    if n <= cfg.T:
        raise ValueError(f"need more than T={cfg.T} observations, got {n}")
    tape = GradientTape(cfg.n_params)
    only = ("combiner",) if iras else SECTION_NAMES
    weights = attach_weights(tape, cfg, omega, only=only)
    c = TapeOps.reshape(
        mlp_apply(TapeOps, TapeOps.constant(Z), weights["combiner"],
                  cfg.combiner_spec), (n,))
    hist_idx, tgt_idx = history_indices(n, cfg.T)
    c_tgt = TapeOps.gather(c, tgt_idx)
    if iras:
        e = c_tgt
    else:
        hist = TapeOps.gather(c, hist_idx)
        c_hat = TapeOps.reshape(filter_apply(TapeOps, hist, weights, cfg),
                                (n - cfg.T,))
        e = TapeOps.sub(c_tgt, c_hat)
    tape.output = e
    return tape, e


# ---------------------------------------------------------------------------
# Full parameter file: four named sections, floats at 17 significant digits
# ---------------------------------------------------------------------------

def save_omega(path, cfg: ModelConfig, omega: np.ndarray,
               meta: dict[str, str] | None = None) -> None:
    omega = _check_omega(cfg, omega)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("omega-params 1\n")
        fh.write(f"meta dt {cfg.dt:.17g}\n")
        fh.write(f"meta substeps {cfg.substeps}\n")
        fh.write(f"meta integrator {cfg.integrator}\n")
        for key, val in (meta or {}).items():
            fh.write(f"meta {key} {val}\n")
        for name, spec, off in cfg.sections():
            fh.write("section " + format_spec_header(spec, "mlp") + f" {name}\n")
            for v in omega[off:off + param_count(spec)]:
                fh.write(f"{v:.17g}\n")


def load_omega(path) -> tuple[ModelConfig, np.ndarray, dict[str, str]]:
    with open(path, "r", encoding="utf-8") as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    if not lines or lines[0].split() != ["omega-params", "1"]:
        raise ValueError(f"{path}: not a parameter file")
    meta: dict[str, str] = {}
    specs: dict[str, MlpSpec] = {}
    values: dict[str, list[float]] = {}
    current: str | None = None
    for ln in lines[1:]:
        if ln.startswith("meta "):
            _, key, val = ln.split(" ", 2)
            meta[key] = val
        elif ln.startswith("section "):
            body = ln[len("section "):].rsplit(" ", 1)
            current = body[1]
            specs[current] = parse_spec_header(body[0])
            values[current] = []
        else:
            if current is None:
                raise ValueError(f"{path}: value line before any section header")
            values[current].append(float(ln))
    if set(specs) != set(SECTION_NAMES):
        raise ValueError(f"{path}: expected sections {SECTION_NAMES}, got {tuple(specs)}")
    comb, enc, dri = specs["combiner"], specs["encoder"], specs["drift"]
    cfg = ModelConfig(m=comb.input_dim, T=enc.input_dim, n_y=enc.output_dim,
                      hidden=comb.hidden_dims, leaky=comb.leaky_slope,
                      dt=float(meta.get("dt", 1.0)),
                      substeps=int(meta.get("substeps", 4)),
                      integrator=meta.get("integrator", "euler"),
                      sigmoid_all_heads=(dri.output_activation == "sigmoid"))
    omega = np.empty(cfg.n_params)
    for name, spec, off in cfg.sections():
        vals = np.array(values[name])
        if vals.size != param_count(spec):
            raise ValueError(f"{path}: section {name} has {vals.size} values, "
                             f"expected {param_count(spec)}")
        if specs[name] != spec:
            raise ValueError(f"{path}: section {name} header does not match the "
                             "reconstructed architecture")
        omega[off:off + vals.size] = vals
    return cfg, omega, meta
