"""Two-player training loop, CR objective, and run evaluation.

Each epoch, per system: build the combination series, one-step predictions,
and filtering errors; draw constrained surrogates under the previous
epoch's resampling function; form the surrogate errors and the per-system
CR = sigma(e)/sigma(e_tilde); then refresh the resampling function from the
current error histograms. One momentum-SGD step on the mean CR over
systems closes the epoch. IRAS mode pins the filter output at 0, reducing
the objective to constant-setpoint regulation.

The surrogate draws made in an epoch are treated as constants: gradients
flow through the combination of the drawn vectors and through the
prediction, never through the discrete selection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import diffnet, surrogate
from .diffnet import (GradientTape, TapeOps, backward, init_params_scaled,
                      mlp_apply, mlp_forward_np, param_count, sgd_step)
from .metrics import PREDICTION_SUCCESS_THRESHOLD, ScoredPair, rho, rho_validation
from .model import (ModelConfig, attach_weights, filter_apply, history_indices,
                    np_weights)
from .simulators import ObservationSet
from .surrogate import (DRAW_MODES, ResampleFn, estimate_zeta,
                        identity_resample_fn)

MODES = ("IDRAS", "IRAS")
_SIGMA_FLOOR = 1e-12

_TAG_INIT = 0x1D1  # rng substream tags
_TAG_DRAW = 0x5B1
_TAG_EVAL = 0xE7A


class DegenerateSurrogateError(RuntimeError):
    """Surrogate errors collapsed to (numerically) zero spread."""

    def __init__(self, epoch: int, system: int):
        super().__init__(f"surrogate error spread vanished at epoch {epoch}, "
                         f"system {system}; the run is degenerate")
        self.epoch = epoch
        self.system = system


@dataclass(frozen=True)
class ZetaConfig:
    n_bins: int = 50
    clip_max: float = 20.0
    eps: float = 1.0
    m_candidates: int = 64
    refresh: bool = True   # False freezes the resampling function at identity


@dataclass(frozen=True)
class TrainConfig:
    T: int = 10
    n_y: int = 2
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 150
    seed: int = 0
    mode: str = "IDRAS"
    zeta: ZetaConfig = field(default_factory=ZetaConfig)
    batch: str = "full_series"
    draw_mode: str = "whole_vector"
    sigmoid_all_heads: bool = False
    substeps: int = 4
    integrator: str = "euler"
    init: str = "normal"        # "normal" (unit variance) or "scaled" (fan-in)
    hidden: tuple[int, ...] = (32, 16)
    leaky: float = 0.01
    dt: float | None = None     # None: infer from the dataset's time axis
    nesterov: bool = False

    def validate(self) -> None:
        if self.lr <= 0:
            raise ValueError("lr must be > 0")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.T < 1 or self.n_y < 1:
            raise ValueError("T and n_y must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if self.batch != "full_series":
            raise ValueError("only full_series batching is supported")
        if self.draw_mode not in DRAW_MODES:
            raise ValueError(f"draw_mode must be one of {DRAW_MODES}")
        if self.init not in ("normal", "scaled"):
            raise ValueError("init must be 'normal' or 'scaled'")
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")


@dataclass(frozen=True)
class Standardizer:
    mean: np.ndarray
    scale: np.ndarray

    def apply(self, Z: np.ndarray) -> np.ndarray:
        return (np.asarray(Z, dtype=float) - self.mean) / self.scale


def fit_standardizer(data: ObservationSet) -> Standardizer:
    """Per-component z-scoring statistics pooled over all systems."""
    Z = np.concatenate([s.z for s in data.systems], axis=0)
    mean = Z.mean(axis=0)
    scale = Z.std(axis=0)
    scale = np.where(scale > _SIGMA_FLOOR, scale, 1.0)  # flat channels pass through
    return Standardizer(mean=mean, scale=scale)


def infer_dt(data: ObservationSet) -> float:
    """The shared sampling interval, or 1.0 for event-indexed series."""
    diffs = np.concatenate([np.diff(s.t) for s in data.systems])
    lo, hi = diffs.min(), diffs.max()
    if hi - lo <= 1e-9 * max(abs(hi), 1.0):
        return float(diffs[0])
    return 1.0


def build_model_config(data: ObservationSet, cfg: TrainConfig) -> ModelConfig:
    dt = cfg.dt if cfg.dt is not None else infer_dt(data)
    return ModelConfig(m=data.m, T=cfg.T, n_y=cfg.n_y, hidden=cfg.hidden,
                       leaky=cfg.leaky, dt=dt, substeps=cfg.substeps,
                       integrator=cfg.integrator,
                       sigmoid_all_heads=cfg.sigmoid_all_heads)


def initial_omega(mcfg: ModelConfig, cfg: TrainConfig) -> np.ndarray:
    rng_seed = np.random.SeedSequence([cfg.seed, _TAG_INIT])
    if cfg.init == "normal":
        return np.random.default_rng(rng_seed).standard_normal(mcfg.n_params)
    parts = []
    child_seeds = rng_seed.generate_state(4)
    for (name, spec, _), s in zip(mcfg.sections(), child_seeds):
        parts.append(init_params_scaled(spec, int(s)))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# CR
# ---------------------------------------------------------------------------

def cr(e_series, e_tilde_series) -> float:
    """sigma(e) / sigma(e_tilde) with population standard deviations."""
    e = np.asarray(e_series, dtype=float).ravel()
    et = np.asarray(e_tilde_series, dtype=float).ravel()
    if e.size < 2 or et.size < 2:
        raise ValueError("CR needs at least 2 samples in each series")
    sigma_t = et.std()
    if sigma_t < _SIGMA_FLOOR:
        raise DegenerateSurrogateError(epoch=-1, system=-1)
    return float(e.std() / sigma_t)


# ---------------------------------------------------------------------------
# Epoch machinery
# ---------------------------------------------------------------------------

@dataclass
class _Prep:
    """Index bookkeeping for the flat multi-system arrays."""

    mcfg: ModelConfig
    standardizer: Standardizer
    Z_all: np.ndarray          # (total_rows, m), standardized
    Z_sys: list[np.ndarray]    # per-system standardized views
    row_off: np.ndarray        # (S+1,)
    hist_idx: np.ndarray       # (R, T) into Z_all rows
    tgt_idx: np.ndarray        # (R,)
    seg_bounds: np.ndarray     # (S+1,) over the R window rows
    n_sys: int

    def window_rows(self, s: int) -> slice:
        return slice(self.seg_bounds[s], self.seg_bounds[s + 1])


def prepare(data: ObservationSet, cfg: TrainConfig) -> _Prep:
    data.validate()
    cfg.validate()
    mcfg = build_model_config(data, cfg)
    for i, sys in enumerate(data.systems):
        if sys.n <= cfg.T + 1:
            raise ValueError(f"system {i} has {sys.n} samples; "
                             f"need more than T+1 = {cfg.T + 1}")
    std = fit_standardizer(data)
    Z_sys = [std.apply(s.z) for s in data.systems]
    row_off = np.concatenate([[0], np.cumsum([s.n for s in data.systems])])
    hist_parts, tgt_parts, seg = [], [], [0]
    for s, sys in enumerate(data.systems):
        h, t = history_indices(sys.n, cfg.T, base=int(row_off[s]))
        hist_parts.append(h)
        tgt_parts.append(t)
        seg.append(seg[-1] + (sys.n - cfg.T))
    return _Prep(mcfg=mcfg, standardizer=std, Z_all=np.concatenate(Z_sys, axis=0),
                 Z_sys=Z_sys, row_off=row_off,
                 hist_idx=np.concatenate(hist_parts, axis=0),
                 tgt_idx=np.concatenate(tgt_parts),
                 seg_bounds=np.array(seg), n_sys=data.n_systems)


@dataclass
class Draws:
    """Frozen surrogate selections for one epoch."""

    chosen_idx: np.ndarray | None      # (R,) rows of Z_all (whole_vector)
    chosen_Z: np.ndarray | None        # (R, m) mixed vectors (per_component)
    cand_err_sys: list[np.ndarray]     # per system, (rows_s * M,) naive errors
    starved: int                       # windows that hit the uniform fallback


def draw_surrogates(prep: _Prep, cfg: TrainConfig, omega: np.ndarray,
                    zetas: list[ResampleFn], epoch: int) -> Draws:
    """Per-system constrained draws under the current resampling functions.

    Candidates are uniform time draws; in whole_vector mode their
    combination values are the already-computed c at the drawn rows, so no
    fresh network evaluation is needed.
    """
    mcfg = prep.mcfg
    iras = cfg.mode == "IRAS"
    w = np_weights(mcfg, omega)
    c_vals = mlp_forward_np(mcfg.combiner_spec,
                            _section(prep, omega, "combiner"), prep.Z_all)[:, 0]
    if iras:
        c_hat_vals = np.zeros(prep.tgt_idx.size)
    else:
        hist = c_vals[prep.hist_idx]
        c_hat_vals = filter_apply(diffnet.NumpyOps, hist, w, mcfg)[:, 0]

    R = prep.tgt_idx.size
    chosen_idx = np.empty(R, dtype=np.intp) if cfg.draw_mode == "whole_vector" else None
    chosen_Z = np.empty((R, mcfg.m)) if cfg.draw_mode == "per_component" else None
    cand_err_sys: list[np.ndarray] = []
    starved_total = 0
    for s in range(prep.n_sys):
        rows = prep.window_rows(s)
        n_rows = rows.stop - rows.start
        n_s = int(prep.row_off[s + 1] - prep.row_off[s])
        m_cand = min(n_s, cfg.zeta.m_candidates)
        rng = np.random.default_rng(
            np.random.SeedSequence([cfg.seed, _TAG_DRAW, epoch, s]))
        if cfg.draw_mode == "whole_vector":
            cand = rng.integers(n_s, size=(n_rows, m_cand)) + int(prep.row_off[s])
            cand_c = c_vals[cand]
        else:
            comp = rng.integers(n_s, size=(n_rows, m_cand, mcfg.m))
            cand_vectors = prep.Z_sys[s][comp, np.arange(mcfg.m)]
            cand_c = mlp_forward_np(
                mcfg.combiner_spec, _section(prep, omega, "combiner"),
                cand_vectors.reshape(-1, mcfg.m))[:, 0].reshape(n_rows, m_cand)
        cand_err = cand_c - c_hat_vals[rows, None]
        weights = zetas[s].ratio(cand_err)
        totals = weights.sum(axis=1)
        starved_rows = totals <= 0.0
        u = rng.random(n_rows) * np.where(starved_rows, 1.0, totals)
        pick = (np.cumsum(weights, axis=1) > u[:, None]).argmax(axis=1)
        if starved_rows.any():
            pick[starved_rows] = rng.integers(m_cand, size=int(starved_rows.sum()))
            starved_total += int(starved_rows.sum())
        if cfg.draw_mode == "whole_vector":
            chosen_idx[rows] = cand[np.arange(n_rows), pick]
        else:
            chosen_Z[rows] = cand_vectors[np.arange(n_rows), pick]
        cand_err_sys.append(cand_err.ravel())
    return Draws(chosen_idx=chosen_idx, chosen_Z=chosen_Z,
                 cand_err_sys=cand_err_sys, starved=starved_total)


def _section(prep: _Prep, omega: np.ndarray, name: str) -> np.ndarray:
    for sec, spec, off in prep.mcfg.sections():
        if sec == name:
            return omega[off:off + param_count(spec)]
    raise KeyError(name)


@dataclass
class EpochGraph:
    tape: GradientTape
    loss: float
    cr_values: np.ndarray
    e: np.ndarray
    e_tilde: np.ndarray
    c: np.ndarray
    c_hat: np.ndarray


def epoch_graph(prep: _Prep, cfg: TrainConfig, omega: np.ndarray,
                draws: Draws, epoch: int = -1) -> EpochGraph:
    """Differentiable mean-CR over systems with the given frozen draws."""
    mcfg = prep.mcfg
    iras = cfg.mode == "IRAS"
    tape = GradientTape(mcfg.n_params)
    only = ("combiner",) if iras else ("combiner", "encoder", "drift", "decoder")
    weights = attach_weights(tape, mcfg, omega, only=only)
    total_rows = prep.Z_all.shape[0]
    c = TapeOps.reshape(mlp_apply(TapeOps, TapeOps.constant(prep.Z_all),
                                  weights["combiner"], mcfg.combiner_spec),
                        (total_rows,))
    c_tgt = TapeOps.gather(c, prep.tgt_idx)
    if iras:
        e = c_tgt
        c_hat_vals = np.zeros(prep.tgt_idx.size)
    else:
        hist = TapeOps.gather(c, prep.hist_idx)
        c_hat = TapeOps.reshape(filter_apply(TapeOps, hist, weights, mcfg),
                                (prep.tgt_idx.size,))
        e = TapeOps.sub(c_tgt, c_hat)
        c_hat_vals = c_hat.value
    if cfg.draw_mode == "whole_vector":
        c_tilde = TapeOps.gather(c, draws.chosen_idx)
    else:
        c_tilde = TapeOps.reshape(
            mlp_apply(TapeOps, TapeOps.constant(draws.chosen_Z),
                      weights["combiner"], mcfg.combiner_spec),
            (prep.tgt_idx.size,))
    e_tilde = c_tilde if iras else TapeOps.sub(c_tilde, c_hat)

    sigma_e = TapeOps.sqrt(TapeOps.segment_var(e, prep.seg_bounds))
    sigma_t = TapeOps.sqrt(TapeOps.segment_var(e_tilde, prep.seg_bounds))
    bad = np.where(sigma_t.value < _SIGMA_FLOOR)[0]
    if bad.size:
        raise DegenerateSurrogateError(epoch=epoch, system=int(bad[0]))
    cr_vec = TapeOps.div(sigma_e, sigma_t)
    loss = TapeOps.mean(cr_vec)
    tape.output = loss
    return EpochGraph(tape=tape, loss=float(loss.value), cr_values=cr_vec.value.copy(),
                      e=e.value.copy(), e_tilde=e_tilde.value.copy(),
                      c=c.value.copy(), c_hat=c_hat_vals.copy())


# ---------------------------------------------------------------------------
# Reports and records
# ---------------------------------------------------------------------------

@dataclass
class MetricReport:
    cr_per_system: np.ndarray
    cr_mean: float
    cr_pooled: float
    rho_pred: ScoredPair
    rho_pred_per_system: list[ScoredPair]
    rho_valid: ScoredPair | None
    rho_valid_per_system: list[ScoredPair] | None
    success: bool
    starved_fraction: float
    distance_w1: float
    distance_ks: float

    def lines(self) -> list[str]:
        def fmt(pair: ScoredPair | None) -> str:
            if pair is None:
                return "NA"
            return "NA(degenerate)" if pair.rho is None else f"{pair.rho:.6g}"

        out = [f"cr_mean={self.cr_mean:.6g}",
               f"cr_pooled={self.cr_pooled:.6g}",
               f"rho_pred={fmt(self.rho_pred)}",
               f"rho_valid={fmt(self.rho_valid)}",
               f"success={str(self.success).lower()}",
               f"starved_fraction={self.starved_fraction:.6g}",
               f"distance_w1={self.distance_w1:.6g}",
               f"distance_ks={self.distance_ks:.6g}"]
        for i, v in enumerate(self.cr_per_system):
            out.append(f"cr_system_{i}={v:.6g}")
        if self.rho_valid_per_system is not None:
            for i, pair in enumerate(self.rho_valid_per_system):
                out.append(f"rho_valid_system_{i}={fmt(pair)}")
        return out


@dataclass
class TrainRecord:
    config: TrainConfig
    model_config: ModelConfig
    cr_history: np.ndarray         # (epochs, S)
    mean_cr_history: np.ndarray    # (epochs,)
    starvation: np.ndarray         # (epochs,) fallback counts
    filter_grad_norm: np.ndarray   # (epochs,)
    omega: np.ndarray
    zetas: list[ResampleFn]
    series: list[dict]             # per system: k, t, c, c_hat, e, e_tilde
    report: MetricReport
    standardizer: Standardizer


def _shuffle_pass(prep: _Prep, cfg: TrainConfig, omega: np.ndarray,
                  seed_tag: int) -> tuple[EpochGraph, list[ResampleFn], Draws]:
    """Naive draws -> refreshed zeta -> constrained draws -> errors.

    One full shuffle-player round at fixed parameters; used by evaluate so
    reports do not depend on the training loop's internal state.
    """
    identity = [identity_resample_fn(cfg.zeta.clip_max, cfg.zeta.eps)
                for _ in range(prep.n_sys)]
    naive = draw_surrogates(prep, cfg, omega, identity, epoch=seed_tag)
    g0 = epoch_graph(prep, cfg, omega, naive, epoch=-1)
    zetas = []
    for s in range(prep.n_sys):
        rows = prep.window_rows(s)
        zetas.append(estimate_zeta(g0.e[rows], naive.cand_err_sys[s],
                                   cfg.zeta.n_bins, cfg.zeta.clip_max,
                                   cfg.zeta.eps))
    draws = draw_surrogates(prep, cfg, omega, zetas, epoch=seed_tag + 1)
    graph = epoch_graph(prep, cfg, omega, draws, epoch=-1)
    return graph, zetas, draws


def _evaluate_prepared(prep: _Prep, data: ObservationSet, cfg: TrainConfig,
                       omega: np.ndarray
                       ) -> tuple[MetricReport, EpochGraph, list[ResampleFn]]:
    graph, zetas, draws = _shuffle_pass(prep, cfg, omega, seed_tag=_TAG_EVAL)
    S = prep.n_sys
    cr_sys = graph.cr_values
    cr_pooled = cr(graph.e, graph.e_tilde)

    rho_pred_sys = []
    rho_valid_sys: list[ScoredPair] = []
    c_parts, chat_parts, cstar_parts = [], [], []
    with_truth = data.has_ground_truth()
    for s in range(S):
        rows = prep.window_rows(s)
        tgt = prep.tgt_idx[rows]
        c_s = graph.c[tgt]
        chat_s = graph.c_hat[rows]
        rho_pred_sys.append(rho(c_s, chat_s))
        c_parts.append(c_s)
        chat_parts.append(chat_s)
        if with_truth:
            c_star_s = data.systems[s].c_star[cfg.T:]
            rho_valid_sys.append(rho_validation(c_s, c_star_s))
            cstar_parts.append(c_star_s)
    c_all = np.concatenate(c_parts)
    rho_pred = rho(c_all, np.concatenate(chat_parts))
    rho_valid = rho_validation(c_all, np.concatenate(cstar_parts)) if with_truth else None
    success = (rho_pred.rho is not None
               and rho_pred.rho < PREDICTION_SUCCESS_THRESHOLD)
    d_w1 = surrogate.distribution_distance(graph.e, graph.e_tilde, "w1").statistic
    d_ks = surrogate.distribution_distance(graph.e, graph.e_tilde, "ks").statistic
    report = MetricReport(cr_per_system=cr_sys, cr_mean=float(cr_sys.mean()),
                          cr_pooled=cr_pooled, rho_pred=rho_pred,
                          rho_pred_per_system=rho_pred_sys,
                          rho_valid=rho_valid,
                          rho_valid_per_system=rho_valid_sys if with_truth else None,
                          success=success,
                          starved_fraction=draws.starved / max(1, prep.tgt_idx.size),
                          distance_w1=d_w1, distance_ks=d_ks)
    return report, graph, zetas


def evaluate(omega: np.ndarray, data: ObservationSet, cfg: TrainConfig) -> MetricReport:
    """CR, prediction score, and (when ground truth exists) validation score.

    The surrogate ensemble is rebuilt from scratch on a dedicated random
    substream, so evaluating saved parameters reproduces the report written
    at the end of training.
    """
    prep = prepare(data, cfg)
    return _evaluate_prepared(prep, data, cfg, omega)[0]


def train(data: ObservationSet, cfg: TrainConfig) -> TrainRecord:
    """Run the two-player loop for cfg.epochs epochs and evaluate the result."""
    prep = prepare(data, cfg)
    mcfg = prep.mcfg
    omega = initial_omega(mcfg, cfg)
    velocity = np.zeros_like(omega)
    zetas = [identity_resample_fn(cfg.zeta.clip_max, cfg.zeta.eps)
             for _ in range(prep.n_sys)]

    n_theta = param_count(mcfg.combiner_spec)
    cr_hist = np.empty((cfg.epochs, prep.n_sys))
    starvation = np.zeros(cfg.epochs, dtype=int)
    grad_filter = np.empty(cfg.epochs)
    for epoch in range(cfg.epochs):
        draws = draw_surrogates(prep, cfg, omega, zetas, epoch)
        graph = epoch_graph(prep, cfg, omega, draws, epoch=epoch)
        cr_hist[epoch] = graph.cr_values
        starvation[epoch] = draws.starved
        if cfg.zeta.refresh:
            zetas = [estimate_zeta(graph.e[prep.window_rows(s)],
                                   draws.cand_err_sys[s], cfg.zeta.n_bins,
                                   cfg.zeta.clip_max, cfg.zeta.eps)
                     for s in range(prep.n_sys)]
        grad = backward(graph.tape, 1.0)
        grad_filter[epoch] = float(np.linalg.norm(grad[n_theta:]))
        omega, velocity = sgd_step(omega, grad, velocity, cfg.lr, cfg.momentum,
                                   nesterov=cfg.nesterov)

    report, final_graph, final_zetas = _evaluate_prepared(prep, data, cfg, omega)
    series = []
    for s in range(prep.n_sys):
        rows = prep.window_rows(s)
        tgt = prep.tgt_idx[rows]
        series.append({
            "k": np.arange(cfg.T + 1, data.systems[s].n + 1),
            "t": data.systems[s].t[cfg.T:],
            "c": final_graph.c[tgt],
            "c_hat": final_graph.c_hat[rows],
            "e": final_graph.e[rows],
            "e_tilde": final_graph.e_tilde[rows],
        })
    return TrainRecord(config=cfg, model_config=mcfg, cr_history=cr_hist,
                       mean_cr_history=cr_hist.mean(axis=1),
                       starvation=starvation, filter_grad_norm=grad_filter,
                       omega=omega, zetas=final_zetas, series=series,
                       report=report, standardizer=prep.standardizer)


# ---------------------------------------------------------------------------
# Run exports
# ---------------------------------------------------------------------------

def write_history_csv(record: TrainRecord, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("epoch,system_id,cr\n")
        for epoch in range(record.cr_history.shape[0]):
            for s in range(record.cr_history.shape[1]):
                fh.write(f"{epoch},{s},{record.cr_history[epoch, s]:.17g}\n")


def write_series_csv(record: TrainRecord, system: int, path) -> None:
    ser = record.series[system]
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("k,t,c,c_hat,e\n")
        for i in range(ser["k"].size):
            fh.write(f"{ser['k'][i]},{ser['t'][i]:.17g},{ser['c'][i]:.17g},"
                     f"{ser['c_hat'][i]:.17g},{ser['e'][i]:.17g}\n")


def write_report(report: MetricReport, path, extra: dict | None = None) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for key, val in (extra or {}).items():
            fh.write(f"{key}={val}\n")
        for line in report.lines():
            fh.write(line + "\n")
