"""Dataset generators with known control objectives, plus dataset CSV I/O.

Three families:

* kinetic   -- two proteins P, S produced from an mRNA pool M that receives
               negative feedback from their sum; the production rate K(t)
               oscillates, so P+S tracks a moving reference.
* bacteria  -- exponentially growing cells dividing when size crosses a
               slowly drifting Ornstein-Uhlenbeck threshold (sizer rule);
               observations are per-generation (birth size, growth rate,
               cycle duration).
* feynman   -- physics benchmark equations with an oscillating factor; the
               free observables are redrawn uniformly at every step and the
               dependent variable is computed in closed form.

Every generator is deterministic per seed and returns an ObservationSet
carrying the ground-truth reference series c*.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np


class IntegrationUnstableError(RuntimeError):
    """The explicit integrator produced a non-finite state."""


class LineageStallError(RuntimeError):
    """A cell failed to reach its division threshold within the horizon."""


# ---------------------------------------------------------------------------
# Observation container and CSV contract
# ---------------------------------------------------------------------------

@dataclass
class SystemSeries:
    t: np.ndarray                   # strictly increasing sample times
    z: np.ndarray                   # (N, m) observations
    c_star: np.ndarray | None       # ground-truth reference, when known
    meta: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.z.shape[0]


@dataclass
class ObservationSet:
    systems: list[SystemSeries]
    feature_names: list[str]
    meta: dict = field(default_factory=dict)

    @property
    def n_systems(self) -> int:
        return len(self.systems)

    @property
    def m(self) -> int:
        return len(self.feature_names)

    def validate(self) -> None:
        for i, sys in enumerate(self.systems):
            if sys.z.ndim != 2 or sys.z.shape[1] != self.m:
                raise ValueError(f"system {i}: observation width {sys.z.shape} "
                                 f"does not match {self.m} features")
            if sys.t.shape != (sys.n,):
                raise ValueError(f"system {i}: time axis length mismatch")
            if np.any(np.diff(sys.t) <= 0):
                raise ValueError(f"system {i}: sample times must strictly increase")
            if sys.c_star is not None and sys.c_star.shape != (sys.n,):
                raise ValueError(f"system {i}: c_star length mismatch")

    def has_ground_truth(self) -> bool:
        return all(s.c_star is not None for s in self.systems)


def _fmt(x: float) -> str:
    return f"{x:.17g}"


def write_dataset_csv(obs: ObservationSet, path) -> None:
    """header: system_id,k,t,<features...>,c_star ; 17-significant-digit floats."""
    obs.validate()
    with_truth = obs.has_ground_truth()
    cols = ["system_id", "k", "t", *obs.feature_names] + (["c_star"] if with_truth else [])
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(cols) + "\n")
        for sid, sys in enumerate(obs.systems):
            for k in range(sys.n):
                row = [str(sid), str(k + 1), _fmt(sys.t[k])]
                row += [_fmt(v) for v in sys.z[k]]
                if with_truth:
                    row.append(_fmt(sys.c_star[k]))
                fh.write(",".join(row) + "\n")


def read_dataset_csv(path) -> ObservationSet:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        if header[:3] != ["system_id", "k", "t"]:
            raise ValueError(f"{path}: unexpected dataset header {header[:3]}")
        with_truth = header[-1] == "c_star"
        features = header[3:-1] if with_truth else header[3:]
        rows = [ln.strip().split(",") for ln in fh if ln.strip()]
    data = np.array([[float(v) for v in r] for r in rows])
    if data.size == 0:
        raise ValueError(f"{path}: empty dataset")
    systems = []
    for sid in np.unique(data[:, 0]).astype(int):
        block = data[data[:, 0] == sid]
        block = block[np.argsort(block[:, 1])]
        z = block[:, 3:3 + len(features)]
        c_star = block[:, -1].copy() if with_truth else None
        systems.append(SystemSeries(t=block[:, 2].copy(), z=z.copy(), c_star=c_star))
    obs = ObservationSet(systems=systems, feature_names=list(features))
    obs.validate()
    return obs


def write_sidecar_manifest(path, generator: str, seed: int, params: dict) -> None:
    """key=value sidecar recording the generator id, parameters, and seed."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"generator={generator}\n")
        fh.write(f"seed={seed}\n")
        for key in sorted(params):
            fh.write(f"{key}={params[key]}\n")


# ---------------------------------------------------------------------------
# Kinetic protein-interaction model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class KineticParams:
    """Oscillating production K(t) = K0*(1 + 0.5*cos(2*pi*t/tau_K + phase)),
    feedback dM = (K - f*(P+S) - gamma_M*M) dt, and first-order kinetics for
    P and S with per-step noise on both."""

    K0: float = 300.0
    tau_K: float = 0.2
    k_P: float = 150.0
    k_S: float = 150.0
    gamma_P: float = 70.0
    gamma_S: float = 70.0
    gamma_M: float = 80.0
    f: float = 2000.0
    noise: float = 0.5
    f_s: float = 1.0            # sampling rate [1/time]
    n_systems: int = 100
    n_samples: int = 100
    dt_sim: float = 1e-5
    standard_wiener: bool = False  # True: noise std 0.5*sqrt(dt); False: 0.5*dt
    oscillating: bool = True       # False freezes K at K0 (constant reference)
    zero_noise: bool = False

    def validate(self) -> None:
        rates = (self.f, self.gamma_M, self.gamma_P, self.gamma_S, self.k_P, self.k_S)
        if any(r <= 0 for r in rates):
            raise ValueError("all rates must be positive")
        if self.dt_sim * max(self.f, self.gamma_M, self.gamma_P, self.gamma_S) >= 0.1:
            raise ValueError(
                f"dt_sim={self.dt_sim} too large for the stiffest rate "
                f"(need dt_sim*max_rate < 0.1)")

    def reference_coefficient(self) -> float:
        """Quasi-static gain from K(t) to the regulated sum P+S."""
        inner = (self.gamma_M * self.gamma_P * self.gamma_S
                 / (self.k_P * self.gamma_S + self.k_S * self.gamma_P))
        return 1.0 / (self.f + inner)


def simulate_kinetic(params: KineticParams, seed: int) -> ObservationSet:
    """Euler-Maruyama integration of the feedback loop, subsampled at f_s."""
    params.validate()
    p = params
    n_sys, n_samp = p.n_systems, p.n_samples
    dt = p.dt_sim
    steps_per_sample = int(round(1.0 / (p.f_s * dt)))
    if steps_per_sample < 1:
        raise ValueError("f_s faster than the integration step")
    total_steps = steps_per_sample * n_samp

    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x6B696E]))
    phase = rng.uniform(0.0, np.pi, size=n_sys) if p.oscillating else np.zeros(n_sys)
    M = rng.uniform(0.02, 0.1, size=n_sys)
    P = rng.uniform(0.02, 0.1, size=n_sys)
    S = rng.uniform(0.02, 0.1, size=n_sys)

    if p.zero_noise:
        noise_std = 0.0
    elif p.standard_wiener:
        noise_std = p.noise * math.sqrt(dt)
    else:
        noise_std = p.noise * dt

    omega_k = 2.0 * np.pi / p.tau_K if p.oscillating else 0.0
    Z = np.empty((n_sys, n_samp, 2))
    c_star = np.empty((n_sys, n_samp))
    t_samples = np.arange(1, n_samp + 1) * (steps_per_sample * dt)

    chunk = 20_000
    sample_idx = 0
    err_state = np.errstate(invalid="ignore", over="ignore")  # blow-up is trapped below
    with err_state:
        for start in range(0, total_steps, chunk):
            n_block = min(chunk, total_steps - start)
            if noise_std > 0.0:
                xi = rng.standard_normal(size=(n_block, 2, n_sys)) * noise_std
            else:
                xi = None
            for j in range(n_block):
                step = start + j
                t = step * dt
                K = p.K0 * (1.0 + 0.5 * np.cos(omega_k * t + phase)) if p.oscillating \
                    else np.full(n_sys, p.K0)
                dM = (K - p.f * (P + S) - p.gamma_M * M) * dt
                dP = (p.k_P * M - p.gamma_P * P) * dt
                dS = (p.k_S * M - p.gamma_S * S) * dt
                if xi is not None:
                    dP = dP + xi[j, 0]
                    dS = dS + xi[j, 1]
                M = M + dM
                P = P + dP
                S = S + dS
                if (step + 1) % steps_per_sample == 0:
                    if not (np.all(np.isfinite(M)) and np.all(np.isfinite(P))
                            and np.all(np.isfinite(S))):
                        raise IntegrationUnstableError(
                            f"state blew up near t={t:.6g}; reduce dt_sim={dt}")
                    Z[:, sample_idx, 0] = P
                    Z[:, sample_idx, 1] = S
                    c_star[:, sample_idx] = P + S
                    sample_idx += 1

    systems = [SystemSeries(t=t_samples.copy(), z=Z[i].copy(), c_star=c_star[i].copy(),
                            meta={"phase": float(phase[i])})
               for i in range(n_sys)]
    return ObservationSet(systems=systems, feature_names=["P", "S"],
                          meta={"generator": "kinetic", "seed": seed})


# ---------------------------------------------------------------------------
# Bacterial life cycle (sizer division rule, OU threshold)
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BacteriaParams:
    """du = (mu_u - u)/tau_u dt + sqrt(2 sigma_u^2/tau_u) dW, cell grows as
    x_b * exp(alpha * (t - t_b)) and divides at the first crossing of u(t)."""

    mu_u: float = 1.0           # [um]
    sigma_u: float = 0.1        # [um]
    tau_u: float = 200.0        # [min]
    alpha_shape: float = 25.0
    alpha_scale: float = 9.4e-4  # [1/min]
    f_mean: float = 0.5
    f_std: float = 0.05
    x0_mean: float = 0.5        # [um]
    x0_std: float = 0.05
    n_lineages: int = 100
    generations: int = 100
    grid_dt: float = 0.1        # [min]
    crossing_horizon: float = 1000.0  # [min] per generation
    f_clip: tuple[float, float] = (0.05, 0.95)

    def validate(self) -> None:
        if self.tau_u <= 0 or self.grid_dt <= 0:
            raise ValueError("tau_u and grid_dt must be positive")
        if self.alpha_shape <= 0 or self.alpha_scale <= 0:
            raise ValueError("growth-rate Gamma parameters must be positive")


def _ou_exact_path(rng, n_steps: int, x0: float, mu: float, sigma: float,
                   tau: float, dt: float) -> np.ndarray:
    """Exact OU discretization: unconditionally stable, no grid bias.

    The AR(1) recursion dev_n = a*dev_{n-1} + s*xi_n is unrolled in chunks as
    dev_n = a^n*(dev_0 + s*sum_j a^(-j) xi_j); chunk length is capped so the
    a^(-j) factors stay O(e).
    """
    a = math.exp(-dt / tau)
    s = sigma * math.sqrt(1.0 - a * a)
    path = np.empty(n_steps + 1)
    path[0] = x0
    dev = x0 - mu
    chunk = max(1, min(4096, int(tau / dt)))
    pos = 0
    while pos < n_steps:
        n_block = min(chunk, n_steps - pos)
        xi = rng.standard_normal(n_block)
        j = np.arange(1, n_block + 1)
        devs = a ** j * (dev + s * np.cumsum(xi * a ** (-j)))
        path[pos + 1: pos + 1 + n_block] = mu + devs
        dev = devs[-1]
        pos += n_block
    return path


def simulate_bacteria(params: BacteriaParams, seed: int) -> ObservationSet:
    """Per-generation observations [x_b, alpha, T]; c* = x_b*exp(alpha*T)."""
    params.validate()
    p = params
    systems = []
    for lin in range(p.n_lineages):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0xBAC, lin]))
        u0 = rng.normal(p.mu_u, p.sigma_u) if p.sigma_u > 0 else p.mu_u
        # draw per-generation variates up front so the stream is stable
        alphas = rng.gamma(p.alpha_shape, p.alpha_scale, size=p.generations)
        fracs = np.clip(rng.normal(p.f_mean, p.f_std, size=p.generations),
                        *p.f_clip)
        x_birth = float(np.clip(rng.normal(p.x0_mean, p.x0_std), 1e-3, None))

        horizon_steps = int(round(6000.0 / p.grid_dt))
        u = _ou_exact_path(rng, horizon_steps, u0, p.mu_u, p.sigma_u, p.tau_u,
                           p.grid_dt)
        log_u = np.log(u)

        z = np.empty((p.generations, 3))
        c_star = np.empty(p.generations)
        t_div = np.empty(p.generations)
        u_at_div = np.empty(p.generations)
        t_b = 0.0
        for g in range(p.generations):
            alpha = float(alphas[g])
            i_b = int(round(t_b / p.grid_dt))
            max_steps = int(round(p.crossing_horizon / p.grid_dt))
            # extend the threshold path if this cycle runs past the grid
            while i_b + max_steps + 1 >= u.size:
                ext = _ou_exact_path(rng, horizon_steps, float(u[-1]), p.mu_u,
                                     p.sigma_u, p.tau_u, p.grid_dt)
                u = np.concatenate([u, ext[1:]])
                log_u = np.log(u)
            seg = slice(i_b, i_b + max_steps + 1)
            t_grid = np.arange(i_b, i_b + max_steps + 1) * p.grid_dt
            # h(t) = log x(t) - log u(t); first nonnegative grid point brackets
            # the crossing (log-linear interpolation is exact for constant u)
            h = math.log(x_birth) + alpha * (t_grid - t_b) - log_u[seg]
            above = h >= 0.0
            if not above.any():
                raise LineageStallError(
                    f"lineage {lin} generation {g}: no threshold crossing within "
                    f"{p.crossing_horizon} min")
            j = int(np.argmax(above))
            if j == 0:
                t_d = float(t_grid[0])
                lu_d = float(log_u[i_b])
            else:
                h0, h1 = h[j - 1], h[j]
                frac = (-h0) / (h1 - h0)
                t_d = float(t_grid[j - 1] + p.grid_dt * frac)
                lu_d = float(log_u[i_b + j - 1] * (1 - frac) + log_u[i_b + j] * frac)
            T_cycle = t_d - t_b
            x_div = x_birth * math.exp(alpha * T_cycle)
            z[g] = (x_birth, alpha, T_cycle)
            c_star[g] = x_div
            t_div[g] = t_d
            u_at_div[g] = math.exp(lu_d)
            x_birth = float(fracs[g]) * x_div
            t_b = t_d
        systems.append(SystemSeries(t=t_div.copy(), z=z, c_star=c_star,
                                    meta={"u0": float(u0),
                                          "u_at_division": u_at_div.copy()}))
    return ObservationSet(systems=systems, feature_names=["x_b", "alpha", "T"],
                          meta={"generator": "bacteria", "seed": seed})


# ---------------------------------------------------------------------------
# Feynman benchmark equations
# ---------------------------------------------------------------------------

FEYNMAN_EQUATIONS = ("I.12.11", "I.50.26", "II.6.15b")


@dataclass(frozen=True)
class FeynmanSpec:
    """Free observables ~ U[1,5] per step; per-system angular step in
    [0.1, 0.5] rad; the dependent variable is computed in closed form and
    stacked with the free observables."""

    equation: str = "II.6.15b"
    n_systems: int = 100
    n_samples: int = 100
    step_low: float = 0.1
    step_high: float = 0.5
    obs_low: float = 1.0
    obs_high: float = 5.0
    zero_b: bool = False   # I.12.11 degenerate toggle: B = 0 kills the oscillation

    def validate(self) -> None:
        if self.equation not in FEYNMAN_EQUATIONS:
            raise ValueError(f"unknown equation id {self.equation!r}; "
                             f"choose one of {FEYNMAN_EQUATIONS}")
        if not 0.0 < self.step_low <= self.step_high < math.pi:
            raise ValueError("angular step range must lie inside (0, pi)")


def dipole_field(eps, P_d, r, theta):
    """II.6.15b: transverse field of a spinning dipole."""
    return (3.0 / (4.0 * np.pi * eps)) * (P_d / r**3) * np.cos(theta) * np.sin(theta)


def charge_force(q, E_f, B, v, theta):
    """I.12.11: force on a charge in static plus oscillating fields."""
    return q * (E_f + B * v * np.sin(theta))


def nonlinear_response(x1, alpha, theta):
    """I.50.26: fundamental plus quadratic harmonic response."""
    return x1 * (np.cos(theta) + alpha * np.cos(theta) ** 2)


def simulate_feynman(spec: FeynmanSpec, seed: int) -> ObservationSet:
    spec.validate()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xFE1]))
    systems = []
    meta: dict = {"generator": f"feynman:{spec.equation}", "seed": seed}
    for sid in range(spec.n_systems):
        step = rng.uniform(spec.step_low, spec.step_high)
        t = np.arange(1, spec.n_samples + 1, dtype=float)
        theta = step * t
        u = lambda: rng.uniform(spec.obs_low, spec.obs_high, size=spec.n_samples)
        sys_meta = {"angular_step": float(step)}
        if spec.equation == "II.6.15b":
            eps, P_d, r = u(), u(), u()
            E_f = dipole_field(eps, P_d, r, theta)
            z = np.column_stack([E_f, eps, P_d, r])
            c_star = np.cos(theta) * np.sin(theta)
            features = ["E_f", "eps", "P_d", "r"]
        elif spec.equation == "I.12.11":
            q, E_f, v = u(), u(), u()
            B = np.zeros(spec.n_samples) if spec.zero_b else u()
            F = charge_force(q, E_f, B, v, theta)
            z = np.column_stack([F, q, E_f, B, v])
            if spec.zero_b:
                c_star = np.zeros(spec.n_samples)
                sys_meta["c_star_constant"] = True
                meta["c_star_constant"] = True
            else:
                c_star = np.sin(theta)
            features = ["F", "q", "E_f", "B", "v"]
        else:  # I.50.26
            alpha = rng.uniform(spec.obs_low, spec.obs_high)  # per-system constant
            x1 = u()
            x = nonlinear_response(x1, alpha, theta)
            z = np.column_stack([x, x1])
            c_star = np.cos(theta) + alpha * np.cos(theta) ** 2
            features = ["x", "x1"]
            sys_meta["alpha"] = float(alpha)
        systems.append(SystemSeries(t=t, z=z, c_star=c_star, meta=sys_meta))
    return ObservationSet(systems=systems, feature_names=features, meta=meta)
