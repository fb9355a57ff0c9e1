"""Benchmark dynamical systems, SDE simulation, and dataset generation.

Provides a small registry of ground-truth drift functions (bistable double
well, Van der Pol oscillator, a two-population neural rate model, a bistable
chemical reactor, plus linear and user-supplied drifts), an Euler--Maruyama
simulator with unit diffusion, Gaussian and point-process observation
samplers, and canned multi-trial dataset protocols used throughout the test
suite and the command-line tools.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .errors import DivergenceError, InvalidArgumentError
from .likelihoods import Dataset, TrialData

__all__ = [
    "DriftSpec",
    "LatentPath",
    "SimConfig",
    "drift_eval",
    "drift_jacobian",
    "simulate_sde",
    "sample_gaussian_obs",
    "sample_point_process",
    "make_dataset",
    "chemical_reaction_params",
    "PROTOCOLS",
]

# ---------------------------------------------------------------------------
# drift registry


_REQUIRED_PARAMS = {
    "double_well": frozenset(),
    "van_der_pol": frozenset({"rho", "tau"}),
    "neural_population": frozenset(
        {"b1", "b2", "z1", "z2", "w11", "w12", "w21", "w22"}
    ),
    "chemical_reaction": frozenset(
        {"I0", "k0", "V_A", "V_D", "F1", "F3", "F4", "k_a", "k_b", "S0"}
    ),
    "linear": frozenset({"A", "b"}),
    "custom": frozenset({"f", "jac", "dim"}),
}

# chemical_reaction may additionally carry an affine standardization of the
# state and a time compression factor; see chemical_reaction_params().
_OPTIONAL_PARAMS = {
    "chemical_reaction": frozenset({"mu", "scale", "time_scale"}),
}

_DIMS = {
    "double_well": 1,
    "van_der_pol": 2,
    "neural_population": 2,
    "chemical_reaction": 2,
}


@dataclass
class DriftSpec:
    """A named ground-truth drift with its parameter set.

    ``name`` selects one of the registered systems; ``params`` must supply
    exactly the keys that system requires (plus, for the chemical reactor,
    an optional affine standardization).  ``custom`` drifts provide
    callables ``f`` and ``jac`` and an explicit ``dim``.
    """

    name: str
    params: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.name not in _REQUIRED_PARAMS:
            raise InvalidArgumentError(
                "unknown drift name %r; expected one of %s"
                % (self.name, sorted(_REQUIRED_PARAMS))
            )
        required = _REQUIRED_PARAMS[self.name]
        optional = _OPTIONAL_PARAMS.get(self.name, frozenset())
        keys = set(self.params)
        missing = required - keys
        extra = keys - required - optional
        if missing:
            raise InvalidArgumentError(
                "drift %r missing params %s" % (self.name, sorted(missing))
            )
        if extra:
            raise InvalidArgumentError(
                "drift %r got unexpected params %s" % (self.name, sorted(extra))
            )
        if self.name == "linear":
            A = np.atleast_2d(np.asarray(self.params["A"], dtype=float))
            b = np.atleast_1d(np.asarray(self.params["b"], dtype=float))
            if A.shape[0] != A.shape[1] or b.shape != (A.shape[0],):
                raise InvalidArgumentError(
                    "linear drift needs square A and matching b, got %s / %s"
                    % (A.shape, b.shape)
                )
            self.params = {"A": A, "b": b}
        if self.name == "custom":
            if not callable(self.params["f"]) or not callable(self.params["jac"]):
                raise InvalidArgumentError("custom drift needs callable f and jac")
            if int(self.params["dim"]) < 1:
                raise InvalidArgumentError("custom drift dim must be positive")

    @property
    def dim(self) -> int:
        if self.name == "linear":
            return self.params["A"].shape[0]
        if self.name == "custom":
            return int(self.params["dim"])
        return _DIMS[self.name]


def _check_point(spec: DriftSpec, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != spec.dim:
        raise InvalidArgumentError(
            "state dimension %d does not match drift %r (dim %d)"
            % (x.shape[-1], spec.name, spec.dim)
        )
    return x


def _chem_raw_f(p: dict, u: np.ndarray, v: np.ndarray):
    """Reactor vector field in physical units; broadcasts over leading axes."""
    auto_u = (p["k_a"] * u + p["k_b"] * u**2) * (p["S0"] - u)
    auto_v = (p["k_a"] * v + p["k_b"] * v**2) * (p["S0"] - v)
    du = (
        auto_u
        + p["F1"] * p["I0"] / p["V_A"]
        - (p["F3"] + p["F4"]) * u / p["V_A"]
        + p["F4"] * v / p["V_A"]
    )
    dv = auto_v + p["F4"] * u / p["V_D"] - p["F4"] * v / p["V_D"]
    return du, dv


def _chem_raw_jac(p: dict, u: float, v: float) -> np.ndarray:
    def d_auto(w):
        return (p["k_a"] + 2.0 * p["k_b"] * w) * (p["S0"] - w) - (
            p["k_a"] * w + p["k_b"] * w**2
        )

    return np.array(
        [
            [d_auto(u) - (p["F3"] + p["F4"]) / p["V_A"], p["F4"] / p["V_A"]],
            [p["F4"] / p["V_D"], d_auto(v) - p["F4"] / p["V_D"]],
        ]
    )


def drift_eval(spec: DriftSpec, x: np.ndarray) -> np.ndarray:
    """Evaluate the drift at ``x``; extra leading axes broadcast."""
    x = _check_point(spec, x)
    p = spec.params
    if spec.name == "double_well":
        return 4.0 * x * (1.0 - x**2)
    if spec.name == "van_der_pol":
        rho, tau = p["rho"], p["tau"]
        f = np.empty_like(x)
        f[..., 0] = rho * tau * (x[..., 0] - x[..., 0] ** 3 / 3.0 - x[..., 1])
        f[..., 1] = (tau / rho) * x[..., 0]
        return f
    if spec.name == "neural_population":
        s1 = expit(p["b1"] * (p["w11"] * x[..., 0] - p["w12"] * x[..., 1] - p["z1"]))
        s2 = expit(p["b2"] * (p["w21"] * x[..., 0] - p["w22"] * x[..., 1] - p["z2"]))
        f = np.empty_like(x)
        f[..., 0] = -x[..., 0] + s1
        f[..., 1] = -x[..., 1] + s2
        return f
    if spec.name == "chemical_reaction":
        mu = np.asarray(p.get("mu", np.zeros(2)), dtype=float)
        sc = np.asarray(p.get("scale", np.ones(2)), dtype=float)
        ts = float(p.get("time_scale", 1.0))
        raw = mu + sc * x
        du, dv = _chem_raw_f(p, raw[..., 0], raw[..., 1])
        f = np.empty_like(x)
        f[..., 0] = ts * du / sc[0]
        f[..., 1] = ts * dv / sc[1]
        return f
    if spec.name == "linear":
        return -x @ p["A"].T + p["b"]
    return np.asarray(p["f"](x), dtype=float)


def drift_jacobian(spec: DriftSpec, x: np.ndarray) -> np.ndarray:
    """Jacobian of the drift at a single point ``x``, shape (K, K)."""
    x = _check_point(spec, x)
    if x.ndim != 1:
        raise InvalidArgumentError("drift_jacobian expects a single point")
    p = spec.params
    if spec.name == "double_well":
        return np.array([[4.0 - 12.0 * x[0] ** 2]])
    if spec.name == "van_der_pol":
        rho, tau = p["rho"], p["tau"]
        return np.array(
            [[rho * tau * (1.0 - x[0] ** 2), -rho * tau], [tau / rho, 0.0]]
        )
    if spec.name == "neural_population":
        a1 = p["b1"] * (p["w11"] * x[0] - p["w12"] * x[1] - p["z1"])
        a2 = p["b2"] * (p["w21"] * x[0] - p["w22"] * x[1] - p["z2"])
        s1, s2 = expit(a1), expit(a2)
        g1 = p["b1"] * s1 * (1.0 - s1)
        g2 = p["b2"] * s2 * (1.0 - s2)
        return np.array(
            [
                [-1.0 + g1 * p["w11"], -g1 * p["w12"]],
                [g2 * p["w21"], -1.0 - g2 * p["w22"]],
            ]
        )
    if spec.name == "chemical_reaction":
        mu = np.asarray(p.get("mu", np.zeros(2)), dtype=float)
        sc = np.asarray(p.get("scale", np.ones(2)), dtype=float)
        ts = float(p.get("time_scale", 1.0))
        raw = mu + sc * x
        J = _chem_raw_jac(p, raw[0], raw[1])
        # f_i(z) = ts/s_i * F_i(mu + s*z)  =>  dJ_ij = ts * (s_j/s_i) * J_ij
        return ts * (sc[None, :] / sc[:, None]) * J
    if spec.name == "linear":
        return -p["A"]
    return np.asarray(p["jac"](x), dtype=float)


def chemical_reaction_params() -> dict:
    """Physical constants of the bistable reactor in its published units."""
    I0 = 4.4e-5
    k0 = 2.7e-3
    V_A = 40.0
    F3 = k0 * V_A
    return {
        "I0": I0,
        "k0": k0,
        "V_A": V_A,
        "V_D": 1.0,
        "F1": F3 / 2.0,
        "F3": F3,
        "F4": 3.25e-3,
        "k_a": 2.1425e-1,
        "k_b": 2.1425e4,
        "S0": 0.5 * (I0 + 1.42e-3),
    }


# ---------------------------------------------------------------------------
# simulation


@dataclass
class LatentPath:
    """A simulated latent trajectory on a uniform grid."""

    times: np.ndarray
    X: np.ndarray

    def __post_init__(self) -> None:
        self.times = np.asarray(self.times, dtype=float)
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        if self.X.shape[0] != self.times.shape[0]:
            raise InvalidArgumentError("times and states disagree in length")

    @property
    def dim(self) -> int:
        return self.X.shape[1]


@dataclass
class SimConfig:
    """Controls for multi-trial simulation."""

    n_trials: int = 20
    span: float = 1.0
    sim_step: float = 1.0e-4
    n_obs: int = 20

    def __post_init__(self) -> None:
        if self.n_trials < 1:
            raise InvalidArgumentError("n_trials must be positive")
        if self.span <= 0.0:
            raise InvalidArgumentError("span must be positive")
        if self.sim_step <= 0.0:
            raise InvalidArgumentError("sim_step must be positive")
        if self.n_obs < 1:
            raise InvalidArgumentError("n_obs must be positive")


def simulate_sde(
    spec: DriftSpec,
    x0: np.ndarray,
    span: float,
    sim_step: float = 1.0e-4,
    seed: int = 0,
    noise_scale: float = 1.0,
) -> LatentPath:
    """Euler--Maruyama integration of dx = f(x) dt + noise_scale dW.

    The diffusion is the identity scaled by ``noise_scale`` (set it to zero
    to integrate the underlying ODE).  A non-finite state anywhere along the
    path raises a divergence error carrying the first offending step index.
    """
    x0 = np.atleast_1d(np.asarray(x0, dtype=float))
    if x0.shape != (spec.dim,):
        raise InvalidArgumentError(
            "x0 has shape %s but drift %r has dim %d" % (x0.shape, spec.name, spec.dim)
        )
    if span <= 0.0 or sim_step <= 0.0:
        raise InvalidArgumentError("span and sim_step must be positive")
    steps = int(round(span / sim_step))
    if steps < 1:
        raise InvalidArgumentError("span shorter than one simulation step")
    rng = np.random.default_rng(seed)
    incr = noise_scale * np.sqrt(sim_step) * rng.standard_normal((steps, spec.dim))
    X = np.empty((steps + 1, spec.dim))
    X[0] = x0
    for r in range(steps):
        X[r + 1] = X[r] + sim_step * drift_eval(spec, X[r]) + incr[r]
    bad = ~np.isfinite(X).all(axis=1)
    if bad.any():
        first = int(np.argmax(bad))
        raise DivergenceError(
            "simulated path left the finite domain at step %d" % first, step=first
        )
    times = sim_step * np.arange(steps + 1)
    return LatentPath(times, X)


def _downsample(path: LatentPath, target_step: float = 1.0e-3):
    """Thin the simulation grid to roughly ``target_step`` for storage."""
    stride = max(1, int(round(target_step / (path.times[1] - path.times[0]))))
    return path.times[::stride].copy(), path.X[::stride].copy()


def sample_gaussian_obs(
    path: LatentPath,
    C: np.ndarray,
    d: np.ndarray,
    Gamma,
    n_obs: int,
    seed: int = 0,
) -> TrialData:
    """Draw noisy linear readouts at uniformly random interior grid times."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    d = np.atleast_1d(np.asarray(d, dtype=float))
    if C.shape[1] != path.dim or d.shape != (C.shape[0],):
        raise InvalidArgumentError("readout shapes do not match the path")
    gamma = np.broadcast_to(np.asarray(Gamma, dtype=float), (C.shape[0],)).copy()
    if (gamma < 0.0).any():
        raise InvalidArgumentError("observation noise variances must be nonnegative")
    interior = np.arange(1, path.times.size - 1)
    if n_obs > interior.size:
        raise InvalidArgumentError(
            "requested %d observation times but the grid has only %d interior nodes"
            % (n_obs, interior.size)
        )
    rng = np.random.default_rng(seed)
    idx = np.unique(rng.choice(interior, size=n_obs, replace=False))
    while idx.size < n_obs:  # pragma: no cover - choice without replacement
        idx = np.unique(np.concatenate([idx, rng.choice(interior, size=n_obs)]))[:n_obs]
    idx.sort()
    t_obs = path.times[idx]
    mean = path.X[idx] @ C.T + d
    Y = (mean + np.sqrt(gamma) * rng.standard_normal(mean.shape)).T
    tt, tx = _downsample(path)
    span = (float(path.times[0]), float(path.times[-1]))
    return TrialData(span=span, times=t_obs, Y=Y, true_path=tx, true_times=tt)


def sample_point_process(
    path: LatentPath,
    C: np.ndarray,
    d: np.ndarray,
    seed: int = 0,
) -> TrialData:
    """Sample event times from channel rates exp(C x(t) + d) by thinning."""
    C = np.atleast_2d(np.asarray(C, dtype=float))
    d = np.atleast_1d(np.asarray(d, dtype=float))
    if C.shape[1] != path.dim or d.shape != (C.shape[0],):
        raise InvalidArgumentError("readout shapes do not match the path")
    rng = np.random.default_rng(seed)
    t_end = float(path.times[-1])
    log_rate_grid = path.X @ C.T + d
    events = []
    for n in range(C.shape[0]):
        bound = 1.01 * float(np.exp(log_rate_grid[:, n]).max())
        if bound == 0.0 or not np.isfinite(bound):
            if not np.isfinite(bound):
                raise DivergenceError("event-rate bound overflowed", step=-1)
            events.append(np.empty(0))
            continue
        n_prop = rng.poisson(bound * t_end)
        props = np.sort(rng.uniform(0.0, t_end, size=n_prop))
        rate = np.exp(np.interp(props, path.times, log_rate_grid[:, n]))
        keep = rng.uniform(0.0, 1.0, size=n_prop) < rate / bound
        events.append(props[keep])
    tt, tx = _downsample(path)
    return TrialData(span=(float(path.times[0]), t_end), times=None, Y=None,
                     events=events, true_path=tx, true_times=tt)


# ---------------------------------------------------------------------------
# canned dataset protocols


def _neural_params(regime: str) -> dict:
    if regime == "A":
        return {
            "b1": 1.9,
            "b2": 0.5,
            "z1": 3.0,
            "z2": 3.9,
            "w11": 10.0,
            "w12": 5.0,
            "w21": 9.0,
            "w22": 3.0,
        }
    return {
        "b1": 0.4,
        "b2": 0.6,
        "z1": 1.7,
        "z2": 7.0,
        "w11": 20.0,
        "w12": 16.0,
        "w21": 21.0,
        "w22": 6.0,
    }


def _absorption_matrix() -> np.ndarray:
    """13-channel absorption readout shipped with the package."""
    fixture = Path(__file__).parent / "data" / "chem_absorption.csv"
    with open(fixture, newline="") as fh:
        rows = [[float(v) for v in row] for row in csv.reader(fh)]
    C = np.asarray(rows, dtype=float)
    if C.shape != (13, 2):
        raise InvalidArgumentError("absorption fixture must be 13 x 2")
    return C


def _chemical_standardization(p: dict, time_scale: float):
    """Affine state rescaling fitted to deterministic pilot trajectories.

    Integrates the reactor ODE from nine symmetric starts spanning the
    physical range, pools the visited states, and returns per-coordinate
    mean and standard deviation.  Deterministic by construction.
    """
    starts = np.linspace(p["I0"], p["S0"], 9)
    x = np.stack([starts, starts], axis=1)
    h = 0.05
    steps = int(round(time_scale / h))
    keep = [x.copy()]
    for r in range(steps):
        du, dv = _chem_raw_f(p, x[:, 0], x[:, 1])
        x = x + h * np.stack([du, dv], axis=1)
        if r % 10 == 9:
            keep.append(x.copy())
    pool = np.concatenate(keep, axis=0)
    mu = pool.mean(axis=0)
    sd = pool.std(axis=0)
    return mu, sd


def _truth_block(spec: DriftSpec, C, d, Gamma) -> dict:
    params = {}
    for key, val in spec.params.items():
        if isinstance(val, np.ndarray):
            params[key] = val.tolist()
        else:
            params[key] = float(val)
    out = {"drift_name": spec.name, "params": params, "C": np.asarray(C).tolist(),
           "d": np.asarray(d).tolist()}
    if Gamma is not None:
        out["Gamma"] = np.asarray(Gamma).tolist()
    return out


def _gaussian_protocol(spec, n_trials, n_obs, n_channels, gamma, x0_sd, seed):
    children = np.random.SeedSequence(seed).spawn(2 * n_trials + 1)
    master = np.random.default_rng(children[0])
    C = master.standard_normal((n_channels, spec.dim))
    d = master.standard_normal(n_channels)
    x0s = x0_sd * master.standard_normal((n_trials, spec.dim))
    trials = []
    for i in range(n_trials):
        path = simulate_sde(spec, x0s[i], span=1.0, sim_step=1.0e-4, seed=children[1 + 2 * i])
        trials.append(
            sample_gaussian_obs(path, C, d, gamma, n_obs, seed=children[2 + 2 * i])
        )
    return trials, C, d, gamma * np.ones(n_channels)


def make_dataset(protocol: str, seed: int = 0, n_trials: int | None = None) -> Dataset:
    """Generate one of the canned benchmark datasets.

    Protocols: ``double_well`` (1-D bistable, 15 Gaussian channels),
    ``van_der_pol`` (2-D relaxation oscillator, 20 Gaussian channels),
    ``neural_pop_A`` / ``neural_pop_B`` (2-D rate model, 50 spiking
    channels; the regimes differ in their fixed-point structure), and
    ``chemical`` (standardized bistable reactor observed through 13
    absorption channels).  Per-trial randomness is derived from
    ``seed`` through independent child sequences, so individual trials are
    reproducible regardless of how many are drawn.
    """
    if protocol == "double_well":
        spec = DriftSpec("double_well")
        n = 20 if n_trials is None else n_trials
        trials, C, d, gam = _gaussian_protocol(spec, n, 20, 15, 0.25, 0.5, seed)
        truth = _truth_block(spec, C, d, gam)
        return Dataset(trials, span=(0.0, 1.0), observation_kind="gaussian",
                       protocol=protocol, seed=seed, truth=truth)
    if protocol == "van_der_pol":
        spec = DriftSpec("van_der_pol", {"rho": 2.0, "tau": 15.0})
        n = 20 if n_trials is None else n_trials
        trials, C, d, gam = _gaussian_protocol(spec, n, 20, 20, 2.25, 0.5, seed)
        truth = _truth_block(spec, C, d, gam)
        return Dataset(trials, span=(0.0, 1.0), observation_kind="gaussian",
                       protocol=protocol, seed=seed, truth=truth)
    if protocol in ("neural_pop_A", "neural_pop_B"):
        regime = protocol[-1]
        spec = DriftSpec("neural_population", _neural_params(regime))
        n = 25 if n_trials is None else n_trials
        children = np.random.SeedSequence(seed).spawn(2 * n + 1)
        master = np.random.default_rng(children[0])
        C = 0.5 * master.standard_normal((50, 2))
        d = np.log(25.0) + 0.3 * master.standard_normal(50)
        x0s = 0.5 + 0.3 * master.standard_normal((n, 2))
        trials = []
        for i in range(n):
            path = simulate_sde(spec, x0s[i], span=1.0, sim_step=1.0e-4,
                                seed=children[1 + 2 * i])
            trials.append(sample_point_process(path, C, d, seed=children[2 + 2 * i]))
        truth = _truth_block(spec, C, d, None)
        return Dataset(trials, span=(0.0, 1.0), observation_kind="point_process",
                       protocol=protocol, seed=seed, truth=truth)
    if protocol == "chemical":
        raw = chemical_reaction_params()
        time_scale = 300.0
        mu, sd = _chemical_standardization(raw, time_scale)
        params = dict(raw)
        params["mu"] = mu
        params["scale"] = sd
        params["time_scale"] = time_scale
        spec = DriftSpec("chemical_reaction", params)
        n = 20 if n_trials is None else n_trials
        C = _absorption_matrix()
        d = np.zeros(13)
        gamma = 0.01
        children = np.random.SeedSequence(seed).spawn(2 * n + 1)
        master = np.random.default_rng(children[0])
        raw0 = master.uniform(raw["I0"], raw["S0"], size=(n, 2))
        z0s = (raw0 - mu) / sd
        trials = []
        for i in range(n):
            path = simulate_sde(spec, z0s[i], span=1.0, sim_step=1.0e-4,
                                seed=children[1 + 2 * i])
            trials.append(
                sample_gaussian_obs(path, C, d, gamma, 50, seed=children[2 + 2 * i])
            )
        truth = _truth_block(spec, C, d, gamma * np.ones(13))
        return Dataset(trials, span=(0.0, 1.0), observation_kind="gaussian",
                       protocol=protocol, seed=seed, truth=truth)
    raise InvalidArgumentError("unknown protocol %r" % (protocol,))


PROTOCOLS = ("double_well", "van_der_pol", "neural_pop_A", "neural_pop_B", "chemical")
