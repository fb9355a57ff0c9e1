"""Observation models: Gaussian with affine mean, and Poisson processes with
exponential link.

Expected log-likelihoods are taken under the path marginals q_x(t) and split
— following the smoother's needs — into a part that is continuous in time
(only the Poisson intensity integral) and jump parts tied to observation or
event times.  Jump contributions are aggregated onto their nearest inference
grid index, which is where the backward pass injects them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError
from .numerics import TimeGrid, trapezoid_weights

__all__ = [
    "OutputMapGaussian",
    "OutputMapPoisson",
    "LikelihoodGradients",
    "TrialData",
    "snap_times",
    "gaussian_expected_ll",
    "gaussian_update_Cd",
    "gaussian_update_noise",
    "poisson_expected_ll",
    "expected_ll",
]


@dataclass
class OutputMapGaussian:
    """y_i = C x(t_i) + d + ε,  ε ~ N(0, diag(Gamma))."""

    C: np.ndarray       # (N, K)
    d: np.ndarray       # (N,)
    Gamma: np.ndarray   # (N,)

    def __post_init__(self):
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.d = np.atleast_1d(np.asarray(self.d, dtype=float))
        self.Gamma = np.atleast_1d(np.asarray(self.Gamma, dtype=float))
        n = self.C.shape[0]
        if self.d.shape != (n,) or self.Gamma.shape != (n,):
            raise InvalidArgumentError("C, d, Gamma row counts disagree")
        if np.any(self.Gamma <= 0):
            raise InvalidArgumentError("observation variances must be positive")

    @property
    def n_channels(self) -> int:
        return self.C.shape[0]


@dataclass
class OutputMapPoisson:
    """Event intensity η_n(t) = exp(c_nᵀ x(t) + d_n) per channel."""

    C: np.ndarray       # (N, K)
    d: np.ndarray       # (N,)

    def __post_init__(self):
        self.C = np.atleast_2d(np.asarray(self.C, dtype=float))
        self.d = np.atleast_1d(np.asarray(self.d, dtype=float))
        if self.d.shape != (self.C.shape[0],):
            raise InvalidArgumentError("C, d row counts disagree")
        if not (np.all(np.isfinite(self.C)) and np.all(np.isfinite(self.d))):
            raise InvalidArgumentError("output map entries must be finite")

    @property
    def n_channels(self) -> int:
        return self.C.shape[0]


@dataclass
class TrialData:
    """One trial's observations over a time window.

    Exactly one of the two observation styles is populated: ``times``/``Y``
    for vector-valued samples, or ``events`` (one sorted array of event times
    per channel) for point-process data.  ``true_path``/``true_times`` carry
    the simulated latent trajectory for evaluation only and play no role in
    fitting.
    """

    span: tuple
    times: np.ndarray | None = None     # (T,)
    Y: np.ndarray | None = None         # (N, T)
    events: list | None = None          # N arrays of event times
    true_path: np.ndarray | None = None
    true_times: np.ndarray | None = None

    def __post_init__(self):
        t0, t_end = float(self.span[0]), float(self.span[1])
        if not t_end > t0:
            raise InvalidArgumentError("trial span must have t_end > t0")
        self.span = (t0, t_end)
        has_gauss = self.times is not None or self.Y is not None
        has_events = self.events is not None
        if has_gauss == has_events:
            raise InvalidArgumentError(
                "provide either times/Y or events, not both"
            )
        tol = 1e-9 * max(1.0, abs(t_end))
        if has_gauss:
            self.times = np.atleast_1d(np.asarray(self.times, dtype=float))
            self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
            order = np.argsort(self.times, kind="stable")
            self.times = self.times[order]
            self.Y = self.Y[:, order]
            if self.Y.shape[1] != self.times.size:
                raise InvalidArgumentError(
                    "Y column count must equal the number of times"
                )
            if self.times.size and (self.times[0] < t0 - tol
                                    or self.times[-1] > t_end + tol):
                raise InvalidArgumentError("observation time outside span")
        else:
            self.events = [
                np.sort(np.atleast_1d(np.asarray(ev, dtype=float)))
                for ev in self.events
            ]
            for ev in self.events:
                if ev.size and (ev[0] < t0 - tol or ev[-1] > t_end + tol):
                    raise InvalidArgumentError("event time outside span")

    @property
    def observation_kind(self) -> str:
        return "gaussian" if self.events is None else "point_process"

    @property
    def n_channels(self) -> int:
        if self.events is None:
            return self.Y.shape[0]
        return len(self.events)


@dataclass
class Dataset:
    """A collection of trials plus the metadata needed to refit or score it.

    ``truth`` optionally carries the generating model (drift name and
    parameters, output map, noise, latent paths) for simulated data; fits
    may use its output map as the initialization but never its dynamics.
    """

    trials: list
    span: tuple
    observation_kind: str
    protocol: str | None = None
    seed: int | None = None
    truth: dict | None = None

    def __post_init__(self):
        if not self.trials:
            raise InvalidArgumentError("dataset needs at least one trial")
        self.span = (float(self.span[0]), float(self.span[1]))
        for i, trial in enumerate(self.trials):
            if trial.observation_kind != self.observation_kind:
                raise InvalidArgumentError(
                    f"trial {i} is {trial.observation_kind}, dataset says "
                    f"{self.observation_kind}"
                )

    @property
    def n_trials(self) -> int:
        return len(self.trials)


@dataclass
class LikelihoodGradients:
    """∂(expected log-likelihood)/∂(m_r, S_r) split into parts.

    ``m_cont``/``S_cont`` are densities in time sampled on the grid (None
    when the model has no continuous term).  ``m_jump``/``S_jump`` hold the
    summed jump contributions per grid index — plain additive gradients, not
    densities.
    """

    m_cont: np.ndarray | None    # (R+1, K) or None
    S_cont: np.ndarray | None    # (R+1, K, K) or None
    m_jump: np.ndarray           # (R+1, K)
    S_jump: np.ndarray           # (R+1, K, K)


def snap_times(grid: TimeGrid, times: np.ndarray) -> np.ndarray:
    """Nearest grid indices for observation/event times; out-of-span errors."""
    t = np.atleast_1d(np.asarray(times, dtype=float))
    tol = 1e-9 * max(1.0, abs(grid.t_end))
    if t.size and (t.min() < grid.t0 - tol or t.max() > grid.t_end + tol):
        raise InvalidArgumentError(
            f"observation time outside grid span [{grid.t0}, {grid.t_end}]"
        )
    return grid.nearest_index(t)


def gaussian_expected_ll(omap: OutputMapGaussian, times: np.ndarray,
                         Y: np.ndarray, grid: TimeGrid, means: np.ndarray,
                         covs: np.ndarray):
    """E_q[log N(y_i | C x_i + d, Γ)] summed over observations.

    ``Y`` is (N, T) with one column per observation time.  Marginals are the
    full-grid arrays; observations are evaluated at their snapped indices.
    Returns (value, LikelihoodGradients).
    """
    idx = snap_times(grid, times)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if Y.shape != (omap.n_channels, idx.size):
        raise InvalidArgumentError(
            f"Y shape {Y.shape} != (channels, times) {(omap.n_channels, idx.size)}"
        )
    C, d, gam = omap.C, omap.d, omap.Gamma
    K = C.shape[1]
    m_obs = means[idx]                                     # (T, K)
    S_obs = covs[idx]                                      # (T, K, K)
    resid = Y.T - m_obs @ C.T - d                          # (T, N)
    quad = np.einsum("nk,tkl,nl->tn", C, S_obs, C)         # c_nᵀ S_t c_n
    value = -0.5 * float(
        np.sum(np.log(2.0 * np.pi * gam)) * idx.size
        + np.sum((resid**2 + quad) / gam)
    )
    gm = (resid / gam) @ C                                 # (T, K)
    gS_common = -0.5 * (C.T / gam) @ C                     # (K, K), same ∀ obs
    m_jump = np.zeros((grid.n_points, K))
    S_jump = np.zeros((grid.n_points, K, K))
    np.add.at(m_jump, idx, gm)
    np.add.at(S_jump, idx, np.broadcast_to(gS_common, (idx.size, K, K)))
    return value, LikelihoodGradients(None, None, m_jump, S_jump)


def gaussian_update_Cd(Y: np.ndarray, means: np.ndarray, covs: np.ndarray):
    """Joint stationary point (C*, d*) of the expected log-likelihood.

    ``Y`` is (N, T) pooled over trials, ``means``/``covs`` the matching
    marginals.  Solved in one shot by centering: with ȳ, m̄ the averages,
    C* [Σ S + Σ (m−m̄)(m−m̄)ᵀ] = Σ (y−ȳ)(m−m̄)ᵀ and d* = ȳ − C* m̄.
    """
    from .numerics import psd_solve

    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    T = Y.shape[1]
    if T == 0:
        raise InvalidArgumentError("no observations")
    ybar = Y.mean(axis=1)
    mbar = means.mean(axis=0)
    dm = means - mbar
    lhs = covs.sum(axis=0) + dm.T @ dm
    rhs = dm.T @ (Y.T - ybar)                              # (K, N)
    C = psd_solve(lhs, rhs).T
    return C, ybar - C @ mbar


def gaussian_update_noise(omap_C: np.ndarray, omap_d: np.ndarray,
                          Y: np.ndarray, means: np.ndarray, covs: np.ndarray,
                          floor: float = 1e-8) -> np.ndarray:
    """Stationary diagonal noise: Γ_n = mean_i E_q[(y_{n,i} − c_nᵀx_i − d_n)²]."""
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    resid = Y.T - means @ omap_C.T - omap_d                # (T, N)
    quad = np.einsum("nk,tkl,nl->tn", omap_C, covs, omap_C)
    return np.maximum((resid**2 + quad).mean(axis=0), floor)


def poisson_expected_ll(omap: OutputMapPoisson, events: list, grid: TimeGrid,
                        means: np.ndarray, covs: np.ndarray):
    """Expected Poisson-process log-likelihood and its gradient parts.

    ``events`` holds one array of event times per channel.  The intensity
    integral −Σ_n ∫ exp(d_n + c_nᵀm + ½ c_nᵀS c_n) dt is accumulated by the
    trapezoid rule on the inference grid; event terms use snapped indices.
    """
    C, d = omap.C, omap.d
    N, K = C.shape
    if len(events) != N:
        raise InvalidArgumentError(
            f"{len(events)} event lists for {N} channels"
        )
    log_rate = d + means @ C.T + 0.5 * np.einsum(
        "nk,tkl,nl->tn", C, covs, C
    )                                                      # (R+1, N)
    rate = np.exp(log_rate)
    w = trapezoid_weights(grid)
    value = -float(w @ rate.sum(axis=1))
    m_cont = -rate @ C                                     # (R+1, K)
    S_cont = -0.5 * np.einsum("tn,nk,nl->tkl", rate, C, C)
    m_jump = np.zeros((grid.n_points, K))
    S_jump = np.zeros((grid.n_points, K, K))
    for n, ev in enumerate(events):
        ev = np.atleast_1d(np.asarray(ev, dtype=float))
        if ev.size == 0:
            continue
        idx = snap_times(grid, ev)
        value += float(np.sum(means[idx] @ C[n] + d[n]))
        np.add.at(m_jump, idx, np.broadcast_to(C[n], (idx.size, K)))
    return value, LikelihoodGradients(m_cont, S_cont, m_jump, S_jump)


def expected_ll(omap, trial: TrialData, grid: TimeGrid, means: np.ndarray,
                covs: np.ndarray):
    """Dispatch on the observation style of a trial."""
    if trial.observation_kind == "gaussian":
        if not isinstance(omap, OutputMapGaussian):
            raise InvalidArgumentError(
                "Gaussian trial requires OutputMapGaussian"
            )
        return gaussian_expected_ll(
            omap, trial.times, trial.Y, grid, means, covs
        )
    if not isinstance(omap, OutputMapPoisson):
        raise InvalidArgumentError(
            "point-process trial requires OutputMapPoisson"
        )
    return poisson_expected_ll(omap, trial.events, grid, means, covs)
