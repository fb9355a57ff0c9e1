"""Outer variational-Bayes loop for the latent SDE model.

One outer iteration runs four phases: (1) per-trial smoothing of the
latent paths, (2) closed-form updates of the drift posterior (inducing
covariances, then inducing means jointly with the fixed-point
Jacobians — or the sparse / linear variant), (3) closed-form output-map
updates, (4) finite-difference ascent on the kernel hyperparameters,
fixed-point locations and fixed-point noises α.

All path integrals entering the closed forms use the same trapezoid rule
as the free-energy evaluation, so every update is exactly stationary for
the objective that the fit reports; a Gauss–Legendre alternative is
available for the time integrals but is not the default for that reason.
"""

from __future__ import annotations

import time
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    DynamicsModel,
    FixedPointSet,
    InducingSet,
    JacobianSet,
    LinearDynamics,
    build_prior,
)
from .errors import DivergenceError, InvalidArgumentError, NumericalError
from .inference import (
    InitialState,
    SmootherConfig,
    free_energy,
    smooth_trial,
)
from .kernels import ExpectationWorkspace, FeatureLayout, GaussianMoment, KernelSpec
from .likelihoods import (
    OutputMapGaussian,
    OutputMapPoisson,
    gaussian_update_Cd,
    gaussian_update_noise,
    snap_times,
)
from .numerics import CholeskyFactor, gauss_legendre, interp_linear, sym, trapezoid_weights

__all__ = [
    "SufficientStats",
    "FitConfig",
    "FitReport",
    "FitResult",
    "accumulate_stats",
    "expected_path_kl",
    "update_inducing_cov",
    "update_inducing_means_jacobians",
    "update_sparse_plain",
    "update_linear_dynamics",
    "optimize_hyperparameters",
    "fit",
]

_CHUNK = 4096          # nodes per expectation-workspace block


@dataclass
class SufficientStats:
    """Path-posterior integrals entering the closed-form drift updates.

    All three arrays live in feature (ψ) space with P = M + L + LK rows;
    the updates map them through (K^θ)⁻¹ as needed.  ``t_total`` is the
    summed trial duration and ``const_abm`` the integrated control-only
    part of the path-KL density, tr(AᵀAS) + ‖Am − b‖²; both let the full
    ℰ be reassembled from the stats without touching the paths again.
    """

    int_outer: np.ndarray       # (P, P)  ∫⟨ψψᵀ⟩
    int_feat_fq: np.ndarray     # (P, K)  ∫⟨ψ⟩⟨f_q⟩ᵀ, ⟨f_q⟩ = −Am + b
    int_jacS: np.ndarray        # (P, K)  ∫⟨∇ψ⟩ S Aᵀ
    t_total: float
    const_abm: float

    @staticmethod
    def zeros(P: int, K: int) -> "SufficientStats":
        return SufficientStats(np.zeros((P, P)), np.zeros((P, K)),
                               np.zeros((P, K)), 0.0, 0.0)


def _path_nodes(path, quadrature: str):
    """Integration nodes (q, weights, ⟨f_q⟩, AS) for one trial's path."""
    grid = path.grid
    if quadrature == "trapezoid":
        w = trapezoid_weights(grid)
        m, S, A, b = path.m, path.S, path.A, path.b
    elif quadrature == "gauss_legendre":
        n = min(3 * grid.steps, 2000)
        quad = gauss_legendre(grid.t0, grid.t_end, n)
        w = quad.weights
        m = interp_linear(grid, path.m, quad.nodes)
        S = interp_linear(grid, path.S, quad.nodes)
        A = interp_linear(grid, path.A, quad.nodes)
        b = interp_linear(grid, path.b, quad.nodes)
    else:
        raise InvalidArgumentError(
            f"unknown quadrature {quadrature!r}; "
            "use 'trapezoid' or 'gauss_legendre'"
        )
    fq = b - np.einsum("rjk,rk->rj", A, m)
    AS = np.einsum("rjk,rkl->rjl", A, S)
    return m, S, w, fq, AS


def _integrate_features(kernel: KernelSpec, Z: np.ndarray,
                        fp_locations: np.ndarray, m, S, w, fq, AS):
    """Weighted feature integrals over one batch of Gaussian nodes."""
    L = fp_locations.shape[0] if fp_locations.size else 0
    layout = FeatureLayout(M=Z.shape[0], L=L, K=kernel.dim)
    P = layout.total
    K = kernel.dim
    io = np.zeros((P, P))
    iff = np.zeros((P, K))
    ijs = np.zeros((P, K))
    for lo in range(0, m.shape[0], _CHUNK):
        hi = min(lo + _CHUNK, m.shape[0])
        q = GaussianMoment(m[lo:hi], S[lo:hi])
        ws = ExpectationWorkspace(kernel, layout, q, Z, fp_locations)
        wb = w[lo:hi]
        io += np.einsum("r,rpq->pq", wb, ws.outer())
        iff += np.einsum("r,rp,rj->pj", wb, ws.values(), fq[lo:hi])
        ijs += np.einsum("r,rpk,rjk->pj", wb, ws.jac(), AS[lo:hi])
    return sym(io), iff, ijs


def accumulate_stats(paths, dynamics: DynamicsModel,
                     quadrature: str = "trapezoid") -> SufficientStats:
    """Sum the drift-update integrals over all trials' path posteriors.

    The trapezoid rule reuses the inference grid directly; the
    Gauss–Legendre mode re-samples (m, S, A, b) by linear interpolation
    onto min(3·steps, 2000) nodes per trial.
    """
    kernel = dynamics.kernel
    lay = dynamics.layout
    stats = SufficientStats.zeros(lay.total, lay.K)
    Z = dynamics.inducing.Z
    fp = dynamics.fixed_points.locations if lay.L else np.zeros((0, lay.K))
    for path in paths:
        m, S, w, fq, AS = _path_nodes(path, quadrature)
        io, iff, ijs = _integrate_features(kernel, Z, fp, m, S, w, fq, AS)
        stats.int_outer += io
        stats.int_feat_fq += iff
        stats.int_jacS += ijs
        stats.t_total += float(np.sum(w))
        c = -fq
        stats.const_abm += float(
            w @ (np.einsum("rj,rj->r", c, c)
                 + _tr_aas(path, quadrature, S, AS))
        )
    stats.int_outer = sym(stats.int_outer)
    return stats


def _tr_aas(path, quadrature, S_nodes, AS_nodes):
    """tr(AᵀAS) per node for either node set."""
    if quadrature == "trapezoid":
        return np.einsum("rjk,rjl,rkl->r", path.A, path.A, path.S)
    grid = path.grid
    n = AS_nodes.shape[0]
    quad = gauss_legendre(grid.t0, grid.t_end, n)
    A = interp_linear(grid, path.A, quad.nodes)
    return np.einsum("rjk,rjl,rkl->r", A, A, S_nodes)


def expected_path_kl(stats: SufficientStats, dynamics) -> float:
    """ℰ summed over trials, reassembled from the sufficient statistics.

    Agrees with the per-node path-KL density integrated by the same
    quadrature; lets the learning phases re-evaluate the objective after
    a parameter change without revisiting the paths.
    """
    K = dynamics.latent_dim
    W = dynamics.second_moment_weight()
    beta = dynamics.beta()
    return (
        0.5 * K * dynamics.kernel.signal_var * stats.t_total
        + 0.5 * float(np.sum(W * stats.int_outer))
        + float(np.sum(beta * (stats.int_jacS - stats.int_feat_fq)))
        + 0.5 * stats.const_abm
    )


def _weight_space_lam(cache, int_outer: np.ndarray) -> np.ndarray:
    """Λ = K⁻¹ (∫⟨φφᵀ⟩) K⁻¹ assembled as a Gram product G Gᵀ.

    The feature-outer integral is PSD up to roundoff, but its ~1e-14
    negative tail gets amplified by cond(K)² through two plain triangular
    solves — enough to break the Cholesky of Ω⁻¹ + Λ when the pin noise
    no longer regularises K.  Clipping the spectrum and squaring keeps
    the result PSD by construction.
    """
    w, V = np.linalg.eigh(sym(int_outer))
    half = V * np.sqrt(np.clip(w, 0.0, None))
    G = cache.kfull_factor.solve(half)
    return G @ G.T


def update_inducing_cov(stats: SufficientStats,
                        dynamics: DynamicsModel) -> np.ndarray:
    """Closed-form inducing-covariance update S_u = (Ω_u⁻¹ + Λ_uu)⁻¹.

    Λ is the ψψᵀ integral mapped to predictive-weight space; the update
    is identical for every output dimension and is written back into the
    model.  Returns the shared S_u.
    """
    cache = dynamics.prior
    M = cache.layout.M
    lam = _weight_space_lam(cache, stats.int_outer)
    prec = sym(cache.omega_factor.inverse() + lam[:M, :M])
    S_u = sym(CholeskyFactor(prec).inverse())
    dynamics.set_inducing_moments(
        dynamics.inducing.means,
        np.tile(S_u, (cache.layout.K, 1, 1)),
    )
    return S_u


def _omega_tilde(cache) -> np.ndarray:
    """Joint prior precision of (m_u, J-rows): quadratic form (m−GJ)ᵀΩ⁻¹(m−GJ)."""
    Oinv = cache.omega_factor.inverse()
    G = cache.G
    OG = Oinv @ G
    return np.block([[Oinv, -OG], [-OG.T, G.T @ OG]])


def update_inducing_means_jacobians(stats: SufficientStats,
                                    dynamics: DynamicsModel):
    """Joint closed-form update of inducing means and fixed-point Jacobians.

    Solves (Ω̃ + Λ_[uj,uj]) X = [ (K^θ)⁻¹ (∫⟨ψ⟩⟨f_q⟩ᵀ − ∫⟨∇ψ⟩SAᵀ) ]_[uj]
    once for all output columns; the fixed-point *value* rows (which are
    pinned at zero) are excluded from the unknowns but participate in the
    kernel mapping.  Writes the result back and returns (means, jacobians).
    """
    cache = dynamics.prior
    lay = cache.layout
    M, L, K = lay.M, lay.L, lay.K
    idx = np.r_[0:M, M + L:lay.total]
    lam = _weight_space_lam(cache, stats.int_outer)
    B1 = sym(_omega_tilde(cache) + lam[np.ix_(idx, idx)])
    rhs = cache.kfull_factor.solve(stats.int_feat_fq - stats.int_jacS)[idx]
    sol = CholeskyFactor(B1).solve(rhs)
    means = sol[:M].T.copy()
    jac = sol[M:].reshape(L, K, K).transpose(0, 2, 1).copy()
    dynamics.set_inducing_moments(means, dynamics.inducing.covs)
    dynamics.set_jacobians(JacobianSet(jac))
    return means, jac


def update_sparse_plain(stats: SufficientStats, dynamics: DynamicsModel):
    """Inducing updates for the unconditioned sparse-GP drift (L = 0).

    S_u = K_zz (K_zz + ∫⟨κκᵀ⟩)⁻¹ K_zz and
    M_u = S_u K_zz⁻¹ (∫⟨κ⟩⟨f_q⟩ᵀ − ∫⟨∂κ⟩SAᵀ); algebraically identical to
    the conditioned-variant updates when there are no fixed points.
    """
    if dynamics.layout.L != 0:
        raise InvalidArgumentError(
            "sparse_plain update requires a model without fixed points"
        )
    kzz = dynamics.prior.blocks.zz
    factor = CholeskyFactor(kzz + stats.int_outer)
    S_u = sym(kzz @ factor.solve(kzz))
    rhs = dynamics.prior.kfull_factor.solve(
        stats.int_feat_fq - stats.int_jacS)
    M_u = S_u @ rhs
    means = M_u.T.copy()
    dynamics.set_inducing_moments(
        means, np.tile(S_u, (dynamics.latent_dim, 1, 1)))
    return S_u, means


def update_linear_dynamics(paths):
    """Affine drift f(x) = −Ãx + b̃ minimizing the path KL, jointly in (Ã, b̃).

    Least squares of the control drift −A(t)x + b(t) onto [x; 1] under the
    posterior marginals; for centered paths the two blocks decouple into
    Ã = (∫(b⟨x⟩ᵀ − ⟨f_q xᵀ⟩))(∫⟨xxᵀ⟩)⁻¹ and b̃ = (1/T)∫⟨f_q⟩ + Ã⟨x⟩.
    """
    K = paths[0].m.shape[1]
    Sxx = np.zeros((K, K))
    Mx = np.zeros(K)
    T = 0.0
    Fx = np.zeros((K, K))
    F1 = np.zeros(K)
    for path in paths:
        w = trapezoid_weights(path.grid)
        second = path.S + np.einsum("rj,rk->rjk", path.m, path.m)
        fq = path.b - np.einsum("rjk,rk->rj", path.A, path.m)
        Sxx += np.einsum("r,rjk->jk", w, second)
        Mx += w @ path.m
        T += float(np.sum(w))
        Fx += -np.einsum("r,rjk,rkl->jl", w, path.A, second) \
            + np.einsum("r,rj,rk->jk", w, path.b, path.m)
        F1 += w @ fq
    gram = np.block([[Sxx, Mx[:, None]], [Mx[None, :], np.array([[T]])]])
    eigs = np.linalg.eigvalsh(sym(gram))
    if eigs[0] <= 1e-12 * max(eigs[-1], 1.0):
        raise NumericalError(
            "singular second-moment integral in linear-dynamics update"
        )
    rhs = np.hstack([Fx, F1[:, None]])
    sol = CholeskyFactor(sym(gram)).solve(rhs.T).T
    A_tilde = -sol[:, :K]
    b_tilde = sol[:, K]
    return A_tilde, b_tilde


# ---------------------------------------------------------------------------
# hyperparameter ascent


def _pack_theta(model: DynamicsModel) -> np.ndarray:
    parts = [np.log([model.kernel.signal_var]),
             np.log(model.kernel.lengthscales)]
    if model.layout.L:
        parts.append(model.fixed_points.locations.ravel())
        parts.append(np.log(model.fixed_points.alphas))
    return np.concatenate(parts)


def _unpack_theta(theta: np.ndarray, K: int, L: int):
    sv = float(np.exp(theta[0]))
    ell = np.exp(theta[1:1 + K])
    kernel = KernelSpec(sv, ell)
    if L:
        locs = theta[1 + K:1 + K + L * K].reshape(L, K)
        alphas = np.exp(theta[1 + K + L * K:])
        return kernel, FixedPointSet(locs.copy(), alphas.copy())
    return kernel, FixedPointSet(np.zeros((0, K)), np.zeros(0))


@dataclass
class HyperoptResult:
    accepted: int
    objective: float          # −ℰ − KL_u at the accepted parameters
    evaluations: int


def optimize_hyperparameters(model: DynamicsModel, paths,
                             config) -> HyperoptResult:
    """Finite-difference ascent of F* over (σ², ℓ, s_i, α_i).

    The paths and output map stay fixed, so F*(θ) differs from
    −ℰ(θ) − KL_u(θ) only by a constant.  Every evaluation re-solves the
    closed-form inducing/Jacobian updates under the candidate θ before
    scoring it — the raw objective with frozen inducing moments is so
    ill-conditioned (they are tuned to the current kernel matrices) that
    no usable step exists, while this collapsed objective follows the
    same coordinate-ascent block structure as the rest of the outer loop.
    Central differences (step ``hyperopt_fd_step`` in log/natural space)
    give the gradient and a backtracking line search (halving, up to
    ``hyperopt_backtracks`` tries) accepts a step only when the objective
    strictly increases; an accepted θ writes back its matched inducing
    moments and Jacobians, so F* never decreases in this op.  At most
    ``hyperopt_steps`` steps per call, and the kernel caches are rebuilt
    whenever parameters move.
    """
    K = model.latent_dim
    L = model.layout.L
    Z = model.inducing.Z
    inducing = model.inducing
    jacobians = model.jacobians
    quadrature = getattr(config, "quadrature", "trapezoid")

    nodes = [_path_nodes(p, quadrature) for p in paths]
    if nodes:
        m_all = np.concatenate([n[0] for n in nodes], axis=0)
        S_all = np.concatenate([n[1] for n in nodes], axis=0)
        w_all = np.concatenate([n[2] for n in nodes], axis=0)
        fq_all = np.concatenate([n[3] for n in nodes], axis=0)
        AS_all = np.concatenate([n[4] for n in nodes], axis=0)
    else:
        m_all = np.zeros((0, K))
        S_all = np.zeros((0, K, K))
        w_all = np.zeros(0)
        fq_all = np.zeros((0, K))
        AS_all = np.zeros((0, K, K))
    t_total = float(np.sum(w_all))
    const_abm = 0.0
    for p, n in zip(paths, nodes):
        c = -n[3]
        const_abm += float(n[2] @ (np.einsum("rj,rj->r", c, c)
                                   + _tr_aas(p, quadrature, n[1], n[4])))

    n_evals = 0

    def objective(theta: np.ndarray):
        nonlocal n_evals
        n_evals += 1
        kernel, fps = _unpack_theta(theta, K, L)
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore")
                cand = DynamicsModel(kernel, inducing, fps, jacobians)
                io, iff, ijs = _integrate_features(
                    kernel, Z, fps.locations, m_all, S_all, w_all,
                    fq_all, AS_all)
                stats = SufficientStats(io, iff, ijs, t_total, const_abm)
                if L:
                    update_inducing_cov(stats, cand)
                    update_inducing_means_jacobians(stats, cand)
                else:
                    update_sparse_plain(stats, cand)
                value = -expected_path_kl(stats, cand) - cand.kl_inducing()
                return value, cand
        except (NumericalError, InvalidArgumentError):
            return -np.inf, None

    theta = _pack_theta(model)
    f_base, best = objective(theta)
    fd = config.hyperopt_fd_step
    step0 = config.hyperopt_step0
    accepted = 0
    for _ in range(config.hyperopt_steps):
        grad = np.zeros_like(theta)
        for i in range(theta.size):
            tp, tm = theta.copy(), theta.copy()
            tp[i] += fd
            tm[i] -= fd
            fp, fm = objective(tp)[0], objective(tm)[0]
            if np.isfinite(fp) and np.isfinite(fm):
                grad[i] = (fp - fm) / (2 * fd)
        gmax = float(np.max(np.abs(grad)))
        if gmax <= 1e-7:
            break
        eta = step0 / gmax
        improved = False
        for _ in range(config.hyperopt_backtracks + 1):
            f_cand, cand = objective(theta + eta * grad)
            if np.isfinite(f_cand) and f_cand > f_base:
                theta = theta + eta * grad
                f_base, best = f_cand, cand
                accepted += 1
                improved = True
                break
            eta *= 0.5
        if not improved:
            break

    if accepted and best is not None:
        model.set_kernel(best.kernel)
        model.set_fixed_points(best.fixed_points)
        model.refresh()
        model.set_inducing_moments(best.inducing.means, best.inducing.covs)
        model.set_jacobians(best.jacobians)
    return HyperoptResult(accepted, f_base, n_evals)


# ---------------------------------------------------------------------------
# full fit


@dataclass
class FitConfig:
    latent_dim: int = 1
    n_fixed_points: int = 4
    n_inducing: int = 8         # per latent dimension (Cartesian grid)
    dt: float = 1e-3
    outer_iters: int = 30
    outer_tol: float = 1e-6
    inner_iters: int = 50
    inner_tol: float = 1e-6
    hyperopt_steps: int = 2
    hyperopt_fd_step: float = 1e-4
    hyperopt_backtracks: int = 10
    hyperopt_step0: float = 0.25
    quadrature: str = "trapezoid"
    seed: int = 0
    freeze_output_map: bool = False
    freeze_noise: bool = False
    dynamics_variant: str = "conditioned"
    init_signal_var: float = 1.0
    init_lengthscale: float = 1.0
    init_alpha: float = 0.1
    init_alpha_spare: float = 1.0
    n_workers: int = 1

    def __post_init__(self):
        if self.latent_dim < 1 or self.n_inducing < 1:
            raise InvalidArgumentError("latent_dim and n_inducing must be ≥ 1")
        if self.n_fixed_points < 0:
            raise InvalidArgumentError("n_fixed_points must be ≥ 0")
        if self.dt <= 0:
            raise InvalidArgumentError("dt must be positive")
        if self.outer_iters < 1 or self.inner_iters < 1:
            raise InvalidArgumentError("iteration counts must be ≥ 1")
        if self.dynamics_variant not in ("conditioned", "sparse_plain",
                                         "linear"):
            raise InvalidArgumentError(
                f"unknown dynamics_variant {self.dynamics_variant!r}"
            )
        if self.quadrature not in ("trapezoid", "gauss_legendre"):
            raise InvalidArgumentError(
                f"unknown quadrature {self.quadrature!r}"
            )
        if self.hyperopt_steps < 0 or self.hyperopt_backtracks < 0:
            raise InvalidArgumentError("hyperopt settings must be ≥ 0")


@dataclass
class FitReport:
    trace: list = field(default_factory=list)             # F* per outer iter
    phases: list = field(default_factory=list)            # (iter, phase, F*)
    timings: list = field(default_factory=list)           # seconds per iter
    iterations: int = 0
    converged: bool = False
    fixed_points: dict = field(default_factory=dict)
    n_grid: int = 0                                       # smoothing grid size


@dataclass
class FitResult:
    model: object
    output_map: object
    paths: list
    inits: list
    report: FitReport
    free_energy: float


def _pseudo_latents(dataset, C0, d0, latent_dim):
    """Least-squares latent projections of the observations, pooled."""
    xs = []
    for trial in dataset.trials:
        if trial.observation_kind == "gaussian":
            resid = trial.Y - d0[:, None]
            sol, *_ = np.linalg.lstsq(C0, resid, rcond=None)
            xs.append(sol.T)
        else:
            span = trial.span[1] - trial.span[0]
            edges = np.linspace(trial.span[0], trial.span[1], 11)
            width = span / 10
            rates = np.array([
                np.histogram(ev, bins=edges)[0] / width
                for ev in trial.events
            ])
            logr = np.log(rates + 0.5 / width) - d0[:, None]
            sol, *_ = np.linalg.lstsq(C0, logr, rcond=None)
            xs.append(sol.T)
    return np.concatenate(xs, axis=0)


def _init_output_map(dataset, latent_dim, rng):
    """Output-map initialization: truth block when present, else data-driven."""
    truth = dataset.truth or {}
    kind = dataset.observation_kind
    if "C" in truth:
        C0 = np.asarray(truth["C"], dtype=float)
        d0 = np.asarray(truth["d"], dtype=float)
        if kind == "gaussian":
            Gamma0 = np.asarray(truth["Gamma"], dtype=float)
            return OutputMapGaussian(C0, d0, Gamma0)
        return OutputMapPoisson(C0, d0)
    if kind == "gaussian":
        Y = np.concatenate([t.Y for t in dataset.trials], axis=1)
        d0 = Y.mean(axis=1)
        Yc = Y - d0[:, None]
        U, s, _ = np.linalg.svd(Yc, full_matrices=False)
        C0 = U[:, :latent_dim] * (s[:latent_dim] / np.sqrt(Y.shape[1]))
        resid = Yc - C0 @ (np.linalg.lstsq(C0, Yc, rcond=None)[0])
        Gamma0 = np.maximum(resid.var(axis=1), 1e-3)
        return OutputMapGaussian(C0, d0, Gamma0)
    N = len(dataset.trials[0].events)
    span = dataset.trials[0].span[1] - dataset.trials[0].span[0]
    counts = np.array([
        [len(t.events[n]) for t in dataset.trials] for n in range(N)
    ]).mean(axis=1)
    d0 = np.log(np.maximum(counts / span, 1e-2))
    C0 = 0.1 * rng.standard_normal((N, latent_dim))
    return OutputMapPoisson(C0, d0)


def _density_modes(pseudo: np.ndarray, seed: int, max_modes: int):
    """Mean-shift modes of the pooled latent projections.

    Starts from k-means centers and climbs a Gaussian-kernel density;
    converged iterates are deduplicated.  Modes approximate the attractors
    a multistable system parks its trajectories near, which is the only
    structural information about the drift available before any dynamics
    have been learnt.
    """
    from sklearn.cluster import KMeans

    n = len(pseudo)
    h = 0.35 * pseudo.std(axis=0) + 1e-9
    k = min(max(2 * max_modes, 4), n)
    starts = KMeans(n_clusters=k, random_state=seed,
                    n_init=10).fit(pseudo).cluster_centers_
    modes = []
    densities = []
    for x in starts:
        x = x.copy()
        for _ in range(200):
            w = np.exp(-0.5 * np.sum(((pseudo - x) / h) ** 2, axis=1))
            tot = w.sum()
            if tot <= 0:
                break
            x_new = w @ pseudo / tot
            if np.linalg.norm(x_new - x) < 1e-8:
                x = x_new
                break
            x = x_new
        if any(np.linalg.norm(x - m) < 0.5 * np.linalg.norm(h)
               for m in modes):
            continue
        modes.append(x)
        densities.append(
            np.exp(-0.5 * np.sum(((pseudo - x) / h) ** 2, axis=1)).sum())
    order = np.argsort(densities)[::-1]
    return [modes[i] for i in order]


def _propose_fixed_points(pseudo, L, config):
    """Data-density layout of the L fixed-point slots.

    Density modes are attractor candidates and midpoints of nearby mode
    pairs are separatrix candidates; both start with a tight zero
    observation.  Slots beyond what the density supports stay uncommitted:
    they sit at spread-out k-means centers with a weak (large-α) pin, so
    learning is free to leave them inert instead of bending the drift
    around them.  A single slot just takes the k-means center (the data
    centroid), which suits rotational flows with an interior equilibrium.
    """
    from sklearn.cluster import KMeans

    if L == 1:
        km = KMeans(n_clusters=1, random_state=config.seed, n_init=10)
        center = km.fit(pseudo).cluster_centers_
        return center, np.array([config.init_alpha])
    modes = _density_modes(pseudo, config.seed, L)
    tight = [m for m in modes[:L]]
    if len(tight) >= 2 and len(tight) < L:
        pairs = [(np.linalg.norm(a - b), 0.5 * (a + b))
                 for i, a in enumerate(tight) for b in tight[i + 1:]]
        pairs.sort(key=lambda p: p[0])
        scale = np.linalg.norm(pseudo.std(axis=0)) + 1e-9
        for _, mid in pairs:
            if len(tight) >= L:
                break
            if any(np.linalg.norm(mid - q) < 0.2 * scale for q in tight):
                continue
            tight.append(mid)
    n_tight = len(tight)
    points = list(tight)
    if n_tight < L:
        km = KMeans(n_clusters=L, random_state=config.seed, n_init=10)
        centers = km.fit(pseudo).cluster_centers_
        # fill spare slots with the centers farthest from the committed set
        dists = [min(np.linalg.norm(c - q) for q in points) for c in centers]
        for i in np.argsort(dists)[::-1][:L - n_tight]:
            points.append(centers[i])
    locations = np.asarray(points[:L])
    alphas = np.concatenate([
        np.full(n_tight, config.init_alpha),
        np.full(L - n_tight, config.init_alpha_spare),
    ])
    order = np.lexsort(locations.T[::-1])
    return locations[order], alphas[order]


def _init_dynamics(dataset, config, omap, rng):
    """Kernel, inducing grid, density-guided fixed points, zero means."""
    K = config.latent_dim
    if config.dynamics_variant == "linear":
        return LinearDynamics(np.eye(K), np.zeros(K))
    pseudo = _pseudo_latents(dataset, omap.C, omap.d, K)
    lo = pseudo.min(axis=0)
    hi = pseudo.max(axis=0)
    pad = 0.1 * np.maximum(hi - lo, 1e-3)
    axes = [np.linspace(lo[k] - pad[k], hi[k] + pad[k], config.n_inducing)
            for k in range(K)]
    mesh = np.meshgrid(*axes, indexing="ij")
    Z = np.stack([g.ravel() for g in mesh], axis=1)
    kernel = KernelSpec(config.init_signal_var,
                        np.full(K, config.init_lengthscale))
    L = 0 if config.dynamics_variant == "sparse_plain" \
        else config.n_fixed_points
    if L:
        locations, alphas = _propose_fixed_points(pseudo, L, config)
        fps = FixedPointSet(locations, alphas)
    else:
        fps = FixedPointSet(np.zeros((0, K)), np.zeros(0))
    cache = build_prior(kernel, Z, fps)
    inducing = InducingSet(Z, np.zeros((K, Z.shape[0])),
                           np.tile(cache.omega, (K, 1, 1)))
    return DynamicsModel(kernel, inducing, fps, JacobianSet.zeros(L, K))


def _smooth_all(dataset, model, omap, inits, paths, sconfig, n_workers):
    """Smooth every trial (warm-started), falling back to a cold start once."""

    def one(i):
        trial = dataset.trials[i]
        try:
            return smooth_trial(trial, model, omap, inits[i], sconfig,
                                path=paths[i])
        except DivergenceError:
            if paths[i] is None:
                raise
            return smooth_trial(trial, model, omap, inits[i], sconfig)

    results = [None] * len(dataset.trials)
    if n_workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            futures = {i: pool.submit(one, i)
                       for i in range(len(dataset.trials))}
            for i, fut in futures.items():
                try:
                    results[i] = fut.result()
                except DivergenceError as exc:
                    raise DivergenceError(
                        f"trial {i}: {exc}", step=exc.step, trial=i) from exc
    else:
        for i in range(len(dataset.trials)):
            try:
                results[i] = one(i)
            except DivergenceError as exc:
                raise DivergenceError(
                    f"trial {i}: {exc}", step=exc.step, trial=i) from exc
    return results


def _update_output_map(dataset, omap, paths, config):
    """Closed-form Gaussian C, d (and noise) refits from the obs marginals."""
    if config.freeze_output_map or isinstance(omap, OutputMapPoisson):
        return omap
    Ys, ms, Ss = [], [], []
    for trial, path in zip(dataset.trials, paths):
        idx = snap_times(path.grid, trial.times)
        Ys.append(trial.Y)
        ms.append(path.m[idx])
        Ss.append(path.S[idx])
    Y = np.concatenate(Ys, axis=1)
    means = np.concatenate(ms, axis=0)
    covs = np.concatenate(Ss, axis=0)
    C, d = gaussian_update_Cd(Y, means, covs)
    Gamma = omap.Gamma if config.freeze_noise else \
        gaussian_update_noise(C, d, Y, means, covs)
    return OutputMapGaussian(C, d, Gamma)


def _fixed_point_summary(model) -> dict:
    if not isinstance(model, DynamicsModel) or model.layout.L == 0:
        return {}
    eigs = [np.linalg.eigvals(J) for J in model.jacobians.jacobians]
    return {
        "locations": model.fixed_points.locations.copy(),
        "alphas": model.fixed_points.alphas.copy(),
        "jacobians": model.jacobians.jacobians.copy(),
        "eigenvalues": eigs,
    }


def fit(dataset, config: FitConfig) -> FitResult:
    """Full variational-Bayes fit of the latent SDE model to a dataset.

    Each outer iteration smooths all trials, applies the closed-form
    dynamics updates for the configured variant, refits the output map
    (Gaussian observations only) and runs the hyperparameter ascent,
    recording F* after every phase.  Stops early when the end-of-iteration
    F* changes by less than ``outer_tol`` relative.  Deterministic for a
    fixed config and seed.
    """
    if not dataset.trials:
        raise InvalidArgumentError("dataset has no trials")
    rng = np.random.default_rng(config.seed)
    K = config.latent_dim
    omap = _init_output_map(dataset, K, rng)
    model = _init_dynamics(dataset, config, omap, rng)
    sconfig = SmootherConfig(dt=config.dt, max_iters=config.inner_iters,
                             tol=config.inner_tol)
    n = len(dataset.trials)
    inits = [InitialState.standard(K) for _ in range(n)]
    paths = [None] * n
    report = FitReport()
    f_prev = None
    f_end = np.nan

    for outer in range(config.outer_iters):
        tic = time.perf_counter()

        results = _smooth_all(dataset, model, omap, inits, paths, sconfig,
                              config.n_workers)
        paths = [r.path for r in results]
        inits = [r.init for r in results]
        report.n_grid = int(paths[0].grid.n_points)
        f_inf = free_energy(paths, dataset.trials, model, omap, inits).total
        report.phases.append((outer, "inference", f_inf))

        if config.dynamics_variant == "linear":
            A_t, b_t = update_linear_dynamics(paths)
            model = LinearDynamics(A_t, b_t)
        else:
            stats = accumulate_stats(paths, model, config.quadrature)
            if model.layout.L:
                update_inducing_cov(stats, model)
                update_inducing_means_jacobians(stats, model)
            else:
                update_sparse_plain(stats, model)
        f_dyn = free_energy(paths, dataset.trials, model, omap, inits).total
        report.phases.append((outer, "dynamics", f_dyn))

        omap = _update_output_map(dataset, omap, paths, config)
        f_out = free_energy(paths, dataset.trials, model, omap, inits).total
        report.phases.append((outer, "output_map", f_out))

        if config.dynamics_variant != "linear" and config.hyperopt_steps:
            optimize_hyperparameters(model, paths, config)
            f_end = free_energy(paths, dataset.trials, model, omap,
                                inits).total
        else:
            f_end = f_out
        report.phases.append((outer, "hyperparameters", f_end))

        report.trace.append(f_end)
        report.timings.append(time.perf_counter() - tic)
        report.iterations = outer + 1
        if f_prev is not None and abs(f_end - f_prev) <= \
                config.outer_tol * max(1.0, abs(f_end)):
            report.converged = True
            break
        f_prev = f_end

    report.fixed_points = _fixed_point_summary(model)
    return FitResult(model, omap, paths, inits, report, f_end)


class LatentSDE:
    """Estimator-style front end over :func:`fit`.

    Any :class:`FitConfig` field can be passed as a keyword argument;
    ``fit`` runs the full learning loop and stores the results on
    underscore-suffixed attributes in the usual estimator idiom.
    """

    def __init__(self, **config):
        try:
            self.config = FitConfig(**config)
        except TypeError as exc:
            raise InvalidArgumentError(str(exc)) from None

    def fit(self, dataset):
        result = fit(dataset, self.config)
        self.result_ = result
        self.model_ = result.model
        self.output_map_ = result.output_map
        self.report_ = result.report
        self.free_energy_ = result.free_energy
        return self

    def predict_drift(self, X) -> dict:
        """Posterior drift mean and variance at the given latent points."""
        if not hasattr(self, "model_"):
            raise InvalidArgumentError("call fit before predict_drift")
        return self.model_.predict_f(np.atleast_2d(np.asarray(X, dtype=float)))

    @property
    def fixed_points_(self) -> dict:
        if not hasattr(self, "report_"):
            raise InvalidArgumentError("call fit before reading fixed points")
        return self.report_.fixed_points
