"""Variational smoothing of one trial's latent path.

The approximating process is linear with time-varying controls,
dx = (−A(t)x + b(t))dt + dw, so its marginals (m(t), S(t)) obey closed
moment ODEs integrated by forward Euler on the trial grid.  The smoother
alternates:

  forward_pass     marginals from the current controls,
  backward_pass    adjoint states accumulating likelihood and path-KL
                   gradients backwards in time,
  update_controls  fixed-point reassignment of A, b from the adjoints,
  update_initial_state
                   boundary update of the variational initial condition,

monitored by the per-trial free energy.  The adjoint recursions are the
exact transposes of the discrete forward recursion (not a separate
discretization of the continuous adjoint ODEs): the control updates are
stationary points of the discretized objective at interior grid nodes,
and the boundary multipliers reproduce finite-difference gradients of the
path objective with respect to (m0, S0) to machine precision.

Sign conventions (fixed empirically against the linear-drift smoother,
which must reproduce a discrete Kalman smoother): with the objective
J = ∫(ℓcont − e)dt + Σ ℓjump maximized, the multipliers stored in
``lam``/``Psi`` satisfy A = −⟨∂f/∂x⟩ + 2Ψ and b = ⟨f⟩ + A m − λ.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import DivergenceError, InvalidArgumentError
from .kernels import GaussianMoment
from .likelihoods import LikelihoodGradients, TrialData, expected_ll
from .numerics import CholeskyFactor, TimeGrid, sym, trapezoid_weights

__all__ = [
    "InitialState",
    "PathPosterior",
    "SmootherConfig",
    "SmoothResult",
    "KlPathTerms",
    "FreeEnergyReport",
    "symmetry_mask",
    "gauss_kl",
    "forward_pass",
    "kl_path_gradients",
    "backward_pass",
    "update_controls",
    "update_initial_state",
    "free_energy",
    "smooth_trial",
]

DIVERGENCE_NORM = 1e8


def symmetry_mask(dim: int) -> np.ndarray:
    """Matrix with 1 on the diagonal and ½ elsewhere.

    Converts a finite-difference sweep over the distinct entries of a
    symmetric matrix (perturbing entry pairs jointly, diagonal singly) into
    the symmetric-variation gradient convention stored in ``Psi``.
    """
    return 0.5 * (np.ones((dim, dim)) + np.eye(dim))


@dataclass
class InitialState:
    """Gaussian prior over x(t0) together with the variational moments."""

    mu0: np.ndarray
    Sig0: np.ndarray
    m0: np.ndarray = None
    S0: np.ndarray = None

    def __post_init__(self):
        self.mu0 = np.atleast_1d(np.asarray(self.mu0, dtype=float))
        self.Sig0 = np.atleast_2d(np.asarray(self.Sig0, dtype=float))
        K = self.mu0.size
        if self.Sig0.shape != (K, K):
            raise InvalidArgumentError("Sig0 must be K×K")
        if self.m0 is None:
            self.m0 = self.mu0.copy()
        else:
            self.m0 = np.atleast_1d(np.asarray(self.m0, dtype=float)).copy()
        if self.S0 is None:
            self.S0 = self.Sig0.copy()
        else:
            self.S0 = np.atleast_2d(np.asarray(self.S0, dtype=float)).copy()

    @classmethod
    def standard(cls, dim: int) -> "InitialState":
        return cls(np.zeros(dim), np.eye(dim))

    def copy(self) -> "InitialState":
        return InitialState(self.mu0.copy(), self.Sig0.copy(),
                            self.m0.copy(), self.S0.copy())


@dataclass
class PathPosterior:
    """Controls, marginals and adjoint states on one trial's grid.

    ``lam``/``Psi`` are the nodewise multipliers consumed by
    update_controls (zero at the final node).  ``lam_init``/``Psi_init``
    are the boundary multipliers, i.e. exact gradients of the path
    objective with respect to (m0, S0): λ_init = −∂J/∂m0 and
    Ψ_init = −∂J/∂S0 (symmetric-variation convention).
    """

    grid: TimeGrid
    A: np.ndarray
    b: np.ndarray
    m: np.ndarray
    S: np.ndarray
    lam: np.ndarray
    Psi: np.ndarray
    lam_init: np.ndarray = None
    Psi_init: np.ndarray = None

    @classmethod
    def initialize(cls, grid: TimeGrid, latent_dim: int) -> "PathPosterior":
        """Weakly contracting start: A = I/τ with τ = span/10, b = 0."""
        R = grid.n_points
        K = latent_dim
        tau = grid.span / 10.0
        A = np.broadcast_to(np.eye(K) / tau, (R, K, K)).copy()
        return cls(
            grid=grid, A=A, b=np.zeros((R, K)),
            m=np.zeros((R, K)), S=np.zeros((R, K, K)),
            lam=np.zeros((R, K)), Psi=np.zeros((R, K, K)),
            lam_init=np.zeros(K), Psi_init=np.zeros((K, K)),
        )

    @property
    def latent_dim(self) -> int:
        return self.b.shape[1]

    def copy(self) -> "PathPosterior":
        return PathPosterior(
            self.grid, self.A.copy(), self.b.copy(), self.m.copy(),
            self.S.copy(), self.lam.copy(), self.Psi.copy(),
            None if self.lam_init is None else self.lam_init.copy(),
            None if self.Psi_init is None else self.Psi_init.copy(),
        )


def forward_pass(path: PathPosterior, init: InitialState):
    """Euler integration of dm/dt = −Am + b, dS/dt = −AS − SAᵀ + I.

    Covariances are symmetrized every step and eigenvalue-floored at zero
    whenever an eigenvalue drops below −1e-10.  Means exceeding norm 1e8
    raise DivergenceError with the offending step index.
    """
    grid = path.grid
    dt = grid.dt
    R = grid.n_points
    K = path.latent_dim
    A, b, m, S = path.A, path.b, path.m, path.S
    eye = np.eye(K)
    m[0] = init.m0
    S[0] = _floor_spd(sym(init.S0))
    for r in range(R - 1):
        mr = m[r]
        m[r + 1] = mr - dt * (A[r] @ mr - b[r])
        if not np.all(np.isfinite(m[r + 1])) or (
                float(m[r + 1] @ m[r + 1]) > DIVERGENCE_NORM**2):
            raise DivergenceError(
                f"forward mean diverged at step {r + 1}", step=r + 1
            )
        AS = A[r] @ S[r]
        Sn = S[r] - dt * (AS + AS.T) + dt * eye
        S[r + 1] = _floor_spd(0.5 * (Sn + Sn.T))
    return m, S


def _floor_spd(s: np.ndarray, tol: float = -1e-10) -> np.ndarray:
    """Clip negative eigenvalues to zero only when they undershoot tol."""
    w = np.linalg.eigvalsh(s)
    if w[0] >= tol:
        return s
    w2, v = np.linalg.eigh(s)
    return (v * np.maximum(w2, 0.0)) @ v.T


@dataclass
class KlPathTerms:
    """Path-KL integrand ℰ-density and its nodewise m/S gradients."""

    e: np.ndarray          # (R,)
    grad_m: np.ndarray     # (R, K)
    grad_S: np.ndarray     # (R, K, K), symmetric convention
    moments: object = None  # DriftMoments evaluated on the path, for reuse


def kl_path_gradients(path: PathPosterior, dynamics,
                      ws=None) -> KlPathTerms:
    """Density of ℰ = ½∫⟨‖f − f_q‖²⟩dt and its analytic m/S gradients.

    The integrand decomposes as
      e = ½⟨fᵀf⟩ + ⟨f⟩ᵀc + ⟨∂f/∂x, A S⟩ + ½ tr(AᵀA S) + ½‖c‖²,
    with c = A m − b.  Gradients split into moment derivatives (delegated
    to the dynamics object, which differentiates its closed-form Gaussian
    expectations) and the explicit A, b terms.
    """
    A, b, m, S = path.A, path.b, path.m, path.S
    q = GaussianMoment(m, S)
    if ws is None:
        ws = dynamics.workspace(q)
    mom = dynamics.drift_moments(q, ws=ws)
    c = np.einsum("rjk,rk->rj", A, m) - b
    AS = np.einsum("rjk,rkl->rjl", A, S)
    e = (
        0.5 * mom.mean_fsq
        + np.einsum("rj,rj->r", mom.mean_f, c)
        + np.einsum("rjk,rjk->r", mom.mean_jac, AS)
        + 0.5 * np.einsum("rjk,rjk->r", A, AS)
        + 0.5 * np.einsum("rj,rj->r", c, c)
    )
    gm, gs = dynamics.kl_moment_gradients(q, c, AS, ws=ws)
    grad_m = gm + np.einsum("rkj,rk->rj", A, mom.mean_f + c)
    aj = np.einsum("rjk,rjl->rkl", A, mom.mean_jac)       # AᵀJ̄
    ata = np.einsum("rjk,rjl->rkl", A, A)
    grad_S = gs + 0.5 * (aj + aj.transpose(0, 2, 1)) + 0.5 * ata
    return KlPathTerms(e, grad_m, grad_S, moments=mom)


def backward_pass(path: PathPosterior, grads: LikelihoodGradients,
                  kl: KlPathTerms):
    """Exact reverse sweep of the discrete forward recursion.

    Nodewise objective gradients g_r combine the trapezoid-weighted
    continuous densities (likelihood minus ℰ) with the jump terms, which
    enter at their grid indices with no Δt factor.  The reverse recursion
      v_r = g_r + (I − Δt A_r)ᵀ v_{r+1}
    (and its covariance analogue) carries the total objective gradient;
    the stored multipliers are lam_r = −v^{m}_{r+1}, Psi_r = −v^{S}_{r+1}
    with lam_R = Psi_R = 0, the discrete transcription of the adjoint
    ODEs with terminal conditions λ(T) = Ψ(T) = 0.  The boundary states
    lam_init = −v^m_0, Psi_init = −v^S_0 are the exact gradients of the
    path objective with respect to the initial moments.
    """
    grid = path.grid
    dt = grid.dt
    R = grid.n_points
    w = trapezoid_weights(grid)
    gm = -w[:, None] * kl.grad_m
    gs = -w[:, None, None] * kl.grad_S
    if grads.m_cont is not None:
        gm += w[:, None] * grads.m_cont
        gs += w[:, None, None] * grads.S_cont
    gm += grads.m_jump
    gs += grads.S_jump

    A = path.A
    vm = gm[R - 1].copy()
    vs = gs[R - 1].copy()
    path.lam[R - 1] = 0.0
    path.Psi[R - 1] = 0.0
    for r in range(R - 2, -1, -1):
        path.lam[r] = -vm
        path.Psi[r] = -vs
        vm = gm[r] + vm - dt * (A[r].T @ vm)
        if not np.all(np.isfinite(vm)) or (
                float(vm @ vm) > DIVERGENCE_NORM**2):
            raise DivergenceError(
                f"adjoint state diverged at step {r}", step=r
            )
        cross = A[r].T @ vs
        vs = gs[r] + vs - dt * (cross + cross.T)
        vs = 0.5 * (vs + vs.T)
    path.lam_init = -vm
    path.Psi_init = -sym(vs)
    return path.lam, path.Psi


def update_controls(path: PathPosterior, dynamics, moments=None):
    """Fixed-point reassignment A = −⟨∂f/∂x⟩ + 2Ψ, b = ⟨f⟩ + A m − λ."""
    if moments is None:
        moments = dynamics.drift_moments(GaussianMoment(path.m, path.S))
    path.A = -moments.mean_jac + 2.0 * path.Psi
    path.b = (moments.mean_f
              + np.einsum("rjk,rk->rj", path.A, path.m) - path.lam)
    return path.A, path.b


def update_initial_state(init: InitialState, lam0: np.ndarray,
                         Psi0: np.ndarray) -> bool:
    """Boundary-stationarity update of the variational initial moments.

    The stationary point satisfies m0 = mu0 − Sig0 λ0 and
    S0 = (Sig0⁻¹ + 2Ψ0)⁻¹.  The mean is applied in natural-parameter
    form, S0_new (Sig0⁻¹ mu0 + 2Ψ0 m0 − λ0), which has the same fixed
    point but treats 2Ψ0 as the curvature of the data pull: for Gaussian
    observations the map is then exact in one step, whereas the raw
    assignment m0 ← mu0 − Sig0 λ0 oscillates divergently whenever the
    data constrain x(t0) more tightly than the prior.  When Ψ0 = 0 both
    forms coincide.  When the updated precision is not positive definite
    the previous moments are kept; returns True when that fallback
    triggered.
    """
    sig_factor = CholeskyFactor(init.Sig0)
    prec = sym(sig_factor.inverse() + 2.0 * Psi0)
    try:
        chol = np.linalg.cholesky(prec)
    except np.linalg.LinAlgError:
        return True
    inv_chol = np.linalg.solve(chol, np.eye(chol.shape[0]))
    S0_new = sym(inv_chol.T @ inv_chol)
    nat_mean = sig_factor.solve(init.mu0) + 2.0 * (Psi0 @ init.m0) - lam0
    init.m0 = S0_new @ nat_mean
    init.S0 = S0_new
    return False


def gauss_kl(m: np.ndarray, S: np.ndarray, mu: np.ndarray,
             Sig: np.ndarray) -> float:
    """KL(N(m, S) ‖ N(mu, Sig))."""
    K = m.size
    prior = CholeskyFactor(Sig)
    post = CholeskyFactor(S)
    delta = mu - m
    return 0.5 * (
        float(np.trace(prior.solve(S))) - K
        + prior.logdet() - post.logdet()
        + float(delta @ prior.solve(delta))
    )


@dataclass
class FreeEnergyReport:
    total: float
    expected_ll: float
    kl_path: float
    kl_init: float
    kl_inducing: float


def free_energy(paths, trials, dynamics, omap, inits) -> FreeEnergyReport:
    """Σ_trials [expected ll − ℰ − KL(x0)] − KL(inducing).

    Paths must hold marginals consistent with their controls (i.e. a
    forward_pass has run).  ℰ is integrated by the trapezoid rule on each
    trial's grid.
    """
    ell_total = 0.0
    kl_path_total = 0.0
    kl_init_total = 0.0
    for path, trial, init in zip(paths, trials, inits):
        ell, _ = expected_ll(omap, trial, path.grid, path.m, path.S)
        kl = kl_path_gradients(path, dynamics)
        w = trapezoid_weights(path.grid)
        ell_total += ell
        kl_path_total += float(w @ kl.e)
        kl_init_total += gauss_kl(init.m0, init.S0, init.mu0, init.Sig0)
    kl_u = dynamics.kl_inducing()
    total = ell_total - kl_path_total - kl_init_total - kl_u
    return FreeEnergyReport(total, ell_total, kl_path_total,
                            kl_init_total, kl_u)


@dataclass
class SmootherConfig:
    dt: float = 1e-3
    max_iters: int = 50
    tol: float = 1e-6

    def __post_init__(self):
        if self.dt <= 0 or self.max_iters < 1 or self.tol <= 0:
            raise InvalidArgumentError("dt, max_iters, tol must be positive")


@dataclass
class SmoothResult:
    path: PathPosterior
    init: InitialState
    free_energy: float
    expected_ll: float
    kl_path: float
    kl_init: float
    iterations: int
    converged: bool
    fallback_S0: bool = False


def smooth_trial(trial: TrialData, dynamics, omap, init: InitialState,
                 config: SmootherConfig,
                 path: PathPosterior | None = None) -> SmoothResult:
    """Run the inner smoothing loop on one trial until the trial free
    energy stabilizes.

    The loop stops when |ΔF| ≤ tol·max(1, |F|) or after max_iters sweeps.
    On non-convergence the best iterate by F is returned with a warning;
    a divergence before any valid iterate propagates the error.  Pass
    ``path`` (and a matching ``init``) to warm-start from a previous
    solution.

    The returned free energy is this trial's contribution
    expected_ll − ℰ − KL(x0); the model-level inducing KL is excluded.
    """
    grid = TimeGrid(trial.span[0], trial.span[1], config.dt)
    if path is None:
        path = PathPosterior.initialize(grid, dynamics.latent_dim)
    init = init.copy()
    w = trapezoid_weights(grid)

    best = None
    f_prev = None
    converged = False
    diverged = False
    iterations = 0
    fallback = False
    for it in range(config.max_iters):
        iterations = it + 1
        try:
            forward_pass(path, init)
        except DivergenceError:
            if best is None:
                raise
            diverged = True
            warnings.warn(
                f"smoothing diverged at iteration {it}; "
                "returning best iterate", RuntimeWarning)
            break
        q = GaussianMoment(path.m, path.S)
        ws = dynamics.workspace(q)
        kl = kl_path_gradients(path, dynamics, ws=ws)
        ell, lgrads = expected_ll(omap, trial, grid, path.m, path.S)
        kl_path_val = float(w @ kl.e)
        kl_init_val = gauss_kl(init.m0, init.S0, init.mu0, init.Sig0)
        f = ell - kl_path_val - kl_init_val
        if best is None or f > best[0]:
            best = (f, ell, kl_path_val, kl_init_val,
                    path.copy(), init.copy())
        if f_prev is not None and abs(f - f_prev) <= config.tol * max(
                1.0, abs(f)):
            converged = True
            break
        f_prev = f
        backward_pass(path, lgrads, kl)
        update_controls(path, dynamics, moments=kl.moments)
        fallback |= update_initial_state(init, path.lam_init, path.Psi_init)

    if converged:
        f_final, ell_f, klp_f, kli_f = f, ell, kl_path_val, kl_init_val
        path_f, init_f = path, init
    else:
        if not diverged:
            warnings.warn(
                f"smoothing did not converge in {iterations} iterations "
                f"(|ΔF| criterion {config.tol}); returning best iterate",
                RuntimeWarning)
        f_final, ell_f, klp_f, kli_f, path_f, init_f = best
    return SmoothResult(path_f, init_f, f_final, ell_f, klp_f, kli_f,
                        iterations, converged, fallback)
