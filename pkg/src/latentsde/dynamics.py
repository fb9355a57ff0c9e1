"""Sparse GP drift prior conditioned on fixed points and local Jacobians.

The drift f : R^K → R^K carries one GP per output dimension, sharing a
single exponentiated-quadratic kernel.  Each GP is conditioned on
  * inducing values u_k = f_k(Z) with variational moments (m_u^k, S_u^k),
  * fixed-point observations f_k(s_i) = 0 with noise α_i² (αᵢ → ∞ prunes
    the i-th fixed point),
  * exact derivative observations ∂f_k/∂x(s_i) = J^(i)_{k,:}.
Conditioning makes the phase portrait a parameter of the model: the fixed
points, their stability (through J) and their relevance (through α) are
read straight off the fitted object.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NumericalError, StaleCacheError
from .kernels import (
    ExpectationWorkspace,
    FeatureLayout,
    GaussianMoment,
    KernelBlocks,
    KernelSpec,
    features,
    k_blocks,
    k_cross,
)
from .numerics import CholeskyFactor, sym

__all__ = [
    "FixedPointSet",
    "JacobianSet",
    "InducingSet",
    "DriftMoments",
    "PriorCache",
    "build_prior",
    "DynamicsModel",
    "LinearDynamics",
]


@dataclass
class FixedPointSet:
    """Learnable fixed points s_i with per-point observation noise α_i.

    α_i is the standard deviation of the zero drift observation at s_i: at
    α_i = 0 the constraint f(s_i) = 0 is exact, large α_i switches it off.
    """

    locations: np.ndarray   # (L, K)
    alphas: np.ndarray      # (L,)

    def __post_init__(self):
        self.locations = np.atleast_2d(np.asarray(self.locations, dtype=float))
        self.alphas = np.atleast_1d(np.asarray(self.alphas, dtype=float))
        if self.alphas.shape[0] != self.locations.shape[0]:
            raise InvalidArgumentError(
                f"{self.locations.shape[0]} fixed points but "
                f"{self.alphas.shape[0]} alphas"
            )
        if np.any(self.alphas < 0) or np.any(~np.isfinite(self.alphas)):
            raise InvalidArgumentError("alphas must be finite and nonnegative")

    @property
    def count(self) -> int:
        return self.locations.shape[0]


@dataclass
class JacobianSet:
    """Local linearizations J^(i) with entries ∂f_k/∂x_m at each fixed point."""

    jacobians: np.ndarray   # (L, K, K)

    def __post_init__(self):
        self.jacobians = np.asarray(self.jacobians, dtype=float)
        if self.jacobians.ndim != 3 or \
                self.jacobians.shape[1] != self.jacobians.shape[2]:
            raise InvalidArgumentError(
                f"jacobians must be (L, K, K), got {self.jacobians.shape}"
            )
        if not np.all(np.isfinite(self.jacobians)):
            raise InvalidArgumentError("jacobians must be finite")

    @staticmethod
    def zeros(L: int, K: int) -> "JacobianSet":
        return JacobianSet(np.zeros((L, K, K)))


@dataclass
class InducingSet:
    """Inducing locations Z with per-dimension variational moments.

    ``means[k]`` is m_u^k (length M), ``covs[k]`` is S_u^k (M × M PSD).
    """

    Z: np.ndarray           # (M, K)
    means: np.ndarray       # (K, M)
    covs: np.ndarray        # (K, M, M)

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        self.means = np.asarray(self.means, dtype=float)
        self.covs = np.asarray(self.covs, dtype=float)
        M = self.Z.shape[0]
        K = self.Z.shape[1]
        if self.means.shape != (K, M) or self.covs.shape != (K, M, M):
            raise InvalidArgumentError(
                f"inducing moments {self.means.shape}/{self.covs.shape} do not "
                f"match Z {self.Z.shape}"
            )

    @staticmethod
    def from_prior(Z: np.ndarray, spec: KernelSpec) -> "InducingSet":
        """Initialize q_u at the unconditioned prior marginals (zero mean)."""
        Z = np.atleast_2d(np.asarray(Z, dtype=float))
        M, K = Z.shape
        cov = k_cross(spec, Z, Z)
        return InducingSet(Z, np.zeros((K, M)), np.tile(cov, (K, 1, 1)))

    @property
    def count(self) -> int:
        return self.Z.shape[0]


@dataclass(frozen=True)
class DriftMoments:
    """⟨f⟩, ⟨∂f/∂x⟩ and ⟨fᵀf⟩ under q_x · q_f (possibly batched over nodes)."""

    mean_f: np.ndarray      # (K,) or (R, K)
    mean_jac: np.ndarray    # (K, K) or (R, K, K); entry (j, k) = ⟨∂f_j/∂x_k⟩
    mean_fsq: np.ndarray    # scalar or (R,)


@dataclass(frozen=True)
class PriorCache:
    """Factorized conditioned-prior quantities for fixed (kernel, Z, S, α).

    ``kfull`` is the joint covariance of (f(Z), f(S), ∇f(S)) with α_i² added
    to the fixed-point *value* diagonal; ``omega`` is the conditional
    covariance Ω_u of the inducing values given the fixed-point data, and
    ``G`` maps flattened Jacobian rows to the conditional prior mean of u.
    """

    layout: FeatureLayout
    blocks: KernelBlocks
    kfull: np.ndarray
    kfull_factor: CholeskyFactor
    omega: np.ndarray
    omega_factor: CholeskyFactor
    G: np.ndarray           # (M, L·K)

    def prior_mean(self, jacobians: JacobianSet) -> np.ndarray:
        """Conditional prior means μ_u^k, returned as (K, M)."""
        K = self.layout.K
        jrows = jacobians.jacobians.transpose(0, 2, 1).reshape(-1, K)  # (LK, K)
        return (self.G @ jrows).T if self.layout.L else np.zeros(
            (K, self.layout.M)
        )


def build_prior(kernel: KernelSpec, Z: np.ndarray,
                fixed_points: FixedPointSet) -> PriorCache:
    """Assemble and factor the conditioned prior for one hyperparameter setting.

    Raises a numerical error naming the offending fixed-point pair when the
    augmented fixed-point block stays singular through the jitter budget;
    warns and pre-jitters when two fixed points sit closer than 1e-3 of the
    smallest lengthscale.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    L = fixed_points.count
    layout = FeatureLayout(M=Z.shape[0], L=L, K=kernel.dim)
    blocks = k_blocks(kernel, Z, fixed_points.locations)
    kfull = blocks.assemble()
    M = layout.M

    jitter0 = None
    closest = None
    if L >= 2:
        d = fixed_points.locations[:, None, :] - fixed_points.locations[None]
        dist = np.sqrt(np.sum(d * d, axis=-1))
        iu = np.triu_indices(L, k=1)
        jmin = np.argmin(dist[iu])
        closest = (iu[0][jmin], iu[1][jmin], dist[iu][jmin])
        ell_min = float(np.min(kernel.lengthscales))
        if closest[2] < 1e-6 * ell_min:
            raise InvalidArgumentError(
                f"fixed points {closest[0]} and {closest[1]} coincide "
                f"(separation {closest[2]:.3e})"
            )
        if closest[2] < 1e-3 * ell_min:
            warnings.warn(
                f"fixed points {closest[0]} and {closest[1]} are separated by "
                f"{closest[2]:.3e} < 1e-3·lengthscale; raising jitter",
                RuntimeWarning,
                stacklevel=2,
            )
            jitter0 = 1e-6 * float(np.mean(np.diag(kfull)))

    aug = kfull.copy()
    idx = np.arange(M, M + L)
    aug[idx, idx] += fixed_points.alphas**2

    if L == 0:
        omega = blocks.zz.copy()
        kf = CholeskyFactor(aug, jitter=jitter0)
        return PriorCache(layout, blocks, aug, kf,
                          omega, CholeskyFactor(omega, jitter=jitter0),
                          np.zeros((M, 0)))

    kss_aug = aug[M:, M:]
    kzs = aug[:M, M:]
    try:
        ss_factor = CholeskyFactor(kss_aug, jitter=jitter0)
    except NumericalError as exc:
        raise NumericalError(
            "conditioning block is singular beyond the jitter budget; "
            f"closest fixed points are {closest[0]} and {closest[1]} at "
            f"separation {closest[2]:.3e}" if closest is not None else
            "conditioning block is singular beyond the jitter budget",
            attempted_jitter=exc.attempted_jitter,
        ) from exc
    gains = ss_factor.solve(kzs.T).T                       # K̃_zs K̃_ss⁻¹, (M, L+LK)
    omega = sym(blocks.zz - gains @ kzs.T)
    kf = CholeskyFactor(aug, jitter=jitter0)
    return PriorCache(layout, blocks, aug, kf, omega,
                      CholeskyFactor(omega, jitter=jitter0), gains[:, L:])


class DynamicsModel:
    """Drift model: kernel + inducing set + fixed points + Jacobians.

    The conditioned-prior cache (factorizations, Ω_u, G) is built eagerly
    and invalidated by any change to the kernel, fixed points or inducing
    locations; moment updates (m_u, S_u, J) keep it valid.  Reading from a
    stale model raises, so a forgotten ``refresh()`` fails loudly instead of
    silently using old hyperparameters.
    """

    def __init__(self, kernel: KernelSpec, inducing: InducingSet,
                 fixed_points: FixedPointSet, jacobians: JacobianSet):
        if fixed_points.count and fixed_points.locations.shape[1] != kernel.dim:
            raise InvalidArgumentError("fixed-point dimension != kernel dimension")
        if jacobians.jacobians.shape[0] != fixed_points.count:
            raise InvalidArgumentError("one Jacobian required per fixed point")
        if jacobians.jacobians.shape[0] and \
                jacobians.jacobians.shape[1] != kernel.dim:
            raise InvalidArgumentError("Jacobian dimension != kernel dimension")
        self._kernel = kernel
        self._inducing = inducing
        self._fixed_points = fixed_points
        self._jacobians = jacobians
        self._cache: PriorCache | None = None
        self.refresh()

    # -- accessors ----------------------------------------------------------

    @property
    def kernel(self) -> KernelSpec:
        return self._kernel

    @property
    def inducing(self) -> InducingSet:
        return self._inducing

    @property
    def fixed_points(self) -> FixedPointSet:
        return self._fixed_points

    @property
    def jacobians(self) -> JacobianSet:
        return self._jacobians

    @property
    def layout(self) -> FeatureLayout:
        return FeatureLayout(M=self._inducing.count,
                             L=self._fixed_points.count, K=self._kernel.dim)

    @property
    def latent_dim(self) -> int:
        return self._kernel.dim

    @property
    def prior(self) -> PriorCache:
        if self._cache is None:
            raise StaleCacheError(
                "prior cache is stale; call refresh() after changing kernel, "
                "fixed points or inducing locations"
            )
        return self._cache

    # -- mutation -----------------------------------------------------------

    def refresh(self) -> "DynamicsModel":
        self._cache = build_prior(self._kernel, self._inducing.Z,
                                  self._fixed_points)
        return self

    def set_kernel(self, kernel: KernelSpec):
        self._kernel = kernel
        self._cache = None

    def set_fixed_points(self, fixed_points: FixedPointSet):
        self._fixed_points = fixed_points
        self._cache = None

    def set_inducing_locations(self, Z: np.ndarray):
        ind = self._inducing
        self._inducing = InducingSet(Z, ind.means, ind.covs)
        self._cache = None

    def set_inducing_moments(self, means: np.ndarray, covs: np.ndarray):
        self._inducing = InducingSet(self._inducing.Z, means, covs)

    def set_jacobians(self, jacobians: JacobianSet):
        if jacobians.jacobians.shape[0] != self._fixed_points.count:
            raise InvalidArgumentError("one Jacobian required per fixed point")
        self._jacobians = jacobians

    # -- derived parameters -------------------------------------------------

    def stacked_means(self) -> np.ndarray:
        """M_{u,f_s,J}: column k = [m_u^k; 0_L; J-rows], shape (total, K)."""
        lay = self.prior.layout
        out = np.zeros((lay.total, lay.K))
        out[lay.u_block, :] = self._inducing.means.T
        if lay.L:
            out[lay.grad_block, :] = self._jacobians.jacobians.transpose(
                0, 2, 1
            ).reshape(-1, lay.K)
        return out

    def beta(self) -> np.ndarray:
        """(K^θ)⁻¹ M_{u,f_s,J}: feature weights of the posterior mean drift."""
        return self.prior.kfull_factor.solve(self.stacked_means())

    def second_moment_weight(self) -> np.ndarray:
        """W = (K^θ)⁻¹ (⟨UUᵀ⟩ − K·K^θ) (K^θ)⁻¹ from the ⟨fᵀf⟩ trace identity.

        ⟨UUᵀ⟩ sums over the K factored posteriors, so the kernel matrix is
        scaled by K before subtraction.
        """
        lay = self.prior.layout
        mfull = self.stacked_means()
        uu = mfull @ mfull.T
        uu[lay.u_block, lay.u_block] += np.sum(self._inducing.covs, axis=0)
        inner = uu - lay.K * self.prior.kfull
        half = self.prior.kfull_factor.solve(inner)
        return sym(self.prior.kfull_factor.solve(half.T))

    def workspace(self, q: GaussianMoment) -> ExpectationWorkspace:
        return ExpectationWorkspace(self._kernel, self.prior.layout, q,
                                    self._inducing.Z,
                                    self._fixed_points.locations)

    # -- operations ---------------------------------------------------------

    def drift_moments(self, q: GaussianMoment,
                      ws: ExpectationWorkspace | None = None) -> DriftMoments:
        """Posterior drift moments under q_x(q) and the variational q_f.

        Pass a workspace built from the same q to share the Gaussian-integral
        intermediates with other per-iteration contractions.
        """
        if ws is None:
            ws = self.workspace(q)
        beta = self.beta()
        vals = ws.values()
        jac = ws.jac()
        outer = ws.outer()
        w = self.second_moment_weight()
        kdim = self.latent_dim
        if q.batched:
            mean_f = vals @ beta
            mean_jac = np.einsum("pj,rpk->rjk", beta, jac)
            fsq = kdim * self._kernel.signal_var + np.einsum(
                "pq,rpq->r", w, outer
            )
        else:
            mean_f = vals @ beta
            mean_jac = np.einsum("pj,pk->jk", beta, jac)
            fsq = kdim * self._kernel.signal_var + float(np.sum(w * outer))
        return DriftMoments(mean_f, mean_jac, fsq)

    def kl_moment_gradients(self, q: GaussianMoment, lin_weights: np.ndarray,
                            jac_weights: np.ndarray,
                            ws: ExpectationWorkspace | None = None):
        """∇_{m,S} of ½⟨fᵀf⟩ + ⟨f⟩ᵀc + ⟨∂f/∂x, D⟩ with c, D held fixed.

        ``lin_weights`` is c (per node, shape (R, K)) and ``jac_weights`` is D
        (shape (R, K, K)).  These are the drift-moment-dependent pieces of the
        path-KL integrand; the smoother supplies c = A m − b and D = A S.
        Returns (grad_m (R, K), grad_S (R, K, K)) with the S part symmetric
        (gradients taken along symmetric variations).
        """
        if ws is None:
            ws = self.workspace(q)
        beta = self.beta()
        w2 = self.second_moment_weight()
        gm_o, gs_o = ws.grad_outer(w2)
        gm_v, gs_v = ws.grad_values(np.einsum("pj,rj->rp", beta, lin_weights))
        gm_j, gs_j = ws.grad_jac(np.einsum("pj,rjk->rpk", beta, jac_weights))
        return (0.5 * gm_o + gm_v + gm_j, 0.5 * gs_o + gs_v + gs_j)

    def kl_inducing(self) -> float:
        """Σ_k KL(q(u_k) ‖ p(u_k | fixed points, Jacobians, θ))."""
        cache = self.prior
        M = cache.layout.M
        mu = cache.prior_mean(self._jacobians)
        logdet_omega = cache.omega_factor.logdet()
        total = 0.0
        for k in range(self.latent_dim):
            s_factor = CholeskyFactor(self._inducing.covs[k])
            delta = mu[k] - self._inducing.means[k]
            total += 0.5 * (
                float(np.trace(cache.omega_factor.solve(self._inducing.covs[k])))
                - M
                + logdet_omega - s_factor.logdet()
                + float(delta @ cache.omega_factor.solve(delta))
            )
        return total

    def predict_f(self, x: np.ndarray) -> dict:
        """Pointwise posterior drift: mean (N, K) and per-dimension var (N, K).

        The variance combines the conditioned-prior conditional ν(x, x) with
        the propagated inducing uncertainty a_u S_u^k a_uᵀ; tiny negative
        values from cancellation are clipped at zero.
        """
        lay = self.prior.layout
        x = np.atleast_2d(np.asarray(x, dtype=float))
        psi = features(self._kernel, lay, x, self._inducing.Z,
                       self._fixed_points.locations)
        a = self.prior.kfull_factor.solve(psi.T).T             # (N, total)
        mean = psi @ self.beta()
        nu = self._kernel.signal_var - np.einsum("np,np->n", a, psi)
        a_u = a[:, lay.u_block]
        var = nu[:, None] + np.einsum("np,kpq,nq->nk", a_u,
                                      self._inducing.covs, a_u)
        return {"mean": mean, "var": np.maximum(var, 0.0)}

    def copy(self) -> "DynamicsModel":
        import copy as _copy

        return _copy.deepcopy(self)


class LinearDynamics:
    """Deterministic linear drift f(x) = −Ã x + b̃.

    Presents the same moment interface as DynamicsModel so the smoother can
    run against it unchanged; used by the linear model variant.  All drift
    moments are exact (no feature expansion, no posterior uncertainty).
    """

    def __init__(self, decay: np.ndarray, offset: np.ndarray):
        self.decay = np.atleast_2d(np.asarray(decay, dtype=float))
        self.offset = np.atleast_1d(np.asarray(offset, dtype=float))
        if self.decay.shape != (self.offset.size, self.offset.size):
            raise InvalidArgumentError("decay must be K×K matching offset")

    @property
    def latent_dim(self) -> int:
        return self.offset.size

    def workspace(self, q: GaussianMoment):
        return None

    def drift_moments(self, q: GaussianMoment, ws=None) -> DriftMoments:
        F = -self.decay
        if q.batched:
            mean_f = q.mean @ F.T + self.offset
            mean_jac = np.broadcast_to(F, (q.mean.shape[0],) + F.shape).copy()
            fsq = np.einsum("rj,rj->r", mean_f, mean_f) + np.einsum(
                "jk,jl,rkl->r", F, F, q.cov
            )
        else:
            mean_f = F @ q.mean + self.offset
            mean_jac = F.copy()
            fsq = float(mean_f @ mean_f + np.sum((F.T @ F) * q.cov))
        return DriftMoments(mean_f, mean_jac, fsq)

    def kl_moment_gradients(self, q: GaussianMoment, lin_weights, jac_weights,
                            ws=None):
        F = -self.decay
        mean_f = q.mean @ F.T + self.offset
        grad_m = (mean_f + lin_weights) @ F
        gs = 0.5 * (F.T @ F)
        grad_s = np.broadcast_to(gs, q.cov.shape).copy()
        return grad_m, grad_s

    def kl_inducing(self) -> float:
        return 0.0

    def predict_f(self, x: np.ndarray) -> dict:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        mean = x @ (-self.decay).T + self.offset
        return {"mean": mean, "var": np.zeros_like(mean)}

    def copy(self) -> "LinearDynamics":
        return LinearDynamics(self.decay.copy(), self.offset.copy())
