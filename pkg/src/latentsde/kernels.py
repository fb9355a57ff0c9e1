"""Exponentiated-quadratic kernel with derivative blocks and closed-form
Gaussian expectations of the drift feature vector.

The drift representation used throughout the package is linear in the
feature vector

    ψ(x) = [κ(x, z_1..z_M),  κ(x, s_1..s_L),  ∂κ(x, s_i)/∂s_{i,l}]

whose last block is laid out fixed-point-major (entry (i−1)·K + l is the
derivative of κ(x, s_i) with respect to coordinate l of s_i).  Because κ is
an exponentiated quadratic, products of features are unnormalized Gaussians
in x, so every moment E[ψ], E[∂ψ/∂x], E[ψψᵀ] under x ~ N(m, S) — and every
gradient of those moments with respect to (m, S) — has a closed form.  The
formulas are obtained by differentiating the two Gaussian-convolution
primitives

    E₁(a)    = E[κ(x, a)]        (single center a)
    E₂(a, b) = E[κ(x, a) κ(x, b)]  (pair of centers)

with respect to the centers; no quadrature is involved anywhere.

All operations accept a single Gaussian moment (mean shape (K,)) or a batch
(mean shape (R, K)) and are vectorized over the batch axis.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, NumericalError
from .numerics import sym

__all__ = [
    "KernelSpec",
    "FeatureLayout",
    "GaussianMoment",
    "KernelBlocks",
    "k_cross",
    "k_blocks",
    "features",
    "expect_features",
    "expect_features_outer",
    "expect_features_jac",
    "ExpectationWorkspace",
]


@dataclass(frozen=True)
class KernelSpec:
    """Exponentiated-quadratic hyperparameters.

    ``signal_var`` is σ² (units of drift squared); ``lengthscales`` holds one
    positive ℓ_d per latent dimension.
    """

    signal_var: float
    lengthscales: np.ndarray

    def __post_init__(self):
        ell = np.atleast_1d(np.asarray(self.lengthscales, dtype=float))
        object.__setattr__(self, "lengthscales", ell)
        if not np.isfinite(self.signal_var) or self.signal_var <= 0:
            raise InvalidArgumentError(f"signal_var must be > 0, got {self.signal_var}")
        if ell.ndim != 1 or ell.size == 0 or np.any(~np.isfinite(ell)) or np.any(ell <= 0):
            raise InvalidArgumentError("lengthscales must be a vector of positive reals")

    @property
    def dim(self) -> int:
        return self.lengthscales.size


@dataclass(frozen=True)
class FeatureLayout:
    """Index bookkeeping for the feature vector ψ(x).

    Blocks: inducing values ``[0, M)``, fixed-point values ``[M, M+L)``,
    fixed-point derivatives ``[M+L, M+L+L·K)`` in fixed-point-major order.
    """

    M: int
    L: int
    K: int

    def __post_init__(self):
        if self.M < 0 or self.L < 0 or self.K < 1:
            raise InvalidArgumentError(
                f"bad layout M={self.M}, L={self.L}, K={self.K}"
            )

    @property
    def total(self) -> int:
        return self.M + self.L + self.L * self.K

    @property
    def n_centers(self) -> int:
        return self.M + self.L

    @property
    def u_block(self) -> slice:
        return slice(0, self.M)

    @property
    def s_block(self) -> slice:
        return slice(self.M, self.M + self.L)

    @property
    def grad_block(self) -> slice:
        return slice(self.M + self.L, self.total)

    def grad_index(self, i: int, l: int) -> int:
        """Flat feature index of ∂κ(x, s_i)/∂s_{i,l}."""
        return self.M + self.L + i * self.K + l


@dataclass(frozen=True)
class GaussianMoment:
    """Marginal mean and covariance of the latent path at one time — or a
    whole grid of them when ``mean`` has shape (R, K) and ``cov`` (R, K, K)."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=float)
        cov = np.asarray(self.cov, dtype=float)
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)
        k = mean.shape[-1]
        if cov.shape[-2:] != (k, k) or cov.ndim != mean.ndim + 1:
            raise InvalidArgumentError(
                f"mean {mean.shape} and cov {cov.shape} are inconsistent"
            )

    @property
    def batched(self) -> bool:
        return self.mean.ndim == 2


def _check_points(spec: KernelSpec, *point_sets):
    for pts in point_sets:
        if pts.size and pts.shape[-1] != spec.dim:
            raise InvalidArgumentError(
                f"points of dimension {pts.shape[-1]} with a "
                f"{spec.dim}-dimensional kernel"
            )


def k_cross(spec: KernelSpec, X: np.ndarray, X2: np.ndarray) -> np.ndarray:
    """Covariance matrix [κ(X_i, X2_j)]_ij of the exponentiated quadratic."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    X2 = np.atleast_2d(np.asarray(X2, dtype=float))
    _check_points(spec, X, X2)
    ell = spec.lengthscales
    d = X[:, None, :] / ell - X2[None, :, :] / ell
    return spec.signal_var * np.exp(-0.5 * np.sum(d * d, axis=-1))


def _k_and_diff(spec: KernelSpec, X: np.ndarray, X2: np.ndarray):
    """Kernel matrix together with the raw differences X_i − X2_j."""
    diff = X[:, None, :] - X2[None, :, :]
    sq = np.sum((diff / spec.lengthscales) ** 2, axis=-1)
    return spec.signal_var * np.exp(-0.5 * sq), diff


@dataclass(frozen=True)
class KernelBlocks:
    """Covariance blocks between inducing values, fixed-point values and
    fixed-point gradients of the drift.

    Derivative indices follow the feature layout: a gradient column (j, l)
    refers to ∂/∂s_{j,l} applied to the second kernel argument, a gradient
    row (i, k) to ∂/∂s_{i,k} applied to the first.
    """

    zz: np.ndarray        # (M, M)
    zs: np.ndarray        # (M, L)
    zs_grad: np.ndarray   # (M, L·K)   ∂κ(z_i, s_j)/∂s_{j,l}
    ss: np.ndarray        # (L, L)
    ss_grad: np.ndarray   # (L, L·K)   ∂κ(s_i, s_j)/∂s_{j,l}
    grad_grad: np.ndarray  # (L·K, L·K) ∂²κ(s_i, s_j)/∂s_{i,k}∂s_{j,l}

    def assemble(self) -> np.ndarray:
        """Full symmetric (M+L+LK)² covariance of (f(Z), f(S), ∇f(S))."""
        top = np.concatenate([self.zz, self.zs, self.zs_grad], axis=1)
        mid = np.concatenate([self.zs.T, self.ss, self.ss_grad], axis=1)
        bot = np.concatenate(
            [self.zs_grad.T, self.ss_grad.T, self.grad_grad], axis=1
        )
        return np.concatenate([top, mid, bot], axis=0)


def k_blocks(spec: KernelSpec, Z: np.ndarray, S: np.ndarray) -> KernelBlocks:
    """All covariance blocks between Z, fixed points S, and ∇-observations at S.

    With L = 0 fixed points only the zz block is non-empty.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    S = np.asarray(S, dtype=float).reshape(-1, spec.dim) if np.size(S) else \
        np.zeros((0, spec.dim))
    _check_points(spec, Z, S)
    M, L, K = Z.shape[0], S.shape[0], spec.dim
    lam = spec.lengthscales**2

    zz = k_cross(spec, Z, Z)
    if L == 0:
        e = np.zeros
        return KernelBlocks(zz, e((M, 0)), e((M, 0)), e((0, 0)), e((0, 0)), e((0, 0)))

    k_zs, d_zs = _k_and_diff(spec, Z, S)
    k_ss, d_ss = _k_and_diff(spec, S, S)

    # ∂κ(a, s_j)/∂s_{j,l} = κ(a, s_j) (a_l − s_{j,l}) / ℓ_l²
    zs_grad = (k_zs[..., None] * d_zs / lam).reshape(M, L * K)
    ss_grad = (k_ss[..., None] * d_ss / lam).reshape(L, L * K)

    # ∂²κ(s_i, s_j)/∂s_{i,k}∂s_{j,l} = κ [δ_kl/ℓ_l² − r_k r_l/(ℓ_k²ℓ_l²)], r = s_i − s_j
    scaled = d_ss / lam                                    # (L, L, K)
    gg = np.eye(K) / lam - scaled[..., :, None] * scaled[..., None, :]
    gg = k_ss[..., None, None] * gg                        # (L, L, K, K) → (i, j, k, l)
    grad_grad = gg.transpose(0, 2, 1, 3).reshape(L * K, L * K)

    return KernelBlocks(zz, k_zs, zs_grad, k_ss, ss_grad, grad_grad)


def features(spec: KernelSpec, layout: FeatureLayout, X: np.ndarray,
             Z: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Deterministic feature matrix ψ(X) of shape (N, total)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    S = np.asarray(S, dtype=float).reshape(-1, spec.dim)
    _check_points(spec, X, Z, S)
    out = np.empty((X.shape[0], layout.total))
    out[:, layout.u_block] = k_cross(spec, X, Z)
    if layout.L:
        k_xs, d_xs = _k_and_diff(spec, X, S)
        out[:, layout.s_block] = k_xs
        lam = spec.lengthscales**2
        # ∂κ(x, s_i)/∂s_{i,l} = κ(x, s_i)(x_l − s_{i,l})/ℓ_l²
        out[:, layout.grad_block] = (k_xs[..., None] * d_xs / lam).reshape(
            X.shape[0], layout.L * layout.K
        )
    return out


# ---------------------------------------------------------------------------
# Gaussian expectations
# ---------------------------------------------------------------------------


def _as_batch(q: GaussianMoment):
    if q.batched:
        return q.mean, q.cov, True
    return q.mean[None], q.cov[None], False


def _probe_psd(covs: np.ndarray):
    """Cheap positive-semidefiniteness check for a batch of covariances."""
    k = covs.shape[-1]
    asym = np.max(np.abs(covs - np.swapaxes(covs, -1, -2)))
    scale = 1.0 + float(np.max(np.abs(covs)))
    if asym > 1e-8 * scale:
        raise NumericalError(f"covariance not symmetric (asymmetry {asym:.3e})")
    try:
        np.linalg.cholesky(covs + 1e-9 * scale * np.eye(k))
    except np.linalg.LinAlgError as exc:
        raise NumericalError("covariance is not positive semidefinite") from exc


class ExpectationWorkspace:
    """All Gaussian feature expectations for one batch of marginals.

    Binds (kernel, layout, Z, S) to a batch of moments (m_r, S_r) and lazily
    shares the Gaussian-convolution intermediates between the value, outer
    and Jacobian expectations and their (m, S)-gradient contractions — the
    backward smoothing pass calls several of these per grid sweep.

    Covariance gradients are "entrywise" gradients of the formulas viewed as
    functions of an unconstrained square matrix, symmetrized on return; for
    symmetric perturbation directions D the pairing ⟨grad, D⟩ equals the
    directional derivative.
    """

    def __init__(self, spec: KernelSpec, layout: FeatureLayout,
                 q: GaussianMoment, Z: np.ndarray, S: np.ndarray):
        self.spec = spec
        self.layout = layout
        self.Z = np.atleast_2d(np.asarray(Z, dtype=float))
        self.S = np.asarray(S, dtype=float).reshape(-1, spec.dim)
        _check_points(spec, self.Z, self.S)
        if self.Z.shape[0] != layout.M or self.S.shape[0] != layout.L:
            raise InvalidArgumentError("layout does not match Z/S row counts")
        self.means, self.covs, self.batched = _as_batch(q)
        if self.means.shape[-1] != spec.dim:
            raise InvalidArgumentError(
                f"moment dimension {self.means.shape[-1]} != kernel dim {spec.dim}"
            )
        _probe_psd(self.covs)
        self.centers = np.concatenate([self.Z, self.S], axis=0)
        self._e1 = None
        self._e2 = None

    def _unbatch(self, arr):
        return arr if self.batched else arr[0]

    # -- single-center primitives -------------------------------------------

    def _one(self):
        """E₁ workspace: per-center scalars E1 and vectors v = B⁻¹(m − a)."""
        if self._e1 is not None:
            return self._e1
        lam = self.spec.lengthscales**2
        B = self.covs + np.diag(lam)
        Binv = np.linalg.inv(B)
        _, logdetB = np.linalg.slogdet(B)
        d = self.means[:, None, :] - self.centers[None]          # (R, C, K)
        v = np.einsum("rkl,rcl->rck", Binv, d)
        quad = np.einsum("rck,rck->rc", d, v)
        logpref = 0.5 * np.sum(np.log(lam)) - 0.5 * logdetB
        E1 = self.spec.signal_var * np.exp(logpref[:, None] - 0.5 * quad)
        self._e1 = (E1, v, Binv)
        return self._e1

    # -- pair primitives ----------------------------------------------------

    def _two(self):
        """E₂ workspace over all center pairs.

        Uses m − (a+b)/2 = (d_a + d_b)/2 so only per-center solves are needed:
        w₂(a,b) = (v₂_a + v₂_b)/2 with v₂_c = B₂⁻¹(m − c), B₂ = Λ/2 + S.
        """
        if self._e2 is not None:
            return self._e2
        lam = self.spec.lengthscales**2
        B2 = self.covs + np.diag(0.5 * lam)
        B2inv = np.linalg.inv(B2)
        _, logdetB2 = np.linalg.slogdet(B2)
        d = self.means[:, None, :] - self.centers[None]          # (R, C, K)
        v2 = np.einsum("rkl,rcl->rck", B2inv, d)
        qd = np.einsum("rck,rck->rc", d, v2)                     # d_c·v₂_c
        cross = np.einsum("rck,rdk->rcd", d, v2)                 # d_c'B₂⁻¹d_d
        quadform = 0.25 * (qd[:, :, None] + qd[:, None, :] + 2.0 * cross)
        logpref = 0.5 * np.sum(np.log(0.5 * lam)) - 0.5 * logdetB2
        rr = self.centers[:, None, :] - self.centers[None, :, :]
        pair_pref = -0.25 * np.sum(rr * rr / lam, axis=-1)       # (C, C)
        E2 = self.spec.signal_var**2 * np.exp(
            pair_pref[None] + logpref[:, None, None] - 0.5 * quadform
        )
        w2 = 0.5 * (v2[:, :, None, :] + v2[:, None, :, :])       # (R, C, C, K)
        g = self.centers / (2.0 * lam)
        # u_a(a,b) = −(a−b)/(2ℓ²) + w₂/2 ;  u_b(a,b) = u_a(b,a)
        ua = g[None, None, :, :] - g[None, :, None, :] + 0.5 * w2
        Hab = np.diag(0.5 / lam)[None] - 0.25 * B2inv            # (R, K, K)
        self._e2 = (E2, w2, ua, Hab, B2inv)
        return self._e2

    # -- expectations -------------------------------------------------------

    def values(self) -> np.ndarray:
        """E[ψ(x)], shape (R, total)."""
        lay = self.layout
        E1, v, _ = self._one()
        out = np.empty((self.means.shape[0], lay.total))
        out[:, : lay.n_centers] = E1
        if lay.L:
            E1s = E1[:, lay.M :]
            vs = v[:, lay.M :, :]
            out[:, lay.grad_block] = (E1s[..., None] * vs).reshape(
                -1, lay.L * lay.K
            )
        return self._unbatch(out)

    def jac(self) -> np.ndarray:
        """E[∂ψ(x)/∂x], shape (R, total, K); column k is the ∂/∂x_k slice."""
        lay = self.layout
        E1, v, Binv = self._one()
        K = lay.K
        out = np.empty((self.means.shape[0], lay.total, K))
        out[:, : lay.n_centers, :] = -E1[..., None] * v
        if lay.L:
            E1s = E1[:, lay.M :]
            vs = v[:, lay.M :, :]
            # row (i, l), column k: E1_i (B⁻¹_{kl} − v_{i,k} v_{i,l});
            # symmetric in (k, l), so the (i, l, k) reshape below is safe
            blk = Binv[:, None, :, :] - vs[:, :, :, None] * vs[:, :, None, :]
            out[:, lay.grad_block, :] = (E1s[:, :, None, None] * blk).reshape(
                -1, lay.L * K, K
            )
        return self._unbatch(out)

    def outer(self) -> np.ndarray:
        """E[ψ(x)ψ(x)ᵀ], shape (R, total, total); symmetric per node."""
        lay = self.layout
        M, L, K, C = lay.M, lay.L, lay.K, lay.n_centers
        E2, w2, ua, Hab, _ = self._two()
        R = self.means.shape[0]
        out = np.empty((R, lay.total, lay.total))
        out[:, :C, :C] = E2
        if L:
            ub = np.swapaxes(ua, 1, 2)
            vg = (E2[:, :, M:, None] * ub[:, :, M:, :]).reshape(R, C, L * K)
            out[:, :C, C:] = vg
            out[:, C:, :C] = np.swapaxes(vg, 1, 2)
            t = ua[:, M:, M:, :, None] * ub[:, M:, M:, None, :]
            t += Hab[:, None, None, :, :]
            gg = E2[:, M:, M:, None, None] * t                   # (R, i, j, k, l)
            out[:, C:, C:] = gg.transpose(0, 1, 3, 2, 4).reshape(R, L * K, L * K)
        return self._unbatch(out)

    # -- contracted gradients w.r.t. (m, S) ---------------------------------

    def _split_weights(self, w, extra_shape):
        lay = self.layout
        w = np.asarray(w, dtype=float)
        target = (lay.total,) + extra_shape
        if w.shape == target:
            w = np.broadcast_to(w, (self.means.shape[0],) + target)
        elif w.shape != (self.means.shape[0],) + target:
            raise InvalidArgumentError(f"weights of shape {w.shape}, expected {target}")
        wv = w[:, : lay.n_centers]
        wg = w[:, lay.grad_block].reshape(
            (self.means.shape[0], lay.L, lay.K) + extra_shape
        )
        return wv, wg

    def grad_values(self, weights) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of Σ_p weights_p E[ψ_p] w.r.t. m and S.

        ``weights``: (total,) or (R, total).  Returns ((R, K), (R, K, K)).
        """
        lay = self.layout
        E1, v, Binv = self._one()
        wv, wg = self._split_weights(weights, ())
        cv = wv * E1                                              # (R, C)
        gm = -np.einsum("rc,rcj->rj", cv, v)
        coef = cv.copy()
        if lay.L:
            E1s, vs = E1[:, lay.M :], v[:, lay.M :, :]
            sdot = np.einsum("ril,ril->ri", wg, vs)               # ω_i·v_i
            gm += np.einsum("ri,ril,rlj->rj", E1s, wg, Binv)
            gm -= np.einsum("ri,rij->rj", E1s * sdot, vs)
            coef[:, lay.M :] += E1s * sdot
        gS = 0.5 * (
            np.einsum("rc,rcp,rcq->rpq", coef, v, v)
            - np.einsum("rc,rpq->rpq", coef, Binv)
        )
        if lay.L:
            bw = np.einsum("rpl,ril->rip", Binv, wg)              # B⁻¹ω_i
            gS -= np.einsum("ri,rip,riq->rpq", E1s, bw, vs)
        return self._unbatch(gm), self._unbatch(sym(gS))

    def grad_jac(self, weights) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of ⟨E[∂ψ/∂x], W⟩_F w.r.t. m and S.

        ``weights``: (total, K) or (R, total, K).
        """
        lay = self.layout
        E1, v, Binv = self._one()
        wv, wg = self._split_weights(weights, (lay.K,))
        # value rows −E1 v: d/dm gives E1(v_j v_k − B⁻¹_{kj})
        cv = E1 * np.einsum("rck,rck->rc", wv, v)                 # E1 (W_c·v_c)
        gm = np.einsum("rc,rcj->rj", cv, v)
        gm -= np.einsum("rck,rc,rkj->rj", wv, E1, Binv)
        gS = -0.5 * (
            np.einsum("rc,rcp,rcq->rpq", cv, v, v)
            - np.einsum("rc,rpq->rpq", cv, Binv)
        )
        gS += np.einsum("rck,rc,rkp,rcq->rpq", wv, E1, Binv, v)
        if lay.L:
            E1s, vs = E1[:, lay.M :], v[:, lay.M :, :]
            # gradient rows (i,l), col k: E1 core_{kl}, core = B⁻¹ − v vᵀ
            core = Binv[:, None] - vs[:, :, :, None] * vs[:, :, None, :]
            ew = E1s * np.einsum("rilk,rikl->ri", wg, core)
            gm -= np.einsum("ri,rij->rj", ew, vs)
            gm -= np.einsum("rilk,ri,rkj,ril->rj", wg, E1s, Binv, vs)
            gm -= np.einsum("rilk,ri,rik,rlj->rj", wg, E1s, vs, Binv)
            gS += 0.5 * (
                np.einsum("ri,rip,riq->rpq", ew, vs, vs)
                - np.einsum("ri,rpq->rpq", ew, Binv)
            )
            gS -= np.einsum("rilk,ri,rkp,rql->rpq", wg, E1s, Binv, Binv)
            gS += np.einsum("rilk,ri,rkp,riq,ril->rpq", wg, E1s, Binv, vs, vs)
            gS += np.einsum("rilk,ri,rik,rlp,riq->rpq", wg, E1s, vs, Binv, vs)
        return self._unbatch(gm), self._unbatch(sym(gS))

    def grad_outer(self, weights) -> tuple[np.ndarray, np.ndarray]:
        """Gradients of ⟨E[ψψᵀ], W⟩_F w.r.t. m and S; W: (total, total)."""
        lay = self.layout
        M, L, C = lay.M, lay.L, lay.n_centers
        W = np.asarray(weights, dtype=float)
        if W.shape != (lay.total, lay.total):
            raise InvalidArgumentError(
                f"weights of shape {W.shape}, expected {(lay.total, lay.total)}"
            )
        E2, w2, ua, Hab, B2inv = self._two()
        R = self.means.shape[0]
        P2 = 0.5 * B2inv

        Wvv = W[:C, :C]
        t = np.einsum("cd,rcd->rcd", Wvv, E2)
        gm = -np.einsum("rcd,rcdj->rj", t, w2)
        gS = 0.5 * (
            np.einsum("rcd,rcdp,rcdq->rpq", t, w2, w2)
            - np.einsum("rcd,rpq->rpq", t, B2inv)
        )
        if L:
            K = lay.K
            # value-vs-gradient pairs: effective weight folds in both triangles
            Wvg = (W[:C, C:] + W[C:, :C].T).reshape(C, L, K)
            E2vg = E2[:, :, M:]                                   # (R, C, L)
            ubvg = np.swapaxes(ua, 1, 2)[:, :, M:, :]             # u_b at (c, s_j)
            w2vg = w2[:, :, M:, :]
            tvg = np.einsum("cjl,rcj,rcjl->rcj", Wvg, E2vg, ubvg)
            gm -= np.einsum("rcj,rcjk->rk", tvg, w2vg)
            gm += np.einsum("cjl,rcj,rlk->rk", Wvg, E2vg, P2)
            gS += 0.5 * (
                np.einsum("rcj,rcjp,rcjq->rpq", tvg, w2vg, w2vg)
                - np.einsum("rcj,rpq->rpq", tvg, B2inv)
            )
            gS -= 0.5 * np.einsum("cjl,rcj,rlp,rcjq->rpq", Wvg, E2vg, B2inv, w2vg)

            Wgg = W[C:, C:].reshape(L, K, L, K)
            E2ss = E2[:, M:, M:]
            uass = ua[:, M:, M:, :]
            ubss = np.swapaxes(ua, 1, 2)[:, M:, M:, :]
            w2ss = w2[:, M:, M:, :]
            core = uass[..., :, None] * ubss[..., None, :] + Hab[:, None, None]
            tgg = np.einsum("ikjl,rij,rijkl->rij", Wgg, E2ss, core)
            gm -= np.einsum("rij,rijn->rn", tgg, w2ss)
            gm += np.einsum("ikjl,rij,rkn,rijl->rn", Wgg, E2ss, P2, ubss)
            gm += np.einsum("ikjl,rij,rijk,rln->rn", Wgg, E2ss, uass, P2)
            gS += 0.5 * (
                np.einsum("rij,rijp,rijq->rpq", tgg, w2ss, w2ss)
                - np.einsum("rij,rpq->rpq", tgg, B2inv)
            )
            gS -= 0.5 * np.einsum(
                "ikjl,rij,rkp,rijq,rijl->rpq", Wgg, E2ss, B2inv, w2ss, ubss
            )
            gS -= 0.5 * np.einsum(
                "ikjl,rij,rijk,rlp,rijq->rpq", Wgg, E2ss, uass, B2inv, w2ss
            )
            gS += 0.25 * np.einsum(
                "ikjl,rij,rkp,rql->rpq", Wgg, E2ss, B2inv, B2inv
            )
        return self._unbatch(gm), self._unbatch(sym(gS))


def expect_features(spec: KernelSpec, layout: FeatureLayout, q: GaussianMoment,
                    Z: np.ndarray, S: np.ndarray) -> np.ndarray:
    """Closed-form E[ψ(x)] under x ~ N(q.mean, q.cov)."""
    return ExpectationWorkspace(spec, layout, q, Z, S).values()


def expect_features_outer(spec: KernelSpec, layout: FeatureLayout,
                          q: GaussianMoment, Z: np.ndarray,
                          S: np.ndarray) -> np.ndarray:
    """Closed-form E[ψ(x)ψ(x)ᵀ]; symmetric PSD."""
    return ExpectationWorkspace(spec, layout, q, Z, S).outer()


def expect_features_jac(spec: KernelSpec, layout: FeatureLayout,
                        q: GaussianMoment, Z: np.ndarray,
                        S: np.ndarray) -> np.ndarray:
    """Closed-form E[∂ψ(x)/∂x], shape (total, K)."""
    return ExpectationWorkspace(spec, layout, q, Z, S).jac()
