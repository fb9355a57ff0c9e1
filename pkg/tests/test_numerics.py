"""Tests for grids, quadrature, interpolation and guarded PSD solves."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from latentsde.errors import InvalidArgumentError, NumericalError
from latentsde.numerics import (
    CholeskyFactor,
    TimeGrid,
    floor_psd,
    gauss_legendre,
    interp_linear,
    psd_solve,
    sym,
    trapezoid_weights,
)


class TestTimeGrid:
    def test_point_count_and_snapping(self):
        g = TimeGrid(0.0, 1.0, 0.001)
        assert g.steps == 1000
        assert g.n_points == 1001
        assert g.t_end == pytest.approx(1.0)
        t = g.times()
        assert t.shape == (1001,)
        assert_allclose(np.diff(t), 0.001)

    def test_rounds_to_nearest_step(self):
        # 0.9995 / 0.001 rounds up to 1000 steps; t_end snaps onto the grid.
        g = TimeGrid(0.0, 0.9995, 0.001)
        assert g.steps == 1000
        assert g.t_end == pytest.approx(1.0)

    def test_nearest_index(self):
        g = TimeGrid(0.0, 1.0, 0.1)
        assert_allclose(g.nearest_index([0.0, 0.04, 0.06, 1.0]), [0, 0, 1, 10])
        # out-of-range times clip to the boundary indices
        assert_allclose(g.nearest_index([-0.3, 1.7]), [0, 10])

    def test_rejects_bad_spans(self):
        with pytest.raises(InvalidArgumentError):
            TimeGrid(0.0, 1.0, -0.1)
        with pytest.raises(InvalidArgumentError):
            TimeGrid(1.0, 1.0, 0.1)
        with pytest.raises(InvalidArgumentError):
            TimeGrid(0.0, 0.01, 0.1)


class TestGaussLegendre:
    def test_single_node_is_midpoint_rule(self):
        q = gauss_legendre(-1.0, 1.0, 1)
        assert_allclose(q.nodes, [0.0], atol=1e-15)
        assert_allclose(q.weights, [2.0])

    def test_two_nodes_match_legendre_roots(self):
        q = gauss_legendre(-1.0, 1.0, 2)
        assert_allclose(np.sort(q.nodes), [-0.5773502692, 0.5773502692], atol=1e-9)
        assert_allclose(q.weights, [1.0, 1.0])
        # degree-2 exactness: ∫_{-1}^{1} x² dx = 2/3
        assert_allclose(q.integrate(q.nodes**2), 2.0 / 3.0, rtol=1e-12)

    def test_quartic_on_unit_interval(self):
        q = gauss_legendre(0.0, 1.0, 5)
        assert_allclose(q.integrate(q.nodes**4), 0.2, atol=1e-12)

    def test_monomial_exactness_sweep(self):
        # n nodes must integrate x^p exactly for all p ≤ 2n − 1
        for n in range(1, 9):
            q = gauss_legendre(0.3, 2.7, n)
            for p in range(2 * n):
                exact = (2.7 ** (p + 1) - 0.3 ** (p + 1)) / (p + 1)
                assert_allclose(q.integrate(q.nodes**p), exact, rtol=1e-10)

    def test_weights_sum_to_interval_length(self):
        rng = np.random.default_rng(7)
        for _ in range(20):
            a = rng.uniform(-5, 5)
            b = a + rng.uniform(0.1, 10)
            n = rng.integers(1, 12)
            q = gauss_legendre(a, b, int(n))
            assert_allclose(q.weights.sum(), b - a, rtol=1e-12)
            assert np.all(q.weights > 0)
            assert np.all((q.nodes >= a) & (q.nodes <= b))

    def test_invalid_arguments(self):
        with pytest.raises(InvalidArgumentError):
            gauss_legendre(0.0, 1.0, 0)
        with pytest.raises(InvalidArgumentError):
            gauss_legendre(1.0, 0.5, 3)

    def test_integrate_contracts_leading_axis(self):
        q = gauss_legendre(0.0, 2.0, 4)
        vals = np.stack([np.eye(3) * t for t in q.nodes])  # (n, 3, 3)
        out = q.integrate(vals)
        assert_allclose(out, np.eye(3) * 2.0, rtol=1e-12)


class TestTrapezoidWeights:
    def test_pattern_and_total(self):
        g = TimeGrid(0.0, 1.0, 0.25)
        w = trapezoid_weights(g)
        assert_allclose(w, [0.125, 0.25, 0.25, 0.25, 0.125])
        assert_allclose(w.sum(), g.span)

    def test_exact_for_affine_functions(self):
        g = TimeGrid(0.5, 2.5, 0.01)
        t = g.times()
        w = trapezoid_weights(g)
        assert_allclose(w @ (3.0 * t - 1.2), 3.0 / 2.0 * (2.5**2 - 0.5**2) - 1.2 * 2.0,
                        rtol=1e-12)


class TestInterpLinear:
    def test_grid_point_identity(self):
        g = TimeGrid(0.0, 1.0, 0.25)
        vals = np.arange(5, dtype=float) ** 2
        for r, t in enumerate(g.times()):
            assert interp_linear(g, vals, t) == pytest.approx(vals[r], abs=1e-14)

    def test_midpoint_is_arithmetic_mean(self):
        g = TimeGrid(0.0, 1.0, 0.5)
        vals = np.array([[1.0, 2.0], [3.0, 8.0], [5.0, 0.0]])
        assert_allclose(interp_linear(g, vals, 0.25), [2.0, 5.0])

    def test_constant_values(self):
        g = TimeGrid(0.0, 2.0, 0.1)
        vals = np.full((g.n_points, 2, 2), 3.5)
        rng = np.random.default_rng(0)
        for t in rng.uniform(0.0, 2.0, size=10):
            assert_allclose(interp_linear(g, vals, t), 3.5)

    def test_affine_exactness_property(self):
        g = TimeGrid(-1.0, 3.0, 0.037)
        t_grid = g.times()
        vals = 2.5 * t_grid[:, None] + np.array([0.3, -1.1])
        rng = np.random.default_rng(11)
        tq = rng.uniform(g.t0, g.t_end, size=50)
        out = interp_linear(g, vals, tq)
        expected = 2.5 * tq[:, None] + np.array([0.3, -1.1])
        assert_allclose(out, expected, atol=1e-12)

    def test_out_of_range_rejected(self):
        g = TimeGrid(0.0, 1.0, 0.1)
        vals = np.zeros(g.n_points)
        with pytest.raises(InvalidArgumentError):
            interp_linear(g, vals, -0.05)
        with pytest.raises(InvalidArgumentError):
            interp_linear(g, vals, 1.05)

    def test_matrix_values_batched_queries(self):
        g = TimeGrid(0.0, 1.0, 0.5)
        vals = np.stack([np.eye(2) * r for r in range(3)])
        out = interp_linear(g, vals, [0.25, 0.75])
        assert out.shape == (2, 2, 2)
        assert_allclose(out[0], 0.5 * np.eye(2))
        assert_allclose(out[1], 1.5 * np.eye(2))


class TestPsdSolve:
    def test_identity_solve(self):
        b = np.array([1.0, -2.0, 0.5])
        assert_allclose(psd_solve(np.eye(3), b, jitter=0.0), b)

    def test_diagonal_solve(self):
        out = psd_solve(np.diag([2.0, 2.0]), np.array([2.0, 4.0]), jitter=0.0)
        assert_allclose(out, [1.0, 2.0])

    def test_rank_deficient_with_explicit_jitter(self):
        mat = np.array([[1.0, 1.0], [1.0, 1.0]])
        rhs = np.array([1.0, 0.0])
        out = psd_solve(mat, rhs, jitter=1e-6)
        # oracle: closed-form inverse of the explicitly jittered 2×2 system
        a, b = 1.0 + 1e-6, 1.0
        inv = np.array([[a, -b], [-b, a]]) / (a * a - b * b)
        assert_allclose(out, inv @ rhs, rtol=1e-9)
        assert np.all(np.isfinite(out))

    def test_recovers_solution_well_conditioned(self):
        rng = np.random.default_rng(3)
        for _ in range(25):
            n = int(rng.integers(2, 9))
            q, _ = np.linalg.qr(rng.standard_normal((n, n)))
            # eigenvalues spread over ≤ 6 orders of magnitude
            lam = 10.0 ** rng.uniform(-3, 3, size=n)
            mat = (q * lam) @ q.T
            x = rng.standard_normal((n, 3))
            out = psd_solve(mat, mat @ x, jitter=0.0)
            assert np.linalg.norm(out - x) <= 1e-8 * max(1.0, np.linalg.norm(x))

    def test_escalation_failure_reports_jitter(self):
        # negative definite matrix: no amount of permitted jitter fixes it
        mat = -1e6 * np.eye(3)
        with pytest.raises(NumericalError) as e:
            psd_solve(mat, np.ones(3), jitter=0.0)
        assert e.value.attempted_jitter > 0

    def test_asymmetric_input_rejected(self):
        mat = np.array([[1.0, 0.5], [0.0, 1.0]])
        with pytest.raises(InvalidArgumentError):
            psd_solve(mat, np.ones(2))

    def test_deterministic(self):
        rng = np.random.default_rng(5)
        a = rng.standard_normal((6, 6))
        mat = a @ a.T
        rhs = rng.standard_normal((6, 2))
        assert np.array_equal(psd_solve(mat, rhs), psd_solve(mat, rhs))

    def test_factor_logdet_and_inverse(self):
        rng = np.random.default_rng(9)
        a = rng.standard_normal((5, 5))
        mat = a @ a.T + 5.0 * np.eye(5)
        f = CholeskyFactor(mat)
        assert f.jitter == 0.0
        sign, logdet = np.linalg.slogdet(mat)
        assert sign == 1.0
        assert f.logdet() == pytest.approx(logdet, rel=1e-10)
        assert_allclose(f.inverse() @ mat, np.eye(5), atol=1e-9)


class TestSymmetryHelpers:
    def test_sym(self):
        a = np.array([[1.0, 2.0], [0.0, 3.0]])
        assert_allclose(sym(a), [[1.0, 1.0], [1.0, 3.0]])

    def test_floor_psd_leaves_psd_untouched(self):
        mat = np.array([[2.0, 0.3], [0.3, 1.0]])
        assert_allclose(floor_psd(mat), mat)

    def test_floor_psd_clips_negative_eigenvalue(self):
        v = np.array([1.0, -1.0]) / np.sqrt(2.0)
        mat = np.eye(2) - 1.5 * np.outer(v, v)  # eigenvalues 1 and −0.5
        out = floor_psd(mat, floor=0.0)
        w = np.linalg.eigvalsh(out)
        assert w.min() >= -1e-12
        assert w.max() == pytest.approx(1.0)
