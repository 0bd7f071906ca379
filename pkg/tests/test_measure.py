import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from mvsde.errors import UnsupportedInputError
from mvsde.measure import (
    PSI_PRIME_SUP,
    EmpiricalMeasure,
    constant_alpha,
    empirical_mean,
    empirical_moment,
    sine_alpha,
    tree_sum,
    w2_bruteforce,
    w2_sorted,
)

finite = st.floats(-100, 100, allow_nan=False, allow_infinity=False)


def _pair(max_n):
    return st.integers(1, max_n).flatmap(
        lambda n: st.tuples(arrays(float, n, elements=finite), arrays(float, n, elements=finite))
    )


class TestEmpiricalMeasure:
    def test_rejects_empty_and_nonfinite(self):
        with pytest.raises(ValueError):
            EmpiricalMeasure([])
        with pytest.raises(ValueError):
            EmpiricalMeasure([1.0, math.nan])

    def test_copies_and_freezes(self):
        x = np.array([1.0, 2.0])
        mu = EmpiricalMeasure(x)
        x[0] = 99.0
        assert mu.samples[0] == 1.0
        with pytest.raises(ValueError):
            mu.samples[0] = 3.0

    def test_integrate(self):
        mu = EmpiricalMeasure([1.0, 2.0, 3.0])
        assert mu.integrate(lambda y: y * y) == pytest.approx(14 / 3)
        assert len(mu) == 3 and mu.n == 3


class TestW2:
    def test_examples(self):
        assert w2_sorted([1.0, 2.0, 3.0], [1.0, 2.0, 3.0]) == 0.0
        assert w2_sorted([1.0], [4.0]) == 3.0
        assert w2_sorted([0.0, 2.0], [1.0, 5.0]) == pytest.approx(math.sqrt(5))
        assert w2_bruteforce([0.0, 2.0], [5.0, 1.0]) == pytest.approx(math.sqrt(5))
        assert w2_bruteforce([2.5], [-1.0]) == 3.5

    def test_unequal_sizes(self):
        with pytest.raises(UnsupportedInputError):
            w2_sorted([1.0], [1.0, 2.0])
        with pytest.raises(UnsupportedInputError):
            w2_bruteforce([1.0], [1.0, 2.0])

    def test_bruteforce_refuses_large(self):
        with pytest.raises(UnsupportedInputError):
            w2_bruteforce(np.zeros(9), np.zeros(9))

    @settings(max_examples=1000)
    @given(_pair(6))
    def test_sorted_matches_bruteforce(self, pair):
        # adversarial inputs (near-ties at 1e-150 scale) can let a suboptimal
        # matching round one ulp lower, so allow a few ulps here
        x, y = pair
        assert w2_sorted(x, y) == pytest.approx(w2_bruteforce(x, y), rel=4e-16, abs=0)

    @settings(max_examples=500)
    @given(st.integers(1, 6).flatmap(lambda n: st.tuples(
        arrays(float, n, elements=st.integers(-1000, 1000).map(float)),
        arrays(float, n, elements=st.integers(-1000, 1000).map(float)))))
    def test_sorted_equals_bruteforce_exact_squares(self, pair):
        x, y = pair
        assert w2_sorted(x, y) == w2_bruteforce(x, y)

    def test_sorted_equals_bruteforce_random(self):
        rng = np.random.default_rng(2024)
        for _ in range(1000):
            n = int(rng.integers(1, 7))
            x, y = rng.standard_normal(n) * 3, rng.standard_normal(n) * 3 + 1
            assert w2_sorted(x, y) == w2_bruteforce(x, y)

    @settings(max_examples=1000)
    @given(st.integers(1, 64).flatmap(lambda n: st.tuples(*[arrays(float, n, elements=finite)] * 3)))
    def test_metric_properties(self, triple):
        x, y, z = triple
        dxy, dyz, dxz = w2_sorted(x, y), w2_sorted(y, z), w2_sorted(x, z)
        assert dxy == w2_sorted(y, x)
        assert dxz <= dxy + dyz + 1e-9 * (1 + dxy + dyz)
        assert w2_sorted(x, x) == 0.0

    def test_zero_iff_same_sorted(self):
        assert w2_sorted([3.0, 1.0, 2.0], [1.0, 2.0, 3.0]) == 0.0
        assert w2_sorted([3.0, 1.0, 2.0], [1.0, 2.0, 3.5]) > 0.0


class TestMoments:
    def test_examples(self):
        assert empirical_moment([0.0, 0.0, 0.0], 2) == 0.0
        assert empirical_moment([1.0, -1.0], 2) == 1.0
        assert empirical_moment([1.0, 2.0, 3.0], 4) == pytest.approx(98 / 3)
        assert empirical_mean([5.0]) == 5.0
        assert empirical_mean([-1.0, 1.0]) == 0.0
        assert empirical_mean([1.0, 2.0, 6.0]) == 3.0

    def test_invalid_order(self):
        for p in (0, -1, 1.5):
            with pytest.raises(ValueError):
                empirical_moment([1.0], p)

    @given(arrays(float, st.integers(1, 50), elements=st.floats(-10, 10)), st.floats(1.01, 5),
           st.sampled_from([1, 2, 4, 8]))
    def test_monotone_under_scaling(self, x, lam, p):
        assert empirical_moment(lam * x, p) >= empirical_moment(x, p)


class TestTreeSum:
    def test_small_cases(self):
        assert tree_sum([]) == 0.0
        assert tree_sum([2.5]) == 2.5
        assert tree_sum([1.0, 2.0, 3.0]) == 6.0

    def test_accuracy_against_fsum(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal(10**4) * 1e3 + 1e4
        exact = math.fsum(x.tolist())
        tree_err = abs(float(tree_sum(x)) - exact)
        fold_err = abs(sum(x.tolist()) - exact)
        assert tree_err <= max(fold_err, 1e-9 * abs(exact))
        assert tree_err / abs(exact) < 1e-13

    def test_axis(self):
        a = np.arange(12.0).reshape(3, 4)
        assert np.array_equal(tree_sum(a, axis=1), a.sum(axis=1))
        assert np.array_equal(tree_sum(a, axis=0), a.sum(axis=0))

    def test_independent_of_memory_layout(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((37, 53))
        assert np.array_equal(tree_sum(a, axis=0), tree_sum(np.asfortranarray(a), axis=0))


class TestAlphaFunctionals:
    def test_constant(self):
        af = constant_alpha(-0.7)
        mu = EmpiricalMeasure([0.3, 1.0])
        assert af.eval(mu) == -0.7 and af.is_constant
        assert np.all(af.d_mu(mu, np.array([0.1, 2.0])) == 0)

    def test_psi_prime_sup(self):
        y = np.linspace(0, 5, 2_000_001)
        assert PSI_PRIME_SUP == pytest.approx(np.max(2 * y / (1 + y * y) ** 2), rel=1e-10)
        assert PSI_PRIME_SUP == pytest.approx(0.6495190528, rel=1e-9)

    def test_sine_alpha_values_and_bounds(self):
        af = sine_alpha(0.3, -0.2)
        assert af.eval(EmpiricalMeasure([0.0])) == 0.3
        assert af.alpha_sup == pytest.approx(0.5)
        assert af.dalpha_sup == pytest.approx(0.2 * PSI_PRIME_SUP)
        rng = np.random.default_rng(1)
        for _ in range(100):
            mu = EmpiricalMeasure(rng.standard_normal(rng.integers(1, 30)) * 3)
            y = rng.standard_normal(50) * 4
            assert abs(af.eval(mu)) <= af.alpha_sup
            assert np.all(np.abs(af.d_mu(mu, y)) <= af.dalpha_sup + 1e-15)
            assert af.d_mu(mu, np.array([0.0]))[0] == 0.0

    def test_derivatives_by_empirical_projection(self):
        """Coordinate derivatives of x -> alpha(mu^x) versus the callbacks.

        d/dx_i alpha = d_mu(x_i) / N and
        d2/dx_i dx_j alpha = delta_ij dy_d_mu(x_i) / N + d2_mu(x_i, x_j) / N^2.
        """
        af = sine_alpha(0.1, 0.8)
        rng = np.random.default_rng(11)
        x = rng.standard_normal(5) * 1.5
        n = x.size
        mu = EmpiricalMeasure(x)

        def f(v):
            return af.eval(EmpiricalMeasure(v))

        h = 1e-5
        grad = np.empty(n)
        hess = np.empty((n, n))
        for i in range(n):
            e_i = np.eye(n)[i] * h
            grad[i] = (f(x + e_i) - f(x - e_i)) / (2 * h)
            for j in range(n):
                e_j = np.eye(n)[j] * h
                hess[i, j] = (f(x + e_i + e_j) - f(x + e_i - e_j)
                              - f(x - e_i + e_j) + f(x - e_i - e_j)) / (4 * h * h)
        assert np.allclose(grad, af.d_mu(mu, x) / n, atol=1e-9)
        yy, yp = np.meshgrid(x, x, indexing="ij")
        expected = np.diag(af.dy_d_mu(mu, x)) / n + af.d2_mu(mu, yy, yp) / n**2
        assert np.allclose(hess, expected, atol=1e-5)
