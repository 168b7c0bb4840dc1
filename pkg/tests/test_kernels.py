import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gpimpute.kernels import (
    DimensionMismatchError,
    KernelFamily,
    KernelSpec,
    SingularMatrixError,
    build_correlation,
    expect_k,
    expect_kk,
    expect_kk_pairwise,
    kernel_value,
)

SE = KernelFamily.SQUARED_EXPONENTIAL


def se(*lengthscales):
    return KernelSpec(SE, np.array(lengthscales, dtype=float))


class TestKernelValue:
    def test_zero_distance_is_one(self):
        assert kernel_value(se(1.0), [0.3], [0.3]) == 1.0

    def test_se_convention(self):
        # k(r) = exp(-r^2 / l^2), documented convention
        for r in [0.1, 0.5, 2.0]:
            assert kernel_value(se(1.0), [0.0], [r]) == pytest.approx(np.exp(-(r**2)))
        # self-consistency: k(l) * k(l) = k(l*sqrt(2)) * k(0)
        l = 0.7
        lhs = kernel_value(se(l), [0.0], [l]) ** 2
        rhs = kernel_value(se(l), [0.0], [l * np.sqrt(2)]) * 1.0
        assert lhs == pytest.approx(rhs, rel=1e-12)

    def test_multiplicative_form(self):
        spec = se(1.0, 2.0)
        v = kernel_value(spec, [0.0, 0.0], [1.0, 2.0])
        v1 = kernel_value(se(1.0), [0.0], [1.0])
        v2 = kernel_value(se(2.0), [0.0], [2.0])
        assert v == pytest.approx(v1 * v2, rel=1e-14)

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatchError):
            kernel_value(se(1.0), [0.0, 1.0], [0.0, 1.0])

    def test_matern(self):
        spec = KernelSpec(KernelFamily.MATERN_2_5, np.array([1.0]))
        assert kernel_value(spec, [0.0], [0.0]) == 1.0
        r = 0.8
        z = np.sqrt(5) * r
        expected = (1 + z + z**2 / 3) * np.exp(-z)
        assert kernel_value(spec, [0.0], [r]) == pytest.approx(expected)

    @settings(max_examples=100, deadline=None)
    @given(
        # quantized to keep |a-b| either 0 or large enough that k < 1 in floats
        a=st.floats(-5, 5).map(lambda x: round(x, 3)),
        b=st.floats(-5, 5).map(lambda x: round(x, 3)),
        l=st.floats(0.5, 5),  # avoid exp underflow to exactly 0
        family=st.sampled_from(list(KernelFamily)),
    )
    def test_symmetric_bounded(self, a, b, l, family):
        spec = KernelSpec(family, np.array([l]))
        v1 = kernel_value(spec, [a], [b])
        v2 = kernel_value(spec, [b], [a])
        assert v1 == v2
        assert 0 < v1 <= 1
        assert (v1 == 1) == (a == b)


class TestBuildCorrelation:
    def test_single_point(self):
        corr = build_correlation(se(1.0), 0.1, [[0.5]])
        assert np.allclose(corr.values, [[1.1]])

    def test_duplicate_rows_nugget_indicator(self):
        # nugget added to every identical-row pair, not just the diagonal
        X = np.array([[0.3], [0.3], [1.0]])
        corr = build_correlation(se(1.0), 0.2, X)
        assert corr.values[0, 1] == pytest.approx(1.2)
        assert corr.values[0, 0] == pytest.approx(1.2)
        assert corr.values[2, 2] == pytest.approx(1.2)
        assert corr.values[0, 2] == pytest.approx(kernel_value(se(1.0), [0.3], [1.0]))

    def test_rank_one_duplicate_no_nugget_jitter(self):
        # two identical rows, eta=0: exactly singular; jitter policy repairs and records
        corr = build_correlation(se(1.0), 0.0, [[0.3], [0.3]])
        assert corr.jitter_applied > 0
        assert corr.jitter_applied <= 1e-4

    def test_elementwise_agreement(self):
        X = np.array([[0.1], [0.4], [0.9]])
        eta = 0.05
        corr = build_correlation(se(0.7), eta, X)
        for i in range(3):
            for j in range(3):
                expected = kernel_value(se(0.7), X[i], X[j]) + (eta if i == j else 0)
                assert abs(corr.values[i, j] - expected) < 1e-15

    def test_cholesky_reconstruction(self):
        rng = np.random.default_rng(0)
        X = rng.uniform(0, 1, (40, 2))
        corr = build_correlation(se(0.3, 0.5), 1e-6, X)
        R_hat = corr.chol @ corr.chol.T
        target = corr.values + corr.jitter_applied * np.eye(40)
        rel = np.linalg.norm(R_hat - target) / np.linalg.norm(target)
        assert rel <= 1e-8

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        X = rng.uniform(-2, 2, (25, 3))
        corr = build_correlation(se(1.0, 1.0, 1.0), 0.01, X)
        assert np.allclose(corr.values, corr.values.T, rtol=1e-12)

    def test_singular_error_names_jitter(self):
        # an indefinite matrix cannot be repaired; error names the jitter ceiling
        from gpimpute.kernels import _cholesky_with_jitter

        bad = np.array([[1.0, 2.0], [2.0, 1.0]])
        with pytest.raises(SingularMatrixError, match="0.0001"):
            _cholesky_with_jitter(bad)


def gauss_hermite_expect(f, m, v, nodes=64):
    x, w = np.polynomial.hermite.hermgauss(nodes)
    return float(np.sum(w * f(m + np.sqrt(2 * v) * x)) / np.sqrt(np.pi))


class TestExpectK:
    def test_delta_at_point(self):
        assert expect_k(se(1.0), 0.5, 0.0, 0.5) == pytest.approx(1.0)

    def test_delta_distribution(self):
        spec = se(1.3)
        assert expect_k(spec, 0.2, 0.0, 0.9) == pytest.approx(
            kernel_value(spec, [0.2], [0.9])
        )

    def test_monte_carlo_oracle(self):
        spec = se(1.0)
        rng = np.random.default_rng(42)
        W = rng.normal(0.0, np.sqrt(0.5), 10**6)
        samples = np.exp(-((W - 0.7) ** 2))
        mc_mean = samples.mean()
        mc_se = samples.std(ddof=1) / np.sqrt(len(samples))
        assert abs(expect_k(spec, 0.0, 0.5, 0.7) - mc_mean) < 3 * mc_se

    def test_gauss_hermite_grid(self):
        # grid kept inside the 64-node quadrature's spectral-accuracy regime
        rng = np.random.default_rng(7)
        for _ in range(100):
            l = rng.uniform(0.7, 2.0)
            m = rng.uniform(-1, 1)
            v = rng.uniform(0, 0.4)
            w = rng.uniform(-1, 1)
            gh = gauss_hermite_expect(lambda x: np.exp(-((x - w) ** 2) / l**2), m, v)
            assert abs(expect_k(se(l), m, v, w) - gh) < 1e-10

    def test_continuity_at_zero_variance(self):
        spec = se(0.8)
        for m, w in [(0.0, 0.3), (1.0, -0.5), (0.2, 0.2)]:
            assert abs(
                expect_k(spec, m, 1e-12, w) - kernel_value(spec, [m], [w])
            ) <= 1e-6

    def test_peak_monotone_in_variance(self):
        spec = se(1.0)
        vals = [expect_k(spec, 0.4, v, 0.4) for v in np.linspace(0, 3, 20)]
        assert all(a > b for a, b in zip(vals, vals[1:]))

    def test_matern_not_implemented(self):
        spec = KernelSpec(KernelFamily.MATERN_2_5, np.array([1.0]))
        with pytest.raises(NotImplementedError):
            expect_k(spec, 0.0, 0.1, 0.5)


class TestExpectKK:
    def test_delta_distribution(self):
        spec = se(0.9)
        got = expect_kk(spec, 0.1, 0.0, -0.4, 0.8)
        want = kernel_value(spec, [0.1], [-0.4]) * kernel_value(spec, [0.1], [0.8])
        assert got == pytest.approx(want, rel=1e-12)

    def test_jensen(self):
        spec = se(1.0)
        for v in [0.1, 0.5, 2.0]:
            assert expect_kk(spec, 0.3, v, 0.7, 0.7) >= expect_k(spec, 0.3, v, 0.7) ** 2

    def test_symmetry_in_w(self):
        spec = se(1.0)
        assert expect_kk(spec, 0.2, 0.4, -0.5, 1.0) == pytest.approx(
            expect_kk(spec, 0.2, 0.4, 1.0, -0.5), rel=1e-14
        )

    def test_monte_carlo_oracle(self):
        spec = se(1.0)
        rng = np.random.default_rng(43)
        W = rng.normal(0.2, np.sqrt(0.3), 10**6)
        samples = np.exp(-((W + 0.5) ** 2)) * np.exp(-((W - 1.0) ** 2))
        mc_mean = samples.mean()
        mc_se = samples.std(ddof=1) / np.sqrt(len(samples))
        assert abs(expect_kk(spec, 0.2, 0.3, -0.5, 1.0) - mc_mean) < 3 * mc_se

    def test_gauss_hermite_grid(self):
        rng = np.random.default_rng(8)
        for _ in range(100):
            l = rng.uniform(0.7, 2.0)
            m, v = rng.uniform(-1, 1), rng.uniform(0, 0.4)
            wi, wj = rng.uniform(-1, 1, 2)
            gh = gauss_hermite_expect(
                lambda x: np.exp(-((x - wi) ** 2) / l**2) * np.exp(-((x - wj) ** 2) / l**2),
                m,
                v,
            )
            assert abs(expect_kk(se(l), m, v, wi, wj) - gh) < 1e-10

    def test_pairwise_matches_scalar(self):
        spec = se(0.8, 1.2)
        rng = np.random.default_rng(9)
        W = rng.uniform(-1, 1, (5, 2))
        m, v = np.array([0.1, -0.2]), np.array([0.3, 0.05])
        J = expect_kk_pairwise(spec, m, v, W)
        assert np.allclose(J, J.T, rtol=1e-14)
        for i in range(5):
            for j in range(5):
                assert J[i, j] == pytest.approx(expect_kk(spec, m, v, W[i], W[j]), rel=1e-12)
