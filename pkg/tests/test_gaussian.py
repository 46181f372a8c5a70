import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flexmpc import GaussianBelief, SingularCovariance, affine_push, log_density, max_eig_sqrt
from flexmpc.errors import NumericalError
from flexmpc.gaussian import _max_eig_jit, _max_eig_numpy, cholesky, max_eig_sqrt_many


def explicit_inverse_log_density(mean, cov, x):
    """Brute-force evaluation with an explicit inverse and determinant."""
    r = x - mean
    n = len(mean)
    return -0.5 * r @ np.linalg.inv(cov) @ r - 0.5 * (n * np.log(2 * np.pi) + np.log(np.linalg.det(cov)))


def cubic_max_root(S):
    """Largest eigenvalue of a symmetric 3x3 matrix by the trigonometric cubic formula."""
    q = np.trace(S) / 3.0
    p1 = S[0, 1] ** 2 + S[0, 2] ** 2 + S[1, 2] ** 2
    p2 = (S[0, 0] - q) ** 2 + (S[1, 1] - q) ** 2 + (S[2, 2] - q) ** 2 + 2 * p1
    p = np.sqrt(p2 / 6.0)
    Bm = (S - q * np.eye(3)) / p
    r = np.clip(np.linalg.det(Bm) / 2.0, -1.0, 1.0)
    return q + 2.0 * p * np.cos(np.arccos(r) / 3.0)


def random_spd(rng, n, scale=1.0):
    M = rng.normal(0.0, scale, (n, n))
    return M @ M.T + 0.1 * np.eye(n)


spd2 = st.tuples(
    st.floats(0.05, 5.0), st.floats(0.05, 5.0), st.floats(-0.95, 0.95)
).map(lambda t: np.array([[t[0], t[2] * np.sqrt(t[0] * t[1])], [t[2] * np.sqrt(t[0] * t[1]), t[1]]]))


class TestBelief:
    def test_symmetrises_covariance(self):
        g = GaussianBelief([0.0, 0.0], [[1.0, 0.2], [0.0, 1.0]])
        assert np.array_equal(g.cov, g.cov.T)
        assert g.cov[0, 1] == pytest.approx(0.1)

    def test_shape_mismatch_raises(self):
        with pytest.raises(ValueError):
            GaussianBelief([0.0, 0.0], np.eye(3))

    def test_non_finite_raises(self):
        with pytest.raises(ValueError):
            GaussianBelief([np.nan, 0.0], np.eye(2))


class TestLogDensity:
    def test_standard_normal_1d(self):
        assert log_density(GaussianBelief([0.0], [[1.0]]), [0.0]) == pytest.approx(-0.5 * np.log(2 * np.pi), rel=1e-15)
        assert log_density(GaussianBelief([0.0], [[1.0]]), [0.0]) == pytest.approx(-0.918938533204673)

    def test_identity_2d_at_mean(self):
        assert log_density(GaussianBelief([1.0, -2.0], np.eye(2)), [1.0, -2.0]) == pytest.approx(-np.log(2 * np.pi))

    def test_random_3d_matches_explicit_inverse(self, rng):
        for _ in range(20):
            S = random_spd(rng, 3)
            m = rng.normal(size=3)
            x = rng.normal(size=3)
            got = log_density(GaussianBelief(m, S), x)
            assert got == pytest.approx(explicit_inverse_log_density(m, S, x), rel=1e-10)

    def test_singular_after_jitter_raises(self):
        with pytest.raises(SingularCovariance):
            cholesky(np.array([[1.0, 0.0], [0.0, -1.0]]))

    def test_psd_rank_deficient_is_jittered(self):
        L, used = cholesky(np.array([[1.0, 1.0], [1.0, 1.0]]))
        assert np.allclose(L @ L.T, used)
        assert used[0, 0] > 1.0

    @given(spd2, st.tuples(st.floats(-3, 3), st.floats(-3, 3)))
    def test_property_matches_explicit_inverse(self, S, x):
        m = np.array([0.3, -0.2])
        got = log_density(GaussianBelief(m, S), np.array(x))
        assert got == pytest.approx(explicit_inverse_log_density(m, S, np.array(x)), rel=1e-9, abs=1e-9)


class TestAffinePush:
    def test_identity_dynamics_accumulate_noise(self):
        S0 = np.array([[0.5, 0.1], [0.1, 0.3]])
        g = GaussianBelief([1.0, 2.0], S0)
        for _ in range(7):
            g = affine_push(g, np.eye(2), np.zeros(2), 0.01 * np.eye(2))
        assert np.allclose(g.cov, S0 + 7 * 0.01 * np.eye(2), atol=1e-15)
        assert np.array_equal(g.mean, [1.0, 2.0])

    def test_zero_map_collapses(self):
        Q0 = np.array([[0.2, 0.05], [0.05, 0.1]])
        g = affine_push(GaussianBelief([5.0, -5.0], 3 * np.eye(2)), np.zeros((2, 2)), [1.0, 2.0], Q0)
        assert np.array_equal(g.mean, [1.0, 2.0])
        assert np.allclose(g.cov, Q0)

    def test_dimension_mismatch_raises(self):
        with pytest.raises(ValueError):
            affine_push(GaussianBelief([0.0, 0.0], np.eye(2)), np.eye(3), np.zeros(3), np.eye(3))

    @given(spd2, st.lists(st.floats(-2, 2), min_size=4, max_size=4))
    def test_property_covariance_stays_psd(self, S, entries):
        M = np.array(entries).reshape(2, 2)
        g = affine_push(GaussianBelief([0.0, 0.0], S), M, [0.0, 0.0], 1e-6 * np.eye(2))
        assert np.min(np.linalg.eigvalsh(g.cov)) >= -1e-12
        assert np.array_equal(g.cov, g.cov.T)


class TestMaxEig:
    def test_diagonal(self):
        assert max_eig_sqrt(np.diag([4.0, 1.0])) == pytest.approx(2.0, rel=1e-12)

    @pytest.mark.parametrize("n", [1, 2, 3, 5])
    def test_identity(self, n):
        assert max_eig_sqrt(np.eye(n)) == pytest.approx(1.0, rel=1e-12)

    def test_zero_matrix(self):
        assert max_eig_sqrt(np.zeros((2, 2))) == 0.0

    def test_random_3x3_matches_cubic_roots(self, rng):
        for _ in range(50):
            S = random_spd(rng, 3)
            assert max_eig_sqrt(S) ** 2 == pytest.approx(cubic_max_root(S), rel=1e-8)

    def test_repeated_top_eigenvalue(self):
        S = np.diag([2.0, 2.0, 0.5])
        assert max_eig_sqrt(S) == pytest.approx(np.sqrt(2.0), rel=1e-10)

    def test_non_square_raises(self):
        with pytest.raises(ValueError):
            max_eig_sqrt(np.ones((2, 3)))

    def test_non_convergence_raises(self):
        with pytest.raises(NumericalError):
            max_eig_sqrt(np.diag([1.0, 0.999999]) + 0.3, tol=1e-16, max_iter=1)

    @given(spd2)
    def test_property_bounds_directional_std(self, S):
        sigma = max_eig_sqrt(S)
        for a in (np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([0.6, 0.8])):
            assert np.sqrt(a @ S @ a) <= sigma * (1 + 1e-9)
        assert sigma ** 2 == pytest.approx(np.linalg.eigvalsh(S)[-1], rel=1e-8)

    def test_jit_and_numpy_kernels_agree(self, rng):
        stack = np.array([random_spd(rng, 2, 0.3) for _ in range(200)])
        a = _max_eig_jit(stack, 1e-12, 10_000)
        b = _max_eig_numpy(stack, 1e-12, 10_000)
        assert np.allclose(a, b, rtol=1e-10)
        assert np.allclose(a, np.linalg.eigvalsh(stack)[:, -1], rtol=1e-10)

    def test_many_matches_single(self, rng):
        stack = np.array([random_spd(rng, 2) for _ in range(10)])
        assert np.allclose(max_eig_sqrt_many(stack), [max_eig_sqrt(S) for S in stack])
