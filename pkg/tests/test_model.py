import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from flexmpc import GaussianBelief, SingularCovariance
from flexmpc.errors import ConfigError
from flexmpc.mlp import MlpNet, mlp_forward, mlp_grad_check, relative_error
from flexmpc.model import (DECODER_FLOOR, NOISE_FLOOR, LinearModel, MlpModel, _linear_loglik_grad_impl,
                           chol_params, cov_from_chol, decode_physical, load_params, loglik_and_grad,
                           predict_latent, predict_observation, save_params)
from flexmpc.oracles import finite_difference_grad, gradient_check, random_linear_case, random_mlp_case
from flexmpc.plant import A1

B_TRUE = np.array([0.05, 0.10])


def linear(A=A1, B=B_TRUE, C=np.eye(2), sw=1e-4, sv=4e-4):
    return LinearModel.from_matrices(A, B, C, sw * np.eye(2), sv * np.eye(2))


def floor_noise_theta(A, B, C):
    # log-Cholesky entries this negative leave only the fixed floor
    return np.concatenate([np.ravel(A), B, np.ravel(C), [-60.0, 0.0, -60.0], [-60.0, 0.0, -60.0]])


class TestLayout:
    def test_round_trip_matrices(self):
        Sw = np.array([[2e-4, 5e-5], [5e-5, 1e-4]])
        Sv = np.array([[4e-4, 0.0], [0.0, 9e-4]])
        C = np.array([[1.0, 0.1], [-0.2, 0.9]])
        m = LinearModel.from_matrices(A1, B_TRUE, C, Sw, Sv)
        assert np.array_equal(m.A, A1)
        assert np.array_equal(m.B[:, 0], B_TRUE)
        assert np.array_equal(m.C, C)
        assert np.allclose(m.Sw, Sw, rtol=1e-12, atol=1e-20)
        assert np.allclose(m.Sv, Sv, rtol=1e-12, atol=1e-20)
        assert np.array_equal(m.phi, C.ravel())

    def test_theta_is_immutable(self):
        m = linear()
        with pytest.raises(ValueError):
            m.theta[0] = 1.0

    def test_wrong_length_raises(self):
        with pytest.raises(ValueError):
            LinearModel(np.zeros(15))

    def test_non_finite_raises(self):
        theta = linear().theta.copy()
        theta[3] = np.inf
        with pytest.raises(SingularCovariance):
            LinearModel(theta)

    def test_block_mask(self):
        m = linear()
        mask = m.block_mask(("A", "C"))
        assert mask.sum() == 8
        assert np.all(mask[0:4] == 1) and np.all(mask[6:10] == 1) and np.all(mask[4:6] == 0)
        with pytest.raises(ConfigError):
            m.block_mask(("D",))

    @given(st.floats(-3, 1), st.floats(-1, 1), st.floats(-3, 1))
    def test_property_chol_round_trip(self, a, b, c):
        p = np.array([a, b, c])
        assert np.allclose(chol_params(cov_from_chol(p)), p, atol=1e-7)


class TestPredict:
    def test_linear_predict_latent(self):
        g = predict_latent(linear(), GaussianBelief([0.0, 0.0], np.eye(2)), 0.0)
        assert np.array_equal(g.mean, [0.0, 0.0])
        assert np.allclose(g.cov, A1 @ A1.T + 1e-4 * np.eye(2), atol=1e-15)

    def test_identity_transition_only_adds_floor(self):
        m = LinearModel(floor_noise_theta(np.eye(2), [0.0, 0.0], np.eye(2)))
        S = np.array([[0.3, 0.1], [0.1, 0.2]])
        g = predict_latent(m, GaussianBelief([1.0, 2.0], S), 1.5)
        assert np.array_equal(g.mean, [1.0, 2.0])
        assert np.allclose(g.cov, S + NOISE_FLOOR * np.eye(2), atol=1e-18)

    def test_identity_observation(self):
        S = np.array([[0.3, 0.1], [0.1, 0.2]])
        g = predict_observation(linear(sv=4e-4), GaussianBelief([1.0, -1.0], S))
        assert np.array_equal(g.mean, [1.0, -1.0])
        assert np.allclose(g.cov, S + 4e-4 * np.eye(2), atol=1e-15)

    def test_zero_observation_map(self):
        m = linear(C=np.zeros((2, 2)))
        g = predict_observation(m, GaussianBelief([1.0, -1.0], np.eye(2)))
        assert np.array_equal(g.mean, [0.0, 0.0])
        assert np.allclose(g.cov, m.Sv)

    def test_decoder_is_identity_plus_floor(self):
        S = np.array([[0.3, 0.1], [0.1, 0.2]])
        g = decode_physical(linear(), GaussianBelief([1.0, 2.0], S))
        assert np.array_equal(g.mean, [1.0, 2.0])
        assert np.allclose(g.cov, S + DECODER_FLOOR * np.eye(2), atol=1e-18)

    def test_zero_weight_mlp_outputs_bias(self):
        trans = MlpNet(3, 2, hidden=8)
        obs = MlpNet(2, 2, hidden=8)
        trans.bm[:] = [0.3, -0.4]
        trans.bv[:] = [np.log(0.01), np.log(0.02)]
        m = MlpModel(trans, obs)
        g = m.predict_latent(GaussianBelief([5.0, 5.0], np.eye(2)), 1.0)
        assert np.allclose(g.mean, [0.3, -0.4])
        assert np.allclose(g.cov, np.diag([0.01, 0.02]))

    def test_mlp_from_linear_reproduces_linear(self, rng):
        lin = linear(C=np.array([[1.0, 0.1], [-0.1, 0.9]]))
        mlp = MlpModel.from_linear(lin, rng=rng, spread=0.0)
        for _ in range(10):
            b = GaussianBelief(rng.normal(size=2), 0.1 * np.eye(2))
            u = float(rng.normal())
            a, c = lin.predict_latent(b, u), mlp.predict_latent(b, u)
            assert np.allclose(a.mean, c.mean, atol=1e-12)
            assert np.allclose(a.cov, c.cov, rtol=1e-6)
            assert np.allclose(lin.predict_observation(a).mean, mlp.predict_observation(c).mean, atol=1e-12)

    def test_mlp_phi_is_observation_net(self):
        m = MlpModel.from_linear(linear(), hidden=8, rng=0)
        assert np.array_equal(m.phi, m.observation.flat)
        assert m.phi.shape[0] == m.observation.size


class TestGradient:
    def test_zero_innovation_gives_zero_b_gradient(self):
        m = linear()
        b = GaussianBelief([0.4, -0.3], 0.05 * np.eye(2))
        u = 0.7
        o = m.predict_observation(m.predict_latent(b, u)).mean
        _, g = loglik_and_grad(m, b, u, o)
        assert np.allclose(g[4:6], 0.0, atol=1e-14)

    def test_loglik_matches_log_density(self, rng):
        for _ in range(20):
            m, b, u, o = random_linear_case(rng)
            ll, _ = m.loglik_and_grad(b, u, o)
            assert ll == pytest.approx(m.loglik(b, u, o), rel=1e-12)

    def test_linear_finite_differences_h_1e5(self, rng):
        for _ in range(30):
            m, b, u, o = random_linear_case(rng)
            _, g = m.loglik_and_grad(b, u, o)
            for i, fd in finite_difference_grad(m, b, u, o, h=1e-5).items():
                assert relative_error(g[i], fd) <= 1e-5, i

    def test_mlp_finite_differences(self):
        assert gradient_check("mlp", n_configs=10, seed=3, n_coords=40) <= 1e-5

    def test_mlp_loglik_matches_log_density(self, rng):
        for _ in range(10):
            m, b, u, o = random_mlp_case(rng)
            ll, _ = m.loglik_and_grad(b, u, o)
            assert ll == pytest.approx(m.loglik(b, u, o), rel=1e-10)

    def test_non_finite_observation_raises(self):
        with pytest.raises(ValueError):
            linear().loglik_and_grad(GaussianBelief([0, 0], np.eye(2)), 0.0, [np.nan, 0.0])

    def test_numpy_kernel_matches_compiled(self, rng):
        from flexmpc._jit import njit

        compiled = njit(_linear_loglik_grad_impl)
        for _ in range(20):
            m, b, u, o = random_linear_case(rng)
            l1, g1 = compiled(m.theta, b.mean, b.cov, u, o, NOISE_FLOOR)
            l2, g2 = _linear_loglik_grad_impl(m.theta, b.mean, b.cov, u, o, NOISE_FLOOR)
            assert l1 == pytest.approx(l2, rel=1e-13)
            assert np.allclose(g1, g2, rtol=1e-12, atol=1e-12)


class TestMlpNet:
    def test_zero_weights_output_bias(self):
        net = MlpNet(2, 2, hidden=4)
        net.bm[:] = [1.0, 2.0]
        net.bv[:] = [-1.0, -2.0]
        mean, lv = mlp_forward(net, [3.0, 4.0])
        assert np.array_equal(mean, [1.0, 2.0]) and np.array_equal(lv, [-1.0, -2.0])

    def test_affine_reduction_for_positive_inputs(self, rng):
        net = MlpNet(3, 2, hidden=3)
        net.W1[:] = np.eye(3)
        net.W2[:] = np.eye(3)
        M = rng.normal(size=(2, 3))
        net.Wm[:] = M
        x = rng.uniform(0.1, 2.0, 3)
        mean, _ = mlp_forward(net, x)
        assert np.allclose(mean, M @ x, atol=1e-15)

    def test_flat_views_share_memory(self):
        net = MlpNet(2, 2, hidden=4)
        net.flat[net.slices["bm"]] = [7.0, 8.0]
        assert np.array_equal(net.bm, [7.0, 8.0])

    def test_wrong_flat_length_raises(self):
        with pytest.raises(ValueError):
            MlpNet(2, 2, hidden=4, flat=np.zeros(3))

    @pytest.mark.parametrize("seed", range(5))
    def test_backward_matches_finite_differences(self, seed):
        net = MlpNet.random(3, 2, hidden=16, rng=seed)
        assert mlp_grad_check(net, n_coords=80, rng=seed) <= 1e-5

    def test_relative_error_is_absolute_near_zero(self):
        assert relative_error(1e-9, 2e-9) == pytest.approx(1e-9)
        assert relative_error(100.0, 101.0) == pytest.approx(1 / 101)


class TestSnapshots:
    def test_linear_round_trip(self, tmp_path):
        m = linear(C=np.array([[1.0, 0.1], [-0.1, 0.9]]))
        path = tmp_path / "theta.txt"
        save_params(m, path)
        assert np.array_equal(load_params(path).theta, m.theta)

    def test_mlp_round_trip_needs_template(self, tmp_path):
        m = MlpModel.from_linear(linear(), hidden=8, rng=1)
        path = tmp_path / "theta.txt"
        save_params(m, path)
        with pytest.raises(ConfigError):
            load_params(path)
        assert np.array_equal(load_params(path, template=m).theta, m.theta)

    def test_truncated_snapshot_raises(self, tmp_path):
        path = tmp_path / "theta.txt"
        save_params(linear(), path)
        lines = path.read_text().splitlines()
        path.write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(ConfigError):
            load_params(path)
