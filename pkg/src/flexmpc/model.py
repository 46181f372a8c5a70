"""Learnable latent state-space model.

Two variants share one interface:

``LinearModel``
    z' = A z + B u + w,  o = C z + v,  w ~ N(0, Sw), v ~ N(0, Sv).
    Flat parameter layout (16 entries)::

        [0:4]   A  (row major)
        [4:6]   B
        [6:10]  C  (row major)   <- inference mapping phi
        [10:13] Sw log-Cholesky  (log L00, L10, log L11)
        [13:16] Sv log-Cholesky

``MlpModel``
    transition and observation networks (``MlpNet``) producing mean and
    log-variance; covariances are propagated through the mean-head input
    Jacobians. ``phi`` is the observation network.

Models are immutable snapshots; ``with_theta`` returns a new one.
"""
import numpy as np

from ._jit import njit, pick
from .errors import ConfigError, SingularCovariance
from .gaussian import GaussianBelief, affine_push, as_matrix, as_vector, log_density
from .mlp import MlpNet

NOISE_FLOOR = 1e-8
DECODER_FLOOR = 1e-8
LOG_2PI = float(np.log(2.0 * np.pi))


def chol_params(S, floor=NOISE_FLOOR):
    """Log-Cholesky coordinates of ``S - floor*I`` (2x2)."""
    L = np.linalg.cholesky(np.asarray(S, dtype=float) - floor * np.eye(2))
    return np.array([np.log(L[0, 0]), L[1, 0], np.log(L[1, 1])])


def chol_factor(p):
    return np.array([[np.exp(p[0]), 0.0], [p[1], np.exp(p[2])]])


def cov_from_chol(p, floor=NOISE_FLOOR):
    L = chol_factor(p)
    return L @ L.T + floor * np.eye(2)


# ---------------------------------------------------------------------------
# linear-Gaussian kernels (one source, compiled or interpreted)


def _linear_loglik_grad_impl(theta, m, P, u, o, floor):
    A = theta[0:4].copy().reshape(2, 2)
    B = theta[4:6].copy()
    C = theta[6:10].copy().reshape(2, 2)
    pw = theta[10:13]
    pv = theta[13:16]
    Lw = np.zeros((2, 2))
    Lw[0, 0] = np.exp(pw[0])
    Lw[1, 0] = pw[1]
    Lw[1, 1] = np.exp(pw[2])
    Lv = np.zeros((2, 2))
    Lv[0, 0] = np.exp(pv[0])
    Lv[1, 0] = pv[1]
    Lv[1, 1] = np.exp(pv[2])
    eye = np.eye(2)
    Sw = Lw @ Lw.T + floor * eye
    Sv = Lv @ Lv.T + floor * eye

    mp = A @ m + B * u
    Pp = A @ P @ A.T + Sw
    Pp = 0.5 * (Pp + Pp.T)
    y = C @ mp
    S = C @ Pp @ C.T + Sv
    S = 0.5 * (S + S.T)
    e = o - y
    det = S[0, 0] * S[1, 1] - S[0, 1] * S[1, 0]
    if not det > 0.0 or not S[0, 0] > 0.0:
        return np.nan, np.zeros(16)
    Sinv = np.empty((2, 2))
    Sinv[0, 0] = S[1, 1] / det
    Sinv[1, 1] = S[0, 0] / det
    Sinv[0, 1] = -S[0, 1] / det
    Sinv[1, 0] = -S[1, 0] / det
    alpha = Sinv @ e
    ll = -0.5 * (e @ alpha) - 0.5 * (2.0 * 1.8378770664093453 + np.log(det))

    GS = 0.5 * (np.outer(alpha, alpha) - Sinv)
    dC = np.outer(alpha, mp) + 2.0 * GS @ C @ Pp
    GP = C.T @ GS @ C
    gmp = C.T @ alpha
    dA = np.outer(gmp, m) + 2.0 * GP @ A @ P
    dB = gmp * u
    dLw = 2.0 * GP @ Lw
    dLv = 2.0 * GS @ Lv

    g = np.empty(16)
    g[0:4] = dA.ravel()
    g[4:6] = dB
    g[6:10] = dC.ravel()
    g[10] = dLw[0, 0] * Lw[0, 0]
    g[11] = dLw[1, 0]
    g[12] = dLw[1, 1] * Lw[1, 1]
    g[13] = dLv[0, 0] * Lv[0, 0]
    g[14] = dLv[1, 0]
    g[15] = dLv[1, 1] * Lv[1, 1]
    return ll, g


_linear_loglik_grad = pick(njit(_linear_loglik_grad_impl), _linear_loglik_grad_impl)


class Model:
    """Common interface of the two variants."""

    theta: np.ndarray
    phi_slice: slice

    @property
    def phi(self):
        return self.theta[self.phi_slice]

    def predict_latent(self, belief: GaussianBelief, u) -> GaussianBelief:
        raise NotImplementedError

    def predict_observation(self, latent: GaussianBelief) -> GaussianBelief:
        raise NotImplementedError

    def observation_jacobian(self, latent_mean):
        """``(H, y)``: Jacobian and value of the observation mean map."""
        raise NotImplementedError

    def linearize(self, mean, u):
        """``(A, B, c)`` with ``f(z, v) ~ A z + B v + c`` around ``(mean, u)``."""
        raise NotImplementedError

    def with_theta(self, theta) -> "Model":
        raise NotImplementedError

    def loglik_and_grad(self, z_belief: GaussianBelief, u, o_next):
        raise NotImplementedError

    def loglik(self, z_belief, u, o_next) -> float:
        pred = self.predict_observation(self.predict_latent(z_belief, u))
        return log_density(pred, o_next)

    def decode_physical(self, latent: GaussianBelief) -> GaussianBelief:
        """Identity decoder with a fixed noise floor."""
        return GaussianBelief(latent.mean, latent.cov + DECODER_FLOOR * np.eye(latent.dim))

    def param_names(self):
        """``(name, index)`` label for every flat coordinate."""
        raise NotImplementedError

    def block_slices(self):
        """Flat-vector slice of each named block ``A, B, C, Sw, Sv``."""
        raise NotImplementedError

    def block_mask(self, blocks):
        """0/1 vector selecting the coordinates of the named blocks."""
        table = self.block_slices()
        mask = np.zeros(self.theta.shape[0])
        for name in blocks:
            if name not in table:
                raise ConfigError(f"unknown parameter block {name!r}; expected one of {sorted(table)}")
            mask[table[name]] = 1.0
        return mask


class LinearModel(Model):
    phi_slice = slice(6, 10)
    size = 16

    def __init__(self, theta):
        theta = np.array(theta, dtype=float)
        if theta.shape != (16,):
            raise ValueError(f"linear model needs 16 parameters, got {theta.shape}")
        if not np.all(np.isfinite(theta)):
            raise SingularCovariance("non-finite model parameters")
        theta.setflags(write=False)
        self.theta = theta

    @classmethod
    def from_matrices(cls, A, B, C, Sw, Sv):
        A = as_matrix(A, (2, 2), "A")
        B = as_vector(np.asarray(B, dtype=float).ravel(), 2, "B")
        C = as_matrix(C, (2, 2), "C")
        theta = np.concatenate([A.ravel(), B, C.ravel(), chol_params(Sw), chol_params(Sv)])
        return cls(theta)

    @property
    def A(self):
        return self.theta[0:4].reshape(2, 2)

    @property
    def B(self):
        return self.theta[4:6].reshape(2, 1)

    @property
    def C(self):
        return self.theta[6:10].reshape(2, 2)

    @property
    def Sw(self):
        return cov_from_chol(self.theta[10:13])

    @property
    def Sv(self):
        return cov_from_chol(self.theta[13:16])

    def with_theta(self, theta):
        return LinearModel(theta)

    def predict_latent(self, belief, u):
        return affine_push(belief, self.A, self.B[:, 0] * float(u), self.Sw)

    def predict_observation(self, latent):
        return affine_push(latent, self.C, np.zeros(2), self.Sv)

    def observation_jacobian(self, latent_mean):
        return self.C, self.C @ latent_mean

    def linearize(self, mean, u):
        return self.A, self.B[:, 0], np.zeros(2)

    def loglik_and_grad(self, z_belief, u, o_next):
        o = as_vector(o_next, 2, "o_next")
        if not np.all(np.isfinite(o)):
            raise ValueError("o_next must be finite")
        ll, g = _linear_loglik_grad(self.theta, z_belief.mean, z_belief.cov, float(u), o, NOISE_FLOOR)
        if not np.isfinite(ll):
            raise SingularCovariance("innovation covariance is not positive definite")
        return float(ll), g

    def block_slices(self):
        return {"A": slice(0, 4), "B": slice(4, 6), "C": slice(6, 10), "Sw": slice(10, 13), "Sv": slice(13, 16)}

    def param_names(self):
        names = []
        for name, n in (("A", 4), ("B", 2), ("C", 4), ("Sw_logchol", 3), ("Sv_logchol", 3)):
            names += [(name, i) for i in range(n)]
        return names


class MlpModel(Model):
    """Transition net (z, u) -> z' and observation net z -> o."""

    def __init__(self, transition: MlpNet, observation: MlpNet):
        if transition.n_in != 3 or transition.n_out != 2:
            raise ValueError("transition net must map 3 -> 2")
        if observation.n_in != 2 or observation.n_out != 2:
            raise ValueError("observation net must map 2 -> 2")
        self.transition = transition
        self.observation = observation
        self.theta = np.concatenate([transition.flat, observation.flat])
        self.theta.setflags(write=False)
        self.phi_slice = slice(transition.size, transition.size + observation.size)

    @property
    def size(self):
        return self.theta.shape[0]

    @classmethod
    def from_linear(cls, lin: LinearModel, hidden=64, rng=None, spread=1e-3):
        """Network pair reproducing ``lin`` exactly up to ``spread``-sized extras.

        The first hidden units carry ``relu(x)`` and ``relu(-x)`` through both
        layers, so the mean heads equal the linear maps; the remaining units
        get small random weights so gradients reach them.
        """
        rng = np.random.default_rng(rng)

        def embed(M, n_in, logvar):
            net = MlpNet.random(n_in, 2, hidden, rng, scale=1.0)
            k = 2 * n_in
            net.W1[:k] = 0.0
            net.b1[:k] = 0.0
            net.W1[:n_in] = np.eye(n_in)
            net.W1[n_in:k] = -np.eye(n_in)
            net.W2[:k] = 0.0
            net.W2[:, :k] = 0.0
            net.W2[:k, :k] = np.eye(k)
            # positive offset keeps pass-through units off the kink; it
            # cancels between the +M and -M columns of the mean head
            net.b2[:k] = 0.01
            net.Wm[:] *= spread
            net.Wm[:, :n_in] = M
            net.Wm[:, n_in:k] = -M
            net.bm[:] = 0.0
            net.Wv[:] *= spread
            net.bv[:] = logvar
            return net

        trans = embed(np.hstack([lin.A, lin.B]), 3, np.log(np.diag(lin.Sw)))
        obs = embed(lin.C, 2, np.log(np.diag(lin.Sv)))
        return cls(trans, obs)

    def with_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self.theta.shape:
            raise ValueError("parameter vector has the wrong length")
        if not np.all(np.isfinite(theta)):
            raise SingularCovariance("non-finite model parameters")
        nt = self.transition.size
        return MlpModel(self.transition.with_flat(theta[:nt]), self.observation.with_flat(theta[nt:]))

    def _transition(self, mean, u):
        x = np.array([mean[0], mean[1], float(u)])
        fm, flv, cache = self.transition.forward(x)
        J = self.transition.input_jacobian(cache)
        return fm, flv, J, cache

    def predict_latent(self, belief, u):
        fm, flv, J, _ = self._transition(belief.mean, u)
        Jz = J[:, :2]
        return GaussianBelief(fm, Jz @ belief.cov @ Jz.T + np.diag(np.exp(flv)))

    def predict_observation(self, latent):
        hm, hlv, cache = self.observation.forward(latent.mean)
        H = self.observation.input_jacobian(cache)
        return GaussianBelief(hm, H @ latent.cov @ H.T + np.diag(np.exp(hlv)))

    def observation_jacobian(self, latent_mean):
        hm, _, cache = self.observation.forward(latent_mean)
        return self.observation.input_jacobian(cache), hm

    def linearize(self, mean, u):
        fm, _, J, _ = self._transition(mean, u)
        Az, Bu = J[:, :2], J[:, 2]
        return Az, Bu, fm - Az @ mean - Bu * float(u)

    def loglik_and_grad(self, z_belief, u, o_next):
        o = as_vector(o_next, 2, "o_next")
        if not np.all(np.isfinite(o)):
            raise ValueError("o_next must be finite")
        m, P = z_belief.mean, z_belief.cov
        fm, flv, J, fcache = self._transition(m, u)
        Jz = J[:, :2]
        Pp = Jz @ P @ Jz.T + np.diag(np.exp(flv))
        hm, hlv, hcache = self.observation.forward(fm)
        H = self.observation.input_jacobian(hcache)
        S = H @ Pp @ H.T + np.diag(np.exp(hlv))
        S = 0.5 * (S + S.T)
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError as exc:
            raise SingularCovariance("innovation covariance is not positive definite") from exc
        e = o - hm
        alpha = np.linalg.solve(S, e)
        Sinv = np.linalg.solve(S, np.eye(2))
        ll = -0.5 * e @ alpha - 0.5 * (2 * LOG_2PI + 2 * np.sum(np.log(np.diag(L))))

        GS = 0.5 * (np.outer(alpha, alpha) - Sinv)
        g_H = 2.0 * GS @ H @ Pp
        g_hlv = np.diag(GS) * np.exp(hlv)
        g_obs, g_fm = self.observation.backward(hcache, alpha, g_hlv, g_H)
        GP = H.T @ GS @ H
        g_J = np.zeros((2, 3))
        g_J[:, :2] = 2.0 * GP @ Jz @ P
        g_flv = np.diag(GP) * np.exp(flv)
        g_trans, _ = self.transition.backward(fcache, g_fm, g_flv, g_J)
        return float(ll), np.concatenate([g_trans, g_obs])

    def block_slices(self):
        # the transition net carries (A, B, Sw), the observation net (C, Sv)
        nt = self.transition.size
        trans, obs = slice(0, nt), slice(nt, self.size)
        return {"A": trans, "B": trans, "Sw": trans, "C": obs, "Sv": obs}

    def param_names(self):
        names = []
        for prefix, net in (("transition", self.transition), ("observation", self.observation)):
            for name in net.names():
                sl = net.slices[name]
                names += [(f"{prefix}.{name}", i) for i in range(sl.stop - sl.start)]
        return names


# ---------------------------------------------------------------------------
# free-function facade


def predict_latent(model: Model, belief, u):
    return model.predict_latent(belief, u)


def predict_observation(model: Model, latent):
    return model.predict_observation(latent)


def decode_physical(model: Model, latent):
    return model.decode_physical(latent)


def loglik_and_grad(model: Model, z_belief, u, o_next):
    return model.loglik_and_grad(z_belief, u, o_next)


# ---------------------------------------------------------------------------
# snapshots: one "name index value" triple per line


def save_params(model: Model, path):
    kind = "linear" if isinstance(model, LinearModel) else "mlp"
    lines = [f"# kind {kind}"]
    for (name, idx), value in zip(model.param_names(), model.theta):
        lines.append(f"{name} {idx} {float(value)!r}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_params(path, template: Model = None) -> Model:
    """Read a snapshot. MLP snapshots need a ``template`` with matching shapes."""
    values = {}
    kind = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                parts = line[1:].split()
                if len(parts) == 2 and parts[0] == "kind":
                    kind = parts[1]
                continue
            parts = line.split()
            if len(parts) != 3:
                raise ConfigError(f"{path}:{lineno}: expected 'name index value'")
            try:
                values[(parts[0], int(parts[1]))] = float(parts[2])
            except ValueError:
                raise ConfigError(f"{path}:{lineno}: malformed index or value") from None
    if template is None:
        if kind not in (None, "linear"):
            raise ConfigError("MLP snapshots need a template model")
        template = LinearModel(np.zeros(16))
    names = template.param_names()
    missing = [n for n in names if n not in values]
    if missing or len(values) != len(names):
        raise ConfigError(f"{path}: snapshot does not match the model layout")
    return template.with_theta(np.array([values[n] for n in names]))
