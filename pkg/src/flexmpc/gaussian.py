"""Dense Gaussian primitives shared by the filter, the model and the MPC."""
from dataclasses import dataclass

import numpy as np

from ._jit import njit, pick
from .errors import NumericalError, SingularCovariance

JITTER_FLOOR = 1e-10
LOG_2PI = float(np.log(2.0 * np.pi))


def as_vector(x, dim=None, name="vector"):
    v = np.asarray(x, dtype=float)
    if v.ndim == 0:
        v = v.reshape(1)
    if v.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {v.shape}")
    if dim is not None and v.shape[0] != dim:
        raise ValueError(f"{name} must have length {dim}, got {v.shape[0]}")
    return v


def as_matrix(M, shape=None, name="matrix"):
    A = np.asarray(M, dtype=float)
    if A.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {A.shape}")
    if shape is not None and A.shape != tuple(shape):
        raise ValueError(f"{name} must have shape {tuple(shape)}, got {A.shape}")
    return A


def symmetrize(S):
    return 0.5 * (S + S.T)


@dataclass(frozen=True)
class GaussianBelief:
    """Mean and covariance of a multivariate normal.

    The covariance is symmetrised on construction; shape mismatches raise
    ``ValueError`` instead of broadcasting.
    """

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        m = as_vector(self.mean, name="mean")
        n = m.shape[0]
        S = as_matrix(self.cov, (n, n), name="cov")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(S))):
            raise ValueError("belief contains non-finite entries")
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "cov", symmetrize(S))

    @property
    def dim(self):
        return self.mean.shape[0]


def cholesky(S):
    """Lower Cholesky factor with a single diagonal-jitter retry.

    Returns ``(L, S_used)`` where ``S_used`` is the (possibly jittered)
    matrix that ``L`` factors.
    """
    S = symmetrize(np.asarray(S, dtype=float))
    try:
        return np.linalg.cholesky(S), S
    except np.linalg.LinAlgError:
        pass
    n = S.shape[0]
    jitter = max(JITTER_FLOOR, JITTER_FLOOR * np.trace(S) / n)
    S_j = S + jitter * np.eye(n)
    try:
        return np.linalg.cholesky(S_j), S_j
    except np.linalg.LinAlgError as exc:
        raise SingularCovariance("covariance is not positive definite after jitter") from exc


def _forward_sub(L, b):
    # L lower triangular; tiny dims so a loop beats a scipy call
    n = L.shape[0]
    y = np.empty_like(b)
    for i in range(n):
        y[i] = (b[i] - L[i, :i] @ y[:i]) / L[i, i]
    return y


def mahalanobis_sq(L, r):
    """``rᵀ(LLᵀ)⁻¹r`` from a lower Cholesky factor."""
    y = _forward_sub(L, r)
    return float(y @ y)


def log_density(g: GaussianBelief, x) -> float:
    x = as_vector(x, g.dim, name="x")
    L, _ = cholesky(g.cov)
    r = x - g.mean
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    return -0.5 * mahalanobis_sq(L, r) - 0.5 * (g.dim * LOG_2PI + logdet)


def affine_push(g: GaussianBelief, M, b, Q) -> GaussianBelief:
    """Push ``g`` through ``x -> Mx + b + noise(Q)``."""
    M = as_matrix(M, name="M")
    if M.shape[1] != g.dim:
        raise ValueError(f"M has {M.shape[1]} columns, belief has dim {g.dim}")
    k = M.shape[0]
    b = as_vector(b, k, name="b")
    Q = as_matrix(Q, (k, k), name="Q")
    return GaussianBelief(M @ g.mean + b, M @ g.cov @ M.T + Q)


# ---------------------------------------------------------------------------
# largest eigenvalue


@njit
def _max_eig_jit(stack, tol, max_iter):
    k, n, _ = stack.shape
    out = np.empty(k)
    # scratch buffers reused across the stack; explicit loops avoid a
    # temporary per small matrix product
    X = np.empty((n, n))
    X2 = np.empty((n, n))
    v = np.empty(n)
    w = np.empty(n)
    for s in range(k):
        M = stack[s]
        tr = 0.0
        for i in range(n):
            tr += M[i, i]
        if tr <= 0.0:
            out[s] = 0.0
            continue
        # power iteration on M^(2^j): square until the normalised power settles
        for i in range(n):
            for j in range(n):
                X[i, j] = M[i, j] / tr
        for _ in range(64):
            t2 = 0.0
            for i in range(n):
                for j in range(n):
                    acc = 0.0
                    for l in range(n):
                        acc += X[i, l] * X[l, j]
                    X2[i, j] = acc
                t2 += X2[i, i]
            diff = 0.0
            for i in range(n):
                for j in range(n):
                    val = X2[i, j] / t2
                    d = abs(val - X[i, j])
                    if d > diff:
                        diff = d
                    X[i, j] = val
            if diff <= 1e-15:
                break
        best = 0
        bestn = -1.0
        for j in range(n):
            cn = 0.0
            for i in range(n):
                cn += X[i, j] * X[i, j]
            if cn > bestn:
                bestn = cn
                best = j
        scale = np.sqrt(bestn)
        for i in range(n):
            v[i] = X[i, best] / scale
        mu = 0.0
        done = False
        for _ in range(max_iter):
            mu_new = 0.0
            nw = 0.0
            for i in range(n):
                acc = 0.0
                for j in range(n):
                    acc += M[i, j] * v[j]
                w[i] = acc
                mu_new += v[i] * acc
                nw += acc * acc
            nw = np.sqrt(nw)
            if nw == 0.0:
                mu = 0.0
                done = True
                break
            for i in range(n):
                v[i] = w[i] / nw
            if abs(mu_new - mu) <= tol * abs(mu_new):
                mu = mu_new
                done = True
                break
            mu = mu_new
        out[s] = mu if done else -1.0
    return out


def _max_eig_numpy(stack, tol, max_iter):
    k, n, _ = stack.shape
    tr = np.trace(stack, axis1=1, axis2=2)
    out = np.zeros(k)
    live = tr > 0.0
    if not np.any(live):
        return out
    M = stack[live]
    X = M / tr[live][:, None, None]
    for _ in range(64):
        X2 = X @ X
        X2 /= np.trace(X2, axis1=1, axis2=2)[:, None, None]
        diff = np.max(np.abs(X2 - X))
        X = X2
        if diff <= 1e-15:
            break
    norms = np.sum(X * X, axis=1)
    best = np.argmax(norms, axis=1)
    v = X[np.arange(X.shape[0]), :, best]
    v /= np.linalg.norm(v, axis=1)[:, None]
    mu = np.zeros(X.shape[0])
    done = np.zeros(X.shape[0], dtype=bool)
    for _ in range(max_iter):
        w = np.einsum("kij,kj->ki", M, v)
        mu_new = np.einsum("ki,ki->k", v, w)
        nw = np.linalg.norm(w, axis=1)
        zero = nw == 0.0
        nw[zero] = 1.0
        v = w / nw[:, None]
        conv = (np.abs(mu_new - mu) <= tol * np.abs(mu_new)) | zero
        mu_new[zero] = 0.0
        mu = np.where(done, mu, mu_new)
        done |= conv
        if np.all(done):
            break
    mu[~done] = -1.0
    out[live] = mu
    return out


_max_eig = pick(_max_eig_jit, _max_eig_numpy)


def max_eig_sqrt_many(covs, tol=1e-10, max_iter=10_000):
    """Square roots of the largest eigenvalues of a stack of PSD matrices."""
    stack = np.ascontiguousarray(covs, dtype=float)
    if stack.ndim == 2:
        stack = stack[None]
    lam = _max_eig(stack, tol, max_iter)
    if np.any(lam < 0.0):
        raise NumericalError("power iteration did not converge")
    return np.sqrt(lam)


def max_eig_sqrt(cov, tol=1e-10, max_iter=10_000) -> float:
    cov = as_matrix(cov, name="cov")
    if cov.shape[0] != cov.shape[1]:
        raise ValueError("cov must be square")
    return float(max_eig_sqrt_many(cov[None], tol, max_iter)[0])
