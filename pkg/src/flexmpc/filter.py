"""Online belief inference (Kalman / EKF) and the predictive-surprise signal."""
from dataclasses import dataclass

import numpy as np

from ._jit import njit, pick
from .errors import ConfigError
from .gaussian import GaussianBelief, as_vector, cholesky, mahalanobis_sq
from .model import LinearModel, Model

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass
class FilterState:
    belief: GaussianBelief
    last_surprise: float = 0.0
    last_innovation: np.ndarray = None


def init_belief(mean=(0.0, 0.0), cov=None) -> FilterState:
    mean = as_vector(mean, name="x0_hat")
    n = mean.shape[0]
    cov = 0.1 * np.eye(n) if cov is None else np.asarray(cov, dtype=float)
    if cov.shape != (n, n) or not np.allclose(cov, cov.T):
        raise ConfigError("P0 must be a symmetric matrix matching x0_hat")
    if np.min(np.linalg.eigvalsh(cov)) <= 0.0:
        raise ConfigError("P0 must be positive definite")
    return FilterState(GaussianBelief(mean, cov), 0.0, np.zeros(n))


def _joseph_impl(m_pred, P_pred, H, y, R, o):
    S = H @ P_pred @ H.T + R
    S = 0.5 * (S + S.T)
    # K = P H' S^-1 via a solve against S (S is SPD)
    K = np.linalg.solve(S, H @ P_pred).T
    e = o - y
    m = m_pred + K @ e
    I_KH = np.eye(m_pred.shape[0]) - K @ H
    P = I_KH @ P_pred @ I_KH.T + K @ R @ K.T
    return m, 0.5 * (P + P.T), e


_joseph = pick(njit(_joseph_impl), _joseph_impl)


def filter_update(model: Model, f: FilterState, u, o_next) -> FilterState:
    """Predict through the transition model, then a Joseph-form correction.

    For the MLP model the observation map is linearised at the predicted
    mean (EKF).
    """
    o = as_vector(o_next, name="o_next")
    if not np.all(np.isfinite(o)):
        raise ValueError("o_next must be finite")
    prior = model.predict_latent(f.belief, u)
    H, y = model.observation_jacobian(prior.mean)
    if isinstance(model, LinearModel):
        R = model.Sv
    else:
        R = model.predict_observation(prior).cov - H @ prior.cov @ H.T
    m, P, e = _joseph(prior.mean, prior.cov, np.ascontiguousarray(H), y, np.ascontiguousarray(R), o)
    return FilterState(GaussianBelief(m, P), f.last_surprise, e)


def surprise(model: Model, f: FilterState, u, o_next):
    """``(S_raw, S_shifted)`` for the observation that followed input ``u``.

    ``S_raw`` is the negative predictive log-density; ``S_shifted`` drops the
    log-determinant term, leaving half the squared Mahalanobis innovation,
    which is never negative.
    """
    o = as_vector(o_next, name="o_next")
    pred = model.predict_observation(model.predict_latent(f.belief, u))
    L, _ = cholesky(pred.cov)
    r = o - pred.mean
    half_maha = 0.5 * mahalanobis_sq(L, r)
    logdet = 2.0 * float(np.sum(np.log(np.diag(L))))
    s_ref = 0.5 * (pred.dim * LOG_2PI + logdet)
    return half_maha + s_ref, max(0.0, half_maha)
