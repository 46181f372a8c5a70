"""Slow, independent reference computations.

Each oracle reaches the same quantity as a production routine by a different
route, so agreement is evidence that both are right:

* likelihood gradients: central differences of ``Model.loglik``;
* Kalman posterior: information-form Bayes update;
* Kalman posterior mean: bootstrap particle filter;
* QP optimum: accelerated projected gradient on the dual.
"""
from dataclasses import dataclass

import numpy as np

from ._jit import njit, pick
from .gaussian import GaussianBelief
from .mlp import relative_error
from .model import LinearModel, MlpModel
from .qp import INF, QpProblem


# ---------------------------------------------------------------------------
# likelihood gradients

MLP_GRAD_COORDS = 64


def finite_difference_grad(model, belief, u, o_next, coords=None, h=1e-5):
    """Central differences of ``model.loglik`` at the given flat coordinates."""
    theta = np.array(model.theta)
    coords = range(theta.shape[0]) if coords is None else coords
    out = {}
    for i in coords:
        plus = theta.copy()
        plus[i] += h
        minus = theta.copy()
        minus[i] -= h
        f_plus = model.with_theta(plus).loglik(belief, u, o_next)
        f_minus = model.with_theta(minus).loglik(belief, u, o_next)
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return out


def random_linear_case(rng):
    """Random stable-ish linear model, belief, input and observation."""
    A = rng.normal(0.0, 0.5, (2, 2))
    B = rng.normal(0.0, 0.3, 2)
    C = np.eye(2) + rng.normal(0.0, 0.3, (2, 2))
    Lw = np.tril(rng.normal(0.0, 0.2, (2, 2))) + 0.05 * np.eye(2)
    Lv = np.tril(rng.normal(0.0, 0.2, (2, 2))) + 0.05 * np.eye(2)
    model = LinearModel.from_matrices(A, B, C, Lw @ Lw.T + 1e-3 * np.eye(2), Lv @ Lv.T + 1e-3 * np.eye(2))
    Lp = np.tril(rng.normal(0.0, 0.3, (2, 2))) + 0.1 * np.eye(2)
    belief = GaussianBelief(rng.normal(size=2), Lp @ Lp.T)
    return model, belief, float(rng.normal()), rng.normal(size=2)


def random_mlp_case(rng, hidden=16):
    lin, belief, u, o = random_linear_case(rng)
    model = MlpModel.from_linear(lin, hidden=hidden, rng=rng, spread=0.3)
    return model, belief, u, o


def _kink_free(model, belief, u, gap=1e-3):
    """No ReLU pre-activation within ``gap`` of zero at the evaluation point."""
    if not isinstance(model, MlpModel):
        return True
    x = np.array([belief.mean[0], belief.mean[1], u])
    fm, _, tc = model.transition.forward(x)
    _, _, oc = model.observation.forward(fm)
    pre = np.concatenate([tc[1], tc[3], oc[1], oc[3]])
    return float(np.min(np.abs(pre))) >= gap


def gradient_check(kind="linear", n_configs=100, seed=0, n_coords=None, h=1e-5):
    """Largest relative error of analytic against finite-difference gradients.

    ``relative_error`` switches to an absolute measure below magnitude 1, so
    coordinates with tiny gradients are not penalised for round-off. Every
    linear coordinate is checked; the MLP defaults to ``MLP_GRAD_COORDS``
    random coordinates per configuration.
    """
    if n_coords is None and kind == "mlp":
        n_coords = MLP_GRAD_COORDS
    rng = np.random.default_rng(seed)
    make = random_linear_case if kind == "linear" else random_mlp_case
    worst = 0.0
    done = 0
    while done < n_configs:
        model, belief, u, o = make(rng)
        if not _kink_free(model, belief, u):
            continue
        _, grad = model.loglik_and_grad(belief, u, o)
        size = grad.shape[0]
        coords = None if n_coords is None or n_coords >= size else rng.choice(size, n_coords, replace=False)
        for i, fd in finite_difference_grad(model, belief, u, o, coords, h).items():
            worst = max(worst, relative_error(grad[i], fd))
        done += 1
    return worst


# ---------------------------------------------------------------------------
# linear-Gaussian filtering


def information_update(model: LinearModel, belief: GaussianBelief, u, o_next) -> GaussianBelief:
    """Bayes posterior for the linear model written in information form."""
    mp = model.A @ belief.mean + model.B[:, 0] * u
    Pp = model.A @ belief.cov @ model.A.T + model.Sw
    Pp_inv = np.linalg.inv(Pp)
    Rinv = np.linalg.inv(model.Sv)
    C = model.C
    info = Pp_inv + C.T @ Rinv @ C
    P = np.linalg.inv(info)
    m = P @ (Pp_inv @ mp + C.T @ Rinv @ o_next)
    return GaussianBelief(m, 0.5 * (P + P.T))


@dataclass
class ParticleRun:
    means: np.ndarray
    stderr: np.ndarray


def bootstrap_filter(model: LinearModel, prior: GaussianBelief, inputs, observations,
                     n_particles=100_000, replicas=50, rng=None) -> ParticleRun:
    """Posterior means from ``replicas`` independent bootstrap filters.

    The particles are split evenly over the replicas; the reported mean is the
    average of the replica means and the standard error is their spread over
    ``sqrt(replicas)``, which captures resampling noise as well as sampling
    noise. All replicas advance together as one ``(replicas, n, 2)`` array.
    """
    rng = np.random.default_rng(rng)
    n = n_particles // replicas
    Lw = np.linalg.cholesky(model.Sw)
    Sv_inv = np.linalg.inv(model.Sv)
    L0 = np.linalg.cholesky(prior.cov)
    steps = len(inputs)
    rep_means = np.empty((steps, replicas, 2))
    rows = np.arange(replicas)[:, None]
    z = prior.mean + rng.standard_normal((replicas, n, 2)) @ L0.T
    for t in range(steps):
        z = z @ model.A.T + model.B[:, 0] * inputs[t] + rng.standard_normal((replicas, n, 2)) @ Lw.T
        e = observations[t] - z @ model.C.T
        logw = -0.5 * np.einsum("rki,ij,rkj->rk", e, Sv_inv, e)
        w = np.exp(logw - logw.max(axis=1, keepdims=True))
        w /= w.sum(axis=1, keepdims=True)
        rep_means[t] = np.einsum("rk,rki->ri", w, z)
        z = z[rows, _systematic(w, rng)]
    return ParticleRun(rep_means.mean(axis=1), rep_means.std(axis=1, ddof=1) / np.sqrt(replicas))


def _systematic(w, rng):
    """Systematic resampling indices, one row per replica."""
    r, n = w.shape
    positions = (rng.random((r, 1)) + np.arange(n)) / n
    cum = np.cumsum(w, axis=1)
    idx = np.empty((r, n), dtype=np.int64)
    for i in range(r):
        idx[i] = np.searchsorted(cum[i], positions[i])
    return np.minimum(idx, n - 1)


def linear_closed_loop(model: LinearModel, prior: GaussianBelief, steps=50, gain=None, rng=None):
    """Simulate the model under ``u = -gain @ posterior mean``.

    Returns ``(inputs, observations, beliefs)`` where the beliefs are the
    posteriors of ``filter_update``.
    """
    from .filter import FilterState, filter_update

    rng = np.random.default_rng(rng)
    gain = np.array([0.5, 0.5]) if gain is None else np.asarray(gain, dtype=float)
    Lw = np.linalg.cholesky(model.Sw)
    Lv = np.linalg.cholesky(model.Sv)
    x = prior.mean + np.linalg.cholesky(prior.cov) @ rng.standard_normal(2)
    f = FilterState(prior)
    inputs, observations, posts = [], [], []
    for _ in range(steps):
        u = float(-gain @ f.belief.mean)
        x = model.A @ x + model.B[:, 0] * u + Lw @ rng.standard_normal(2)
        o = model.C @ x + Lv @ rng.standard_normal(2)
        f = filter_update(model, f, u, o)
        inputs.append(u)
        observations.append(o)
        posts.append(f.belief)
    return np.array(inputs), np.array(observations), posts


def filter_agreement(seed=0, steps=50, n_particles=100_000):
    """``(particle_ratio, conjugate_gap)`` for the Kalman filter on ``oracle_model``.

    ``particle_ratio`` is the largest ``|kalman mean - particle mean| / stderr``
    over every step and coordinate. ``conjugate_gap`` is the largest absolute
    difference between each Kalman posterior and the information-form update
    from the same prior.
    """
    model = oracle_model()
    prior = GaussianBelief(np.zeros(2), 0.01 * np.eye(2))
    inputs, observations, posts = linear_closed_loop(model, prior, steps, rng=seed)
    run = bootstrap_filter(model, prior, inputs, observations, n_particles=n_particles, rng=seed + 1)
    means = np.array([b.mean for b in posts])
    ratio = float(np.max(np.abs(means - run.means) / run.stderr))
    gap = 0.0
    belief = prior
    for u, o, post in zip(inputs, observations, posts):
        ref = information_update(model, belief, u, o)
        gap = max(gap, float(np.max(np.abs(ref.mean - post.mean))), float(np.max(np.abs(ref.cov - post.cov))))
        belief = post
    return ratio, gap


def oracle_model():
    """Linear model with noise large enough for the particle filter to be informative."""
    A = np.array([[0.97, 0.08], [-0.12, 0.96]])
    return LinearModel.from_matrices(A, [0.05, 0.10], np.eye(2), 0.01 * np.eye(2), 0.02 * np.eye(2))


# ---------------------------------------------------------------------------
# quadratic programs


@dataclass
class DualResult:
    x: np.ndarray
    objective: float
    dual_objective: float
    iterations: int
    infeasibility: float


def _fista_impl(M, q, g0, step, max_iter, tol, window):
    """Restarted FISTA on ``max_{lam >= 0} g0 - q'lam - lam'M lam / 2``."""
    m = q.shape[0]
    lam = np.zeros(m)
    Mlam = np.zeros(m)
    y = np.zeros(m)
    My = np.zeros(m)
    t = 1.0
    g = 0.0
    g_mark = 0.0
    it = 0
    while it < max_iter:
        it += 1
        if it % window == 0:
            if g - g_mark <= tol * (1.0 + abs(g0 + g)):
                break
            g_mark = g
        lam_n = np.maximum(y - step * (My + q), 0.0)
        Mlam_n = M @ lam_n
        g_n = -(q @ lam_n) - 0.5 * (lam_n @ Mlam_n)
        if g_n < g:
            # function-value restart keeps the iteration monotone
            t = 1.0
            y = lam.copy()
            My = Mlam.copy()
            continue
        t_n = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        beta = (t - 1.0) / t_n
        y = lam_n + beta * (lam_n - lam)
        My = Mlam_n + beta * (Mlam_n - Mlam)
        lam = lam_n
        Mlam = Mlam_n
        t = t_n
        g = g_n
    return lam, it


_fista = pick(njit(_fista_impl), _fista_impl)


def dual_projected_gradient(qp: QpProblem, max_iter=1_000_000, tol=1e-11, window=2000) -> DualResult:
    """Maximise the QP dual over ``lambda >= 0`` with restarted FISTA.

    The two-sided rows are split into one-sided ones ``C x <= d``. For
    strictly convex ``H`` the dual is the concave quadratic
    ``g(lam) = g0 - q'lam - lam'M lam / 2`` with ``M = C H^-1 C'`` and
    ``x(lam) = -H^-1 (f + C' lam)``. The dual value is a lower bound on the
    optimum that converges much faster than the primal point, so it is the
    reported optimum. Iteration stops once the dual value has gained less
    than ``tol`` (relative) over ``window`` iterations; with the O(1/k^2)
    tail that leaves an error of about ``k / (2 window)`` times that gain.
    """
    up = qp.upper < INF
    lo = qp.lower > -INF
    C = np.vstack([qp.G[up], -qp.G[lo]])
    d = np.concatenate([qp.upper[up], -qp.lower[lo]])
    Hinv = np.linalg.inv(qp.H)
    Hinv = 0.5 * (Hinv + Hinv.T)
    M = np.ascontiguousarray(C @ Hinv @ C.T)
    q = C @ Hinv @ qp.f + d
    g0 = -0.5 * qp.f @ Hinv @ qp.f + qp.const
    step = 1.0 / max(np.linalg.eigvalsh(0.5 * (M + M.T))[-1], 1e-12)
    lam, it = _fista(M, q, g0, step, max_iter, tol, window)
    x = -Hinv @ (qp.f + C.T @ lam)
    g = g0 - q @ lam - 0.5 * lam @ M @ lam
    return DualResult(x, float(qp.objective(x)), float(g), int(it),
                      float(np.max(C @ x - d, initial=0.0)))


def random_mpc_qp(rng, horizon=None):
    """Tightened MPC problem from a random model, belief, reference and margins.

    The initial mean is drawn close to the state box so that state rows are
    often active at the optimum. Feasibility is not guaranteed.
    """
    from .mpc import ConstraintSet, MpcConfig, build_qp, riccati

    N = int(rng.integers(2, 11)) if horizon is None else horizon
    A = np.array([[0.97, 0.08], [-0.12, 0.96]]) + rng.normal(0.0, 0.05, (2, 2))
    B = np.array([0.05, 0.10]) + rng.normal(0.0, 0.03, 2)
    model = LinearModel.from_matrices(A, B, np.eye(2), 1e-4 * np.eye(2), 4e-4 * np.eye(2))
    mean = rng.uniform(-2.9, 2.9, 2)
    belief = GaussianBelief(mean, 0.01 * np.eye(2))
    cfg = MpcConfig(horizon=N)
    cons = ConstraintSet()
    ref = np.column_stack([rng.uniform(-3.5, 3.5) * np.sin(0.3 * np.arange(1, N + 1) + rng.uniform(0, 6)),
                           np.zeros(N)])
    margins = rng.uniform(0.0, 0.4, (N, cons.count))
    P, _ = riccati(model.A, model.B, cfg.Q, cfg.R)
    return build_qp(model, belief, ref, margins, cfg, cons, P).qp
