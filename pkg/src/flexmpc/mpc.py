"""Belief-space MPC with surprise- and uncertainty-adaptive constraint tightening.

The horizon problem is condensed onto the input sequence: predicted means
are affine in ``u`` and every state constraint ``a'z_k <= b`` becomes a row
``a'Gamma_k u <= b - beta_k - a'F_k``.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from statistics import NormalDist

import numpy as np

from ._jit import njit, pick
from .errors import ConfigError, NonConverged
from .gaussian import GaussianBelief, max_eig_sqrt_many
from .model import Model
from .plant import reference
from .qp import INF, QpProblem, kkt_residuals, solve_mpc_qp, solve_qp_interior

log = logging.getLogger(__name__)

SLACK_WEIGHT = 1e6


class ControllerKind(str, Enum):
    CF = "cf"
    NOMINAL = "nominal"
    ROBUST = "robust"
    NO_RATE_LIMIT = "no-rate-limit"
    NO_TIGHTENING = "no-tightening"
    FIXED_MODEL = "fixed-model"

    @classmethod
    def _missing_(cls, value):
        # accept the underscore spellings used in config files
        if isinstance(value, str):
            key = value.lower().replace("_", "-")
            if key.startswith("ablation-"):
                key = key[len("ablation-"):]
            for member in cls:
                if member.value == key:
                    return member
        return None

    @property
    def adapts(self):
        return self in (ControllerKind.CF, ControllerKind.NO_RATE_LIMIT, ControllerKind.NO_TIGHTENING)


@dataclass
class ConstraintSet:
    """Linear state constraints ``a_i'x <= b_i`` plus an input box."""

    a: np.ndarray = field(default_factory=lambda: np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]))
    b: np.ndarray = field(default_factory=lambda: np.full(4, 3.0))
    u_min: float = -2.0
    u_max: float = 2.0
    sensitivity: np.ndarray = None
    violation_level: np.ndarray = None

    def __post_init__(self):
        self.a = np.atleast_2d(np.asarray(self.a, dtype=float))
        self.b = np.asarray(self.b, dtype=float).ravel()
        k = self.a.shape[0]
        if self.b.shape != (k,):
            raise ConfigError("constraint offsets do not match normals")
        if np.any(np.linalg.norm(self.a, axis=1) <= 0.0):
            raise ConfigError("constraint normals must be nonzero")
        if not self.u_min < self.u_max:
            raise ConfigError("u_min must be below u_max")
        self.sensitivity = np.broadcast_to(0.02 if self.sensitivity is None else self.sensitivity, (k,)).astype(float)
        self.violation_level = np.broadcast_to(
            0.05 if self.violation_level is None else self.violation_level, (k,)).astype(float)
        if np.any(self.violation_level <= 0) or np.any(self.violation_level >= 1):
            raise ConfigError("violation levels must lie in (0, 1)")

    @classmethod
    def box(cls, x_bound=3.0, u_bound=2.0, **kw):
        return cls(b=np.full(4, float(x_bound)), u_min=-u_bound, u_max=u_bound, **kw)

    @property
    def count(self):
        return self.a.shape[0]

    def quantiles(self):
        return np.array([NormalDist().inv_cdf(1.0 - d) for d in self.violation_level])

    def violated(self, x, tol=0.0):
        return bool(np.any(self.a @ x > self.b + tol))


@dataclass
class MpcConfig:
    horizon: int = 10
    Q: np.ndarray = field(default_factory=lambda: np.diag([8.0, 3.0]))
    R: float = 0.05
    terminal_weight_mode: str = "riccati"
    terminal_scale: float = 1.0
    beta_fixed: float = 0.3
    tol_abs: float = 1e-6
    tol_rel: float = 1e-6
    max_iter: int = 4000
    riccati_refresh: float = 0.05

    def __post_init__(self):
        self.Q = np.asarray(self.Q, dtype=float)
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if np.min(np.linalg.eigvalsh(0.5 * (self.Q + self.Q.T))) < 0:
            raise ConfigError("Q must be positive semidefinite")
        if not self.R > 0:
            raise ConfigError("R must be positive")
        if self.terminal_weight_mode not in ("riccati", "scaled_Q"):
            raise ConfigError("terminal_weight_mode must be 'riccati' or 'scaled_Q'")


@dataclass
class MpcSolution:
    u_seq: np.ndarray
    predicted_means: np.ndarray
    predicted_covs: np.ndarray
    margins: np.ndarray
    feasible: bool
    relaxed: bool
    objective: float
    qp_iterations: int
    duals: np.ndarray = field(default=None, repr=False)

    @property
    def max_margin(self):
        return float(np.max(self.margins)) if self.margins.size else 0.0


# ---------------------------------------------------------------------------
# uncertainty and margins


def propagate_uncertainty(model: Model, belief: GaussianBelief, N, u=0.0):
    """Covariances of the predicted latent states ``z_1 .. z_N``."""
    if N < 1:
        raise ValueError("N must be >= 1")
    A, _, _ = model.linearize(belief.mean, u)
    Sw = model.predict_latent(GaussianBelief(belief.mean, np.zeros_like(belief.cov)), u).cov
    return _propagate(np.ascontiguousarray(A), np.ascontiguousarray(Sw), belief.cov, N)


def _propagate_impl(A, Sw, P0, N):
    out = np.empty((N, P0.shape[0], P0.shape[1]))
    P = P0.copy()
    for k in range(N):
        P = A @ P @ A.T + Sw
        P = 0.5 * (P + P.T)
        out[k] = P
    return out


_propagate = pick(njit(_propagate_impl), _propagate_impl)


def tightening_margins(s_shifted, covs, constraints: ConstraintSet):
    """``beta[k, i] = max(c_i S, z_(1-delta_i) ||a_i|| sigma_k)``."""
    if s_shifted < 0:
        raise ValueError("shifted surprise must be nonnegative")
    sigma = max_eig_sqrt_many(covs)
    lip = np.linalg.norm(constraints.a, axis=1)
    stat = np.outer(sigma, constraints.quantiles() * lip)
    return np.maximum(constraints.sensitivity[None, :] * s_shifted, stat)


# ---------------------------------------------------------------------------
# terminal weight


def _riccati_impl(A, B, Q, R, tol, max_iter):
    P = Q.copy()
    for it in range(1, max_iter + 1):
        PB = P @ B
        S = R + B.T @ PB
        K = np.linalg.solve(S, PB.T @ A)
        Pn = Q + A.T @ P @ A - (A.T @ PB) @ K
        Pn = 0.5 * (Pn + Pn.T)
        if not np.all(np.isfinite(Pn)):
            return P, -1
        d = np.max(np.abs(Pn - P))
        P = Pn
        if d <= tol:
            return P, it
    return P, -1


_riccati = pick(njit(_riccati_impl), _riccati_impl)


def riccati(A, B, Q, R, tol=1e-10, max_iter=100_000):
    """Fixed point of the discrete Riccati recursion; ``(P, iterations)``, -1 if not converged."""
    A = np.ascontiguousarray(A, dtype=float)
    B = np.ascontiguousarray(np.asarray(B, dtype=float).reshape(A.shape[0], -1))
    Q = np.ascontiguousarray(Q, dtype=float)
    R = np.ascontiguousarray(np.atleast_2d(np.asarray(R, dtype=float)))
    return _riccati(A, B, Q, R, tol, max_iter)


def terminal_weight(model: Model, Q, R, mean=None, u=0.0):
    mean = np.zeros(2) if mean is None else mean
    A, B, _ = model.linearize(mean, u)
    P, iters = riccati(A, B, Q, R)
    if iters < 0:
        log.warning("Riccati recursion did not converge; using 10*Q as terminal weight")
        return 10.0 * np.asarray(Q, dtype=float)
    return P


# ---------------------------------------------------------------------------
# condensing


def _condense_impl(A, B, c, z0, N):
    n = A.shape[0]
    F = np.empty((N, n))
    Gam = np.zeros((N, n, N))
    prev = z0.copy()
    for k in range(N):
        prev = A @ prev + c
        F[k] = prev
        for j in range(k):
            for i in range(n):
                acc = 0.0
                for l in range(n):
                    acc += A[i, l] * Gam[k - 1, l, j]
                Gam[k, i, j] = acc
        Gam[k, :, k] = B
    return F, Gam


_condense = pick(njit(_condense_impl), _condense_impl)


@dataclass
class CondensedQp:
    qp: QpProblem
    free: np.ndarray
    gamma: np.ndarray

    def means(self, u):
        return self.free + self.gamma @ u


def build_qp(model: Model, belief: GaussianBelief, ref_traj, margins, cfg: MpcConfig,
             constraints: ConstraintSet, P_term, u_lin=0.0) -> CondensedQp:
    """Condensed tracking QP over ``u_0 .. u_(N-1)``.

    ``ref_traj[k]`` is the target for ``z_(k+1)``; stage weight ``Q`` applies
    to ``z_1 .. z_(N-1)`` and ``P_term`` to ``z_N``.
    """
    N = cfg.horizon
    ref = np.asarray(ref_traj, dtype=float)
    if ref.shape[0] != N:
        raise ValueError(f"reference has {ref.shape[0]} entries, horizon is {N}")
    A, B, c = model.linearize(belief.mean, u_lin)
    F, Gam = _condense(np.ascontiguousarray(A), np.ascontiguousarray(B), np.ascontiguousarray(c), belief.mean, N)
    W = np.repeat(cfg.Q[None], N, axis=0)
    W[-1] = P_term
    err = F - ref
    WG = np.einsum("kij,kjn->kin", W, Gam)
    H = 2.0 * (np.einsum("kim,kin->mn", Gam, WG) + cfg.R * np.eye(N))
    H = 0.5 * (H + H.T)
    f = 2.0 * np.einsum("kin,ki->n", WG, err)
    const = float(np.einsum("ki,kij,kj->", err, W, err))

    a = constraints.a
    rows = np.einsum("ci,kin->kcn", a, Gam).reshape(N * constraints.count, N)
    upper_state = (constraints.b[None, :] - margins - F @ a.T).reshape(-1)
    G = np.vstack([np.eye(N), rows])
    lower = np.concatenate([np.full(N, constraints.u_min), np.full(rows.shape[0], -INF)])
    upper = np.concatenate([np.full(N, constraints.u_max), upper_state])
    return CondensedQp(QpProblem(H, f, G, lower, upper, const), F, Gam)


def _soften(qp: QpProblem, N):
    """Add one nonnegative slack shared by every state row."""
    n = qp.n
    m = qp.G.shape[0]
    H = np.zeros((n + 1, n + 1))
    H[:n, :n] = qp.H
    H[n, n] = 2.0 * SLACK_WEIGHT
    f = np.append(qp.f, SLACK_WEIGHT)
    G = np.zeros((m + 1, n + 1))
    G[:m, :n] = qp.G
    G[N:m, n] = -1.0
    G[m, n] = 1.0
    lower = np.append(qp.lower, 0.0)
    upper = np.append(qp.upper, INF)
    return QpProblem(H, f, G, lower, upper, qp.const)


# ---------------------------------------------------------------------------
# controller


class Controller:
    """Receding-horizon controller of one kind, with its warm-start cache.

    The terminal weight is recomputed whenever the control model has moved
    more than ``cfg.riccati_refresh`` (parameter-vector norm) since the last
    computation.
    """

    def __init__(self, kind, cfg: MpcConfig = None, constraints: ConstraintSet = None,
                 ref_amplitude=1.0):
        self.kind = ControllerKind(kind)
        self.cfg = cfg or MpcConfig()
        self.constraints = constraints or ConstraintSet()
        self.ref_amplitude = ref_amplitude
        self._P = None
        self._P_theta = None
        self._warm_x = None
        self._warm_y = None
        self.last_u = 0.0
        self.relaxed_events = []

    def reference_preview(self, t):
        N = self.cfg.horizon
        ref = np.zeros((N, 2))
        ref[:, 0] = reference(np.arange(t + 1, t + N + 1), self.ref_amplitude)
        return ref

    def terminal(self, model: Model, mean):
        if self.cfg.terminal_weight_mode == "scaled_Q":
            return self.cfg.terminal_scale * self.cfg.Q
        if self._P is None or np.linalg.norm(model.theta - self._P_theta) > self.cfg.riccati_refresh:
            self._P = terminal_weight(model, self.cfg.Q, np.array([[self.cfg.R]]), mean, self.last_u)
            self._P_theta = model.theta.copy()
        return self._P

    def margins(self, model, belief, s_shifted, covs):
        N = self.cfg.horizon
        k = self.constraints.count
        if self.kind in (ControllerKind.NOMINAL, ControllerKind.NO_TIGHTENING):
            return np.zeros((N, k))
        if self.kind is ControllerKind.ROBUST:
            return np.full((N, k), self.cfg.beta_fixed)
        return tightening_margins(s_shifted, covs, self.constraints)

    def step(self, model: Model, belief: GaussianBelief, s_shifted, t):
        """Solve the horizon problem and return ``(u_t, MpcSolution)``."""
        cfg = self.cfg
        N = cfg.horizon
        covs = propagate_uncertainty(model, belief, N, self.last_u)
        margins = self.margins(model, belief, s_shifted, covs)
        P_term = self.terminal(model, belief.mean)
        cq = build_qp(model, belief, self.reference_preview(t), margins, cfg, self.constraints,
                      P_term, self.last_u)
        try:
            sol = solve_mpc_qp(cq.qp, cfg.tol_abs, cfg.tol_rel, cfg.max_iter,
                               warm_x=self._warm_x, warm_y=self._warm_y)
            iters = sol.iterations
        except NonConverged:
            log.info("t=%d: neither QP solver converged, treating the problem as infeasible", t)
            sol = None
            iters = cfg.max_iter
        relaxed = False
        if sol is None or not sol.feasible:
            relaxed = True
            self.relaxed_events.append(t)
            log.info("t=%d: tightened QP infeasible, solving the softened problem", t)
            soft = _soften(cq.qp, N)
            try:
                # fixed-penalty ADMM stalls on the 1e6 slack curvature
                sol = solve_qp_interior(soft)
            except NonConverged as exc:
                raise NonConverged(f"softened QP did not converge: {exc}", t) from exc
            if not sol.feasible:
                raise NonConverged("softened QP reported infeasible", t)
            iters += sol.iterations
            u_seq = sol.x[:N]
            self._warm_x = self._warm_y = None
        else:
            u_seq = sol.x
            self._warm_x = np.append(u_seq[1:], u_seq[-1])
            y = sol.y
            k = self.constraints.count
            y_box = np.append(y[1:N], 0.0)
            y_state = y[N:].reshape(N, k)
            y_state = np.vstack([y_state[1:], np.zeros((1, k))]).ravel()
            self._warm_y = np.concatenate([y_box, y_state])
        u_t = float(np.clip(u_seq[0], self.constraints.u_min, self.constraints.u_max))
        self.last_u = u_t
        return u_t, MpcSolution(
            u_seq=u_seq,
            predicted_means=cq.means(u_seq),
            predicted_covs=covs,
            margins=margins,
            feasible=not relaxed,
            relaxed=relaxed,
            objective=sol.objective,
            qp_iterations=iters,
            duals=sol.y,
        )


def mpc_step(controller: Controller, model_for_control: Model, belief, s_shifted, t):
    return controller.step(model_for_control, belief, s_shifted, t)


def solution_kkt(controller: Controller, model, belief, s_shifted, t, sol: MpcSolution):
    """KKT residuals of ``sol`` for the QP that produced it (diagnostics)."""
    P_term = controller.terminal(model, belief.mean)
    cq = build_qp(model, belief, controller.reference_preview(t), sol.margins, controller.cfg,
                  controller.constraints, P_term, controller.last_u)
    return kkt_residuals(cq.qp, sol.u_seq, sol.duals)
