"""Small dense QP solver: ADMM (operator splitting) with active-set polishing.

Problem form::

    minimize    0.5 x'Hx + f'x
    subject to  lower <= G x <= upper

Infinite bounds are stored as +-INF (a large finite number) so that the
compiled kernel never sees ``inf`` arithmetic.
"""
from dataclasses import dataclass, field

import numpy as np

from ._jit import njit, pick
from .errors import NonConverged

INF = 1e20

SOLVED = 1
MAX_ITER = -2
INFEASIBLE = -3


@dataclass
class QpProblem:
    H: np.ndarray
    f: np.ndarray
    G: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    const: float = 0.0

    def __post_init__(self):
        self.H = np.ascontiguousarray(self.H, dtype=float)
        self.f = np.ascontiguousarray(self.f, dtype=float)
        self.G = np.ascontiguousarray(self.G, dtype=float).reshape(-1, self.f.shape[0])
        self.lower = np.clip(np.ascontiguousarray(self.lower, dtype=float), -INF, INF)
        self.upper = np.clip(np.ascontiguousarray(self.upper, dtype=float), -INF, INF)
        n = self.f.shape[0]
        m = self.G.shape[0]
        if self.H.shape != (n, n):
            raise ValueError("H shape does not match f")
        if self.lower.shape != (m,) or self.upper.shape != (m,):
            raise ValueError("bound vectors do not match G")

    @property
    def n(self):
        return self.f.shape[0]

    def objective(self, x):
        return float(0.5 * x @ self.H @ x + self.f @ x + self.const)


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: str
    iterations: int
    objective: float
    polished: bool = False
    z: np.ndarray = field(default=None, repr=False)

    @property
    def feasible(self):
        return self.status == "solved"


# ---------------------------------------------------------------------------
# ADMM kernels


@njit
def _admm_jit(H, f, G, lo, up, x, z, y, rho, sigma, relax, eps_abs, eps_rel, eps_pinf, max_iter, certify):
    n = f.shape[0]
    m = lo.shape[0]
    K = H + sigma * np.eye(n) + rho * (G.T @ G)
    Kinv = np.linalg.inv(K)
    rhs = np.empty(n)
    xt = np.empty(n)
    zt = np.empty(m)
    w = np.empty(m)
    dy = np.empty(m)
    streak = 0
    for it in range(1, max_iter + 1):
        for j in range(n):
            rhs[j] = sigma * x[j] - f[j]
        for i in range(m):
            w[i] = rho * z[i] - y[i]
        for j in range(n):
            acc = 0.0
            for i in range(m):
                acc += G[i, j] * w[i]
            rhs[j] += acc
        for j in range(n):
            acc = 0.0
            for k in range(n):
                acc += Kinv[j, k] * rhs[k]
            xt[j] = acc
        for i in range(m):
            acc = 0.0
            for j in range(n):
                acc += G[i, j] * xt[j]
            zt[i] = acc
        for j in range(n):
            x[j] = relax * xt[j] + (1.0 - relax) * x[j]
        for i in range(m):
            zr = relax * zt[i] + (1.0 - relax) * z[i]
            zn = zr + y[i] / rho
            if zn < lo[i]:
                zn = lo[i]
            elif zn > up[i]:
                zn = up[i]
            yn = y[i] + rho * (zr - zn)
            dy[i] = yn - y[i]
            y[i] = yn
            z[i] = zn
        # residuals
        r_prim = 0.0
        ax_inf = 0.0
        z_inf = 0.0
        for i in range(m):
            acc = 0.0
            for j in range(n):
                acc += G[i, j] * x[j]
            if abs(acc - z[i]) > r_prim:
                r_prim = abs(acc - z[i])
            if abs(acc) > ax_inf:
                ax_inf = abs(acc)
            if abs(z[i]) > z_inf:
                z_inf = abs(z[i])
        r_dual = 0.0
        hx_inf = 0.0
        gy_inf = 0.0
        f_inf = 0.0
        for j in range(n):
            hx = 0.0
            for k in range(n):
                hx += H[j, k] * x[k]
            gy = 0.0
            for i in range(m):
                gy += G[i, j] * y[i]
            r = abs(hx + f[j] + gy)
            if r > r_dual:
                r_dual = r
            if abs(hx) > hx_inf:
                hx_inf = abs(hx)
            if abs(gy) > gy_inf:
                gy_inf = abs(gy)
            if abs(f[j]) > f_inf:
                f_inf = abs(f[j])
        eps_p = eps_abs + eps_rel * max(ax_inf, z_inf)
        eps_d = eps_abs + eps_rel * max(hx_inf, max(gy_inf, f_inf))
        if r_prim <= eps_p and r_dual <= eps_d:
            return SOLVED, it
        # project dy onto the polar recession cone of [lo, up] before testing
        pinf = 0.0
        for i in range(m):
            if up[i] >= INF and dy[i] > 0.0:
                dy[i] = 0.0
            elif lo[i] <= -INF and dy[i] < 0.0:
                dy[i] = 0.0
            if abs(dy[i]) > pinf:
                pinf = abs(dy[i])
        if pinf > 0.0:
            gdy = 0.0
            for j in range(n):
                acc = 0.0
                for i in range(m):
                    acc += G[i, j] * dy[i]
                if abs(acc) > gdy:
                    gdy = abs(acc)
            support = 0.0
            for i in range(m):
                if dy[i] > 0.0:
                    support += up[i] * dy[i]
                elif dy[i] < 0.0:
                    support += lo[i] * dy[i]
            if gdy <= eps_pinf * pinf and support <= -eps_pinf * pinf:
                streak += 1
            else:
                streak = 0
        else:
            streak = 0
        if streak >= certify:
            return INFEASIBLE, it
    return MAX_ITER, max_iter


def _admm_numpy(H, f, G, lo, up, x, z, y, rho, sigma, relax, eps_abs, eps_rel, eps_pinf, max_iter, certify):
    n = f.shape[0]
    K = H + sigma * np.eye(n) + rho * (G.T @ G)
    Kinv = np.linalg.inv(K)
    streak = 0
    for it in range(1, max_iter + 1):
        xt = Kinv @ (sigma * x - f + G.T @ (rho * z - y))
        zt = G @ xt
        x[:] = relax * xt + (1.0 - relax) * x
        zr = relax * zt + (1.0 - relax) * z
        zn = np.clip(zr + y / rho, lo, up)
        yn = y + rho * (zr - zn)
        dy = yn - y
        y[:] = yn
        z[:] = zn
        gx = G @ x
        hx = H @ x
        gy = G.T @ y
        r_prim = np.max(np.abs(gx - z), initial=0.0)
        r_dual = np.max(np.abs(hx + f + gy))
        eps_p = eps_abs + eps_rel * max(np.max(np.abs(gx), initial=0.0), np.max(np.abs(z), initial=0.0))
        eps_d = eps_abs + eps_rel * max(np.max(np.abs(hx)), np.max(np.abs(gy)), np.max(np.abs(f)))
        if r_prim <= eps_p and r_dual <= eps_d:
            return SOLVED, it
        dy = np.where((up >= INF) & (dy > 0.0), 0.0, dy)
        dy = np.where((lo <= -INF) & (dy < 0.0), 0.0, dy)
        pinf = np.max(np.abs(dy), initial=0.0)
        if pinf > 0.0:
            support = np.sum(np.where(dy > 0.0, up * dy, np.where(dy < 0.0, lo * dy, 0.0)))
            ok = np.max(np.abs(G.T @ dy)) <= eps_pinf * pinf and support <= -eps_pinf * pinf
            streak = streak + 1 if ok else 0
        else:
            streak = 0
        if streak >= certify:
            return INFEASIBLE, it
    return MAX_ITER, max_iter


_admm = pick(_admm_jit, _admm_numpy)


def _polish(qp: QpProblem, x, y, tol):
    """Solve the equality QP on the active set guessed from the ADMM duals."""
    z = qp.G @ x
    lower_act = (z - qp.lower < -y) & (qp.lower > -INF)
    upper_act = (qp.upper - z < y) & (qp.upper < INF)
    act = np.flatnonzero(lower_act | upper_act)
    n = qp.n
    Ga = qp.G[act]
    ba = np.where(lower_act[act], qp.lower[act], qp.upper[act])
    k = act.shape[0]
    if k > n:
        return None
    kkt = np.zeros((n + k, n + k))
    kkt[:n, :n] = qp.H
    kkt[:n, n:] = Ga.T
    kkt[n:, :n] = Ga
    rhs = np.concatenate([-qp.f, ba])
    try:
        sol = np.linalg.solve(kkt, rhs)
    except np.linalg.LinAlgError:
        return None
    xp = sol[:n]
    yp = np.zeros_like(y)
    yp[act] = sol[n:]
    gx = qp.G @ xp
    if np.any(gx < qp.lower - tol) or np.any(gx > qp.upper + tol):
        return None
    # dual sign: lower-active multipliers <= 0, upper-active >= 0
    if np.any(yp[act][lower_act[act]] > tol) or np.any(yp[act][upper_act[act]] < -tol):
        return None
    return xp, yp


def equilibrate(qp: QpProblem, passes=25):
    """Ruiz scaling of the KKT matrix plus a cost scale.

    Returns ``(scaled_qp, D, E, c)`` with ``x = D x_s``, ``y = E y_s / c``.
    """
    n, m = qp.n, qp.G.shape[0]
    D = np.ones(n)
    E = np.ones(m)
    H, G = qp.H.copy(), qp.G.copy()
    for _ in range(passes):
        col = np.maximum(np.max(np.abs(H), axis=0), np.max(np.abs(G), axis=0, initial=0.0))
        row = np.max(np.abs(G), axis=1, initial=0.0)
        dx = 1.0 / np.sqrt(np.clip(col, 1e-4, 1e4))
        dz = 1.0 / np.sqrt(np.clip(row, 1e-4, 1e4))
        H = dx[:, None] * H * dx[None, :]
        G = dz[:, None] * G * dx[None, :]
        D *= dx
        E *= dz
    f = D * qp.f
    c = 1.0 / np.clip(max(np.mean(np.max(np.abs(H), axis=0)), np.max(np.abs(f), initial=0.0)), 1e-4, 1e4)

    def bounds(v):
        return np.where(np.abs(v) >= INF, v, E * v)

    scaled = QpProblem(c * H, c * f, G, bounds(qp.lower), bounds(qp.upper), c * qp.const)
    return scaled, D, E, c


def _unscaled_converged(qp, x, y, eps_abs, eps_rel):
    gx = qp.G @ x
    z = np.clip(gx, qp.lower, qp.upper)
    hx = qp.H @ x
    gy = qp.G.T @ y
    r_prim = np.max(np.abs(gx - z), initial=0.0)
    r_dual = np.max(np.abs(hx + qp.f + gy))
    eps_p = eps_abs + eps_rel * max(np.max(np.abs(gx), initial=0.0), np.max(np.abs(z), initial=0.0))
    eps_d = eps_abs + eps_rel * max(np.max(np.abs(hx)), np.max(np.abs(gy), initial=0.0), np.max(np.abs(qp.f)))
    return r_prim <= eps_p and r_dual <= eps_d


def solve_qp(qp: QpProblem, tol_abs=1e-6, tol_rel=1e-6, max_iter=4000, rho=1.0, relax=1.6,
             sigma=1e-6, warm_x=None, warm_y=None, polish=True, certify=50, scale=False,
             eps_pinf=1e-3) -> QpSolution:
    """ADMM with fixed penalty ``rho`` and over-relaxation ``relax``.

    With ``scale=True`` the iteration runs on a Ruiz-equilibrated copy of
    the problem and the stopping test is re-checked on the original scaling. Returns a solution
    whose ``status`` is ``"solved"`` or ``"infeasible"``; hitting
    ``max_iter`` raises ``NonConverged``.
    """
    n, m = qp.n, qp.G.shape[0]
    if scale:
        sq, D, E, c = equilibrate(qp)
    else:
        sq, D, E, c = qp, np.ones(n), np.ones(m), 1.0
    x = np.zeros(n) if warm_x is None else np.array(warm_x, dtype=float) / D
    y = np.zeros(m) if warm_y is None else np.array(warm_y, dtype=float) * c / E
    z = np.clip(sq.G @ x, sq.lower, sq.upper)
    used = 0
    eps_abs, eps_rel = tol_abs, tol_rel
    while True:
        status, iters = _admm(sq.H, sq.f, sq.G, sq.lower, sq.upper, x, z, y, rho, sigma, relax,
                              eps_abs, eps_rel, eps_pinf, max_iter - used, certify)
        used += iters
        if status == INFEASIBLE:
            return QpSolution(D * x, E * y / c, "infeasible", used, np.nan, z=z / E)
        if status != SOLVED:
            raise NonConverged(f"ADMM hit {max_iter} iterations")
        xo, yo = D * x, E * y / c
        if not scale or _unscaled_converged(qp, xo, yo, tol_abs, tol_rel) or used >= max_iter:
            break
        eps_abs, eps_rel = 0.1 * eps_abs, 0.1 * eps_rel
    polished = False
    if polish:
        res = _polish(qp, xo, yo, 1e-9)
        if res is not None:
            xo, yo = res
            polished = True
    return QpSolution(xo, yo, "solved", used, qp.objective(xo), polished, qp.G @ xo)


DIVERGENCE = 1e12


def solve_qp_interior(qp: QpProblem, tol=1e-9, max_iter=100) -> QpSolution:
    """Mehrotra predictor-corrector interior-point method.

    Used where fixed-penalty ADMM stalls, i.e. on problems whose cost mixes
    very different curvatures (the softened MPC problem). Assumes the
    problem is feasible; raises ``NonConverged`` otherwise.
    """
    n = qp.n
    up = qp.upper < INF
    lo = qp.lower > -INF
    C = np.vstack([qp.G[up], -qp.G[lo]])
    d = np.concatenate([qp.upper[up], -qp.lower[lo]])
    m = C.shape[0]
    H, f = qp.H, qp.f
    x = np.zeros(n)
    slack = np.maximum(d - C @ x, 1.0)
    lam = np.ones(m)
    scale_d = 1.0 + np.max(np.abs(f), initial=0.0)
    scale_p = 1.0 + np.max(np.abs(d), initial=0.0)

    def max_step(v, dv):
        neg = dv < 0.0
        return min(1.0, float(np.min(-v[neg] / dv[neg]))) if np.any(neg) else 1.0

    mu0 = float(slack @ lam) / m if m else 0.0
    for it in range(1, max_iter + 1):
        r_d = H @ x + f + C.T @ lam
        r_p = C @ x + slack - d
        mu = float(slack @ lam) / m if m else 0.0
        if (np.max(np.abs(r_d)) <= tol * scale_d and np.max(np.abs(r_p), initial=0.0) <= tol * scale_p
                and mu <= tol):
            break
        # multipliers blowing up while the primal residual stalls: infeasible
        if not mu <= DIVERGENCE * max(mu0, 1.0):
            raise NonConverged("interior-point iterates diverge; problem is likely infeasible")
        w = lam / slack
        K = H + C.T @ (w[:, None] * C)
        L = np.linalg.cholesky(0.5 * (K + K.T))

        def direction(r_c):
            rhs = -r_d - C.T @ ((-r_c + lam * r_p) / slack)
            dx = np.linalg.solve(L.T, np.linalg.solve(L, rhs))
            ds = -r_p - C @ dx
            dl = (-r_c - lam * ds) / slack
            return dx, ds, dl

        dx, ds, dl = direction(slack * lam)
        a_aff = min(max_step(slack, ds), max_step(lam, dl))
        mu_aff = float((slack + a_aff * ds) @ (lam + a_aff * dl)) / m
        sigma = (mu_aff / mu) ** 3 if mu > 0 else 0.0
        dx, ds, dl = direction(slack * lam + ds * dl - sigma * mu)
        a = 0.99 * min(max_step(slack, ds), max_step(lam, dl))
        x = x + a * dx
        slack = slack + a * ds
        lam = lam + a * dl
    else:
        raise NonConverged(f"interior-point method hit {max_iter} iterations")
    y = np.zeros(qp.G.shape[0])
    k = int(np.sum(up))
    y[up] += lam[:k]
    y[lo] -= lam[k:]
    return QpSolution(x, y, "solved", it, qp.objective(x), False, qp.G @ x)


def solve_mpc_qp(qp: QpProblem, tol_abs=1e-6, tol_rel=1e-6, max_iter=4000, warm_x=None, warm_y=None):
    """ADMM, then the interior-point method if ADMM reaches its iteration cap.

    Returns a ``QpSolution`` with status ``"solved"`` or ``"infeasible"``
    whose ``iterations`` counts both stages. Raises ``NonConverged`` when
    both stages fail, which in practice means the problem is infeasible
    without ADMM having certified it yet.
    """
    try:
        return solve_qp(qp, tol_abs, tol_rel, max_iter, warm_x=warm_x, warm_y=warm_y)
    except NonConverged:
        pass
    try:
        sol = solve_qp_interior(qp)
    except np.linalg.LinAlgError as exc:
        raise NonConverged(f"interior-point factorisation failed: {exc}") from exc
    sol.iterations += max_iter
    return sol


def kkt_residuals(qp: QpProblem, x, y):
    """Infinity norms of (stationarity, primal infeasibility, complementarity)."""
    stat = np.max(np.abs(qp.H @ x + qp.f + qp.G.T @ y))
    gx = qp.G @ x
    prim = np.max(np.concatenate([np.maximum(qp.lower - gx, 0.0), np.maximum(gx - qp.upper, 0.0)]), initial=0.0)
    y_up = np.maximum(y, 0.0)
    y_lo = np.minimum(y, 0.0)
    comp_up = np.where(qp.upper < INF, y_up * (qp.upper - gx), 0.0)
    comp_lo = np.where(qp.lower > -INF, y_lo * (qp.lower - gx), 0.0)
    comp = np.max(np.abs(np.concatenate([comp_up, comp_lo])), initial=0.0)
    return float(stat), float(prim), float(comp)
