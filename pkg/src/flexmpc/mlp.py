"""Two-hidden-layer ReLU network with mean and log-variance heads.

Parameters live in one flat vector; the per-layer arrays are views into it,
so an adaptation step on the flat vector updates the network in place of
a copy.
"""
import math

import numpy as np

LOGVAR_MIN = -10.0
LOGVAR_MAX = 4.0


class MlpNet:
    """input -> hidden -> hidden -> (mean, log-variance)."""

    def __init__(self, n_in, n_out, hidden=64, flat=None):
        self.n_in = n_in
        self.n_out = n_out
        self.hidden = hidden
        self._shapes = [
            ("W1", (hidden, n_in)),
            ("b1", (hidden,)),
            ("W2", (hidden, hidden)),
            ("b2", (hidden,)),
            ("Wm", (n_out, hidden)),
            ("bm", (n_out,)),
            ("Wv", (n_out, hidden)),
            ("bv", (n_out,)),
        ]
        self.size = sum(math.prod(s) for _, s in self._shapes)
        if flat is None:
            flat = np.zeros(self.size)
        flat = np.asarray(flat, dtype=float)
        if flat.shape != (self.size,):
            raise ValueError(f"expected {self.size} parameters, got {flat.shape}")
        self.flat = flat
        self._bind()

    def _bind(self):
        off = 0
        self.slices = {}
        for name, shape in self._shapes:
            n = math.prod(shape)
            self.slices[name] = slice(off, off + n)
            setattr(self, name, self.flat[off:off + n].reshape(shape))
            off += n

    def names(self):
        return [name for name, _ in self._shapes]

    def with_flat(self, flat):
        return MlpNet(self.n_in, self.n_out, self.hidden, np.array(flat, dtype=float))

    @classmethod
    def random(cls, n_in, n_out, hidden=64, rng=None, scale=1.0):
        rng = np.random.default_rng(rng)
        net = cls(n_in, n_out, hidden)
        net.W1[:] = rng.normal(0.0, scale / np.sqrt(n_in), net.W1.shape)
        net.b1[:] = rng.normal(0.0, 0.1, net.b1.shape)
        net.W2[:] = rng.normal(0.0, scale / np.sqrt(hidden), net.W2.shape)
        net.b2[:] = rng.normal(0.0, 0.1, net.b2.shape)
        net.Wm[:] = rng.normal(0.0, scale / np.sqrt(hidden), net.Wm.shape)
        net.bm[:] = rng.normal(0.0, 0.1, net.bm.shape)
        net.Wv[:] = rng.normal(0.0, 0.1 / np.sqrt(hidden), net.Wv.shape)
        net.bv[:] = rng.normal(-2.0, 0.5, net.bv.shape)
        return net

    # -- evaluation -------------------------------------------------------

    def forward(self, x):
        """Return ``(mean, logvar, cache)``; logvar is clamped to its range."""
        x = np.asarray(x, dtype=float)
        a1 = self.W1 @ x + self.b1
        h1 = np.maximum(a1, 0.0)
        a2 = self.W2 @ h1 + self.b2
        h2 = np.maximum(a2, 0.0)
        mean = self.Wm @ h2 + self.bm
        lv_raw = self.Wv @ h2 + self.bv
        lv = np.clip(lv_raw, LOGVAR_MIN, LOGVAR_MAX)
        cache = (x, a1, h1, a2, h2, lv_raw)
        return mean, lv, cache

    def input_jacobian(self, cache):
        """d mean / d input; piecewise constant in the input for ReLU nets."""
        _, a1, _, a2, _, _ = cache
        V = (a1 > 0.0)[:, None] * self.W1
        U = (a2 > 0.0)[:, None] * (self.W2 @ V)
        return self.Wm @ U

    def backward(self, cache, g_mean=None, g_logvar=None, g_jac=None):
        """Reverse-mode sweep.

        ``g_jac`` is the gradient with respect to ``input_jacobian(cache)``
        (shape ``(n_out, n_in)``). Returns ``(flat_grad, input_grad)``; the
        input gradient ignores ``g_jac`` since the Jacobian is locally
        constant in the input.
        """
        x, a1, h1, a2, h2, lv_raw = cache
        d1 = (a1 > 0.0).astype(float)
        d2 = (a2 > 0.0).astype(float)
        g = np.zeros(self.size)
        G = {name: g[sl].reshape(getattr(self, name).shape) for name, sl in self.slices.items()}
        dh2 = np.zeros(self.hidden)
        if g_mean is not None:
            G["Wm"] += np.outer(g_mean, h2)
            G["bm"] += g_mean
            dh2 += self.Wm.T @ g_mean
        if g_logvar is not None:
            inside = (lv_raw > LOGVAR_MIN) & (lv_raw < LOGVAR_MAX)
            g_raw = np.where(inside, g_logvar, 0.0)
            G["Wv"] += np.outer(g_raw, h2)
            G["bv"] += g_raw
            dh2 += self.Wv.T @ g_raw
        da2 = dh2 * d2
        G["W2"] += np.outer(da2, h1)
        G["b2"] += da2
        da1 = (self.W2.T @ da2) * d1
        G["W1"] += np.outer(da1, x)
        G["b1"] += da1
        dx = self.W1.T @ da1
        if g_jac is not None:
            # J = Wm D2 W2 D1 W1
            V = d1[:, None] * self.W1
            U = d2[:, None] * (self.W2 @ V)
            G["Wm"] += g_jac @ U.T
            dU = d2[:, None] * (self.Wm.T @ g_jac)
            G["W2"] += dU @ V.T
            dV = d1[:, None] * (self.W2.T @ dU)
            G["W1"] += dV
        return g, dx


def mlp_forward(net: MlpNet, x):
    mean, lv, _ = net.forward(x)
    return mean, lv


def _min_preactivation(net, x):
    _, a1, _, a2, _, lv_raw = net.forward(x)[2]
    gaps = np.concatenate([np.abs(a1), np.abs(a2), np.abs(lv_raw - LOGVAR_MIN), np.abs(lv_raw - LOGVAR_MAX)])
    return float(np.min(gaps))


def mlp_grad_check(net: MlpNet, n_coords=64, h=1e-5, rng=None, max_tries=200):
    """Max relative error of ``backward`` against central differences.

    The scalar probed is a random linear functional of (mean, logvar,
    input-Jacobian). Inputs are re-drawn until no pre-activation sits within
    1e-4 of a ReLU kink or clamp edge.
    """
    rng = np.random.default_rng(rng)
    for _ in range(max_tries):
        x = rng.normal(size=net.n_in)
        if _min_preactivation(net, x) >= 1e-4:
            break
    else:
        raise RuntimeError("could not find a kink-free input")
    w_m = rng.normal(size=net.n_out)
    w_v = rng.normal(size=net.n_out)
    w_j = rng.normal(size=(net.n_out, net.n_in))

    def scalar(n):
        mean, lv, cache = n.forward(x)
        return w_m @ mean + w_v @ lv + np.sum(w_j * n.input_jacobian(cache))

    _, _, cache = net.forward(x)
    grad, _ = net.backward(cache, w_m, w_v, w_j)
    coords = rng.choice(net.size, size=min(n_coords, net.size), replace=False)
    worst = 0.0
    for i in coords:
        plus = net.flat.copy()
        plus[i] += h
        minus = net.flat.copy()
        minus[i] -= h
        fd = (scalar(net.with_flat(plus)) - scalar(net.with_flat(minus))) / (2 * h)
        worst = max(worst, relative_error(grad[i], fd))
    return worst


def relative_error(a, b):
    """``|a-b| / max(|a|, |b|, 1)``: relative for large values, absolute near zero."""
    return float(abs(a - b) / max(abs(a), abs(b), 1.0))
