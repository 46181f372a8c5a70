"""Surprise-modulated, norm-clipped parameter adaptation and CFI accounting."""
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

ALL_BLOCKS = ("A", "B", "C", "Sw", "Sv")
# noise covariances stay fixed so that mismatch cannot be absorbed as noise
DEFAULT_BLOCKS = ("A", "B", "C")


@dataclass
class AdaptConfig:
    """Adaptation settings.

    Attributes
    ----------
    eta_max : float
        Ceiling of the step size.
    clip_norm : float
        Bound on the update direction norm (``inf`` disables clipping).
    epsilon : float or None
        CFI normaliser; ``None`` means ``eta_max * clip_norm``.
    decay_exponent, decay_scale : float
        Base schedule ``eta_max / (1 + t/decay_scale)**decay_exponent``.
    decay : bool
        ``False`` holds the base schedule at ``eta_max``.
    grad_gain : float
        Fixed scale applied to the log-likelihood gradient before clipping.
    blocks : tuple of str
        Parameter blocks that adapt (``A``, ``B``, ``C``, ``Sw``, ``Sv``);
        the gradient of every other coordinate is zeroed before clipping.
    enabled : bool
        ``False`` turns ``adapt_step`` into the identity.
    """

    eta_max: float = 0.15
    clip_norm: float = 10.0
    epsilon: float = None
    decay_exponent: float = 0.6
    decay_scale: float = 200.0
    decay: bool = True
    grad_gain: float = 3e-3
    blocks: tuple = DEFAULT_BLOCKS
    enabled: bool = True

    def __post_init__(self):
        if not self.eta_max > 0:
            raise ConfigError("eta_max must be positive")
        if not self.clip_norm > 0:
            raise ConfigError("clip_norm must be positive")
        if not 0.5 < self.decay_exponent <= 1.0:
            raise ConfigError("decay_exponent must lie in (0.5, 1]")
        if not self.decay_scale > 0:
            raise ConfigError("decay_scale must be positive")
        if not self.grad_gain > 0:
            raise ConfigError("grad_gain must be positive")
        if isinstance(self.blocks, str):
            self.blocks = tuple(b.strip() for b in self.blocks.split(",") if b.strip())
        self.blocks = tuple(self.blocks)
        unknown = set(self.blocks) - set(ALL_BLOCKS)
        if unknown or not self.blocks:
            raise ConfigError(f"blocks must be a non-empty subset of {ALL_BLOCKS}")
        if self.epsilon is None:
            self.epsilon = self.default_epsilon()
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive")

    def default_epsilon(self):
        eps = self.eta_max * self.clip_norm
        return eps if np.isfinite(eps) else self.eta_max * 10.0

    @property
    def drift_bound(self):
        return self.eta_max * self.clip_norm


@dataclass
class AdaptState:
    step_count: int = 0
    last_alpha: float = 0.0
    last_cfi: float = 0.0
    last_drift_norm: float = 0.0
    cumulative_drift: float = 0.0


def base_rate(t_adapt, cfg: AdaptConfig):
    if not cfg.decay:
        return cfg.eta_max
    return cfg.eta_max / (1.0 + t_adapt / cfg.decay_scale) ** cfg.decay_exponent


def step_size(s_shifted, t_adapt, cfg: AdaptConfig) -> float:
    """``base_rate(t) / (1 + S)``; never above ``eta_max``."""
    if s_shifted < 0:
        raise ValueError("shifted surprise must be nonnegative")
    return base_rate(t_adapt, cfg) / (1.0 + s_shifted)


def clip_direction(grad, clip_norm):
    grad = np.asarray(grad, dtype=float)
    norm = float(np.linalg.norm(grad))
    if norm <= clip_norm:
        return grad
    return grad * (clip_norm / norm)


def cfi(phi_prev, phi_next, epsilon) -> float:
    phi_prev = np.asarray(phi_prev, dtype=float)
    phi_next = np.asarray(phi_next, dtype=float)
    if phi_prev.shape != phi_next.shape:
        raise ValueError("phi vectors differ in length")
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    return float(np.linalg.norm(phi_next - phi_prev)) / epsilon


def adapt_step(model, grad, s_shifted, state: AdaptState, cfg: AdaptConfig):
    """One bounded ascent step on the predictive log-likelihood.

    Returns ``(new_model, new_state)``; ``state`` is not modified.
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != model.theta.shape:
        raise ValueError(f"gradient length {grad.shape} does not match theta {model.theta.shape}")
    if not cfg.enabled:
        return model, AdaptState(state.step_count, 0.0, 0.0, 0.0, state.cumulative_drift)
    alpha = step_size(s_shifted, state.step_count, cfg)
    if len(cfg.blocks) < len(ALL_BLOCKS):
        grad = grad * model.block_mask(cfg.blocks)
    direction = clip_direction(cfg.grad_gain * grad, cfg.clip_norm)
    theta_next = model.theta + alpha * direction
    new_model = model.with_theta(theta_next)
    drift = float(np.linalg.norm(new_model.theta - model.theta))
    # bounded-drift invariant: a failure here is a bug, not a data condition
    assert drift <= alpha * cfg.clip_norm + 1e-12, (drift, alpha, cfg.clip_norm)
    index = cfi(model.phi, new_model.phi, cfg.epsilon)
    return new_model, AdaptState(
        step_count=state.step_count + 1,
        last_alpha=alpha,
        last_cfi=index,
        last_drift_norm=drift,
        cumulative_drift=state.cumulative_drift + drift,
    )
