"""Ground-truth plant and the three environment schedules."""
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .errors import ConfigError, SimulationDiverged

A1 = np.array([[0.97, 0.08], [-0.12, 0.96]])
A2 = np.array([[0.90, 0.24], [-0.18, 0.91]])
B_ENV = np.array([[0.05], [0.10]])
C0 = np.eye(2)
DELTA_C = np.array([[0.35, 0.10], [-0.10, 0.25]])
REF_FREQ = 0.02 * np.pi


class ScenarioKind(str, Enum):
    NOMINAL = "nominal"
    ABRUPT = "abrupt"
    OBS_DRIFT = "obs-drift"
    GRADUAL = "gradual"


@dataclass
class ScenarioSpec:
    kind: ScenarioKind = ScenarioKind.ABRUPT
    t_s: int = 300
    tau_c: float = 80.0
    tau_a: float = 120.0
    delta_c: np.ndarray = field(default_factory=lambda: DELTA_C.copy())
    rho: float = 0.05
    sigma_w: float = 0.01
    sigma_v: float = 0.02

    def __post_init__(self):
        self.kind = ScenarioKind(self.kind)
        self.delta_c = np.asarray(self.delta_c, dtype=float).reshape(2, 2)
        if self.t_s < 0:
            raise ConfigError("t_s must be >= 0")
        if self.tau_c <= 0 or self.tau_a <= 0:
            raise ConfigError("tau_c and tau_a must be positive")
        if self.rho < 0:
            raise ConfigError("rho must be >= 0")
        if self.sigma_w < 0 or self.sigma_v < 0:
            raise ConfigError("noise levels must be >= 0")

    def check_stability(self, horizon=2000):
        """Reject schedules whose dynamics matrix leaves the unit disc."""
        for t in range(0, horizon, 5):
            A = env_matrices(self, t).A_env
            if np.max(np.abs(np.linalg.eigvals(A))) >= 1.0:
                raise ConfigError(f"A_env({t}) is not Schur stable")


@dataclass(frozen=True)
class EnvMatrices:
    A_env: np.ndarray
    B_env: np.ndarray
    C_env: np.ndarray


def drift_weight(t, t_s, tau):
    """``1 - exp(-(t - t_s)/tau)`` for ``t >= t_s``, zero before."""
    if t < t_s:
        return 0.0
    return 1.0 - np.exp(-(t - t_s) / tau)


def env_matrices(spec: ScenarioSpec, t: int) -> EnvMatrices:
    A, C = A1, C0
    if spec.kind is ScenarioKind.ABRUPT:
        if t >= spec.t_s:
            A = A2
    elif spec.kind is ScenarioKind.OBS_DRIFT:
        C = C0 + drift_weight(t, spec.t_s, spec.tau_c) * spec.delta_c
    elif spec.kind is ScenarioKind.GRADUAL:
        A = A1 + drift_weight(t, spec.t_s, spec.tau_a) * (A2 - A1)
    return EnvMatrices(A, B_ENV, C)


def reference(t, amplitude=1.0):
    """Tracking target for x1; x2 is regulated to zero."""
    return amplitude * np.sin(REF_FREQ * t)


def interaction(x, rho):
    return np.array([rho * np.tanh(x[0]), 0.0])


def step_plant(spec: ScenarioSpec, x, u, t, w=None, v=None):
    """Advance one step and observe the post-step state.

    ``w`` and ``v`` are standard-normal draws (length 2) scaled internally by
    ``sigma_w`` and ``sigma_v``; ``None`` means noise-free.
    """
    if not np.isfinite(u):
        raise SimulationDiverged("non-finite input", t)
    env = env_matrices(spec, t)
    # overflow is reported as SimulationDiverged below, not as a warning
    with np.errstate(over="ignore", invalid="ignore"):
        x_next = env.A_env @ x + env.B_env[:, 0] * u + interaction(x, spec.rho)
        if w is not None:
            x_next = x_next + spec.sigma_w * np.asarray(w)
        o = env.C_env @ x_next
        if v is not None:
            o = o + spec.sigma_v * np.asarray(v)
    if not (np.all(np.isfinite(x_next)) and np.all(np.isfinite(o))):
        raise SimulationDiverged("plant state became non-finite", t)
    return x_next, o


class Plant:
    """Single-owner plant instance drawing from its own noise substreams."""

    def __init__(self, spec: ScenarioSpec, streams, x0=(0.0, 0.0), noise=True):
        self.spec = spec
        self.streams = streams
        self.x = np.asarray(x0, dtype=float).copy()
        self.noise = noise
        self.t = 0

    def step(self, u):
        w = v = None
        # draws happen even when noise is off so substreams stay aligned
        w_raw = self.streams.normal("process", 2)
        v_raw = self.streams.normal("measurement", 2)
        if self.noise:
            w, v = w_raw, v_raw
        self.x, o = step_plant(self.spec, self.x, u, self.t, w, v)
        self.t += 1
        return self.x.copy(), o
