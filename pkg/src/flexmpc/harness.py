"""Closed-loop scenario runner, run metrics and Monte-Carlo validators.

Timeline of one run (``cfg.steps`` steps in total):

* ``[0, warmup_steps)``: warm-up with the adaptive controller, identical for
  every controller kind because all noise comes from seeded substreams. The
  model at the end of the warm-up is the frozen ``theta0`` of the baselines.
* ``[warmup_steps, steps)``: the requested controller.

Row ``t`` of a trace holds the state ``x_t``, the reference ``r_t`` and the
input ``u_t`` chosen from the belief at ``t``, followed by what happened
next: the observation ``o_(t+1)``, the surprise it caused and the resulting
adaptation step.
"""
import copy
import csv
import logging
import os
import tempfile
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .adapt import AdaptConfig, AdaptState, adapt_step
from .errors import ConfigError
from .filter import FilterState, filter_update, init_belief, surprise
from .gaussian import max_eig_sqrt_many
from .model import LinearModel, MlpModel, Model
from .mpc import ConstraintSet, Controller, ControllerKind, MpcConfig
from .plant import B_ENV, Plant, ScenarioKind, ScenarioSpec, reference
from .rng import OFFSETS, Streams

log = logging.getLogger(__name__)

BINOMIAL_Z99 = 2.5758293035489004
RECOVERY_WINDOW = 50
RECOVERY_FACTOR = 1.2
STEADY_WINDOW = 100
BURST_WINDOW = 50


@dataclass
class RunConfig:
    scenario: ScenarioSpec = field(default_factory=ScenarioSpec)
    controllers: tuple = ("cf",)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)
    mpc: MpcConfig = field(default_factory=MpcConfig)
    constraints: ConstraintSet = field(default_factory=ConstraintSet)
    steps: int = 600
    seed: int = 0
    seeds_for_aggregate: int = 20
    warmup_steps: int = 200
    out_dir: str = "results"
    model_kind: str = "linear"
    noise: bool = True
    ref_amplitude: float = 1.0
    init_cov: float = 0.1
    init_A: float = 0.9
    init_sw: float = 1e-4
    init_sv: float = 4e-4
    warmup_blocks: tuple = ("A", "B")
    warmup_average: int = 0

    def __post_init__(self):
        if isinstance(self.controllers, str):
            self.controllers = (self.controllers,)
        self.controllers = tuple(ControllerKind(k) for k in self.controllers)
        if self.steps <= self.scenario.t_s:
            raise ConfigError("steps must exceed the shift time t_s")
        if not 0 <= self.warmup_steps < self.scenario.t_s:
            raise ConfigError("warmup_steps must lie in [0, t_s)")
        if self.model_kind not in ("linear", "mlp"):
            raise ConfigError("model_kind must be 'linear' or 'mlp'")
        if not 0 <= self.warmup_average <= self.warmup_steps:
            raise ConfigError("warmup_average must lie in [0, warmup_steps]")
        if self.seeds_for_aggregate < 1:
            raise ConfigError("seeds_for_aggregate must be >= 1")


@dataclass
class TraceRecord:
    t: int
    x1: float
    x2: float
    ref: float
    o1: float
    o2: float
    u: float
    S_raw: float
    S_shifted: float
    alpha: float
    CFI: float
    drift_norm: float
    max_margin: float
    boundary_distance: float
    feasible: int
    relaxed: int
    violation_x: int
    violation_u: int
    belief_mean1: float
    belief_mean2: float
    belief_cov_trace: float
    qp_iterations: int


TRACE_COLUMNS = [f.name for f in fields(TraceRecord)]
_INT_COLUMNS = {f.name for f in fields(TraceRecord) if f.type is int or f.type == "int"}


@dataclass
class RunSummary:
    rmse_pre: float
    rmse_post_full: float
    rmse_post_steady: float
    recovery_time: float
    violation_count_x: int
    violation_count_u: int
    relaxed_count: int
    max_cfi_burst: float
    mean_cfi_pre: float
    cumulative_drift: float


@dataclass
class RunResult:
    scenario: str
    controller: str
    seed: int
    records: list
    summary: RunSummary
    theta0: np.ndarray = field(repr=False, default=None)
    theta_final: np.ndarray = field(repr=False, default=None)
    noise_fingerprint: dict = field(repr=False, default=None)


# ---------------------------------------------------------------------------
# loop


def initial_model(cfg: RunConfig, streams: Streams) -> Model:
    lin = LinearModel.from_matrices(cfg.init_A * np.eye(2), B_ENV[:, 0], np.eye(2),
                                    cfg.init_sw * np.eye(2), cfg.init_sv * np.eye(2))
    if cfg.model_kind == "linear":
        return lin
    return MlpModel.from_linear(lin, rng=streams["init"])


def adapt_config_for(kind: ControllerKind, base: AdaptConfig) -> AdaptConfig:
    if kind is ControllerKind.NO_RATE_LIMIT:
        # unbounded direction and no decay; epsilon stays at its default value
        return replace(base, clip_norm=np.inf, decay=False, epsilon=base.epsilon)
    if not kind.adapts:
        return replace(base, enabled=False)
    return base


def noise_fingerprint(seed, n=5):
    """First ``n`` standard-normal draws of every substream of ``seed``."""
    fresh = Streams(seed)
    return {name: fresh.normal(name, n).tolist() for name in OFFSETS}


@dataclass
class _Loop:
    """Everything that evolves along one closed loop."""

    plant: Plant
    filt: FilterState
    model: Model
    adapt_state: AdaptState
    controller: Controller
    s_prev: float = 0.0
    t: int = 0
    records: list = field(default_factory=list)


def _new_loop(cfg: RunConfig, seed) -> _Loop:
    streams = Streams(seed)
    plant = Plant(cfg.scenario, streams, noise=cfg.noise)
    filt = init_belief(cov=cfg.init_cov * np.eye(2))
    controller = Controller(ControllerKind.CF, cfg.mpc, cfg.constraints, cfg.ref_amplitude)
    return _Loop(plant, filt, initial_model(cfg, streams), AdaptState(), controller)


def _advance(loop: _Loop, cfg: RunConfig, adapt_cfg: AdaptConfig, until):
    cons = loop.controller.constraints
    while loop.t < until:
        t = loop.t
        belief = loop.filt.belief
        x_t = loop.plant.x.copy()
        u, sol = loop.controller.step(loop.model, belief, loop.s_prev, t)
        _, o_next = loop.plant.step(u)
        s_raw, s_shift = surprise(loop.model, loop.filt, u, o_next)
        if adapt_cfg.enabled:
            _, grad = loop.model.loglik_and_grad(belief, u, o_next)
            model, astate = adapt_step(loop.model, grad, s_shift, loop.adapt_state, adapt_cfg)
        else:
            model = loop.model
            astate = AdaptState(loop.adapt_state.step_count, 0.0, 0.0, 0.0, loop.adapt_state.cumulative_drift)
        filt = filter_update(model, loop.filt, u, o_next)
        loop.filt = FilterState(filt.belief, s_shift, filt.last_innovation)
        loop.model = model
        loop.adapt_state = astate
        loop.s_prev = s_shift
        loop.records.append(TraceRecord(
            t=t,
            x1=float(x_t[0]),
            x2=float(x_t[1]),
            ref=float(reference(t, cfg.ref_amplitude)),
            o1=float(o_next[0]),
            o2=float(o_next[1]),
            u=u,
            S_raw=s_raw,
            S_shifted=s_shift,
            alpha=astate.last_alpha,
            CFI=astate.last_cfi,
            drift_norm=astate.last_drift_norm,
            max_margin=sol.max_margin,
            boundary_distance=float(np.min(cons.b - cons.a @ x_t)),
            feasible=int(sol.feasible),
            relaxed=int(sol.relaxed),
            violation_x=int(cons.violated(x_t)),
            violation_u=int(u < cons.u_min or u > cons.u_max),
            belief_mean1=float(belief.mean[0]),
            belief_mean2=float(belief.mean[1]),
            belief_cov_trace=float(np.trace(belief.cov)),
            qp_iterations=sol.qp_iterations,
        ))
        loop.t += 1
    return loop


def warm_up(cfg: RunConfig, seed) -> _Loop:
    loop = _new_loop(cfg, seed)
    adapt = cfg.adapt if cfg.warmup_blocks is None else replace(cfg.adapt, blocks=cfg.warmup_blocks)
    n_avg = cfg.warmup_average
    _advance(loop, cfg, adapt, cfg.warmup_steps - n_avg)
    if n_avg == 0:
        return loop
    # theta_0 is the mean of the last n_avg iterates, which damps the noise of
    # the final few steps without slowing the early transient
    total = np.zeros_like(loop.model.theta)
    for _ in range(n_avg):
        _advance(loop, cfg, adapt, loop.t + 1)
        total += loop.model.theta
    loop.model = loop.model.with_theta(total / n_avg)
    return loop


def _finish(loop: _Loop, cfg: RunConfig, kind: ControllerKind, seed) -> RunResult:
    theta0 = loop.model.theta.copy()
    loop.controller.kind = kind
    _advance(loop, cfg, adapt_config_for(kind, cfg.adapt), cfg.steps)
    return RunResult(
        scenario=cfg.scenario.kind.value,
        controller=kind.value,
        seed=seed,
        records=loop.records,
        summary=summarize(loop.records, cfg),
        theta0=theta0,
        theta_final=loop.model.theta.copy(),
        noise_fingerprint=noise_fingerprint(seed),
    )


def run_closed_loop(cfg: RunConfig, controller_kind, seed=None) -> RunResult:
    """One full run (warm-up then ``controller_kind``); deterministic in the seed."""
    seed = cfg.seed if seed is None else seed
    kind = ControllerKind(controller_kind)
    loop = warm_up(cfg, seed)
    return _finish(loop, cfg, kind, seed)


def run_seed(cfg: RunConfig, seed, kinds=None) -> dict:
    """All controller kinds on one seed, sharing a single warm-up."""
    kinds = cfg.controllers if kinds is None else tuple(ControllerKind(k) for k in kinds)
    base = warm_up(cfg, seed)
    log.info("seed %d noise fingerprint %s", seed, noise_fingerprint(seed))
    out = {}
    for kind in kinds:
        out[kind.value] = _finish(copy.deepcopy(base), cfg, kind, seed)
    return out


# ---------------------------------------------------------------------------
# metrics


def _rmse(e):
    return float(np.sqrt(np.mean(np.square(e)))) if len(e) else float("nan")


def tracking_error(records):
    return np.array([r.x1 - r.ref for r in records])


def recovery_time(err, t_s, target):
    """Steps after ``t_s`` until the centred 50-step window RMSE reaches ``target``."""
    half = RECOVERY_WINDOW // 2
    for t in range(t_s + 1, len(err) - half + 1):
        if _rmse(err[t - half:t + half]) <= target:
            return float(t - t_s)
    return float("inf")


def summarize(records, cfg: RunConfig) -> RunSummary:
    t_s = cfg.scenario.t_s
    w0 = cfg.warmup_steps
    err = tracking_error(records)
    cfi_vals = np.array([r.CFI for r in records])
    rmse_pre = _rmse(err[w0:t_s])
    return RunSummary(
        rmse_pre=rmse_pre,
        rmse_post_full=_rmse(err[t_s:]),
        rmse_post_steady=_rmse(err[-STEADY_WINDOW:]),
        recovery_time=recovery_time(err, t_s, RECOVERY_FACTOR * rmse_pre),
        violation_count_x=int(sum(r.violation_x for r in records)),
        violation_count_u=int(sum(r.violation_u for r in records)),
        relaxed_count=int(sum(r.relaxed for r in records)),
        max_cfi_burst=float(np.max(cfi_vals[t_s:t_s + BURST_WINDOW + 1])),
        mean_cfi_pre=float(np.mean(cfi_vals[w0:t_s])),
        cumulative_drift=float(sum(r.drift_norm for r in records[w0:])),
    )


def window_rmse(err, width=RECOVERY_WINDOW):
    """RMSE of every full sliding window of ``width`` steps."""
    sq = np.concatenate([[0.0], np.cumsum(np.square(err))])
    return np.sqrt((sq[width:] - sq[:-width]) / width)


def cfi_burst(records, t_s, warmup_steps):
    """``(burst_ratio, decay_ratio)`` of the CFI series around the shift.

    The burst is the maximum over ``[t_s, t_s+50]``, the decay level is the
    median after that window; both are divided by the pre-shift median.
    """
    c = np.array([r.CFI for r in records])
    pre = float(np.median(c[warmup_steps:t_s]))
    burst = float(np.max(c[t_s:t_s + BURST_WINDOW + 1]))
    post = float(np.median(c[t_s + BURST_WINDOW + 1:]))
    def ratio(v):
        if pre > 0.0:
            return v / pre
        return float("inf") if v > 0.0 else 0.0

    return ratio(burst), ratio(post)


# ---------------------------------------------------------------------------
# comparison


def run_comparison(cfg: RunConfig, seeds=None):
    """Every configured controller over ``seeds_for_aggregate`` shared-noise seeds.

    Returns ``(table, results)`` where ``table[kind][field] = (median, q25, q75)``
    and ``results[kind]`` lists the per-seed ``RunResult``.
    """
    if len(cfg.controllers) < 2:
        raise ConfigError("a comparison needs at least two controller kinds")
    seeds = list(range(cfg.seed, cfg.seed + cfg.seeds_for_aggregate)) if seeds is None else list(seeds)
    results = {k.value: [] for k in cfg.controllers}
    for s in seeds:
        for kind, res in run_seed(cfg, s).items():
            results[kind].append(res)
    return aggregate(results), results


def aggregate(results):
    table = {}
    for kind, runs in results.items():
        rows = {}
        for f in fields(RunSummary):
            vals = np.array([getattr(r.summary, f.name) for r in runs], dtype=float)
            # interpolating towards an infinite recovery time gives inf - inf
            with np.errstate(invalid="ignore"):
                q = np.percentile(vals, [25, 50, 75])
            if not np.isnan(vals).any():
                q[np.isnan(q)] = np.inf
            q25, med, q75 = q
            rows[f.name] = (float(med), float(q25), float(q75))
        table[kind] = rows
    return table


def format_table(table):
    names = [f.name for f in fields(RunSummary)]
    lines = ["controller," + ",".join(f"{n}_median,{n}_q25,{n}_q75" for n in names)]
    for kind, rows in table.items():
        vals = []
        for n in names:
            vals += [_fmt(v) for v in rows[n]]
        lines.append(kind + "," + ",".join(vals))
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# output


def _fmt(v):
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def atomic_write(path, text):
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def trace_csv(records) -> str:
    lines = [",".join(TRACE_COLUMNS)]
    for r in records:
        lines.append(",".join(_fmt(getattr(r, c)) for c in TRACE_COLUMNS))
    return "\n".join(lines) + "\n"


def summary_text(summary: RunSummary) -> str:
    return "".join(f"{k} = {_fmt(v)}\n" for k, v in asdict(summary).items())


def read_trace(path):
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != TRACE_COLUMNS:
            raise ConfigError(f"{path}: unexpected trace header")
        return [TraceRecord(**{k: (int(v) if k in _INT_COLUMNS else float(v)) for k, v in row.items()})
                for row in reader]


def read_summary(path) -> RunSummary:
    vals = {}
    with open(path) as fh:
        for line in fh:
            if line.strip():
                k, v = (s.strip() for s in line.split("=", 1))
                vals[k] = v
    kinds = {f.name: f.type for f in fields(RunSummary)}
    return RunSummary(**{k: (int(v) if kinds[k] in (int, "int") else float(v)) for k, v in vals.items()})


def run_paths(out_dir, result: RunResult):
    stem = f"{result.scenario}_{result.controller}_seed{result.seed}"
    return os.path.join(out_dir, stem + ".csv"), os.path.join(out_dir, stem + "_summary.txt")


def write_run(out_dir, result: RunResult):
    trace_path, summary_path = run_paths(out_dir, result)
    atomic_write(trace_path, trace_csv(result.records))
    atomic_write(summary_path, summary_text(result.summary))
    return trace_path, summary_path


# ---------------------------------------------------------------------------
# validators


@dataclass
class ValidationReport:
    name: str
    passed: bool
    value: float
    bound: float
    detail: str = ""

    def line(self):
        status = "PASS" if self.passed else "FAIL"
        return f"{status} {self.name}: value={self.value:.6g} bound={self.bound:.6g} {self.detail}".rstrip()


def binomial_halfwidth(p, n, z=BINOMIAL_Z99):
    return z * np.sqrt(p * (1.0 - p) / n)


def validate_lemma_tightening(trials=10_000, seed=0, delta=0.05, noise_scale=1.0) -> ValidationReport:
    """One-step violation frequency of a constraint tightened to equality.

    Each trial draws a fresh linear-Gaussian instance (dynamics, belief,
    process noise, constraint normal), places the constraint so that the
    tightened version is active at the predicted mean, then draws the true
    next state once.
    """
    rng = Streams(seed)["montecarlo"]
    n = trials
    A = rng.normal(0.0, 0.6, (n, 2, 2))
    B = rng.normal(0.0, 1.0, (n, 2))
    u = rng.uniform(-2.0, 2.0, n)
    m = rng.normal(0.0, 1.0, (n, 2))
    Lp = np.tril(rng.normal(0.0, 0.3, (n, 2, 2))) * noise_scale
    Lw = np.tril(rng.normal(0.0, 0.1, (n, 2, 2))) * noise_scale
    P = Lp @ Lp.transpose(0, 2, 1)
    Sw = Lw @ Lw.transpose(0, 2, 1)
    a = rng.normal(0.0, 1.0, (n, 2))
    mean_next = np.einsum("kij,kj->ki", A, m) + B * u[:, None]
    cov_next = A @ P @ A.transpose(0, 2, 1) + Sw
    sigma = max_eig_sqrt_many(cov_next) if noise_scale > 0 else np.zeros(n)
    z = ConstraintSet(a=np.array([[1.0, 0.0]]), b=[0.0], violation_level=delta).quantiles()[0]
    beta = z * np.linalg.norm(a, axis=1) * sigma
    b = np.einsum("ki,ki->k", a, mean_next) + beta
    z0 = m + np.einsum("kij,kj->ki", Lp, rng.standard_normal((n, 2)))
    w = np.einsum("kij,kj->ki", Lw, rng.standard_normal((n, 2)))
    x_next = np.einsum("kij,kj->ki", A, z0) + B * u[:, None] + w
    rate = float(np.mean(np.einsum("ki,ki->k", a, x_next) > b))
    bound = delta + binomial_halfwidth(delta, n)
    return ValidationReport(f"tightening lemma (delta={delta})", rate <= bound, rate, bound, f"trials={n}")


def validate_drift_bound(traces, clip_norm) -> ValidationReport:
    """Largest ``drift_norm / (alpha * clip_norm)`` over every adaptation step."""
    if not np.isfinite(clip_norm):
        return ValidationReport("drift bound", True, float("nan"), float("inf"),
                                "not applicable: clip bound is infinite")
    ratio = 0.0
    steps = 0
    for records in traces:
        for r in records:
            if r.alpha > 0.0:
                ratio = max(ratio, r.drift_norm / (r.alpha * clip_norm))
                steps += 1
    bound = 1.0 + 1e-9
    return ValidationReport("drift bound", ratio <= bound, ratio, bound, f"steps={steps}")


def validate_runs(results, cfg: RunConfig):
    """Feasibility, safety and CFI checks over a collection of runs."""
    reports = []
    relaxed = sum(r.summary.relaxed_count for r in results)
    reports.append(ValidationReport("recursive feasibility (relaxations)", relaxed == 0, relaxed, 0))
    viol = sum(r.summary.violation_count_x + r.summary.violation_count_u for r in results)
    reports.append(ValidationReport("safety (constraint violations)", viol == 0, viol, 0))
    max_cfi = max(max(rec.CFI for rec in r.records) for r in results)
    reports.append(ValidationReport("CFI bound", max_cfi <= 1.0 + 1e-12, max_cfi, 1.0))
    reports.append(validate_drift_bound([r.records for r in results], cfg.adapt.clip_norm))
    return reports


def default_scenarios():
    return [ScenarioKind.ABRUPT, ScenarioKind.OBS_DRIFT, ScenarioKind.GRADUAL]
