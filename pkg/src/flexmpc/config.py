"""Flat ``key = value`` run configuration.

One assignment per line, ``#`` starts a comment, dotted prefixes select a
section (``mpc.horizon = 10``). Unknown keys and malformed values raise
``ConfigError``. ``dump_config`` writes the inverse, so a dumped default
configuration can be edited and read back.
"""
from dataclasses import replace

import numpy as np

from .errors import ConfigError
from .harness import RunConfig
from .mpc import ConstraintSet, ControllerKind


def _float(s):
    try:
        return float(s)
    except ValueError:
        raise ConfigError(f"not a number: {s!r}") from None


def _int(s):
    v = _float(s)
    if v != int(v):
        raise ConfigError(f"not an integer: {s!r}")
    return int(v)


def _bool(s):
    low = s.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"not a boolean: {s!r}")


def _optional_float(s):
    return None if s.lower() == "none" else _float(s)


def _floats(s):
    return np.array([_float(p) for p in s.replace(",", " ").split()])


def _names(s):
    parts = tuple(p.strip() for p in s.split(",") if p.strip())
    if not parts:
        raise ConfigError("empty list")
    return parts


def _square(s):
    v = _floats(s)
    if v.size == 2:
        return np.diag(v)
    if v.size == 4:
        return v.reshape(2, 2)
    raise ConfigError(f"expected 2 (diagonal) or 4 numbers, got {v.size}")


def _fmt_value(v):
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(getattr(p, "value", p)) for p in v)
    if isinstance(v, np.ndarray):
        return " ".join(repr(float(x)) for x in v.ravel())
    if isinstance(v, float):
        return repr(v)
    return str(getattr(v, "value", v))


# section -> key -> parser
_RUN_KEYS = {
    "controllers": _names,
    "steps": _int,
    "seed": _int,
    "seeds_for_aggregate": _int,
    "warmup_steps": _int,
    "out_dir": str,
    "model_kind": str,
    "noise": _bool,
    "ref_amplitude": _float,
    "init_cov": _float,
    "init_A": _float,
    "init_sw": _float,
    "init_sv": _float,
    "warmup_blocks": _names,
    "warmup_average": _int,
}
_SCENARIO_KEYS = {
    "kind": str,
    "t_s": _int,
    "tau_c": _float,
    "tau_a": _float,
    "delta_c": _square,
    "rho": _float,
    "sigma_w": _float,
    "sigma_v": _float,
}
_ADAPT_KEYS = {
    "eta_max": _float,
    "clip_norm": _float,
    "epsilon": _optional_float,
    "decay_exponent": _float,
    "decay_scale": _float,
    "decay": _bool,
    "grad_gain": _float,
    "blocks": _names,
    "enabled": _bool,
}
_MPC_KEYS = {
    "horizon": _int,
    "Q": _square,
    "R": _float,
    "terminal_weight_mode": str,
    "terminal_scale": _float,
    "beta_fixed": _float,
    "tol_abs": _float,
    "tol_rel": _float,
    "max_iter": _int,
    "riccati_refresh": _float,
}
_CONSTRAINT_KEYS = {
    "x_bound": _float,
    "u_min": _float,
    "u_max": _float,
    "sensitivity": _float,
    "violation_level": _float,
}
SECTIONS = {
    "": _RUN_KEYS,
    "scenario": _SCENARIO_KEYS,
    "adapt": _ADAPT_KEYS,
    "mpc": _MPC_KEYS,
    "constraints": _CONSTRAINT_KEYS,
}


def parse_assignments(text, source="<config>"):
    """``{section: {key: parsed value}}`` from config text."""
    out = {name: {} for name in SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        section, _, name = key.rpartition(".")
        table = SECTIONS.get(section)
        if table is None or name not in table:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if not value:
            raise ConfigError(f"{source}:{lineno}: missing value for {key!r}")
        try:
            out[section][name] = table[name](value)
        except ConfigError as exc:
            raise ConfigError(f"{source}:{lineno}: {key}: {exc}") from None
    return out


def _constraints(base: ConstraintSet, values):
    if not values:
        return base
    x_bound = values.get("x_bound", float(base.b[0]))
    return ConstraintSet(
        a=base.a,
        b=np.full(base.count, x_bound),
        u_min=values.get("u_min", base.u_min),
        u_max=values.get("u_max", base.u_max),
        sensitivity=values.get("sensitivity", base.sensitivity),
        violation_level=values.get("violation_level", base.violation_level),
    )


def apply_assignments(base: RunConfig, parsed) -> RunConfig:
    """A new ``RunConfig`` with the parsed values laid over ``base``."""
    try:
        scenario = replace(base.scenario, **parsed["scenario"])
        adapt_values = dict(parsed["adapt"])
        if "epsilon" not in adapt_values and base.adapt.epsilon == base.adapt.default_epsilon():
            # a derived normaliser follows eta_max and clip_norm
            adapt_values["epsilon"] = None
        adapt = replace(base.adapt, **adapt_values)
        mpc = replace(base.mpc, **parsed["mpc"])
        constraints = _constraints(base.constraints, parsed["constraints"])
        return replace(base, scenario=scenario, adapt=adapt, mpc=mpc, constraints=constraints, **parsed[""])
    except ValueError as exc:
        # enum lookups (scenario kind, controller kind)
        raise ConfigError(str(exc)) from None


def load_config(path, base: RunConfig = None) -> RunConfig:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    return apply_assignments(base or RunConfig(), parse_assignments(text, source=str(path)))


def dump_config(cfg: RunConfig) -> str:
    """Config text that ``load_config`` maps back to ``cfg``."""
    lines = []
    for name in _RUN_KEYS:
        lines.append(f"{name} = {_fmt_value(getattr(cfg, name))}")
    for section, obj in (("scenario", cfg.scenario), ("adapt", cfg.adapt), ("mpc", cfg.mpc)):
        lines.append("")
        for name in SECTIONS[section]:
            value = getattr(obj, name)
            if section == "adapt" and name == "epsilon" and value == obj.default_epsilon():
                # keep the normaliser tied to eta_max and clip_norm
                value = None
            lines.append(f"{section}.{name} = {_fmt_value(value)}")
    c = cfg.constraints
    if not np.all(c.b == c.b[0]) or np.ptp(c.sensitivity) or np.ptp(c.violation_level):
        raise ConfigError("only symmetric box constraints with uniform levels can be written")
    lines.append("")
    lines.append(f"constraints.x_bound = {_fmt_value(float(c.b[0]))}")
    lines.append(f"constraints.u_min = {_fmt_value(float(c.u_min))}")
    lines.append(f"constraints.u_max = {_fmt_value(float(c.u_max))}")
    lines.append(f"constraints.sensitivity = {_fmt_value(float(c.sensitivity[0]))}")
    lines.append(f"constraints.violation_level = {_fmt_value(float(c.violation_level[0]))}")
    return "\n".join(lines) + "\n"


def stress_config(base: RunConfig = None) -> RunConfig:
    """The abrupt-shift scenario with the process noise raised to 0.05."""
    base = base or RunConfig()
    return replace(base, scenario=replace(base.scenario, kind="abrupt", sigma_w=0.05))


def controller_kinds(names):
    try:
        return tuple(ControllerKind(n) for n in names)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
