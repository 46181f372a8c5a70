"""Command-line entry point.

Exit codes: 0 success, 1 a validation or oracle check failed, 2 bad
configuration or usage.
"""
import argparse
import logging
import os
import sys
from dataclasses import replace

from . import harness
from .config import controller_kinds, dump_config, load_config
from .errors import ConfigError, FlexMpcError
from .harness import RunConfig, ValidationReport
from .plant import ScenarioKind

EXIT_OK = 0
EXIT_FAIL = 1
EXIT_CONFIG = 2

GRAD_TOL = 1e-5
FILTER_SIGMAS = 3.0
CONJUGATE_TOL = 1e-10

log = logging.getLogger("flexmpc")


def _common(parser, controller=True):
    parser.add_argument("--config", metavar="PATH", help="key = value configuration file")
    parser.add_argument("--scenario", choices=[k.value for k in ScenarioKind])
    if controller:
        parser.add_argument("--controller", help="controller kind (comma list for compare)")
    parser.add_argument("--seed", type=int)
    parser.add_argument("--steps", type=int)
    parser.add_argument("--out", metavar="DIR", help="output directory")
    parser.add_argument("--model", choices=["linear", "mlp"])
    parser.add_argument("--no-noise", action="store_true", help="switch off process and measurement noise")


def build_parser():
    p = argparse.ArgumentParser(prog="flexmpc", description="Adaptive belief-space MPC scenario runner.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="one closed-loop run; writes trace CSV and summary")
    _common(run)

    cmp_ = sub.add_parser("compare", help="controllers on shared noise over several seeds")
    _common(cmp_)
    cmp_.add_argument("--seeds", type=int, help="number of seeds (default: seeds_for_aggregate)")

    val = sub.add_parser("validate", help="Monte-Carlo and closed-loop validators")
    _common(val, controller=False)
    val.add_argument("--seeds", type=int, help="closed-loop seeds per scenario (default: seeds_for_aggregate)")
    val.add_argument("--trials", type=int, default=10_000, help="Monte-Carlo trials per tightening level")

    gc = sub.add_parser("grad-check", help="analytic likelihood gradients against finite differences")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--configs", type=int, default=100, help="random configurations per model variant")
    gc.add_argument("--model", choices=["linear", "mlp", "both"], default="both")

    of = sub.add_parser("oracle-filter", help="Kalman filter against a particle filter and the conjugate update")
    of.add_argument("--seed", type=int, default=0)
    of.add_argument("--steps", type=int, default=50)
    of.add_argument("--particles", type=int, default=100_000)

    dc = sub.add_parser("dump-config", help="print the effective configuration")
    dc.add_argument("--config", metavar="PATH")
    return p


def _config_from(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    scenario = cfg.scenario
    if getattr(args, "scenario", None):
        scenario = replace(scenario, kind=args.scenario)
    changes = {"scenario": scenario}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "steps", None) is not None:
        changes["steps"] = args.steps
    if getattr(args, "out", None):
        changes["out_dir"] = args.out
    if getattr(args, "model", None):
        changes["model_kind"] = args.model
    if getattr(args, "no_noise", False):
        changes["noise"] = False
    if getattr(args, "seeds", None) is not None:
        if args.seeds < 1:
            raise ConfigError("--seeds must be >= 1")
        changes["seeds_for_aggregate"] = args.seeds
    if getattr(args, "controller", None):
        changes["controllers"] = controller_kinds(args.controller.split(","))
    return replace(cfg, **changes)


def _print_reports(reports):
    for r in reports:
        print(r.line())
    return EXIT_OK if all(r.passed for r in reports) else EXIT_FAIL


# ---------------------------------------------------------------------------
# subcommands


def cmd_run(args):
    cfg = _config_from(args)
    if len(cfg.controllers) != 1:
        raise ConfigError("run takes exactly one controller")
    result = harness.run_closed_loop(cfg, cfg.controllers[0], cfg.seed)
    trace_path, summary_path = harness.write_run(cfg.out_dir, result)
    print(f"trace: {trace_path}")
    print(f"summary: {summary_path}")
    sys.stdout.write(harness.summary_text(result.summary))
    return EXIT_OK


def cmd_compare(args):
    cfg = _config_from(args)
    if len(cfg.controllers) < 2:
        cfg = replace(cfg, controllers=("cf", "nominal", "robust"))
    table, results = harness.run_comparison(cfg)
    for runs in results.values():
        for res in runs:
            harness.write_run(cfg.out_dir, res)
    stem = os.path.join(cfg.out_dir, f"{cfg.scenario.kind.value}_comparison")
    harness.atomic_write(stem + ".csv", harness.format_table(table))
    lines = []
    for kind, runs in results.items():
        for res in runs:
            for name, draws in res.noise_fingerprint.items():
                lines.append(f"{kind} seed{res.seed} {name} " + " ".join(repr(v) for v in draws))
    harness.atomic_write(stem + "_noise.txt", "\n".join(lines) + "\n")
    print(f"table: {stem}.csv")
    width = max(len(k) for k in table)
    print(f"{'controller':<{width}}  rmse_pre  rmse_post_steady  recovery_time  violations  relaxed")
    for kind, rows in table.items():
        print(f"{kind:<{width}}  {rows['rmse_pre'][0]:8.4f}  {rows['rmse_post_steady'][0]:16.4f}  "
              f"{rows['recovery_time'][0]:13.1f}  {rows['violation_count_x'][0]:10.1f}  "
              f"{rows['relaxed_count'][0]:7.1f}")
    return EXIT_OK


def cmd_validate(args):
    cfg = _config_from(args)
    reports = []
    for delta in (0.05, 0.5):
        reports.append(harness.validate_lemma_tightening(args.trials, cfg.seed, delta))
    zero = harness.validate_lemma_tightening(1000, cfg.seed, 0.05, noise_scale=0.0)
    reports.append(ValidationReport("tightening lemma (no noise)", zero.value == 0.0, zero.value, 0.0))
    results = []
    seeds = range(cfg.seed, cfg.seed + cfg.seeds_for_aggregate)
    for kind in harness.default_scenarios():
        scen_cfg = replace(cfg, scenario=replace(cfg.scenario, kind=kind), controllers=("cf",))
        for s in seeds:
            results.append(harness.run_closed_loop(scen_cfg, "cf", s))
    reports += harness.validate_runs(results, cfg)
    return _print_reports(reports)


def cmd_grad_check(args):
    from .oracles import gradient_check

    kinds = ["linear", "mlp"] if args.model == "both" else [args.model]
    reports = []
    for kind in kinds:
        err = gradient_check(kind, args.configs, args.seed)
        reports.append(ValidationReport(f"gradient check ({kind})", err <= GRAD_TOL, err, GRAD_TOL,
                                        f"configs={args.configs}"))
    return _print_reports(reports)


def cmd_oracle_filter(args):
    from .oracles import filter_agreement

    ratio, conj = filter_agreement(args.seed, args.steps, args.particles)
    return _print_reports([
        ValidationReport("particle filter agreement (stderr multiples)", ratio <= FILTER_SIGMAS, ratio,
                         FILTER_SIGMAS, f"particles={args.particles} steps={args.steps}"),
        ValidationReport("conjugate posterior agreement", conj <= CONJUGATE_TOL, conj, CONJUGATE_TOL),
    ])


def cmd_dump_config(args):
    cfg = load_config(args.config) if args.config else RunConfig()
    sys.stdout.write(dump_config(cfg))
    return EXIT_OK


COMMANDS = {
    "run": cmd_run,
    "compare": cmd_compare,
    "validate": cmd_validate,
    "grad-check": cmd_grad_check,
    "oracle-filter": cmd_oracle_filter,
    "dump-config": cmd_dump_config,
}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"flexmpc: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FlexMpcError as exc:
        print(f"flexmpc: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAIL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
