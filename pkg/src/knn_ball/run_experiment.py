import os
import re
import sys
import json
import logging
import argparse

from dataclasses import asdict, replace
from typing import List, Optional

from dotenv import dotenv_values

from config import LOG_LEVEL, OUTPUT_DIR
from src.errors import ConfigError, KnnBallError
from src.knn_ball import analytic
from src.knn_ball.blocking import blocked_config, build_eta
from src.knn_ball.experiments import ExperimentConfig, acceptance_battery, grid_oracle_agreement, ladder_points, \
    run, sample_input
from src.knn_ball.nnball_process import build_L, geometric_graph
from src.knn_ball.reporting import to_jsonable, write_graph, write_point_set, write_report
from src.knn_ball.sampling import RngStream, sample_limit_process
from src.knn_ball.stats_utils import EstimateReport
from src.utils import float_format

logger = logging.getLogger(__name__)

# replications per ladder point when --quick is given to a single estimator
quick_reps = 2000

# cases of the grid / full-scan comparison run by the suite
suite_oracle_cases = 1000


class LabArgumentParser(argparse.ArgumentParser):
    """argparse that raises ConfigError instead of exiting, so main() owns the exit code."""

    def error(self, message):
        raise ConfigError(message)


def _integer(text: str) -> int:
    """Integers, also written as 1e5."""
    try:
        value = float(text)
    except ValueError:
        raise ValueError(f"expected an integer, got {text!r}")
    if not value.is_integer():
        raise ValueError(f"expected an integer, got {text!r}")
    return int(value)


def _float_tuple(text: str) -> tuple:
    try:
        return tuple(float(token) for token in re.split(r"[,\s]+", text.strip()) if token)
    except ValueError:
        raise ValueError(f"expected a list of numbers, got {text!r}")


def _flag(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"expected a boolean, got {text!r}")


# config file key -> (ExperimentConfig field, parser)
config_keys = {
    "DIM": ("d", _integer),
    "K": ("k", _integer),
    "S0": ("s0", float),
    "N_LADDER": ("n_ladder", _float_tuple),
    "A_RULE": ("a_rule", str),
    "A_PARAM": ("a_param", _float_tuple),
    "REPS": ("reps", _integer),
    "SEED": ("seed", _integer),
    "EPS": ("eps", _float_tuple),
    "EPS_RATIO": ("eps_ratio", _flag),
    "W_RULE": ("w_rule", str),
    "TARGET_PER_CELL": ("target_per_cell", float),
    "INPUT": ("input", str),
    "THREADS": ("threads", _integer),
}


def read_config_file(path: str) -> dict:
    """
    Reads a flat KEY=value experiment file into ExperimentConfig field values.

    Args:
        path: the config file

    Returns:
        a dict of ExperimentConfig field -> typed value

    """
    if not os.path.isfile(path) or not os.access(path, os.R_OK):
        raise ConfigError(f"cannot read config file {path}")

    values = {}
    for key, raw in dotenv_values(path).items():
        if key.upper() not in config_keys:
            raise ConfigError(f"unknown config key {key!r} in {path}, expected one of {sorted(config_keys)}")
        if raw is None or not raw.strip():
            raise ConfigError(f"config key {key!r} in {path} has no value")
        field_name, parse = config_keys[key.upper()]
        try:
            values[field_name] = parse(raw)
        except ValueError:
            raise ConfigError(f"cannot read {key}={raw!r} in {path}")
    return values


def _common_arguments() -> LabArgumentParser:
    common = LabArgumentParser(add_help=False)
    common.add_argument('--config', type=str, help='Flat KEY=value experiment file; inline flags override it')
    common.add_argument('--dim', type=_integer, help='Torus dimension d')
    common.add_argument('--k', type=_integer, help='Neighbor order k')
    common.add_argument('--s0', type=float, help='Mark threshold s0')
    common.add_argument('--n-ladder', type=float, nargs='+', help='Increasing intensities or point counts')
    common.add_argument('--n', type=float, help='A single ladder point')
    common.add_argument('--a-rule', type=str, help='a_n rule: fraction_log, boundary, power_log or explicit')
    common.add_argument('--a-param', type=float, nargs='+', help='Constant of the a_n rule, or the explicit a_n values')
    common.add_argument('--a', type=float, nargs='+', help='Explicit a_n values, one per ladder point')
    common.add_argument('--reps', type=_integer, help='Replications per ladder point')
    common.add_argument('--seed', type=_integer, help='Master seed')
    common.add_argument('--eps', type=float, nargs='+', help='Coupling slacks')
    common.add_argument('--eps-ratio', action='store_const', const=True, default=None,
                        help='Read --eps as ratios eps / a_n')
    common.add_argument('--w-rule', type=str, help="Boundary width rule: 'sqrt' or 'power:<p>'")
    common.add_argument('--target-per-cell', type=float, help='Mean points per grid cell')
    common.add_argument('--input', type=str, choices=('poisson', 'binomial'), help='Input process')
    common.add_argument('--threads', type=_integer, help='Worker processes')
    common.add_argument('--out', type=str, help='Output folder')
    common.add_argument('--check', action='store_true', help='Exit with 2 when an acceptance check fails')
    common.add_argument('--quick', action='store_true', help='Desk-scale replication counts')
    common.add_argument('-v', '--verbose', action='count', default=0, help='-v for INFO, -vv for DEBUG')
    return common


def build_parser() -> LabArgumentParser:
    common = _common_arguments()
    parser = LabArgumentParser(prog='knnball-lab',
                               description='Simulation and verification lab for k-NN ball-volume marked point processes')
    commands = parser.add_subparsers(dest='command', required=True, metavar='command')

    sample = commands.add_parser('sample', parents=[common], help='Write one sampled configuration as CSV')
    sample.add_argument('--kind', type=str, default='L', choices=('points', 'L', 'eta', 'limit', 'graph'),
                        help='Raw points, the marked process L, the blocked process eta, the limit process or the geometric graph at r_n(s0)')

    commands.add_parser('mean-t', parents=[common], help='Mean of T_{k,n} against the Mecke value')
    commands.add_parser('pmf-tv', parents=[common], help='Law of T_{k,n} against Poisson(b_n alpha_k)')
    commands.add_parser('rare-event', parents=[common], help='b_n^{-1} P(T >= 1) against alpha_k')

    rate_curve = commands.add_parser('rate-curve', parents=[common], help='Empirical large-deviation rates')
    rate_curve.add_argument('--x', type=float, nargs='+', help='Rate curve points')

    intensity = commands.add_parser('intensity', parents=[common], help='Intensity measure of L on a box')
    intensity.add_argument('--b-side', type=float, default=0.5, help='Side of the box [0, b)^d')
    intensity.add_argument('--u', type=float, nargs='+', help='Mark thresholds')

    commands.add_parser('blocking', parents=[common], help='Distances between L and its blocked versions')

    m0 = commands.add_parser('m0', parents=[common], help='Plateau functional against its M0 limit')
    m0.add_argument('--plateau-width', type=float, default=1.0, help='Mark width of the plateau')
    m0.add_argument('--plateau-height', type=float, default=1.0, help='Height of the plateau')
    m0.add_argument('--eps-pair', type=float, nargs=2, default=(0.0, 0.0), help='Offsets eps1 eps2')

    commands.add_parser('coupling', parents=[common], help='Failure rate of the Poisson/binomial sandwich')

    rate_function = commands.add_parser('rate-function', parents=[common], help='Evaluate I_k(x)')
    rate_function.add_argument('--x', type=float, required=True, help='Point of evaluation')

    commands.add_parser('regime', parents=[common], help='Classify the a_n schedule of a ladder')
    commands.add_parser('suite', parents=[common], help='Run the acceptance battery')
    return parser


# subcommand -> estimator id
estimator_commands = {
    'mean-t': 'mean_t',
    'pmf-tv': 'pmf_tv',
    'rare-event': 'rare_event',
    'rate-curve': 'rate_curve',
    'intensity': 'intensity',
    'blocking': 'blocking',
    'm0': 'm0',
    'coupling': 'coupling',
}


def _flag_overrides(args) -> dict:
    if args.n is not None and args.n_ladder is not None:
        raise ConfigError("give either --n or --n-ladder, not both")
    if args.a is not None and (args.a_rule is not None or args.a_param is not None):
        raise ConfigError("--a sets an explicit schedule; drop --a-rule / --a-param")

    overrides = {
        'd': args.dim,
        'k': args.k,
        's0': args.s0,
        'n_ladder': tuple(args.n_ladder) if args.n_ladder is not None else None,
        'a_rule': args.a_rule,
        'a_param': tuple(args.a_param) if args.a_param is not None else None,
        'reps': args.reps,
        'seed': args.seed,
        'eps': tuple(args.eps) if args.eps is not None else None,
        'eps_ratio': args.eps_ratio,
        'w_rule': args.w_rule,
        'target_per_cell': args.target_per_cell,
        'input': args.input,
        'threads': args.threads,
    }
    if args.n is not None:
        overrides['n_ladder'] = (args.n,)
    if args.a is not None:
        overrides['a_rule'], overrides['a_param'] = 'explicit', tuple(args.a)
    return {name: value for name, value in overrides.items() if value is not None}


def build_config(args) -> ExperimentConfig:
    """ExperimentConfig defaults, overridden by the config file, overridden by inline flags."""
    values = read_config_file(args.config) if args.config else {}
    values.update(_flag_overrides(args))
    config = replace(ExperimentConfig(), **values)
    if args.quick:
        config = replace(config, reps=min(config.reps, quick_reps))
    return config.validate()


def _estimator_options(args) -> dict:
    if args.command == 'rate-curve':
        return {'x_grid': tuple(args.x) if args.x else None}
    if args.command == 'intensity':
        return {'b_side': args.b_side, 'u_list': tuple(args.u) if args.u else None}
    if args.command == 'm0':
        return {'plateau_width': args.plateau_width, 'plateau_height': args.plateau_height,
                'eps_pair': tuple(args.eps_pair)}
    return {}


def print_report(report: EstimateReport):
    for record in report.records:
        verdict = {True: 'PASS', False: 'FAIL', None: ''}[record.passed]
        print(f"  [{record.ladder_index}] n={record.n:g} {record.statistic}: {record.estimate:.6g} "
              f"+/- {record.stderr:.2g} (reference {record.reference:.6g}) {verdict}".rstrip())
    for statistic, trend in report.trends.items():
        print(f"  trend {statistic}: rho={trend['rho']:.3g} p={trend['pvalue']:.3g} passed={trend['passed']}")
    for message in report.warnings:
        print(f"  warning: {message}")
    print(f"{report.estimator}: {'passed' if report.passed else 'FAILED'} in {report.get_total_time_sec()}s")


def run_estimator_command(args) -> int:
    config = build_config(args)
    estimator = estimator_commands[args.command]
    report = run(config, estimator, **_estimator_options(args))
    out_dir = args.out or config.get_file_name(estimator)
    path = write_report(report, out_dir)
    print_report(report)
    print(f"Report written to {path}")
    return 2 if args.check and not report.passed else 0


def run_sample(args) -> int:
    config = build_config(args)
    point = ladder_points(config)[0]
    stream = RngStream(config.seed, 0)
    out_dir = args.out or os.path.join(OUTPUT_DIR, f"sample-{args.kind}-{config.d}d-k{config.k}-n{point.n:g}-seed{config.seed}")
    path = os.path.join(out_dir, f"{args.kind}.csv")

    if args.kind == 'graph':
        ps = sample_input(config, point.n, stream)
        radius = analytic.radius_r_n(config.s0, point.n, point.a_n, config.d)
        graph = geometric_graph(ps, radius, config.target_per_cell)
        write_graph(graph, path)
        low = sum(1 for _, degree in graph.degree() if degree <= config.k - 1)
        print(f"Wrote {graph.number_of_edges()} edges over {len(ps)} points to {path}")
        print(f"T = {low} vertices of degree <= {config.k - 1} at r = {float_format % radius}")
        return 0

    if args.kind == 'limit':
        sampled = sample_limit_process(point.b_n, config.k, config.s0, stream, config.d)
    else:
        ps = sample_input(config, point.n, stream)
        if args.kind == 'points':
            sampled = ps
        elif args.kind == 'L':
            sampled = build_L(point.params, ps, config.target_per_cell)
        else:
            sampled = build_eta(point.params, ps, blocked_config(point.params, point.b_n, config.w_rule),
                                config.target_per_cell)

    write_point_set(sampled, path)
    print(f"Wrote {len(sampled)} atoms to {path}")
    return 0


def run_rate_function(args) -> int:
    k = args.k if args.k is not None else 1
    s0 = args.s0 if args.s0 is not None else 0.0
    print(float_format % analytic.rate_I_k(args.x, k, s0))
    return 0


def run_regime(args) -> int:
    config = build_config(args)
    report = analytic.regime_diagnostic(config.n_ladder, config.a_schedule(), config.k)
    for n, a_n, diagnostic in zip(report.n_ladder, report.a_values, report.diagnostics):
        print(f"  n={n:g} a_n={a_n:.6g} a_n - log n - (k-1) log log n = {diagnostic:.6g}")
    print(f"slope per decade {report.slope:.6g}: {report.regime}")

    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "regime.json"), "w") as f:
            json.dump(to_jsonable(asdict(report)), f, sort_keys=True, indent=2)
            f.write("\n")
    return 0


def run_suite(args) -> int:
    base = build_config(args)
    out_dir = args.out or os.path.join(OUTPUT_DIR, f"suite{'-quick' if args.quick else ''}-seed{base.seed}")
    failures: List[str] = []

    cases, mismatches = grid_oracle_agreement(base.seed, suite_oracle_cases)
    print(f"grid_oracle: {cases - mismatches}/{cases} cases agree with the full scan")
    if mismatches:
        failures.append("grid_oracle")

    for name, estimator, config, options in acceptance_battery(args.quick, base.seed, base.threads):
        report = run(config, estimator, **options)
        write_report(report, os.path.join(out_dir, name))
        print_report(report)
        if not report.passed:
            failures.append(name)

    print(f"Suite written to {out_dir}; failed: {', '.join(failures) if failures else 'none'}")
    return 2 if args.check and failures else 0


commands_table = {
    'sample': run_sample,
    'rate-function': run_rate_function,
    'regime': run_regime,
    'suite': run_suite,
}


def _configure_logging(verbose: int):
    if verbose >= 2:
        level = logging.DEBUG
    elif verbose == 1:
        level = logging.INFO
    else:
        level = getattr(logging, LOG_LEVEL.upper(), logging.WARNING)
    logging.basicConfig(level=level, format='%(asctime)s %(name)s %(levelname)s: %(message)s')


def main(argv: Optional[List[str]] = None) -> int:
    """Parses argv, runs one subcommand and returns the process exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except ConfigError as e:
        print(parser.format_usage(), end='', file=sys.stderr)
        print(f"knnball-lab: error: {e}", file=sys.stderr)
        return 1

    _configure_logging(args.verbose)
    handler = commands_table.get(args.command, run_estimator_command)
    try:
        return handler(args)
    except (KnnBallError, OSError) as e:
        logger.debug("command %s failed", args.command, exc_info=True)
        print(f"knnball-lab {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
