import os
import math
import logging
import multiprocessing

import numpy as np

from dataclasses import asdict, dataclass, replace
from functools import partial
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from tqdm import tqdm

from config import DEFAULT_SEED, DEFAULT_THREADS, OUTPUT_DIR
from NeighborSearch.grid_index import build_index, knn_distance, knn_distance_bruteforce
from NeighborSearch.torus_geometry import PointSet, canonicalize
from src.errors import ConfigError, DegenerateInteriorError, KnnBallError, UnknownEstimatorError
from src.knn_ball import analytic
from src.knn_ball.blocking import blocked_config, boundary_width, build_eta, build_eta_truncated, mean_measure_gap, \
    per_cube_counts
from src.knn_ball.nnball_process import ProcessParams, build_L, count_in_region, count_low_degree, tv_distance_atomic
from src.knn_ball.sampling import RngStream, draw_coupled_binomial, replication_stream, sample_binomial_process, \
    sample_coupled, sample_poisson_process, sandwich_holds
from src.knn_ball.stats_utils import EstimateRecord, EstimateReport, binomial_proportion, bootstrap_tv_stderr, \
    clopper_pearson, confidence_interval, empirical_pmf, get_time, mean_and_stderr, pmf_tv_to_poisson, spearman_trend
from src.utils import a_rules, binomial_estimators, depoissonization_tolerance, estimator_regimes, min_expected_hits, \
    pmf_tv_tolerance, ratio_tolerance, stream_shift

logger = logging.getLogger(__name__)

# replication index reserved for the bootstrap stream of a ladder point
bootstrap_replication = (1 << stream_shift) - 1

# replications handed to a worker at a time
chunk_size = 256


@dataclass(frozen=True)
class ExperimentConfig:
    """Helper class for holding the parameters of one experiment along an n-ladder."""
    d: int = 2
    k: int = 1
    s0: float = 0.0

    # increasing intensities (Poisson input) or point counts (binomial input)
    n_ladder: Tuple[float, ...] = (1000.0,)

    # a_n schedule: a named rule and its constant, or "explicit" with one a_n per ladder point
    a_rule: str = "explicit"
    a_param: Tuple[float, ...] = (5.0,)

    reps: int = 1000
    seed: int = DEFAULT_SEED

    # coupling slacks; read as eps / a_n ratios when eps_ratio is set
    eps: Tuple[float, ...] = (0.5,)
    eps_ratio: bool = False

    # boundary width w_n of the blocking: "sqrt" or "power:<p>"
    w_rule: str = "sqrt"

    target_per_cell: float = 2.0

    # "poisson" or "binomial"
    input: str = "poisson"

    threads: int = DEFAULT_THREADS

    def validate(self) -> "ExperimentConfig":
        if int(self.d) != self.d or self.d < 1:
            raise ConfigError(f"dimension must be a positive integer, got {self.d}")
        if int(self.k) != self.k or self.k < 1:
            raise ConfigError(f"k must be a positive integer, got {self.k}")
        if self.reps < 1:
            raise ConfigError(f"reps must be at least 1, got {self.reps}")
        if self.threads < 1:
            raise ConfigError(f"threads must be at least 1, got {self.threads}")
        if not self.target_per_cell > 0:
            raise ConfigError(f"target points per cell must be positive, got {self.target_per_cell}")
        if not self.n_ladder or any(not n > 0 for n in self.n_ladder):
            raise ConfigError("the n-ladder needs at least one positive value")
        if any(hi <= lo for lo, hi in zip(self.n_ladder[:-1], self.n_ladder[1:])):
            raise ConfigError(f"the n-ladder must be increasing, got {list(self.n_ladder)}")
        if self.input not in ("poisson", "binomial"):
            raise ConfigError(f"input must be 'poisson' or 'binomial', got {self.input!r}")
        if self.input == "binomial" and any(n != int(n) for n in self.n_ladder):
            raise ConfigError("binomial input needs integer point counts")
        if self.a_rule not in a_rules:
            raise ConfigError(f"unknown a rule {self.a_rule!r}, expected one of {sorted(a_rules)}")
        if any(e < 0 for e in self.eps):
            raise ConfigError("coupling slacks must be non-negative")

        self.a_schedule()
        boundary_width(1.0, self.w_rule)
        return self

    def a_schedule(self) -> Tuple[float, ...]:
        """a_n at every ladder point."""
        if self.a_rule == "explicit":
            if len(self.a_param) != len(self.n_ladder):
                raise ConfigError(f"explicit schedule needs {len(self.n_ladder)} a values, got {len(self.a_param)}")
            return tuple(float(a) for a in self.a_param)

        if len(self.a_param) != 1:
            raise ConfigError(f"rule {self.a_rule!r} takes a single constant, got {list(self.a_param)}")
        c = float(self.a_param[0])
        if self.a_rule == "fraction_log":
            if not c > 0:
                raise ConfigError(f"fraction_log needs c > 0, got {c}")
            return tuple(c * math.log(n) for n in self.n_ladder)
        if self.a_rule == "power_log":
            if not c > 1:
                raise ConfigError(f"power_log needs c > 1, got {c}")
            return tuple(c * math.log(n) for n in self.n_ladder)

        if any(n < 3 for n in self.n_ladder):
            raise ConfigError("the boundary rule needs n >= 3")
        return tuple(math.log(n) + (self.k - 1) * math.log(math.log(n)) + c for n in self.n_ladder)

    def declared_regime(self) -> Optional[str]:
        regime = a_rules[self.a_rule]
        if regime is not None or len(self.n_ladder) < 2 or min(self.n_ladder) < 3:
            return regime
        return analytic.regime_diagnostic(self.n_ladder, self.a_schedule(), self.k).regime

    def to_dict(self) -> dict:
        return asdict(self)

    def get_file_name(self, estimator: str) -> str:
        """Generates the folder name for storing the reports, based on the params."""
        ladder = "_".join(f"{n:g}" for n in self.n_ladder)
        return os.path.join(OUTPUT_DIR, f"{estimator}-{self.d}d-k{self.k}-{self.a_rule}-n{ladder}-{self.reps}reps-seed{self.seed}")


@dataclass(frozen=True)
class LadderPoint:
    index: int
    n: float
    a_n: float
    b_n: float
    params: ProcessParams


def ladder_points(config: ExperimentConfig) -> List[LadderPoint]:
    points = []
    for index, (n, a_n) in enumerate(zip(config.n_ladder, config.a_schedule())):
        b_n = analytic.scaling_b_n(n, a_n, config.k)
        points.append(LadderPoint(index, n, a_n, b_n, ProcessParams(n, a_n, config.k, config.s0, config.d)))
    return points


def check_estimator(config: ExperimentConfig, estimator: str) -> List[str]:
    """
    Validates the config for one estimator and returns the warnings it raised.
    """
    if estimator not in estimator_regimes:
        raise UnknownEstimatorError(f"unknown estimator {estimator!r}, expected one of {sorted(estimator_regimes)}")
    config.validate()
    warnings = []

    required = estimator_regimes[estimator]
    if required is not None:
        declared = config.declared_regime()
        if declared is None:
            warnings.append(f"cannot classify the a_n schedule; {estimator} assumes the {required} regime")
        elif declared != required:
            raise ConfigError(f"{estimator} needs a {required} schedule, the configured one is {declared}")

    if config.input == "binomial":
        if estimator not in binomial_estimators:
            raise ConfigError(f"{estimator} has no binomial-input variant")
        for n, a_n in zip(config.n_ladder, config.a_schedule()):
            if a_n > n ** (1.0 / 3.0):
                raise ConfigError(f"binomial input needs a_n <= n^(1/3); a_n={a_n:.6g} at n={n:g}")

    for message in warnings:
        logger.warning(message)
    return warnings


def sample_input(config: ExperimentConfig, n: float, rng: RngStream) -> PointSet:
    if config.input == "binomial":
        return sample_binomial_process(int(n), config.d, rng)
    return sample_poisson_process(n, config.d, rng)


def _run_chunk(task: Callable[[RngStream], object], seed: int, ladder_index: int, start: int, stop: int) -> list:
    return [task(replication_stream(seed, ladder_index, replication)) for replication in range(start, stop)]


def _run_chunk_star(args):
    return _run_chunk(*args)


def replicate(config: ExperimentConfig, ladder_index: int, task: Callable[[RngStream], object],
              desc: str = "") -> list:
    """
    Runs task once per replication on its own stream (seed, ladder_index << 32 | replication).
    The results come back ordered by replication index whatever the number of workers.
    """
    chunks = [(task, config.seed, ladder_index, start, min(start + chunk_size, config.reps))
              for start in range(0, config.reps, chunk_size)]
    show = logger.isEnabledFor(logging.INFO)

    results = []
    if config.threads == 1 or len(chunks) == 1:
        for chunk in tqdm(chunks, desc=desc, disable=not show):
            results.extend(_run_chunk_star(chunk))
        return results

    with multiprocessing.Pool(min(config.threads, len(chunks))) as pool:
        for chunk_results in tqdm(pool.imap(_run_chunk_star, chunks), total=len(chunks), desc=desc, disable=not show):
            results.extend(chunk_results)
    return results


def _record(estimator: str, statistic: str, point: LadderPoint, estimate: float, stderr: float, reps: int,
            reference: float = math.nan, passed: Optional[bool] = None, censored: bool = False,
            note: str = "") -> EstimateRecord:
    ci_low, ci_high = confidence_interval(estimate, stderr)
    return EstimateRecord(estimator=estimator, statistic=statistic, ladder_index=point.index, n=float(point.n),
                          a_n=float(point.a_n), b_n=float(point.b_n), estimate=float(estimate), stderr=float(stderr),
                          ci_low=float(ci_low), ci_high=float(ci_high), reps=int(reps), reference=float(reference),
                          passed=passed, censored=censored, note=note)


def _inside(record: EstimateRecord, value: float) -> bool:
    return record.ci_low <= value <= record.ci_high


def _with_pass(record: EstimateRecord, passed: Optional[bool]) -> EstimateRecord:
    return replace(record, passed=passed)


def _trends(records: Sequence[EstimateRecord], statistics: Sequence[str]) -> Dict[str, dict]:
    trends = {}
    for statistic in statistics:
        series = sorted((r for r in records if r.statistic == statistic), key=lambda r: r.ladder_index)
        if len(series) >= 2:
            trends[statistic] = spearman_trend([r.estimate for r in series], [r.stderr for r in series])
    return trends


def _report(estimator: str, config: ExperimentConfig, records: List[EstimateRecord], trends: Dict[str, dict],
            warnings: List[str], start_time: int) -> EstimateReport:
    report = EstimateReport(estimator=estimator, config=config.to_dict(), records=tuple(records), trends=trends,
                            warnings=tuple(warnings), start_time=start_time, end_time=get_time())
    logger.info("%s finished with %d records, passed=%s", estimator, len(records), report.passed)
    return report


# replication tasks: module level so worker processes can unpickle them

def _low_degree_task(config: ExperimentConfig, params: ProcessParams, stream: RngStream) -> int:
    ps = sample_input(config, params.n, stream)
    radius = analytic.radius_r_n(params.s0, params.n, params.a_n, params.d)
    return count_low_degree(ps, radius, params.k, config.target_per_cell)


def _intensity_task(config: ExperimentConfig, params: ProcessParams, side: float, u_list: Tuple[float, ...],
                    stream: RngStream) -> Tuple[int, ...]:
    marked = build_L(params, sample_input(config, params.n, stream), config.target_per_cell)
    lower, upper = np.zeros(params.d), np.full(params.d, side)
    return tuple(count_in_region(marked, lower, upper, u) for u in u_list)


def _blocking_task(config: ExperimentConfig, params: ProcessParams, cfg, stream: RngStream):
    ps = sample_input(config, params.n, stream)
    marked = build_L(params, ps, config.target_per_cell)
    eta = build_eta(params, ps, cfg, config.target_per_cell)
    eta_truncated = build_eta_truncated(params, ps, cfg, config.target_per_cell)
    counts = per_cube_counts(params, ps, cfg, config.target_per_cell)
    return tv_distance_atomic(marked, eta), tv_distance_atomic(eta, eta_truncated), counts


def _m0_task(config: ExperimentConfig, params: ProcessParams, regions, eps_pair, stream: RngStream) -> float:
    marked = build_L(params, sample_input(config, params.n, stream), config.target_per_cell)
    return analytic.m0_functional_value(marked, regions[0], regions[1], eps_pair[0], eps_pair[1])


def _coupling_task(n: float, d: int, eta: float, stream: RngStream) -> bool:
    base = sample_poisson_process(n, d, stream)
    triple = sample_coupled(base, eta, stream, n)
    return not sandwich_holds(triple, draw_coupled_binomial(triple, int(round(n)), stream))


def _low_degree_counts(config: ExperimentConfig, point: LadderPoint, estimator: str) -> np.ndarray:
    task = partial(_low_degree_task, config, point.params)
    return np.asarray(replicate(config, point.index, task, desc=f"{estimator} n={point.n:g}"), dtype=np.int64)


def estimate_mean_T(config: ExperimentConfig) -> EstimateReport:
    """
    Mean of the low-degree count T against its exact finite-n value. Binomial input is compared against
    the exact binomial mean and additionally tracks its relative gap to the Poisson value.
    """
    estimator = "mean_t"
    warnings = check_estimator(config, estimator)
    start_time = get_time()
    records = []
    points = ladder_points(config)

    for point in points:
        counts = _low_degree_counts(config, point, estimator)
        mean, stderr = mean_and_stderr(counts)
        poisson_reference = analytic.expected_low_degree_count(point.n, point.a_n, config.k, config.s0)

        if config.input == "binomial":
            reference = analytic.expected_low_degree_count_binomial(int(point.n), point.a_n, config.k, config.s0)
            gap = abs(mean - poisson_reference) / poisson_reference
            top = point.index == len(points) - 1
            records.append(_record(estimator, "poisson_gap", point, gap, stderr / poisson_reference, config.reps,
                                   0.0, (gap <= depoissonization_tolerance) if top else None))
        else:
            reference = poisson_reference

        record = _record(estimator, "mean", point, mean, stderr, config.reps, reference)
        records.append(_with_pass(record, _inside(record, reference)))

    trends = _trends(records, ["poisson_gap"]) if config.input == "binomial" else {}
    return _report(estimator, config, records, trends, warnings, start_time)


def estimate_count_pmf_tv(config: ExperimentConfig) -> EstimateReport:
    """Total variation between the empirical law of T and Poisson(b_n alpha_k) along the ladder."""
    estimator = "pmf_tv"
    warnings = check_estimator(config, estimator)
    start_time = get_time()
    alpha = analytic.alpha_k(config.k, config.s0)
    records = []
    points = ladder_points(config)

    for point in points:
        counts = _low_degree_counts(config, point, estimator)
        mean = point.b_n * alpha
        tv = pmf_tv_to_poisson(empirical_pmf(counts), mean)
        bootstrap = replication_stream(config.seed, point.index, bootstrap_replication).generator
        stderr = bootstrap_tv_stderr(counts, mean, bootstrap)
        top = point.index == len(points) - 1
        records.append(_record(estimator, "tv", point, tv, stderr, config.reps, 0.0,
                               (tv <= pmf_tv_tolerance) if top else None))

    return _report(estimator, config, records, _trends(records, ["tv"]), warnings, start_time)


def estimate_rare_event(config: ExperimentConfig) -> EstimateReport:
    """
    b_n^{-1} P(T >= 1) against alpha_k. Binomial input also tracks its relative gap to the Poisson-input
    value (1 - exp(-E[T])) / b_n, with E[T] the exact Poisson mean.
    """
    estimator = "rare_event"
    warnings = check_estimator(config, estimator)
    start_time = get_time()
    alpha = analytic.alpha_k(config.k, config.s0)
    records = []
    points = ladder_points(config)

    for point in points:
        expected_hits = point.b_n * alpha * config.reps
        if expected_hits < min_expected_hits:
            message = (f"n={point.n:g}: only {expected_hits:.3g} expected hits at {config.reps} reps; "
                       f"the ratio estimate is unreliable")
            logger.warning(message)
            warnings.append(message)

        counts = _low_degree_counts(config, point, estimator)
        p_hat, p_stderr = binomial_proportion(int(np.count_nonzero(counts >= 1)), config.reps)
        ratio = p_hat / point.b_n

        if config.input == "binomial":
            mean_t = analytic.expected_low_degree_count(point.n, point.a_n, config.k, config.s0)
            poisson_reference = -math.expm1(-mean_t) / point.b_n
            gap = abs(ratio - poisson_reference) / poisson_reference
            top = point.index == len(points) - 1
            records.append(_record(estimator, "poisson_gap", point, gap, p_stderr / point.b_n / poisson_reference,
                                   config.reps, 0.0, (gap <= depoissonization_tolerance) if top else None,
                                   note=f"poisson_reference={poisson_reference:.17g}"))

        passed = abs(ratio - alpha) <= ratio_tolerance * alpha
        records.append(_record(estimator, "ratio", point, ratio, p_stderr / point.b_n, config.reps, alpha, passed))

    trends = _trends(records, ["poisson_gap"]) if config.input == "binomial" else {}
    return _report(estimator, config, records, trends, warnings, start_time)


def estimate_rate_curve(config: ExperimentConfig, x_grid: Optional[Sequence[float]] = None) -> EstimateReport:
    """
    Empirical -(1/b_n) log P(T/b_n >= x) (x >= alpha_k) or <= x (x < alpha_k), compared with the exact
    Poisson(b_n alpha_k) tail rate and with I_k(x). Zero-hit cells use P = 1/(2 reps) and are censored.
    """
    estimator = "rate_curve"
    warnings = check_estimator(config, estimator)
    start_time = get_time()
    alpha = analytic.alpha_k(config.k, config.s0)
    if x_grid is None:
        x_grid = (0.5 * alpha, 1.5 * alpha, 2.0 * alpha)
    if any(x < 0 for x in x_grid):
        raise ConfigError("rate curve points must be non-negative")

    records = []
    for point in ladder_points(config):
        counts = _low_degree_counts(config, point, estimator)
        for x in x_grid:
            upper = x >= alpha
            cut = analytic.tail_threshold(x, point.b_n, upper)
            hits = int(np.count_nonzero(counts >= cut)) if upper else int(np.count_nonzero(counts <= cut))
            censored = hits == 0
            p_hat = 1.0 / (2 * config.reps) if censored else hits / config.reps

            empirical = -math.log(p_hat) / point.b_n
            stderr = math.sqrt((1 - p_hat) / (config.reps * p_hat)) / point.b_n
            oracle = analytic.poisson_tail_rate(point.b_n, alpha, x, upper)
            rate = analytic.rate_I_k(x, config.k, config.s0)
            label = f"x={x:.6g}"

            record = _record(estimator, f"rate@{label}", point, empirical, stderr, config.reps, oracle,
                             censored=censored, note="upper" if upper else "lower")
            records.append(_with_pass(record, None if censored else _inside(record, oracle)))
            records.append(_record(estimator, f"gap@{label}", point, abs(empirical - rate), stderr, config.reps,
                                   0.0, censored=censored))
            if rate > 0:
                oracle_gap = abs(oracle - rate) / rate
                records.append(_record(estimator, f"oracle_gap@{label}", point, oracle_gap, 0.0, config.reps, rate,
                                       (oracle_gap <= ratio_tolerance) if point.b_n >= 50 else None))

    statistics = [f"gap@x={x:.6g}" for x in x_grid]
    uncensored = [r for r in records if not r.censored]
    return _report(estimator, config, records, _trends(uncensored, statistics), warnings, start_time)


def estimate_intensity_check(config: ExperimentConfig, b_side: float = 0.5,
                             u_list: Optional[Sequence[float]] = None) -> EstimateReport:
    """Mean of L(B x (u, inf)) for B = [0, b_side)^d against the closed-form intensity tail."""
    estimator = "intensity"
    warnings = check_estimator(config, estimator)
    start_time = get_time()
    if not 0 <= b_side <= 1:
        raise ConfigError(f"the box side must lie in [0, 1], got {b_side}")
    u_list = tuple(u_list) if u_list is not None else (config.s0, config.s0 + 1.0)
    if any(u < config.s0 for u in u_list):
        raise ConfigError(f"mark thresholds must be at least s0={config.s0}")
    leb = b_side ** config.d

    records = []
    for point in ladder_points(config):
        task = partial(_intensity_task, config, point.params, b_side, u_list)
        rows = np.asarray(replicate(config, point.index, task, desc=f"{estimator} n={point.n:g}"), dtype=np.int64)
        for column, u in enumerate(u_list):
            mean, stderr = mean_and_stderr(rows[:, column])
            reference = analytic.intensity_tail(point.n, point.a_n, config.k, u, leb)
            record = _record(estimator, f"tail@u={u:.6g}", point, mean, stderr, config.reps, reference)
            records.append(_with_pass(record, _inside(record, reference)))

    return _report(estimator, config, records, {}, warnings, start_time)


def estimate_blocking_gap(config: ExperimentConfig) -> EstimateReport:
    """
    Discrepancies of the blocking construction per cube: tv(L, eta) / b_eff, tv(eta, eta') / b_eff and the
    total variation between the pooled per-cube count law and Poisson(alpha_k).
    """
    estimator = "blocking"
    warnings = check_estimator(config, estimator)
    start_time = get_time()
    alpha = analytic.alpha_k(config.k, config.s0)

    records = []
    for point in ladder_points(config):
        try:
            cfg = blocked_config(point.params, point.b_n, config.w_rule)
        except DegenerateInteriorError as e:
            raise ConfigError(f"n={point.n:g}: {e}")
        b_eff = cfg.partition.b_eff

        task = partial(_blocking_task, config, point.params, cfg)
        results = replicate(config, point.index, task, desc=f"{estimator} n={point.n:g}")
        note = f"b_eff={b_eff}"

        for column, statistic in ((0, "tv_L_eta"), (1, "tv_eta_eta_truncated")):
            mean, stderr = mean_and_stderr([row[column] / b_eff for row in results])
            records.append(_record(estimator, statistic, point, mean, stderr, config.reps, note=note))

        cube_counts = np.concatenate([row[2] for row in results])
        bootstrap = replication_stream(config.seed, point.index, bootstrap_replication).generator
        tv = pmf_tv_to_poisson(empirical_pmf(cube_counts), alpha)
        records.append(_record(estimator, "cube_count_tv", point, tv, bootstrap_tv_stderr(cube_counts, alpha, bootstrap),
                               len(cube_counts), 0.0, note=note))
        records.append(_record(estimator, "mean_measure_gap", point, mean_measure_gap(point.params, cfg), 0.0,
                               config.reps, note=note))

    trends = _trends(records, ["tv_L_eta", "tv_eta_eta_truncated", "cube_count_tv"])
    return _report(estimator, config, records, trends, warnings, start_time)


def estimate_m0_functional(config: ExperimentConfig, plateau_width: float = 1.0, plateau_height: float = 1.0,
                           eps_pair: Tuple[float, float] = (0.0, 0.0)) -> EstimateReport:
    """b_n^{-1} E[F(L)] for the plateau test functional against its limit xi_k(F)."""
    estimator = "m0"
    warnings = check_estimator(config, estimator)
    start_time = get_time()
    alpha = analytic.alpha_k(config.k, config.s0)
    region = analytic.MarkRegion.plateau(config.d, config.s0, plateau_width, plateau_height)
    reference = analytic.m0_limit_functional(region, region, eps_pair[0], eps_pair[1], config.k, config.s0)

    records = []
    for point in ladder_points(config):
        expected_hits = point.b_n * alpha * config.reps
        if expected_hits < min_expected_hits:
            message = f"n={point.n:g}: only {expected_hits:.3g} expected hits at {config.reps} reps"
            logger.warning(message)
            warnings.append(message)

        task = partial(_m0_task, config, point.params, (region, region), tuple(eps_pair))
        values = replicate(config, point.index, task, desc=f"{estimator} n={point.n:g}")
        mean, stderr = mean_and_stderr(values)
        ratio = mean / point.b_n
        passed = abs(ratio - reference) <= ratio_tolerance * reference
        records.append(_record(estimator, "ratio", point, ratio, stderr / point.b_n, config.reps, reference, passed))

    return _report(estimator, config, records, {}, warnings, start_time)


def estimate_coupling_failure(config: ExperimentConfig) -> EstimateReport:
    """
    Frequency of a failed sandwich thinned <= binomial <= augmented, against its closed-form bound.
    The bound holds when the lower Clopper-Pearson limit of the frequency stays below it.
    """
    estimator = "coupling"
    warnings = check_estimator(config, estimator)
    start_time = get_time()

    records = []
    statistics = []
    for point in ladder_points(config):
        for eps_value in config.eps:
            eps = eps_value * point.a_n if config.eps_ratio else eps_value
            label = f"eps_ratio={eps_value:.6g}" if config.eps_ratio else f"eps={eps_value:.6g}"
            try:
                bound = analytic.sandwich_failure_bound(point.n, point.a_n, eps)
            except KnnBallError as e:
                raise ConfigError(f"n={point.n:g}: {e}")
            if eps == 0:
                records.append(_record(estimator, f"failure@{label}", point, math.nan, 0.0, 0, bound, True,
                                       note="no thinning; the bound is trivial"))
                continue

            task = partial(_coupling_task, point.n, config.d, eps / point.a_n)
            failures = int(sum(replicate(config, point.index, task, desc=f"{estimator} n={point.n:g}")))
            p_hat, stderr = binomial_proportion(failures, config.reps)
            lower, _ = clopper_pearson(failures, config.reps)
            records.append(_record(estimator, f"failure@{label}", point, p_hat, stderr, config.reps, bound,
                                   lower <= bound, note=f"clopper_pearson_low={lower:.17g}"))
            if f"failure@{label}" not in statistics:
                statistics.append(f"failure@{label}")

    trends = _trends(records, statistics) if config.eps_ratio else {}
    return _report(estimator, config, records, trends, warnings, start_time)


estimators = {
    "mean_t": estimate_mean_T,
    "pmf_tv": estimate_count_pmf_tv,
    "rare_event": estimate_rare_event,
    "rate_curve": estimate_rate_curve,
    "intensity": estimate_intensity_check,
    "blocking": estimate_blocking_gap,
    "m0": estimate_m0_functional,
    "coupling": estimate_coupling_failure,
}


def run(config: ExperimentConfig, estimator_id: str, **options) -> EstimateReport:
    """Runs one estimator; options are passed through to it (x_grid, b_side, u_list, eps_pair, ...)."""
    if estimator_id not in estimators:
        raise UnknownEstimatorError(f"unknown estimator {estimator_id!r}, expected one of {sorted(estimators)}")
    print(f"Running {estimator_id} over n={list(config.n_ladder)} with {config.reps} replications")
    return estimators[estimator_id](config, **options)


def grid_oracle_agreement(seed: int, cases: int = 1000) -> Tuple[int, int]:
    """
    Random (configuration, query, k) cases over d in {1, 2, 3}, each comparing the grid k-th neighbor
    distance with the full scan. Returns (cases, mismatches); any mismatch is a bit-level disagreement.
    """
    gen = RngStream(seed, bootstrap_replication).generator
    mismatches = 0
    for case in range(cases):
        d = 1 + case % 3
        ps = sample_poisson_process(float(gen.integers(5, 400)), d, gen)
        k = int(gen.integers(1, 6))
        query = canonicalize(gen.random(d))
        exclude = int(gen.integers(0, len(ps))) if len(ps) and gen.random() < 0.5 else None
        if exclude is not None:
            query = ps.points[exclude]
        grid = knn_distance(build_index(ps, float(gen.uniform(0.5, 4.0))), query, k, exclude)
        if grid != knn_distance_bruteforce(ps, query, k, exclude):
            mismatches += 1
    return cases, mismatches


def acceptance_battery(quick: bool, seed: int, threads: int) -> List[Tuple[str, str, ExperimentConfig, dict]]:
    """
    The desk-scale acceptance runs as (name, estimator, config, options). quick trims replications
    and ladders so the whole battery stays in the minutes range.
    """
    reps_identity = 2000 if quick else 100000
    # quick: b_n alpha_k around 0.06 and 0.16 so every rare-event cell sees well over 10^3 hits
    reps_rare = 20000 if quick else 1000000
    rare_power = 1.3 if quick else 1.5
    ldp_ladder = (500.0, 2000.0, 8000.0) if quick else (2000.0, 10000.0, 50000.0)

    base = ExperimentConfig(seed=seed, threads=threads)
    ldp = replace(base, n_ladder=ldp_ladder, a_rule="fraction_log", a_param=(0.6,))
    rare = replace(base, d=2, k=1, n_ladder=(10000.0,), a_rule="power_log", a_param=(rare_power,), reps=reps_rare)

    return [
        ("mean_t_k1", "mean_t", replace(base, reps=reps_identity), {}),
        ("mean_t_k2", "mean_t", replace(base, k=2, reps=reps_identity), {}),
        ("mean_t_k3", "mean_t", replace(base, d=1, k=3, s0=0.5, n_ladder=(2000.0,), a_param=(6.0,),
                                        reps=reps_identity), {}),
        ("intensity", "intensity", replace(base, reps=reps_identity), {"b_side": 0.5, "u_list": (0.0, 1.0)}),
        ("pmf_tv", "pmf_tv", replace(ldp, reps=reps_identity), {}),
        ("rate_curve", "rate_curve", replace(ldp, reps=reps_identity), {"x_grid": (1.5, 2.0)}),
        ("rare_event", "rare_event", rare, {}),
        ("m0", "m0", rare, {}),
        ("coupling", "coupling", replace(base, n_ladder=(500.0, 5000.0), a_rule="fraction_log", a_param=(1.0,),
                                          eps=(0.25, 0.5), eps_ratio=True, reps=1000 if quick else 10000), {}),
        ("blocking", "blocking", replace(ldp, reps=100 if quick else 1000), {}),
        ("mean_t_binomial", "mean_t", replace(ldp, input="binomial", reps=1000 if quick else 10000), {}),
        ("rare_event_binomial", "rare_event",
         replace(rare, input="binomial", a_param=(1.2,), reps=50000) if quick else replace(rare, input="binomial"), {}),
    ]
