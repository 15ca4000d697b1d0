import math
import time

import numpy as np

from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

from scipy import stats

from src.utils import confidence_level, confidence_z


@dataclass(frozen=True)
class EstimateRecord:
    # which estimator produced the record, and which statistic of it ("mean", "tv", "ratio@x=2", ...)
    estimator: str
    statistic: str

    # ladder point the record belongs to
    ladder_index: int
    n: float
    a_n: float
    b_n: float

    estimate: float
    stderr: float

    # estimate -/+ confidence_z * stderr
    ci_low: float
    ci_high: float

    reps: int

    # analytic value the estimate is compared against, nan when there is none
    reference: float

    # None for records that only feed a trend check
    passed: Optional[bool]

    # zero-hit cell whose estimate is a continuity-corrected one-sided bound
    censored: bool = False

    note: str = ""


@dataclass(frozen=True)
class EstimateReport:
    estimator: str

    # the ExperimentConfig echoed as a plain dict
    config: dict

    # one EstimateRecord per ladder point and statistic
    records: Tuple[EstimateRecord, ...]

    # statistic -> {"rho", "pvalue", "passed"} Spearman summary along the ladder
    trends: Dict[str, dict] = field(default_factory=dict)

    warnings: Tuple[str, ...] = ()

    # Unix timestamps of the run; written only to the metadata sidecar
    start_time: int = 0
    end_time: int = 0

    @property
    def passed(self) -> bool:
        """Every asserted record and every asserted trend holds."""
        records_ok = all(r.passed for r in self.records if r.passed is not None)
        trends_ok = all(t["passed"] for t in self.trends.values() if t.get("passed") is not None)
        return records_ok and trends_ok

    def get_total_time_sec(self):
        return self.end_time - self.start_time


def get_time():
    """Returns the current Unix (epoch) timestamp, in seconds."""
    return round(time.time())


def confidence_interval(estimate: float, stderr: float) -> Tuple[float, float]:
    return estimate - confidence_z * stderr, estimate + confidence_z * stderr


def mean_and_stderr(values: Sequence[float]) -> Tuple[float, float]:
    """
    Sample mean and its standard error, both through math.fsum so the result does not depend
    on the order the replications finished in.
    """
    values = [float(v) for v in values]
    count = len(values)
    if count == 0:
        return math.nan, math.nan
    mean = math.fsum(values) / count
    if count == 1:
        return mean, 0.0
    variance = math.fsum((v - mean) ** 2 for v in values) / (count - 1)
    return mean, math.sqrt(variance / count)


def binomial_proportion(hits: int, reps: int) -> Tuple[float, float]:
    p_hat = hits / reps
    return p_hat, math.sqrt(p_hat * (1 - p_hat) / reps)


def clopper_pearson(hits: int, reps: int, level: float = confidence_level) -> Tuple[float, float]:
    """Exact two-sided confidence interval of a binomial proportion."""
    tail = (1 - level) / 2
    low = 0.0 if hits == 0 else float(stats.beta.ppf(tail, hits, reps - hits + 1))
    high = 1.0 if hits == reps else float(stats.beta.ppf(1 - tail, hits + 1, reps - hits))
    return low, high


def empirical_pmf(counts: Sequence[int]) -> np.ndarray:
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size == 0:
        return np.zeros(1)
    return np.bincount(counts) / counts.size


def pmf_tv_to_poisson(pmf: np.ndarray, mean: float) -> float:
    """
    (1/2) sum_j |p_j - q_j| between a pmf on {0, 1, ...} and Poisson(mean); the Poisson mass beyond
    the support of p enters in full.
    """
    support = np.arange(len(pmf))
    q = stats.poisson.pmf(support, mean)
    beyond = float(stats.poisson.sf(len(pmf) - 1, mean))
    return 0.5 * (math.fsum(np.abs(np.asarray(pmf) - q)) + beyond)


def bootstrap_tv_stderr(counts: Sequence[int], mean: float, rng: np.random.Generator, resamples: int = 200) -> float:
    """Standard error of pmf_tv_to_poisson by multinomial resampling of the count histogram."""
    counts = np.asarray(counts, dtype=np.int64)
    if counts.size < 2:
        return 0.0
    pmf = empirical_pmf(counts)
    draws = rng.multinomial(counts.size, pmf, size=resamples) / counts.size
    values = [pmf_tv_to_poisson(draw, mean) for draw in draws]
    return float(np.std(values, ddof=1))


def spearman_trend(values: Sequence[float], noise: Optional[Sequence[float]] = None, alpha: float = 0.05) -> dict:
    """
    Spearman correlation of a series against its ladder index. The series counts as nonincreasing when
    rho <= 0 with p < alpha, or when no step rises by more than twice its combined standard error.
    """
    values = [float(v) for v in values]
    result = {"rho": math.nan, "pvalue": math.nan, "passed": None}
    if len(values) < 2 or not all(math.isfinite(v) for v in values):
        return result

    if len(set(values)) == 1:
        result.update(rho=0.0, pvalue=1.0, passed=True)
        return result

    rho, pvalue = stats.spearmanr(np.arange(len(values)), values)
    within_noise = False
    if noise is not None:
        steps = zip(values[:-1], values[1:], noise[:-1], noise[1:])
        within_noise = all(after - before <= 2 * math.hypot(se_before, se_after)
                           for before, after, se_before, se_after in steps)
    result.update(rho=float(rho), pvalue=float(pvalue), passed=bool((rho <= 0 and pvalue < alpha) or within_noise))
    return result
