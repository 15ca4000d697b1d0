import math

# z-quantile of the two-sided 99% normal interval, used for every confidence interval in the lab
confidence_z = 2.5758293035489004
confidence_level = 0.99

# Upper truncation of every mark integral: u ranges over [s0, s0 + mark_truncation]
mark_truncation = 40.0

# Minimum number of trapezoid nodes per smooth piece of a mark-axis quadrature
min_quadrature_nodes = 400

# Slope band (per decade of n) inside which the regime diagnostic counts as bounded
boundary_slope_tolerance = 0.01

# Fewer expected hits than this make a rare-event estimate unreliable
min_expected_hits = 20

# Pilot-calibrated acceptance tolerances of the limit checks
pmf_tv_tolerance = 0.05
ratio_tolerance = 0.15
depoissonization_tolerance = 0.05

# Float formatting for every CSV the lab writes
float_format = "%.17g"

# Bit width of the replication index inside a stream index (ladder_index << stream_shift | replication)
stream_shift = 32

regimes = ("ldp", "boundary", "m0")

# a-schedule rules and the regime each one is built for (None: decided from the diagnostic)
a_rules = {
    "fraction_log": "ldp",
    "boundary": "boundary",
    "power_log": "m0",
    "explicit": None,
}

# Estimators and the regime their limit statement needs (None: valid at any finite n)
estimator_regimes = {
    "mean_t": None,
    "pmf_tv": "ldp",
    "rare_event": "m0",
    "rate_curve": "ldp",
    "intensity": None,
    "blocking": "ldp",
    "m0": "m0",
    "coupling": None,
}

# Estimators that accept binomial input
binomial_estimators = ("mean_t", "rare_event", "m0")


def log_factorial(k: int) -> float:
    """log(k!) through lgamma, exact enough for k up to a few hundred."""
    return math.lgamma(k + 1)
