import math

import numpy as np
import pytest

from config import OUTPUT_DIR
from src.errors import ConfigError, UnknownEstimatorError
from src.knn_ball.analytic import alpha_k, expected_low_degree_count
from src.knn_ball.experiments import ExperimentConfig, acceptance_battery, check_estimator, grid_oracle_agreement, \
    ladder_points, replicate, run
from src.knn_ball.reporting import report_payload


def _statistics(report):
    return [record.statistic for record in report.records]


def test_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(reps=0).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(n_ladder=(1000.0, 500.0), a_param=(5.0, 5.0)).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(n_ladder=(1000.0, 2000.0), a_param=(5.0,)).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(a_rule="quadratic").validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(a_rule="power_log", a_param=(0.5,)).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(input="binomial", n_ladder=(1000.5,)).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig(w_rule="power:2").validate()


def test_a_schedules():
    ladder = (100.0, 1000.0)
    fraction = ExperimentConfig(n_ladder=ladder, a_rule="fraction_log", a_param=(0.5,))
    assert np.allclose(fraction.a_schedule(), [0.5 * math.log(n) for n in ladder])
    assert fraction.declared_regime() == "ldp"

    boundary = ExperimentConfig(k=2, n_ladder=ladder, a_rule="boundary", a_param=(1.0,))
    assert np.allclose(boundary.a_schedule(), [math.log(n) + math.log(math.log(n)) + 1 for n in ladder])
    assert boundary.declared_regime() == "boundary"

    explicit = ExperimentConfig(n_ladder=(1e3, 1e4, 1e5), a_param=tuple(2 * math.log(n) for n in (1e3, 1e4, 1e5)))
    assert explicit.declared_regime() == "m0"
    assert ExperimentConfig().declared_regime() is None


def test_ladder_points():
    points = ladder_points(ExperimentConfig(k=2, n_ladder=(1000.0,), a_param=(5.0,)))
    assert len(points) == 1
    assert np.isclose(points[0].b_n, 33.689735, rtol=1e-7)
    assert points[0].params.k == 2


def test_get_file_name():
    name = ExperimentConfig(seed=3).get_file_name("mean_t")
    assert name.startswith(OUTPUT_DIR)
    assert "mean_t" in name and "seed3" in name


def test_check_estimator():
    with pytest.raises(UnknownEstimatorError):
        check_estimator(ExperimentConfig(), "bogus")
    with pytest.raises(KeyError):
        run(ExperimentConfig(), "bogus")

    m0_schedule = ExperimentConfig(n_ladder=(10000.0,), a_rule="power_log", a_param=(1.5,))
    with pytest.raises(ConfigError):
        check_estimator(m0_schedule, "pmf_tv")
    assert check_estimator(m0_schedule, "rare_event") == []
    assert check_estimator(ExperimentConfig(), "pmf_tv")

    with pytest.raises(ConfigError):
        check_estimator(ExperimentConfig(input="binomial"), "coupling")
    with pytest.raises(ConfigError):
        check_estimator(ExperimentConfig(input="binomial", n_ladder=(100.0,)), "mean_t")
    assert check_estimator(ExperimentConfig(input="binomial"), "mean_t") == []


def test_acceptance_battery_configs_are_consistent():
    for quick in (True, False):
        battery = acceptance_battery(quick, 7, 1)
        assert len({name for name, _, _, _ in battery}) == len(battery)
        for name, estimator, config, options in battery:
            check_estimator(config, estimator)
            if estimator in ("rare_event", "m0"):
                top = ladder_points(config)[-1]
                assert top.b_n * alpha_k(config.k, config.s0) * config.reps >= 400


def test_grid_oracle_agreement():
    cases, mismatches = grid_oracle_agreement(7, 60)
    assert (cases, mismatches) == (60, 0)


def test_replicate_is_ordered_and_thread_independent():
    config = ExperimentConfig(reps=600, seed=4)

    def draw(stream):
        return float(stream.generator.random())

    assert replicate(config, 0, draw) == replicate(config, 0, draw)
    assert replicate(config, 0, draw) != replicate(config, 1, draw)


def test_mean_t_reproducible_across_threads():
    config = ExperimentConfig(n_ladder=(200.0,), a_param=(3.0,), reps=300, seed=5)
    single = run(config, "mean_t")
    double = run(ExperimentConfig(n_ladder=(200.0,), a_param=(3.0,), reps=300, seed=5, threads=2), "mean_t")
    assert single.records == double.records
    assert report_payload(run(config, "mean_t")) == report_payload(single)


def test_mean_t_against_mecke():
    config = ExperimentConfig(n_ladder=(1000.0,), a_param=(5.0,), reps=1000, seed=7)
    record = run(config, "mean_t").records[0]
    assert record.statistic == "mean"
    assert np.isclose(record.reference, 6.737947, rtol=1e-6)
    assert abs(record.estimate - record.reference) <= 4 * record.stderr


def test_mean_t_binomial_tracks_poisson_gap():
    config = ExperimentConfig(n_ladder=(1000.0, 4000.0), a_rule="fraction_log", a_param=(0.6,), reps=300,
                              input="binomial", seed=8)
    report = run(config, "mean_t")
    assert _statistics(report) == ["poisson_gap", "mean", "poisson_gap", "mean"]
    assert "poisson_gap" in report.trends
    for record in report.records:
        if record.statistic == "mean":
            poisson = expected_low_degree_count(record.n, record.a_n, 1, 0.0)
            assert record.reference != poisson
            assert abs(record.estimate - record.reference) <= 5 * record.stderr


def test_pmf_tv_report():
    config = ExperimentConfig(n_ladder=(300.0, 900.0), a_rule="fraction_log", a_param=(0.6,), reps=200, seed=9)
    report = run(config, "pmf_tv")
    assert _statistics(report) == ["tv", "tv"]
    assert report.records[0].passed is None
    assert report.records[1].passed is not None
    assert all(0 <= r.estimate <= 1 for r in report.records)
    assert "tv" in report.trends


def test_rare_event_warns_when_hits_are_scarce():
    config = ExperimentConfig(n_ladder=(10000.0,), a_rule="power_log", a_param=(1.5,), s0=5.0, reps=50, seed=10)
    report = run(config, "rare_event")
    assert report.warnings
    assert np.isclose(report.records[0].reference, alpha_k(1, 5.0))


def test_rate_curve_records():
    config = ExperimentConfig(n_ladder=(300.0, 900.0), a_rule="fraction_log", a_param=(0.6,), reps=200, seed=11)
    report = run(config, "rate_curve", x_grid=(0.5, 2.0))
    statistics = set(_statistics(report))
    assert {"rate@x=0.5", "gap@x=0.5", "oracle_gap@x=0.5", "rate@x=2", "gap@x=2", "oracle_gap@x=2"} <= statistics
    for record in report.records:
        if record.statistic.startswith("rate@"):
            assert record.note == ("upper" if record.statistic == "rate@x=2" else "lower")
            if record.censored:
                assert record.passed is None
        if record.statistic.startswith("oracle_gap@"):
            assert record.passed is None
    with pytest.raises(ConfigError):
        run(config, "rate_curve", x_grid=(-1.0,))


def test_rate_curve_censors_impossible_tails():
    config = ExperimentConfig(n_ladder=(300.0, 900.0), a_rule="fraction_log", a_param=(0.6,), reps=50, seed=12)
    report = run(config, "rate_curve", x_grid=(50.0,))
    rates = [r for r in report.records if r.statistic == "rate@x=50"]
    assert all(r.censored and r.passed is None for r in rates)
    assert np.isclose(rates[0].estimate, math.log(100) / rates[0].b_n)
    assert "gap@x=50" not in report.trends


def test_intensity_check():
    config = ExperimentConfig(n_ladder=(1000.0,), a_param=(5.0,), reps=600, seed=13)
    empty_box = run(config, "intensity", b_side=0.0, u_list=(0.0,))
    assert empty_box.records[0].estimate == 0.0
    assert empty_box.records[0].reference == 0.0

    report = run(config, "intensity", b_side=0.5, u_list=(0.0, 1.0))
    tail = report.records[1]
    assert tail.statistic == "tail@u=1"
    assert np.isclose(tail.reference, 1.239376, rtol=1e-6)
    assert abs(tail.estimate - tail.reference) <= 4 * tail.stderr

    with pytest.raises(ConfigError):
        run(config, "intensity", u_list=(-1.0,))


def test_blocking_gap_report():
    config = ExperimentConfig(n_ladder=(2000.0,), a_param=(6.0,), reps=4, seed=14)
    report = run(config, "blocking")
    assert _statistics(report) == ["tv_L_eta", "tv_eta_eta_truncated", "cube_count_tv", "mean_measure_gap"]
    assert all(record.estimate >= 0 for record in report.records)
    assert report.records[2].reps == 4 * 4

    with pytest.raises(ConfigError):
        run(ExperimentConfig(n_ladder=(10.0,), a_param=(6.0,), reps=2, seed=14), "blocking")


def test_m0_functional_zero_cases():
    config = ExperimentConfig(n_ladder=(10000.0,), a_rule="power_log", a_param=(1.5,), reps=100, seed=15)
    flat = run(config, "m0", plateau_height=0.0).records[0]
    assert flat.estimate == 0.0 and flat.reference == 0.0

    above = run(config, "m0", eps_pair=(1.0, 1.0)).records[0]
    assert above.reference == 0.0
    assert above.estimate <= 0.5


def test_m0_reference_value():
    config = ExperimentConfig(n_ladder=(10000.0,), a_rule="power_log", a_param=(1.5,), reps=50, seed=16)
    record = run(config, "m0").records[0]
    assert np.isclose(record.reference, (1 - math.exp(-1)) ** 3, rtol=1e-9)


def test_coupling_failure():
    config = ExperimentConfig(n_ladder=(500.0,), a_param=(math.log(500),), eps=(0.0, 0.5), reps=200, seed=17)
    report = run(config, "coupling")
    trivial, real = report.records
    assert trivial.reps == 0 and math.isnan(trivial.estimate)
    assert trivial.reference == 2.0 and trivial.passed
    assert real.passed
    assert 0 <= real.estimate <= 1

    with pytest.raises(ConfigError):
        run(ExperimentConfig(n_ladder=(500.0,), a_param=(2.0,), eps=(3.0,), reps=10), "coupling")


def test_coupling_failure_ratios_get_trends():
    config = ExperimentConfig(n_ladder=(200.0, 800.0), a_rule="fraction_log", a_param=(1.0,), eps=(0.5,),
                              eps_ratio=True, reps=100, seed=18)
    report = run(config, "coupling")
    assert _statistics(report) == ["failure@eps_ratio=0.5", "failure@eps_ratio=0.5"]
    assert "failure@eps_ratio=0.5" in report.trends


@pytest.mark.parametrize("k, power", [(1, 1.3), (2, 1.6)])
def test_rare_event_ratio_approaches_alpha_at_matched_b_n(k, power):
    config = ExperimentConfig(k=k, n_ladder=(2000.0,), a_rule="power_log", a_param=(power,), reps=4000, seed=19)
    report = run(config, "rare_event")
    assert _statistics(report) == ["ratio"]
    record = report.records[0]
    assert 0.09 <= record.b_n <= 0.14
    assert record.reference == alpha_k(k, 0.0)
    assert abs(record.estimate - record.reference) <= 0.25 * record.reference
    if k == 1:
        finite_n = -math.expm1(-expected_low_degree_count(record.n, record.a_n, 1, 0.0)) / record.b_n
        assert abs(record.estimate - finite_n) <= 4 * record.stderr


def test_rare_event_binomial_tracks_poisson_gap():
    config = ExperimentConfig(n_ladder=(1000.0, 2000.0), a_rule="power_log", a_param=(1.2,), reps=1500,
                              input="binomial", seed=20)
    report = run(config, "rare_event")
    assert _statistics(report) == ["poisson_gap", "ratio", "poisson_gap", "ratio"]
    assert "poisson_gap" in report.trends
    first, top = report.records[0], report.records[2]
    assert first.passed is None
    assert top.passed is not None
    for record in (first, top):
        assert record.note.startswith("poisson_reference=")
        assert 0 <= record.estimate <= 4 * record.stderr + 0.02


def test_m0_ratio_matches_its_limit():
    config = ExperimentConfig(n_ladder=(2000.0,), a_rule="power_log", a_param=(1.3,), reps=4000, seed=21)
    record = run(config, "m0").records[0]
    assert np.isclose(record.reference, (1 - math.exp(-1)) ** 3, rtol=1e-9)
    assert record.stderr > 0
    assert abs(record.estimate - record.reference) <= 4 * record.stderr
