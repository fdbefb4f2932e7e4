import numpy as np
import pytest

from services.errors import ArgumentError, DomainError
from services.estimators import variation_estimators
from services.hilbert_core import RankOneTestTensor, SpaceSpec, hilbert_core
from services.inference import McReport, inference_service
from services.semigroups import SemigroupSpec
from services.simulation import PathSample, SimConfig, VolModel, simulation_service

IDENTITY = SemigroupSpec.identity()


@pytest.fixture
def model():
    space = SpaceSpec.l2(16)
    vol = VolModel.constant(hilbert_core.kernel_operator(space, lambda x, y: np.exp(-((x - y) ** 2) / 0.1)))
    h = hilbert_core.indicator(space, 0.0, 0.5)
    return space, vol, RankOneTestTensor.square(h)


@pytest.fixture
def path(model):
    _, vol, _ = model
    return simulation_service.simulate_mild(vol, IDENTITY, SimConfig(n=64, seed=21))


# ── Statistics and intervals ───────────────────────────────────


def test_zero_path_is_degenerate(model):
    space, _, B = model
    flat = PathSample(space, np.zeros((9, space.J)), 1.0 / 8, IDENTITY)
    stat = inference_service.feasible_t_stat(flat, IDENTITY, B, None, 0.0)
    ci = inference_service.ci_functional(flat, IDENTITY, B, None, 0.95)
    assert stat.degenerate and np.isnan(stat.value)
    assert ci.degenerate and not ci.contains(0.0)


def test_t_stat_is_antisymmetric_in_the_functional(model, path):
    _, vol, B = model
    target = simulation_service.integrated_volatility(vol, 1.0)
    plus = inference_service.feasible_t_stat(path, IDENTITY, B, None, target)
    minus = inference_service.feasible_t_stat(path, IDENTITY, B.scaled(-1.0), None, target)
    assert minus.value == pytest.approx(-plus.value)
    assert minus.denom_sq == pytest.approx(plus.denom_sq)


def test_level_zero_interval_collapses_to_the_estimate(model, path):
    _, _, B = model
    ci = inference_service.ci_functional(path, IDENTITY, B, None, 0.0)
    assert ci.lower == ci.upper == ci.estimate
    assert ci.estimate == pytest.approx(hilbert_core.pair(variation_estimators.sarcv(path, IDENTITY), B))


def test_wider_level_contains_narrower(model, path):
    _, _, B = model
    narrow = inference_service.ci_functional(path, IDENTITY, B, None, 0.95)
    wide = inference_service.ci_functional(path, IDENTITY, B, None, 0.99)
    assert wide.lower < narrow.lower < narrow.upper < wide.upper


def test_level_must_lie_below_one(model, path):
    _, _, B = model
    with pytest.raises(DomainError):
        inference_service.ci_functional(path, IDENTITY, B, None, 1.0)


# ── Monte Carlo plumbing ───────────────────────────────────────


def test_run_replications_keeps_replicate_order():
    assert inference_service.run_replications(lambda s: 2 * s, 5, 10) == [20, 22, 24, 26, 28]
    assert inference_service.run_replications(lambda s: 2 * s, 5, 10, threads=3) == [20, 22, 24, 26, 28]


def test_summarize():
    assert inference_service.summarize([3.0]) == (3.0, 0.0)
    mean, se = inference_service.summarize([1.0, 2.0, 3.0])
    assert mean == pytest.approx(2.0)
    assert se == pytest.approx(1.0 / np.sqrt(3.0))


def test_single_replication_coverage_is_zero_or_one(model):
    _, vol, B = model
    report = inference_service.coverage_experiment(vol, IDENTITY, B, [16], 1, 0.95, seed_base=3)
    assert report.coverage[0] in (0.0, 1.0)
    assert report.degenerate_fraction == [0.0]
    assert report.replications == 1


def test_functional_outside_the_volatility_range_is_always_degenerate():
    space = SpaceSpec.l2(8)
    vol = VolModel.rank_one(hilbert_core.indicator(space, 0.0, 0.5), None)
    B = RankOneTestTensor.square(hilbert_core.indicator(space, 0.5, 1.0))
    report = inference_service.coverage_experiment(vol, IDENTITY, B, [8, 16], 5, 0.95, seed_base=1)
    assert report.degenerate_fraction == [1.0, 1.0]
    assert report.coverage == [None, None]


def test_coverage_experiment_is_reproducible(model):
    _, vol, B = model
    a = inference_service.coverage_experiment(vol, IDENTITY, B, [16], 4, 0.9, seed_base=5)
    b = inference_service.coverage_experiment(vol, IDENTITY, B, [16], 4, 0.9, seed_base=5, threads=2)
    assert a.diagnostics["t_stats"] == b.diagnostics["t_stats"]


def test_report_needs_a_replication():
    with pytest.raises(ArgumentError):
        McReport(label="x", n_grid=[4], replications=0, seed_base=1)


def test_report_rows_and_pass_flag():
    report = McReport(
        label="lln",
        n_grid=[4, 8],
        replications=2,
        seed_base=1,
        error_means={"sarcv": [0.2, 0.1]},
        error_ses={"sarcv": [0.01, 0.01]},
        checks={"sarcv_decreasing": True},
    )
    assert report.rows() == [
        {"n": 4, "sarcv_mean": 0.2, "sarcv_se": 0.01},
        {"n": 8, "sarcv_mean": 0.1, "sarcv_se": 0.01},
    ]
    assert report.passed
    report.checks["coverage"] = False
    assert not report.to_dict()["passed"]


# ── Summaries ──────────────────────────────────────────────────


def test_rate_fit_recovers_the_exponent():
    ns = [64, 128, 256, 512]
    fit = inference_service.convergence_rate_fit(ns, [n**-0.5 for n in ns])
    assert fit.slope == pytest.approx(-0.5)
    assert fit.r_squared == pytest.approx(1.0)
    assert fit.points == 4


def test_rate_fit_of_constant_errors_is_flat():
    fit = inference_service.convergence_rate_fit([64, 128, 256], [0.3, 0.3, 0.3])
    assert fit.slope == pytest.approx(0.0, abs=1e-12)


def test_rate_fit_argument_checks():
    with pytest.raises(ArgumentError):
        inference_service.convergence_rate_fit([64, 128], [1.0, 0.5])
    with pytest.raises(ArgumentError):
        inference_service.convergence_rate_fit([64, 128, 256], [1.0, 0.5])


def test_rate_fit_drops_nonpositive_errors():
    fit = inference_service.convergence_rate_fit([64, 128, 256, 512], [0.0, 1 / 128, 1 / 256, 1 / 512])
    assert fit.points == 3
    assert fit.slope == pytest.approx(-1.0)


def test_normality_of_constant_samples():
    report = inference_service.normality_diagnostics(np.zeros(40))
    assert report.variance == 0.0
    assert report.ks_distance == pytest.approx(0.5)
    assert np.isnan(report.skewness)


def test_normality_of_gaussian_samples():
    x = np.random.default_rng(0).standard_normal(5000)
    report = inference_service.normality_diagnostics(x)
    assert report.variance == pytest.approx(1.0, abs=0.1)
    assert report.ks_distance < 0.03
    assert abs(report.excess_kurtosis) < 0.3


def test_normality_needs_thirty_samples():
    with pytest.raises(ArgumentError):
        inference_service.normality_diagnostics(np.zeros(10))


@pytest.mark.slow
def test_feasible_statistic_has_unit_variance():
    space = SpaceSpec.l2(256)
    S = SemigroupSpec.nilpotent_shift()
    vol = VolModel.constant(hilbert_core.kernel_operator(space, lambda x, y: np.exp(-((x - y) ** 2) / 0.08)))
    B = RankOneTestTensor.square(hilbert_core.indicator(space, 0.0, 0.5))
    report = inference_service.coverage_experiment(vol, S, B, [256], 1000, 0.95, seed_base=20240611, threads=4)
    values = report.diagnostics["t_stats"]["256"]
    assert 0.85 <= np.var(values) <= 1.15
    assert 0.92 <= report.coverage[0] <= 0.98
