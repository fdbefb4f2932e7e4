import numpy as np
import pytest
from hypothesis import given, settings as hyp_settings, strategies as st
from hypothesis.extra.numpy import arrays

from services.errors import ArgumentError, WindowError
from services.estimators import PairingSet, variation_estimators
from services.hilbert_core import RankOneTestTensor, SpaceSpec, hilbert_core
from services.semigroups import SemigroupSpec, semigroup_service
from services.simulation import PathSample, SimConfig, TerminalWeight, VolModel, simulation_service

IDENTITY = SemigroupSpec.identity()


@pytest.fixture
def hand_path():
    """Increments (1, 0), (0, 2), (2, 0) on L2(0, 1) with two cells, dt = 1/3."""
    space = SpaceSpec.l2(2)
    values = [[0.0, 0.0], [1.0, 0.0], [1.0, 2.0], [3.0, 2.0]]
    return PathSample(space, values, 1.0 / 3.0, IDENTITY)


@pytest.fixture
def shift_path():
    space = SpaceSpec.l2(32)
    S = SemigroupSpec.nilpotent_shift()
    vol = VolModel.constant(hilbert_core.kernel_operator(space, lambda x, y: np.exp(-((x - y) ** 2) / 0.08)))
    path = simulation_service.simulate_mild(vol, S, SimConfig(n=16, substeps=2, seed=4))
    return path, S, vol


# ── Increments and covariations ────────────────────────────────


def test_adjusted_increments_vanish_on_a_noise_free_transport():
    space = SpaceSpec.l2(8)
    S = SemigroupSpec.nilpotent_shift()
    y0 = np.arange(1.0, 9.0)
    values = [semigroup_service.apply_array(S, i / 8, y0, space) for i in range(5)]
    path = PathSample(space, values, 1.0 / 8, S)
    assert np.allclose(variation_estimators.adjusted_increments(path, S).values, 0.0)
    assert not np.allclose(variation_estimators.raw_increments(path).values, 0.0)


def test_frozen_rank_one_adjusted_increments_are_scaled_copies_of_x(l2):
    X = hilbert_core.project_function(l2, lambda x: np.sin(3.0 * x))
    vol = VolModel.rank_one(X, None)
    path = simulation_service.simulate_mild(vol, IDENTITY, SimConfig(n=8, substeps=2, seed=3))
    xi = np.random.default_rng(3).standard_normal((16, 1))[:, 0]
    beta = np.sqrt(1.0 / 16) * (xi[0::2] + xi[1::2])
    D = variation_estimators.adjusted_increments(path, IDENTITY).values
    assert np.allclose(D, beta[:, None] * X.coeffs[None, :], atol=1e-12)


def test_transported_rank_one_adjusted_increments_follow_the_shift():
    space = SpaceSpec.l2(8)
    S = SemigroupSpec.nilpotent_shift()
    X = hilbert_core.project_function(space, lambda x: 1.0 + x)
    vol = VolModel.rank_one(X, S)
    path = simulation_service.simulate_mild(vol, S, SimConfig(n=8, seed=5))
    xi = np.random.default_rng(5).standard_normal((8, 1))[:, 0]
    D = variation_estimators.adjusted_increments(path, S).values
    for i in range(1, 9):
        expected = np.sqrt(1.0 / 8) * xi[i - 1] * semigroup_service.apply_array(S, i / 8, X.coeffs, space)
        assert np.allclose(D[i - 1], expected, atol=1e-12)


def test_sarcv_equals_rv_under_identity(shift_path):
    path, _, _ = shift_path
    sarcv = variation_estimators.sarcv(path, IDENTITY)
    rv = variation_estimators.rv(path)
    assert np.array_equal(sarcv.kernel, rv.kernel)


def test_sarcv_is_symmetric_psd(shift_path):
    path, S, _ = shift_path
    est = variation_estimators.sarcv(path, S)
    assert np.allclose(est.kernel, est.kernel.T)
    assert hilbert_core.min_eigenvalue(est) > -1e-10


def test_sarcv_window_is_cumulative(shift_path):
    path, S, _ = shift_path
    half = variation_estimators.sarcv(path, S, 0.5)
    rest = variation_estimators.sarcv(path, S, 1.0, start=0.5)
    full = variation_estimators.sarcv(path, S)
    assert np.allclose((half + rest).kernel, full.kernel)


def test_window_argument_checks(shift_path):
    path, S, _ = shift_path
    with pytest.raises(ArgumentError):
        variation_estimators.sarcv(path, S, 2.0)
    with pytest.raises(ArgumentError):
        variation_estimators.sarcv(path, S, 0.25, start=0.5)


def test_sarcv_qform_matches_the_operator_pairing(shift_path):
    path, S, _ = shift_path
    h = hilbert_core.indicator(path.space, 0.0, 0.5)
    g = hilbert_core.indicator(path.space, 0.25, 1.0)
    B = RankOneTestTensor.of(h, g)
    assert variation_estimators.sarcv_qform(path, S, B) == pytest.approx(
        hilbert_core.pair(variation_estimators.sarcv(path, S), B)
    )
    assert variation_estimators.rv_qform(path, B) == pytest.approx(hilbert_core.pair(variation_estimators.rv(path), B))


# ── Multipower variations ──────────────────────────────────────


def test_sampv_order_two_is_sarcv(shift_path):
    path, S, _ = shift_path
    h = hilbert_core.indicator(path.space, 0.1, 0.6)
    g = hilbert_core.constant(path.space)
    assert variation_estimators.sampv_qform(path, S, [2], [h, g]) == pytest.approx(
        variation_estimators.sarcv_qform(path, S, RankOneTestTensor.of(h, g))
    )


def test_sampv_by_hand(hand_path):
    h = hilbert_core.constant(hand_path.space)
    # <D_i, h> = 0.5, 1, 1 so c_i = 0.25, 1, 1
    assert variation_estimators.sampv_qform(hand_path, IDENTITY, [2], [h, h]) == pytest.approx(2.25)
    assert variation_estimators.sampv_qform(hand_path, IDENTITY, [4], [h] * 4) == pytest.approx(2.0625)
    assert variation_estimators.sampv_qform(hand_path, IDENTITY, [2, 2], [h] * 4) == pytest.approx(1.25)
    assert variation_estimators.sampv_qform(hand_path, IDENTITY, [1, 1, 1], [h] * 3) == pytest.approx(0.5)


def test_gamma_hat_by_hand(hand_path):
    B = RankOneTestTensor.square(hilbert_core.constant(hand_path.space))
    assert variation_estimators.gamma_hat_qform(hand_path, IDENTITY, B) == pytest.approx((2.0625 - 1.25) * 3.0)


def test_gamma_hat_is_sampv_four_minus_sampv_two_two(shift_path):
    path, S, _ = shift_path
    h = hilbert_core.indicator(path.space, 0.2, 0.7)
    sampv4 = variation_estimators.sampv_qform(path, S, [4], [h] * 4)
    sampv22 = variation_estimators.sampv_qform(path, S, [2, 2], [h] * 4)
    gamma = variation_estimators.gamma_hat_qform(path, S, RankOneTestTensor.square(h))
    assert gamma == pytest.approx((sampv4 - sampv22) / path.dt)


def test_sampv_argument_checks(hand_path):
    h = hilbert_core.constant(hand_path.space)
    with pytest.raises(ArgumentError):
        variation_estimators.sampv_qform(hand_path, IDENTITY, [2, 2], [h] * 3)
    with pytest.raises(ArgumentError):
        variation_estimators.sampv_qform(hand_path, IDENTITY, [0], [])
    with pytest.raises(WindowError):
        variation_estimators.sampv_qform(hand_path, IDENTITY, [1, 1, 1, 1], [h] * 4)


def test_gamma_hat_needs_two_increments(hand_path):
    B = RankOneTestTensor.square(hilbert_core.constant(hand_path.space))
    with pytest.raises(WindowError):
        variation_estimators.gamma_hat_qform(hand_path, IDENTITY, B, t=1.0 / 3.0)


@hyp_settings(max_examples=60, deadline=None)
@given(values=arrays(np.float64, (6, 3), elements=st.floats(-10.0, 10.0, allow_nan=False)))
def test_gamma_hat_is_a_sum_of_squares(values):
    space = SpaceSpec.l2(3)
    path = PathSample(space, values, 0.2, IDENTITY)
    B = RankOneTestTensor.square(hilbert_core.indicator(space, 0.0, 0.6))
    c = variation_estimators.functional_terms(variation_estimators.raw_increments(path).values, B)
    expected = (np.sum(np.diff(c) ** 2) + c[0] ** 2 + c[-1] ** 2) / (2.0 * path.dt)
    gamma = variation_estimators.gamma_hat_qform(path, IDENTITY, B)
    assert gamma >= -1e-9 * (1.0 + expected)
    assert gamma == pytest.approx(expected, rel=1e-9, abs=1e-9)


# ── Gaussian moments ───────────────────────────────────────────


@pytest.mark.parametrize("m, count", [(1, 0), (2, 1), (3, 0), (4, 3), (6, 15)])
def test_pairing_counts(m, count):
    assert len(PairingSet.of(m).pairings) == count


def test_rho_of_order_four_is_three_squared_variances(l2):
    Sigma = hilbert_core.kernel_operator(l2, lambda x, y: np.exp(-abs(x - y)))
    h = hilbert_core.indicator(l2, 0.2, 0.9)
    q = hilbert_core.quad_form(Sigma, h, h)
    assert variation_estimators.rho_qform(Sigma, 4, [h] * 4) == pytest.approx(3.0 * q**2)
    assert variation_estimators.rho_qform(Sigma, 3, [h] * 3) == 0.0
    with pytest.raises(ArgumentError):
        variation_estimators.rho_qform(Sigma, 4, [h] * 3)


def test_theoretical_gamma_for_constant_volatility(l2):
    vol = VolModel.constant(hilbert_core.kernel_operator(l2, lambda x, y: np.exp(-((x - y) ** 2))))
    h = hilbert_core.indicator(l2, 0.0, 0.5)
    q = hilbert_core.quad_form(simulation_service.covariance(vol, 0.0), h, h)
    gamma = variation_estimators.gamma_theoretical_qform(vol, RankOneTestTensor.square(h), 0.7)
    assert gamma == pytest.approx(2.0 * 0.7 * q**2)


def test_theoretical_gamma_under_time_modulation(l2):
    sigma = hilbert_core.kernel_operator(l2, lambda x, y: np.exp(-((x - y) ** 2)))
    vol = VolModel.constant(sigma).modulated(lambda s: 1.0 + s, "linear")
    h = hilbert_core.indicator(l2, 0.0, 0.5)
    q = hilbert_core.quad_form(simulation_service.covariance(vol, 0.0), h, h)
    # 2 int_0^1 <Sigma_s h, h>^2 ds with Sigma_s = (1 + s)^2 Sigma_0
    gamma = variation_estimators.gamma_theoretical_qform(vol, RankOneTestTensor.square(h), 1.0)
    assert gamma == pytest.approx(2.0 * q**2 * 31.0 / 5.0, rel=1e-6)


def test_moment_targets_for_constant_volatility(l2):
    vol = VolModel.constant(hilbert_core.kernel_operator(l2, lambda x, y: np.exp(-abs(x - y))))
    Sigma = simulation_service.covariance(vol, 0.0)
    h = hilbert_core.indicator(l2, 0.0, 0.5)
    g = hilbert_core.indicator(l2, 0.3, 1.0)
    qh, qg = hilbert_core.quad_form(Sigma, h, h), hilbert_core.quad_form(Sigma, g, g)
    targets = variation_estimators.moment_targets(vol, h, g, 0.8)
    assert targets["sampv4"] == pytest.approx(0.8 * 3.0 * qh**2)
    assert targets["sampv22"] == pytest.approx(0.8 * qh * qg)
    assert targets["gamma_hat"] == pytest.approx(0.8 * 2.0 * qh**2)
    assert targets["sampv3"] == 0.0


def test_moment_targets_integrate_the_modulation(l2):
    vol = VolModel.constant(hilbert_core.identity_operator(l2)).modulated(lambda s: 1.0 + s, "linear")
    h = hilbert_core.indicator(l2, 0.0, 0.5)
    q = hilbert_core.quad_form(simulation_service.covariance(vol, 0.0), h, h)
    targets = variation_estimators.moment_targets(vol, h, h, 1.0)
    assert targets["sampv4"] == pytest.approx(3.0 * q**2 * 31.0 / 5.0, rel=1e-6)
    assert targets["sampv22"] == pytest.approx(q**2 * 31.0 / 5.0, rel=1e-6)


# ── Conditional covariance ─────────────────────────────────────


def test_conditional_estimator_under_identity_is_windowed_sarcv(shift_path):
    path, _, _ = shift_path
    cond = variation_estimators.conditional_cov_estimator(path, IDENTITY, 0.5, 1.0)
    windowed = variation_estimators.sarcv(path, IDENTITY, 1.0, start=0.5)
    assert np.allclose(cond.kernel, windowed.kernel)


def test_conditional_estimator_rejects_reversed_window(shift_path):
    path, S, _ = shift_path
    with pytest.raises(ArgumentError):
        variation_estimators.conditional_cov_estimator(path, S, 0.75, 0.5)


# ── Monte Carlo limits ─────────────────────────────────────────


@pytest.mark.slow
def test_power_variations_sit_within_ten_percent_of_their_limits():
    space = SpaceSpec.l2(32)
    vol = VolModel.constant(hilbert_core.kernel_operator(space, lambda x, y: np.exp(-((x - y) ** 2) / 0.08)))
    h = hilbert_core.indicator(space, 0.0, 0.5)
    targets = variation_estimators.moment_targets(vol, h, h, 1.0)
    draws = {name: [] for name in targets}
    for seed in range(500):
        path = simulation_service.simulate_mild(vol, IDENTITY, SimConfig(n=512, seed=seed))
        for name, value in variation_estimators.moment_statistics(path, IDENTITY, h, h).items():
            draws[name].append(value)
    for name in ("gamma_hat", "sampv4", "sampv22"):
        assert np.mean(draws[name]) == pytest.approx(targets[name], rel=0.10), name
    odd = np.asarray(draws["sampv3"])
    assert abs(odd.mean()) <= 3.0 * odd.std(ddof=1) / np.sqrt(len(odd))


@pytest.mark.slow
def test_conditional_estimator_error_halves_under_the_nilpotent_shift():
    space = SpaceSpec.l2(256)
    S = SemigroupSpec.nilpotent_shift()
    vol = VolModel.constant(hilbert_core.kernel_operator(space, lambda x, y: np.exp(-((x - y) ** 2) / 0.08)))
    target = simulation_service.integrated_volatility(vol, 1.0, TerminalWeight(1.0, S), lower=0.5)
    errors = {16: [], 256: []}
    for seed in range(60):
        for n in errors:
            substeps = simulation_service.commensurate_substeps(vol, S, n)
            path = simulation_service.simulate_mild(vol, S, SimConfig(n=n, substeps=substeps, seed=seed))
            est = variation_estimators.conditional_cov_estimator(path, S, 0.5, 1.0)
            errors[n].append(hilbert_core.hs_norm(est - target))
    assert np.mean(errors[256]) <= 0.5 * np.mean(errors[16])
