import numpy as np
import pytest
from hypothesis import given, settings as hyp_settings, strategies as st

from services.errors import ArgumentError, DimensionError, DomainError, GridError
from services.hilbert_core import GridFunction, SpaceSpec, hilbert_core
from services.semigroups import SemigroupSpec, semigroup_service
from services.simulation import VolModel

SEMIGROUPS_AND_SPACES = [
    (SemigroupSpec.identity(), SpaceSpec.l2(12)),
    (SemigroupSpec.nilpotent_shift(), SpaceSpec.l2(12, 0.0, 2.0)),
    (SemigroupSpec.sobolev_shift(), SpaceSpec.h1(12)),
    (SemigroupSpec.heat(0.5), SpaceSpec.spectral(12)),
]


def test_heat_damps_each_mode(spectral):
    e1 = hilbert_core.basis_vector(spectral, 1)
    out = semigroup_service.apply(SemigroupSpec.heat(), 0.1, e1)
    expected = np.zeros(spectral.J)
    expected[0] = np.exp(-(np.pi**2) * 0.1)
    assert np.allclose(out.coeffs, expected)


@pytest.mark.parametrize("S, space", SEMIGROUPS_AND_SPACES)
def test_adjoint_duality(S, space):
    rng = np.random.default_rng(2)
    f = GridFunction(space, rng.standard_normal(space.J))
    g = GridFunction(space, rng.standard_normal(space.J))
    t = 3 * space.step
    lhs = hilbert_core.inner(semigroup_service.apply(S, t, f), g)
    rhs = hilbert_core.inner(f, semigroup_service.apply_adjoint(S, t, g))
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("S, space", SEMIGROUPS_AND_SPACES)
@hyp_settings(max_examples=50, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**32 - 1), k=st.integers(min_value=0, max_value=12))
def test_adjoint_duality_on_random_draws(S, space, seed, k):
    rng = np.random.default_rng(seed)
    f = GridFunction(space, rng.standard_normal(space.J))
    g = GridFunction(space, rng.standard_normal(space.J))
    t = k * space.step
    lhs = hilbert_core.inner(semigroup_service.apply(S, t, f), g)
    rhs = hilbert_core.inner(f, semigroup_service.apply_adjoint(S, t, g))
    assert lhs == pytest.approx(rhs, rel=1e-9, abs=1e-9)


@pytest.mark.parametrize(
    "S, space", [(SemigroupSpec.heat(0.5), SpaceSpec.spectral(12)), (SemigroupSpec.nilpotent_shift(), SpaceSpec.l2(12))]
)
@hyp_settings(max_examples=50, deadline=None)
@given(seed=st.integers(min_value=0, max_value=2**32 - 1), k=st.integers(min_value=0, max_value=12))
def test_semigroup_is_a_contraction(S, space, seed, k):
    f = GridFunction(space, np.random.default_rng(seed).standard_normal(space.J))
    out = semigroup_service.apply(S, k * space.step, f)
    assert hilbert_core.norm(out) <= hilbert_core.norm(f) * (1 + 1e-12)


@pytest.mark.parametrize("S, space", SEMIGROUPS_AND_SPACES)
def test_semigroup_property(S, space):
    f = GridFunction(space, np.random.default_rng(4).standard_normal(space.J))
    s, t = 2 * space.step, 3 * space.step
    twice = semigroup_service.apply(S, s, semigroup_service.apply(S, t, f))
    once = semigroup_service.apply(S, s + t, f)
    assert np.allclose(twice.coeffs, once.coeffs, atol=1e-10)


def test_time_zero_is_identity(h1):
    f = hilbert_core.project_function(h1, np.cos)
    out = semigroup_service.apply(SemigroupSpec.sobolev_shift(), 0.0, f)
    assert np.array_equal(out.coeffs, f.coeffs)


def test_nilpotent_shift_moves_cells_left_and_vanishes():
    space = SpaceSpec.l2(4)
    f = GridFunction(space, [1.0, 2.0, 3.0, 4.0])
    S = SemigroupSpec.nilpotent_shift()
    assert semigroup_service.apply(S, 0.25, f).coeffs.tolist() == [2.0, 3.0, 4.0, 0.0]
    assert semigroup_service.apply(S, 1.0, f).coeffs.tolist() == [0.0, 0.0, 0.0, 0.0]


def test_sobolev_adjoint_moves_evaluation_functionals(h1):
    S = SemigroupSpec.sobolev_shift()
    moved = semigroup_service.apply_adjoint(S, 0.2, hilbert_core.evaluation_functional(h1, 0.3))
    assert np.allclose(moved.coeffs, hilbert_core.evaluation_functional(h1, 0.5).coeffs)


def test_sobolev_adjoint_piles_up_at_the_right_end(h1):
    S = SemigroupSpec.sobolev_shift()
    moved = semigroup_service.apply_adjoint(S, 0.3, hilbert_core.evaluation_functional(h1, 0.9))
    assert np.allclose(moved.coeffs, hilbert_core.evaluation_functional(h1, 1.0).coeffs)


def test_sobolev_shift_acts_on_node_values(h1):
    f = hilbert_core.project_function(h1, lambda x: x**2)
    out = semigroup_service.apply(SemigroupSpec.sobolev_shift(), 0.2, f)
    expected = np.minimum(h1.points + 0.2, 1.0) ** 2
    assert np.allclose(h1.dual(out.coeffs), expected)


def test_errors(l2, h1):
    f = hilbert_core.constant(l2)
    with pytest.raises(DomainError):
        semigroup_service.apply(SemigroupSpec.nilpotent_shift(), -0.1, f)
    with pytest.raises(GridError):
        semigroup_service.apply(SemigroupSpec.nilpotent_shift(), 0.05, f)
    with pytest.raises(DimensionError):
        semigroup_service.apply(SemigroupSpec.nilpotent_shift(), 0.1, hilbert_core.constant(h1))
    with pytest.raises(DomainError):
        SemigroupSpec.heat(0.0)
    with pytest.raises(ArgumentError):
        SemigroupSpec("wave")


# ── Favard probes ──────────────────────────────────────────────


def test_favard_probe_of_indicator_under_nilpotent_adjoint():
    space = SpaceSpec.l2(100)
    f = hilbert_core.indicator(space, 0.0, 0.5)
    probe = semigroup_service.favard_probe(
        SemigroupSpec.nilpotent_shift(), 0.5, f, [0.01, 0.05, 0.1, 0.5], adjoint=True
    )
    assert probe == pytest.approx(np.sqrt(2.0))


def test_favard_probe_of_evaluation_functional_under_sobolev_adjoint():
    space = SpaceSpec.h1(20)
    dx = hilbert_core.evaluation_functional(space, 0.2)
    S = SemigroupSpec.sobolev_shift()
    coarse = semigroup_service.favard_probe(S, 0.5, dx, [0.1, 0.2, 0.4], adjoint=True)
    fine = semigroup_service.favard_probe(S, 0.5, dx, [0.05, 0.1, 0.2, 0.4], adjoint=True)
    assert coarse == pytest.approx(1.0)
    assert fine == pytest.approx(1.0)
    rough = [semigroup_service.favard_probe(S, 0.6, dx, [t], adjoint=True) for t in (0.4, 0.2, 0.1, 0.05)]
    assert all(b > a for a, b in zip(rough, rough[1:]))


def test_favard_probe_argument_checks(l2):
    f = hilbert_core.constant(l2)
    S = SemigroupSpec.nilpotent_shift()
    with pytest.raises(DomainError):
        semigroup_service.favard_probe(S, 0.0, f, [0.1])
    with pytest.raises(DomainError):
        semigroup_service.favard_probe(S, 1.5, f, [0.1])
    with pytest.raises(ArgumentError):
        semigroup_service.favard_probe(S, 0.5, f, [])
    with pytest.raises(DomainError):
        semigroup_service.favard_probe(S, 0.5, f, [0.0])


# ── Regularity index ───────────────────────────────────────────


@pytest.mark.parametrize(
    "exponent, case",
    [(1.0, "i"), (0.76, "i"), (0.75, "ii"), (0.7, "ii"), (0.52, "iii"), (0.5, "iii"), (0.47, "iii"), (0.3, "iv")],
)
def test_classify(exponent, case):
    assert semigroup_service.classify(exponent) == case


def test_transported_indicator_sits_on_the_half_boundary():
    space = SpaceSpec.l2(96, 0.0, 3.0)
    S = SemigroupSpec.nilpotent_shift()
    vol = VolModel.rank_one(hilbert_core.indicator(space, 1.0, 2.0), S)
    t_grid = [k * space.step for k in (1, 2, 4, 8)]
    report = semigroup_service.vol_regularity_index(S, vol, t_grid, horizon=0.5)
    assert report.exponent == pytest.approx(0.5, abs=1e-6)
    assert report.case == "iii"
    assert report.r_squared == pytest.approx(1.0)


def test_smooth_heat_volatility_is_case_i():
    space = SpaceSpec.spectral(64)
    vol = VolModel.heat_diagonal(space, c=1.0, r=2.0)
    report = semigroup_service.vol_regularity_index(SemigroupSpec.heat(), vol, np.geomspace(1e-4, 1e-2, 6))
    assert report.exponent >= 0.75
    assert report.case == "i"


def test_identity_semigroup_never_moves_volatility(l2):
    vol = VolModel.rank_one(hilbert_core.constant(l2), None)
    report = semigroup_service.vol_regularity_index(SemigroupSpec.identity(), vol, [0.1, 0.2])
    assert report.exponent == float("inf")
    assert report.case == "i"
    assert report.to_dict()["exponent"] == "inf"


def test_quadrature_rule_integrates_quadratics_exactly():
    nodes, weights = semigroup_service.quadrature_rule(0.0, 1.0)
    assert np.dot(weights, nodes**2) == pytest.approx(1.0 / 3.0)
    nodes, weights = semigroup_service.quadrature_rule(0.25, 0.75, step=0.125)
    assert nodes.tolist() == [0.25, 0.375, 0.5, 0.625, 0.75]
    assert weights.sum() == pytest.approx(0.5)
    with pytest.raises(GridError):
        semigroup_service.quadrature_rule(0.0, 0.3, step=0.125)
