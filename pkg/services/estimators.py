"""
SPDE Volatility Lab - Variation Estimators
Semigroup-adjusted and raw increments, realised covariations (SARCV, RV),
multipower variations as multilinear forms, Gaussian tensor moments over
pairings, the asymptotic-variance form and the conditional covariance.

Higher tensors are never materialized: SAMPV and Gamma-hat exist only as
forms evaluated against rank-one test tensors.
"""

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from services.errors import ArgumentError, DimensionError, DomainError, WindowError
from services.hilbert_core import GridFunction, HSOperator, RankOneTestTensor, SpaceSpec, hilbert_core
from services.semigroups import SemigroupSpec, semigroup_service
from services.simulation import PathSample, VolModel, simulation_service

logger = logging.getLogger("Estimators")

_WINDOW_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class IncrementSeries:
    """Rows are the increments (adjusted or raw) of a path."""

    space: SpaceSpec
    values: np.ndarray
    adjusted: bool
    dt: float

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def increments(self) -> list[GridFunction]:
        return [GridFunction(self.space, row) for row in self.values]


@dataclass(frozen=True)
class PairingSet:
    """All perfect pairings of {1..m}; empty for odd m."""

    m: int
    pairings: tuple

    @classmethod
    def of(cls, m: int) -> "PairingSet":
        if m < 1:
            raise ArgumentError(f"pairing order must be positive, got {m}")
        if m % 2:
            return cls(m, ())
        return cls(m, tuple(_pairings(tuple(range(1, m + 1)))))


def _pairings(items: tuple):
    if not items:
        yield ()
        return
    first, rest = items[0], items[1:]
    for i, partner in enumerate(rest):
        remaining = rest[:i] + rest[i + 1 :]
        for tail in _pairings(remaining):
            yield ((first, partner),) + tail


class VariationEstimators:
    """Realised variations of discretely observed mild solutions."""

    # ── Increments ─────────────────────────────────────────────

    def adjusted_increments(self, path: PathSample, S: SemigroupSpec) -> IncrementSeries:
        """Y_{i dt} - S(dt) Y_{(i-1) dt}."""
        Y = path.values
        transported = semigroup_service.apply_array(S, path.dt, Y[:-1], path.space)
        return IncrementSeries(path.space, Y[1:] - transported, True, path.dt)

    def raw_increments(self, path: PathSample) -> IncrementSeries:
        return IncrementSeries(path.space, np.diff(path.values, axis=0), False, path.dt)

    def window(self, path: PathSample, t: float | None, start: float = 0.0) -> tuple[int, int]:
        """Increment index range (i0, i1] covering (start, t]."""
        if t is None:
            t = path.horizon
        if start < 0 or t < 0:
            raise DomainError("window times must be nonnegative")
        if start > t:
            raise ArgumentError(f"window start {start} after end {t}")
        if t > path.horizon * (1 + _WINDOW_TOL):
            raise ArgumentError(f"t={t} beyond the observed horizon {path.horizon}")
        i0 = int(np.floor(start / path.dt + _WINDOW_TOL))
        i1 = min(int(np.floor(t / path.dt + _WINDOW_TOL)), path.n)
        return i0, i1

    def _increments(self, path: PathSample, S: SemigroupSpec | None, t, start=0.0) -> np.ndarray:
        i0, i1 = self.window(path, t, start)
        series = self.raw_increments(path) if S is None else self.adjusted_increments(path, S)
        return series.values[i0:i1]

    # ── Realised covariations ──────────────────────────────────

    def sarcv(self, path: PathSample, S: SemigroupSpec, t: float | None = None, start: float = 0.0) -> HSOperator:
        D = self._increments(path, S, t, start)
        return HSOperator(path.space, D.T @ D, symmetric=True)

    def rv(self, path: PathSample, t: float | None = None, start: float = 0.0) -> HSOperator:
        D = self._increments(path, None, t, start)
        return HSOperator(path.space, D.T @ D, symmetric=True)

    def functional_terms(self, increments: np.ndarray, B: RankOneTestTensor) -> np.ndarray:
        """c_i = <Delta_i^{(x)2}, B>_HS for every increment row."""
        if B.space.J != increments.shape[-1]:
            raise DimensionError("test tensor and increments live on different spaces")
        c = np.zeros(increments.shape[0])
        for mu, h, g in B.terms():
            c += mu * hilbert_core.inner_many(increments, h) * hilbert_core.inner_many(increments, g)
        return c

    def sarcv_qform(self, path: PathSample, S: SemigroupSpec | None, B: RankOneTestTensor, t=None) -> float:
        """<SARCV_t, B> (or <RV_t, B> when S is None) without forming the operator."""
        return float(self.functional_terms(self._increments(path, S, t), B).sum())

    def rv_qform(self, path: PathSample, B: RankOneTestTensor, t=None) -> float:
        return self.sarcv_qform(path, None, B, t)

    # ── Multipower variations and tensor moments ───────────────

    def sampv_qform(
        self,
        path: PathSample,
        S: SemigroupSpec,
        orders: Sequence[int],
        test_factors,
        t: float | None = None,
    ) -> float:
        """<SAMPV_t(m_1..m_k), h_1 x ... x h_m> as sum_i prod_j prod_l <D_{i+j-1}, h_{j,l}>."""
        orders = [int(m) for m in orders]
        if not orders or min(orders) < 1:
            raise ArgumentError(f"orders must be positive, got {orders}")
        factors = _flatten_factors(test_factors)
        if len(factors) != sum(orders):
            raise ArgumentError(f"orders {orders} need {sum(orders)} factors, got {len(factors)}")
        D = self._increments(path, S, t)
        k = len(orders)
        windows = D.shape[0] - k + 1
        if windows < 1:
            raise WindowError(f"{D.shape[0]} increments cannot hold {k} consecutive blocks")
        P = np.column_stack([hilbert_core.inner_many(D, h) for h in factors])
        total = np.ones(windows)
        col = 0
        for j, m in enumerate(orders):
            block = np.prod(P[:, col : col + m], axis=1)
            total *= block[j : j + windows]
            col += m
        return float(total.sum())

    def rho_qform(self, Sigma: HSOperator, m: int, factors: Sequence[GridFunction]) -> float:
        """sum over pairings p of prod_{(x,y) in p} <Sigma h_x, h_y>."""
        factors = list(factors)
        if len(factors) != m:
            raise ArgumentError(f"order {m} needs {m} factors, got {len(factors)}")
        if m % 2:
            return 0.0
        table = [[hilbert_core.quad_form(Sigma, hx, hy) for hy in factors] for hx in factors]
        total = 0.0
        for pairing in PairingSet.of(m).pairings:
            term = 1.0
            for x, y in pairing:
                term *= table[x - 1][y - 1]
            total += term
        return float(total)

    # ── Asymptotic variance ────────────────────────────────────

    def gamma_hat_qform(self, path: PathSample, S: SemigroupSpec, B: RankOneTestTensor, t=None) -> float:
        """dt^{-1} [sum c_i^2 - sum c_i c_{i+1}], c_i = <Delta~_i^{(x)2}, B>."""
        c = self.functional_terms(self._increments(path, S, t), B)
        return self._gamma_from_terms(c, path.dt)

    def _gamma_from_terms(self, c: np.ndarray, dt: float) -> float:
        if len(c) < 2:
            raise WindowError(f"need at least 2 increments, got {len(c)}")
        return float((np.dot(c, c) - np.dot(c[:-1], c[1:])) / dt)

    def gamma_theoretical_qform(self, vol: VolModel, B: RankOneTestTensor, t: float) -> float:
        """<Gamma_t B, B> with Gamma_t B = int_0^t Sigma_s (B + B*) Sigma_s ds."""
        if B.space != vol.space:
            raise DimensionError("test tensor and volatility live on different spaces")
        if t < 0:
            raise DomainError(f"t must be nonnegative, got {t}")
        B_op = hilbert_core.as_operator(B)
        B_sym = B_op + hilbert_core.adjoint(B_op)

        def integrand(s: float) -> float:
            Sigma = simulation_service.covariance(vol, s)
            inner = hilbert_core.compose(Sigma, hilbert_core.compose(B_sym, Sigma))
            return hilbert_core.pair(inner, B)

        if t == 0:
            return 0.0
        if vol.is_time_constant:
            return t * integrand(0.0)
        nodes, weights = semigroup_service.quadrature_rule(0.0, t, vol.time_step())
        return float(sum(w * integrand(float(s)) for s, w in zip(nodes, weights)))

    # ── Power-variation limits ─────────────────────────────────

    def moment_statistics(self, path: PathSample, S: SemigroupSpec, h: GridFunction, g: GridFunction, t=None) -> dict:
        """Scaled power variations whose limits are given by moment_targets."""
        dt = path.dt
        return {
            "sampv4": self.sampv_qform(path, S, [4], [h] * 4, t) / dt,
            "sampv22": self.sampv_qform(path, S, [2, 2], [h, h, g, g], t) / dt,
            "sampv3": self.sampv_qform(path, S, [3], [h] * 3, t) / np.sqrt(dt),
            "gamma_hat": self.gamma_hat_qform(path, S, RankOneTestTensor.square(h), t),
        }

    def moment_targets(self, vol: VolModel, h: GridFunction, g: GridFunction, t: float) -> dict:
        """int_0^t rho_{Sigma_s}(4)(h^4) ds, int_0^t <Sigma_s h, h><Sigma_s g, g> ds and <Gamma_t h(x)h, h(x)h>."""
        if h.space != vol.space or g.space != vol.space:
            raise DimensionError("test factors and volatility live on different spaces")

        def integrand(s: float) -> np.ndarray:
            Sigma = simulation_service.covariance(vol, s)
            qh, qg = hilbert_core.quad_form(Sigma, h, h), hilbert_core.quad_form(Sigma, g, g)
            return np.array([self.rho_qform(Sigma, 4, [h] * 4), qh * qg])

        if t <= 0:
            sampv4 = sampv22 = 0.0
        elif vol.is_time_constant:
            sampv4, sampv22 = t * integrand(0.0)
        else:
            nodes, weights = semigroup_service.quadrature_rule(0.0, t, vol.time_step())
            sampv4, sampv22 = sum(w * integrand(float(s)) for s, w in zip(nodes, weights))
        return {
            "sampv4": float(sampv4),
            "sampv22": float(sampv22),
            "sampv3": 0.0,
            "gamma_hat": self.gamma_theoretical_qform(vol, RankOneTestTensor.square(h), t),
        }

    # ── Conditional covariance ─────────────────────────────────

    def conditional_cov_estimator(self, path: PathSample, S: SemigroupSpec, U: float, T: float) -> HSOperator:
        """sum over i in (U/dt, T/dt] of (S(T - i dt) Y_i - S(T - (i-1) dt) Y_{i-1})^{(x)2}."""
        if U > T:
            raise ArgumentError(f"U={U} exceeds T={T}")
        i0, i1 = self.window(path, T, U)
        transported = np.vstack([
            semigroup_service.apply_array(S, max(T - i * path.dt, 0.0), path.values[i], path.space)
            for i in range(i0, i1 + 1)
        ])
        D = np.diff(transported, axis=0)
        return HSOperator(path.space, D.T @ D, symmetric=True)


def _flatten_factors(test_factors) -> list[GridFunction]:
    if isinstance(test_factors, RankOneTestTensor):
        return list(test_factors.factors)
    factors = []
    for item in test_factors:
        if isinstance(item, RankOneTestTensor):
            factors.extend(item.factors)
        else:
            factors.append(item)
    if factors:
        space = factors[0].space
        if any(f.space != space for f in factors):
            raise DimensionError("test factors must share one space")
    return factors


variation_estimators = VariationEstimators()
