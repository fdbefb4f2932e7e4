"""
SPDE Volatility Lab - Discrete Sampling Service
Fully discrete space-time pipelines: kernel interpolation in H1(0,1) from
node samples, the projected case (a)/(b) estimators, pointwise statistics,
and the local-average estimator for the heat equation.
"""

import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import linalg, stats

from config import settings
from services.errors import ArgumentError, ConfigError, DimensionError, DomainError, OutOfRangeError
from services.hilbert_core import H1, L2, SPECTRAL, GridFunction, HSOperator, SpaceSpec
from services.simulation import PathSample

logger = logging.getLogger("DiscreteSampling")

CASE_A = "a"
CASE_B = "b"
CASE_HEAT = "heat"
CASES = (CASE_A, CASE_B, CASE_HEAT)


@dataclass(frozen=True, eq=False)
class KernelSystem:
    """K[j1][j2] = 1 + min(x_j1, x_j2) on the nodes x_j = j/n, with its inverse."""

    n: int
    nodes: np.ndarray
    K: np.ndarray
    Kinv: np.ndarray
    used_closed_form: bool
    residual: float

    @property
    def space(self) -> SpaceSpec:
        return SpaceSpec.h1(self.n)


@dataclass(frozen=True, eq=False)
class DiscreteSample:
    """Rows are times i = 0..n, columns are nodes (cases a, b) or bins (heat)."""

    values: np.ndarray
    spatial_step: float
    temporal_step: float
    case: str
    domain: tuple = (0.0, 1.0)

    def __post_init__(self):
        if self.case not in CASES:
            raise ArgumentError(f"unknown sampling case {self.case!r}")
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[0] < 1:
            raise DimensionError(f"expected an (n+1) x m array, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            raise DomainError("discrete sample has non-finite entries")
        if not (self.spatial_step > 0 and self.temporal_step > 0):
            raise DomainError("sampling steps must be positive")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0] - 1

    @property
    def m(self) -> int:
        return self.values.shape[1]


@dataclass
class PointwiseEstimate:
    """Cumulative sums of squared pointwise increments with feasible bands."""

    x: float
    times: np.ndarray
    cumulative: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    level: float
    adjusted: bool

    def to_rows(self) -> list[dict]:
        return [
            {"t": float(t), "estimate": float(v), "lower": float(lo), "upper": float(hi)}
            for t, v, lo, hi in zip(self.times, self.cumulative, self.lower, self.upper)
        ]


class DiscreteSamplingService:

    # ── Kernel system ──────────────────────────────────────────

    def kernel_inverse_closed_form(self, n: int) -> np.ndarray:
        """Tridiagonal inverse of K: -n off the diagonal, 2n inside, n at (n,n), (n^2+2n)/(n+1) at (1,1)."""
        if n < 2:
            raise ArgumentError(f"closed-form inverse needs n >= 2, got {n}")
        diag = np.full(n, 2.0 * n)
        diag[0] = 2.0 + (n**2 - 2.0) / (n + 1.0)
        diag[-1] = float(n)
        off = np.full(n - 1, -float(n))
        return np.diag(diag) + np.diag(off, 1) + np.diag(off, -1)

    def kernel_system(self, n: int) -> KernelSystem:
        return _kernel_system(int(n))

    def project_h1(self, samples, ks: KernelSystem) -> GridFunction:
        """Minimal-norm interpolant sum_j alpha_j k(x_j, .) with alpha = K^{-1} samples."""
        samples = np.asarray(samples, dtype=float)
        if samples.shape[-1] != ks.n:
            raise DimensionError(f"expected {ks.n} node samples, got {samples.shape[-1]}")
        return GridFunction(ks.space, ks.Kinv @ samples)

    # ── Sampling ───────────────────────────────────────────────

    def sample_on_grid(self, path: PathSample, case: str) -> DiscreteSample:
        """Node values Y_{i dt}(j / J) of an H1 path."""
        if case not in (CASE_A, CASE_B):
            raise ArgumentError(f"grid sampling is for cases a and b, got {case!r}")
        space = path.space
        if space.variant != H1:
            raise DimensionError(f"node sampling needs an H1 path, got {space.variant}")
        return DiscreteSample(space.dual(path.values), space.step, path.dt, case)

    def node_increments(self, data: DiscreteSample, shift: int = 0, t: float | None = None) -> np.ndarray:
        """Y_i(x_j) - Y_{i-1}(x_{min(j+shift, m)}) for the increments inside (0, t]."""
        if shift < 0:
            raise DomainError(f"shift must be nonnegative, got {shift}")
        Y = data.values
        idx = np.minimum(np.arange(data.m) + shift, data.m - 1)
        D = Y[1:] - Y[:-1][:, idx]
        return D[: self._window_end(data, t)]

    def _window_end(self, data: DiscreteSample, t: float | None) -> int:
        if t is None:
            return data.n
        if t < 0:
            raise DomainError(f"t must be nonnegative, got {t}")
        k = int(np.floor(t / data.temporal_step + 1e-9))
        if k > data.n:
            raise ArgumentError(f"t={t} beyond the observed horizon {data.n * data.temporal_step}")
        return k

    def _case_shift(self, data: DiscreteSample, case: str) -> int:
        if case == CASE_A:
            return 0
        if case == CASE_B:
            if not np.isclose(data.spatial_step, data.temporal_step, rtol=1e-9, atol=0.0):
                raise ConfigError(
                    f"case b needs equal steps, got dx={data.spatial_step} dt={data.temporal_step}"
                )
            return 1
        raise ArgumentError(f"case must be 'a' or 'b', got {case!r}")

    # ── Estimators ─────────────────────────────────────────────

    def sigma_hat_discrete(self, data: DiscreteSample, case: str, t: float | None = None) -> HSOperator:
        """sum_i (Pi_n increment_i)^{(x)2}; case b uses the shift-adjusted node increments."""
        D = self.node_increments(data, self._case_shift(data, case), t)
        ks = self.kernel_system(data.m)
        alpha = D @ ks.Kinv
        return HSOperator(ks.space, alpha.T @ alpha, symmetric=True)

    def pointwise_vol_estimate(
        self,
        data: DiscreteSample,
        x: float,
        case: str,
        adjusted: bool = True,
        level: float = 0.95,
    ) -> PointwiseEstimate:
        """Cumulative sum of squared increments at a node, with pointwise feasible bands."""
        if not 0 <= level < 1:
            raise DomainError(f"confidence level must lie in [0, 1), got {level}")
        j = self._node(data, x)
        shift = self._case_shift(data, case) if adjusted else 0
        col = data.values[:, j]
        nxt = data.values[:, min(j + shift, data.m - 1)]
        d = col[1:] - nxt[:-1]
        c = d**2
        cumulative = np.cumsum(c)
        # sum_{i<=k} c_i^2 - sum_{i<k} c_i c_{i+1}
        cross = np.concatenate([[0.0], np.cumsum(c[:-1] * c[1:])])
        var = np.cumsum(c**2) - cross
        z = float(stats.norm.ppf(0.5 + 0.5 * level))
        half = z * np.sqrt(np.maximum(var, 0.0))
        degenerate = var < settings.DEGENERACY_FLOOR
        lower = np.where(degenerate, np.nan, cumulative - half)
        upper = np.where(degenerate, np.nan, cumulative + half)
        times = data.temporal_step * np.arange(1, data.n + 1)
        return PointwiseEstimate(float(x), times, cumulative, lower, upper, level, adjusted and shift > 0)

    def _node(self, data: DiscreteSample, x: float) -> int:
        k = (x - data.domain[0]) / data.spatial_step
        if abs(k - round(k)) > 1e-9 * max(1.0, abs(k)) or not 1 <= round(k) <= data.m:
            raise OutOfRangeError(f"x={x} is not one of the {data.m} sampling nodes")
        return int(round(k)) - 1

    # ── Heat pipeline ──────────────────────────────────────────

    def bin_average_matrix(self, space: SpaceSpec, m: int) -> np.ndarray:
        """A[j, k] = average of e_k over bin j of (0, 1)."""
        if space.variant != SPECTRAL:
            raise ArgumentError("analytic bin averages need a Spectral space")
        if m < 1:
            raise OutOfRangeError(f"need at least one bin, got {m}")
        width = 1.0 / m
        edges = np.arange(m + 1) * width
        k = space.points
        integrals = np.sqrt(2.0) * (
            np.cos(np.pi * np.outer(edges[:-1], k)) - np.cos(np.pi * np.outer(edges[1:], k))
        ) / (np.pi * k)
        return integrals / width

    def local_average_ingest(self, path: PathSample, m: int) -> DiscreteSample:
        """Bin averages (1/dm) int_bin Y_{i dt}(x) dx of every observation."""
        space = path.space
        if m < 1:
            raise OutOfRangeError(f"need at least one bin, got {m}")
        if space.variant == SPECTRAL:
            values = path.values @ self.bin_average_matrix(space, m).T
        elif space.variant == L2:
            if m > space.J or space.J % m:
                raise OutOfRangeError(f"{m} bins do not tile {space.J} cells")
            values = path.values.reshape(path.n + 1, m, space.J // m).mean(axis=2)
        else:
            raise ArgumentError("local averages need a Spectral or L2 path")
        return DiscreteSample(values, (space.b - space.a) / m, path.dt, CASE_HEAT, (space.a, space.b))

    def coarsen_bins(self, data: DiscreteSample, factor: int) -> DiscreteSample:
        """Merge groups of `factor` adjacent bins."""
        if factor < 1 or data.m % factor:
            raise OutOfRangeError(f"factor {factor} does not divide {data.m} bins")
        values = data.values.reshape(data.n + 1, data.m // factor, factor).mean(axis=2)
        return DiscreteSample(values, data.spatial_step * factor, data.temporal_step, data.case, data.domain)

    def bin_space(self, data: DiscreteSample) -> SpaceSpec:
        return SpaceSpec.l2(data.m, *data.domain)

    def sigma_hat_heat(self, data: DiscreteSample, t: float | None = None) -> HSOperator:
        """sum_i (Pi_m Delta_i Y)^{(x)2} on the piecewise-constant subspace of m bins."""
        if data.case != CASE_HEAT:
            raise ArgumentError(f"expected local-average data, got case {data.case!r}")
        D = self.node_increments(data, 0, t)
        return HSOperator(self.bin_space(data), D.T @ D, symmetric=True)

    def project_to_bins(self, Sigma: HSOperator, m: int) -> HSOperator:
        """Pi_m Sigma Pi_m for a Spectral operator, on the m-bin space of (0, 1)."""
        A = self.bin_average_matrix(Sigma.space, m)
        return HSOperator(SpaceSpec.l2(m), A @ Sigma.kernel @ A.T, Sigma.symmetric)


@lru_cache(maxsize=32)
def _kernel_system(n: int) -> KernelSystem:
    if n < 1:
        raise ArgumentError(f"kernel system needs n >= 1, got {n}")
    nodes = np.arange(1, n + 1) / n
    K = 1.0 + np.minimum.outer(nodes, nodes)
    eye = np.eye(n)
    if n >= 2:
        candidate = discrete_sampling.kernel_inverse_closed_form(n)
        residual = float(np.max(np.abs(K @ candidate - eye)))
    else:
        candidate, residual = None, float("inf")
    if residual <= settings.KINV_RESIDUAL_TOL:
        Kinv, used = candidate, True
    else:
        if n >= 2:
            logger.warning(f"closed-form K^-1 rejected for n={n} (residual {residual:.2e}), using a Cholesky solve")
        Kinv = linalg.cho_solve(linalg.cho_factor(K, lower=True), eye)
        residual = float(np.max(np.abs(K @ Kinv - eye)))
        used = False
    for arr in (nodes, K, Kinv):
        arr.setflags(write=False)
    return KernelSystem(n, nodes, K, Kinv, used, residual)


discrete_sampling = DiscreteSamplingService()
