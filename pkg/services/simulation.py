"""
SPDE Volatility Lab - Simulation Service
Samples mild solutions Y_t = S(t)Y_0 + int S(t-s) alpha ds + int S(t-s) sigma_s dW_s
on the discretized spaces, plus exact fractional Brownian paths for the
rough-volatility examples.
"""

import dataclasses
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy import linalg

from config import settings
from services.errors import (
    ArgumentError,
    ConfigError,
    DimensionError,
    DomainError,
    GridError,
    NumericalError,
    OutOfRangeError,
)
from services.hilbert_core import SPECTRAL, GridFunction, HSOperator, SpaceSpec, hilbert_core
from services.semigroups import HEAT, SemigroupSpec, semigroup_service

logger = logging.getLogger("Simulation")

CONSTANT_KERNEL = "constant_kernel"
RANK_ONE_FROZEN = "rank_one_frozen"
HEAT_DIAGONAL = "heat_diagonal"
VOL_VARIANTS = (CONSTANT_KERNEL, RANK_ONE_FROZEN, HEAT_DIAGONAL)

# Columns per chunk when accumulating sum_k w_k C_k C_k^T
_QUAD_CHUNK = 4096


@dataclass(frozen=True, eq=False)
class VolModel:
    """The volatility process sigma_s and the drift alpha.

    constant_kernel: sigma_s = c(s) * sigma (a fixed operator, usually an integral kernel)
    rank_one_frozen: sigma_s = c(s) * e (x) S(s)X, e the first noise frame vector;
                     with transport=None the path is frozen, sigma_s = e (x) X
    heat_diagonal:   sigma_s = c(s) * Q^{1/2}, diagonal on the sine modes
    """

    variant: str
    space: SpaceSpec
    sigma: HSOperator | None = None
    path: GridFunction | None = None
    transport: SemigroupSpec | None = None
    mode_weights: np.ndarray | None = None
    modulation: Callable[[float], float] | None = None
    modulation_label: str = "none"
    drift: GridFunction | None = None

    def __post_init__(self):
        if self.variant not in VOL_VARIANTS:
            raise ArgumentError(f"unknown volatility model {self.variant!r}")
        if self.variant == CONSTANT_KERNEL and self.sigma is None:
            raise ArgumentError("constant_kernel needs an operator")
        if self.variant == RANK_ONE_FROZEN and self.path is None:
            raise ArgumentError("rank_one_frozen needs a path X")
        if self.variant == HEAT_DIAGONAL:
            if self.space.variant != SPECTRAL:
                raise DimensionError("heat_diagonal lives on a Spectral space")
            weights = np.array(self.mode_weights, dtype=float)
            if weights.shape != (self.space.J,):
                raise DimensionError("one weight per mode expected")
            weights.setflags(write=False)
            object.__setattr__(self, "mode_weights", weights)
        for part in (self.sigma, self.path, self.drift):
            if part is not None and part.space != self.space:
                raise DimensionError("volatility parts live on different spaces")
        if self.transport is not None:
            semigroup_service.check_space(self.transport, self.space)

    # ── Constructors ───────────────────────────────────────────

    @classmethod
    def constant(cls, sigma: HSOperator) -> "VolModel":
        return cls(CONSTANT_KERNEL, sigma.space, sigma=sigma)

    @classmethod
    def rank_one(cls, X: GridFunction, transport: SemigroupSpec | None) -> "VolModel":
        return cls(RANK_ONE_FROZEN, X.space, path=X, transport=transport)

    @classmethod
    def heat_diagonal(cls, space: SpaceSpec, c: float, r: float, eps: float = 0.1) -> "VolModel":
        """q_j^{1/2} = c j^{-(r + 1/2 + eps)}, so that Q^{1/2} maps into H^r."""
        j = np.arange(1, space.J + 1, dtype=float)
        return cls(HEAT_DIAGONAL, space, mode_weights=c * j ** (-(r + 0.5 + eps)))

    def modulated(self, c: Callable[[float], float], label: str = "custom") -> "VolModel":
        return dataclasses.replace(self, modulation=c, modulation_label=label)

    def with_drift(self, alpha: GridFunction) -> "VolModel":
        return dataclasses.replace(self, drift=alpha)

    # ── Evaluation ─────────────────────────────────────────────

    @property
    def is_time_constant(self) -> bool:
        if self.modulation is not None:
            return False
        return not (self.variant == RANK_ONE_FROZEN and self.transport is not None)

    @property
    def noise_rank(self) -> int:
        """Number of noise frame vectors sigma_s can act on nontrivially."""
        return 1 if self.variant == RANK_ONE_FROZEN else self.space.J

    def time_step(self) -> float | None:
        """Grid step that quadrature times must respect, if any."""
        if self.variant == RANK_ONE_FROZEN and self.transport is not None and self.transport.is_shift:
            return self.space.step
        return None

    def _scale(self, s: float) -> float:
        return 1.0 if self.modulation is None else float(self.modulation(s))

    def columns(self, s: float, M: int | None = None) -> np.ndarray:
        """J x M matrix whose m-th column is sigma_s applied to noise frame vector m."""
        J = self.space.J
        M = J if M is None else M
        if not 1 <= M <= J:
            raise OutOfRangeError(f"noise truncation M={M} outside 1..{J}")
        if self.variant == CONSTANT_KERNEL:
            C = self._kernel_columns[:, :M]
        elif self.variant == HEAT_DIAGONAL:
            C = np.diag(self.mode_weights)[:, :M]
        else:
            X = self.path.coeffs
            if self.transport is not None:
                X = semigroup_service.apply_array(self.transport, s, X, self.space)
            C = np.zeros((J, M))
            C[:, 0] = X
        return self._scale(s) * C

    @property
    def _kernel_columns(self) -> np.ndarray:
        cached = self.__dict__.get("_cols")
        if cached is None:
            F = self.space.noise_frame
            cached = self.sigma.kernel @ self.space.dual(F.T).T
            self.__dict__["_cols"] = cached
        return cached

    def describe(self) -> dict:
        out = {"variant": self.variant, "modulation": self.modulation_label}
        if self.transport is not None:
            out["transport"] = self.transport.describe()
        out["drift"] = self.drift is not None
        return out


@dataclass(frozen=True, eq=False)
class SimConfig:
    n: int
    substeps: int = 1
    M: int | None = None
    T: float = 1.0
    seed: int = settings.DEFAULT_SEED
    y0: GridFunction | None = None

    def __post_init__(self):
        if self.n < 1 or self.substeps < 1:
            raise ConfigError("n and substeps must be at least 1")
        if self.M is not None and self.M < 1:
            raise ConfigError("M must be at least 1")
        if not self.T > 0:
            raise ConfigError("horizon T must be positive")

    @property
    def dt(self) -> float:
        return self.T / self.n

    @property
    def fine_step(self) -> float:
        return self.T / (self.n * self.substeps)


@dataclass(frozen=True, eq=False)
class PathSample:
    """Observations Y_0, Y_dt, ..., Y_{n dt} stored as coefficient rows."""

    space: SpaceSpec
    values: np.ndarray
    dt: float
    semigroup: SemigroupSpec
    true_vol: VolModel | None = None
    seed: int | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=float)
        if values.ndim != 2 or values.shape[1] != self.space.J or values.shape[0] < 1:
            raise DimensionError(f"expected (n+1) x {self.space.J} values, got {values.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def n(self) -> int:
        return self.values.shape[0] - 1

    @property
    def horizon(self) -> float:
        return self.n * self.dt

    @property
    def observations(self) -> list[GridFunction]:
        return [GridFunction(self.space, row) for row in self.values]

    def scaled(self, c: float) -> "PathSample":
        return dataclasses.replace(self, values=c * self.values)


@dataclass(frozen=True)
class TerminalWeight:
    """Weight S(T - s) . S(T - s)* for conditional covariances."""

    T: float
    semigroup: SemigroupSpec


@lru_cache(maxsize=16)
def _fbm_factor(hurst: float, grid: tuple) -> np.ndarray:
    t = np.asarray(grid[1:], dtype=float)
    two_h = 2.0 * hurst
    cov = 0.5 * (
        t[:, None] ** two_h + t[None, :] ** two_h - np.abs(t[:, None] - t[None, :]) ** two_h
    )
    jitter = settings.FBM_JITTER
    for _ in range(4):
        try:
            return linalg.cholesky(cov + jitter * np.eye(len(t)), lower=True)
        except linalg.LinAlgError:
            logger.warning(f"fBm covariance not PD with jitter {jitter:.1e}, retrying")
            jitter *= 100.0
    raise NumericalError(f"fBm covariance for H={hurst} is not positive definite")


class SimulationService:
    """Simulates paths and evaluates integrated volatility."""

    def sample_fbm(self, hurst: float, grid, seed: int) -> np.ndarray:
        """Exact fBm on the grid (which starts at 0) via Cholesky."""
        if not 0 < hurst < 1:
            raise DomainError(f"Hurst index must lie in (0, 1), got {hurst}")
        grid = np.asarray(grid, dtype=float)
        if grid.ndim != 1 or len(grid) < 2 or grid[0] != 0.0 or np.any(np.diff(grid) <= 0):
            raise ArgumentError("fBm grid must be increasing and start at 0")
        if len(grid) > settings.FBM_MAX_POINTS:
            raise OutOfRangeError(f"fBm grid has {len(grid)} points, limit {settings.FBM_MAX_POINTS}")
        L = _fbm_factor(float(hurst), tuple(grid.tolist()))
        rng = np.random.default_rng(seed)
        path = np.zeros(len(grid))
        path[1:] = L @ rng.standard_normal(len(grid) - 1)
        return path

    def fbm_function(self, space: SpaceSpec, hurst: float, seed: int) -> GridFunction:
        """fBm sampled at the space's points (cell midpoints for L2)."""
        points = space.points - space.a
        return GridFunction(space, self.sample_fbm(hurst, np.concatenate([[0.0], points]), seed)[1:])

    def sigma_apply(self, vol: VolModel, s: float, u) -> GridFunction:
        """sigma_s u for u given in the first len(u) noise frame coordinates."""
        u = np.asarray(u, dtype=float)
        C = vol.columns(s, len(u))
        return GridFunction(vol.space, C @ u)

    def covariance(self, vol: VolModel, s: float) -> HSOperator:
        """Sigma_s = sigma_s sigma_s*."""
        C = vol.columns(s, vol.noise_rank)
        return HSOperator(vol.space, C @ C.T, symmetric=True)

    def commensurate_substeps(self, vol: VolModel, S: SemigroupSpec, n: int, T: float = 1.0) -> int:
        """Substeps per observation that put the fine step on the spatial grid.

        Shift models use one fine step per grid cell for every n, so a
        campaign over an n grid shares both the space and the fine noise.
        """
        if not (S.is_shift or vol.time_step() is not None):
            return 1
        cells = T / vol.space.step
        if abs(cells - round(cells)) > 1e-9 * cells:
            raise ConfigError(f"horizon {T} is not a multiple of the grid step {vol.space.step}")
        cells = int(round(cells))
        if cells % n:
            raise ConfigError(f"n={n} does not divide the {cells} grid cells spanned by the horizon")
        return cells // n

    def simulate_mild(self, vol: VolModel, S: SemigroupSpec, cfg: SimConfig) -> PathSample:
        space = vol.space
        semigroup_service.check_space(S, space)
        y0 = cfg.y0 if cfg.y0 is not None else GridFunction(space, np.zeros(space.J))
        if y0.space != space:
            raise DimensionError("Y0 and the volatility live on different spaces")
        M = cfg.M if cfg.M is not None else vol.noise_rank
        if M > space.J:
            raise ConfigError(f"noise truncation M={M} exceeds J={space.J}")
        delta = cfg.fine_step
        if S.is_shift or vol.time_step() is not None:
            try:
                semigroup_service.shift_cells(delta, space)
            except GridError as exc:
                raise ConfigError(
                    f"fine step {delta} is not commensurate with the grid step {space.step}"
                ) from exc

        rng = np.random.default_rng(cfg.seed)
        if vol.variant == HEAT_DIAGONAL and S.variant == HEAT and vol.modulation is None:
            values = self._simulate_heat_exact(vol, S, cfg, y0, M, rng)
        else:
            values = self._simulate_euler(vol, S, cfg, y0, M, rng)
        logger.debug(f"simulated n={cfg.n} substeps={cfg.substeps} on {space.variant}(J={space.J})")
        return PathSample(space, values, cfg.dt, S, true_vol=vol, seed=cfg.seed)

    def _simulate_euler(self, vol, S, cfg, y0, M, rng) -> np.ndarray:
        space = vol.space
        steps = cfg.n * cfg.substeps
        delta = cfg.fine_step
        xi = rng.standard_normal((steps, M))
        noise = None
        if vol.is_time_constant:
            noise = np.sqrt(delta) * xi @ vol.columns(0.0, M).T
        drift = None if vol.drift is None else delta * vol.drift.coeffs

        out = np.empty((cfg.n + 1, space.J))
        y = np.array(y0.coeffs, dtype=float)
        out[0] = y
        for k in range(steps):
            if noise is not None:
                incr = noise[k]
            else:
                incr = np.sqrt(delta) * self.sigma_apply(vol, k * delta, xi[k]).coeffs
            if drift is not None:
                incr = incr + drift
            y = semigroup_service.apply_array(S, delta, y + incr, space)
            if (k + 1) % cfg.substeps == 0:
                out[(k + 1) // cfg.substeps] = y
        return out

    def _simulate_heat_exact(self, vol, S, cfg, y0, M, rng) -> np.ndarray:
        """Each mode is an OU process with a conditionally exact Gaussian update."""
        space = vol.space
        steps = cfg.n * cfg.substeps
        delta = cfg.fine_step
        lam = np.pi**2 * space.points**2 * S.kappa
        decay = np.exp(-lam * delta)
        sd = np.zeros(space.J)
        sd[:M] = vol.mode_weights[:M] * np.sqrt((1.0 - np.exp(-2.0 * lam[:M] * delta)) / (2.0 * lam[:M]))
        drift_step = 0.0 if vol.drift is None else vol.drift.coeffs * (1.0 - decay) / lam
        xi = np.zeros((steps, space.J))
        xi[:, :M] = rng.standard_normal((steps, M))

        out = np.empty((cfg.n + 1, space.J))
        y = np.array(y0.coeffs, dtype=float)
        out[0] = y
        for k in range(steps):
            y = decay * y + drift_step + sd * xi[k]
            if (k + 1) % cfg.substeps == 0:
                out[(k + 1) // cfg.substeps] = y
        return out

    def integrated_volatility(
        self,
        vol: VolModel,
        t: float,
        weighted_by: TerminalWeight | None = None,
        lower: float = 0.0,
    ) -> HSOperator:
        """int_lower^t Sigma_s ds, or int S(T-s) Sigma_s S(T-s)* ds with a terminal weight."""
        space = vol.space
        if t < lower:
            raise ArgumentError(f"reversed interval [{lower}, {t}]")
        if weighted_by is not None and weighted_by.T < t:
            raise ArgumentError(f"terminal time {weighted_by.T} precedes t={t}")
        if t == lower:
            return hilbert_core.zero_operator(space)
        if weighted_by is None and vol.is_time_constant:
            return (t - lower) * self.covariance(vol, lower)

        step = vol.time_step()
        if weighted_by is not None:
            semigroup_service.check_space(weighted_by.semigroup, space)
            if weighted_by.semigroup.is_shift:
                step = space.step
        nodes, weights = semigroup_service.quadrature_rule(lower, t, step)

        total = np.zeros((space.J, space.J))
        block, signs = [], []
        width = 0
        for s, w in zip(nodes, weights):
            if w == 0.0:
                continue
            C = vol.columns(float(s), vol.noise_rank)
            if weighted_by is not None:
                C = semigroup_service.apply_array(
                    weighted_by.semigroup, weighted_by.T - float(s), C.T, space
                ).T
            block.append(np.sqrt(abs(w)) * C)
            signs.append(np.full(C.shape[1], np.sign(w)))
            width += C.shape[1]
            if width >= _QUAD_CHUNK:
                total += self._accumulate(block, signs)
                block, signs, width = [], [], 0
        if block:
            total += self._accumulate(block, signs)
        return HSOperator(space, total, symmetric=True)

    @staticmethod
    def _accumulate(block, signs) -> np.ndarray:
        B = np.hstack(block)
        return (B * np.concatenate(signs)) @ B.T


simulation_service = SimulationService()
