"""
SPDE Volatility Lab - Semigroup Service
C0-semigroups S(t) and their adjoints on the discretized spaces, Favard
probes, and the regularity index that sorts a model into regimes (i)-(iv).
"""

import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
from scipy import integrate, stats

from config import settings
from services.errors import ArgumentError, DimensionError, DomainError, GridError
from services.hilbert_core import H1, L2, SPECTRAL, GridFunction, SpaceSpec, hilbert_core

logger = logging.getLogger("Semigroups")

IDENTITY = "identity"
NILPOTENT_SHIFT = "nilpotent_shift"
SOBOLEV_SHIFT = "sobolev_shift"
HEAT = "heat"
SEMIGROUP_VARIANTS = (IDENTITY, NILPOTENT_SHIFT, SOBOLEV_SHIFT, HEAT)

_HOME_SPACE = {NILPOTENT_SHIFT: L2, SOBOLEV_SHIFT: H1, HEAT: SPECTRAL}

REGIME_STATEMENTS = {
    "i": "SARCV and RV both satisfy the LLN and the CLT.",
    "ii": "RV satisfies the LLN; SARCV satisfies the LLN and the CLT.",
    "iii": "SARCV satisfies the LLN and the CLT; RV has no CLT in general.",
    "iv": "SARCV satisfies the LLN; CLTs need Favard-regular test functionals.",
}


@dataclass(frozen=True)
class SemigroupSpec:
    """Which semigroup acts on the state space."""

    variant: str
    kappa: float = 1.0

    def __post_init__(self):
        if self.variant not in SEMIGROUP_VARIANTS:
            raise ArgumentError(f"unknown semigroup {self.variant!r}")
        if self.variant == HEAT and not self.kappa > 0:
            raise DomainError(f"heat diffusivity must be positive, got {self.kappa}")

    @classmethod
    def identity(cls) -> "SemigroupSpec":
        return cls(IDENTITY)

    @classmethod
    def nilpotent_shift(cls) -> "SemigroupSpec":
        return cls(NILPOTENT_SHIFT)

    @classmethod
    def sobolev_shift(cls) -> "SemigroupSpec":
        return cls(SOBOLEV_SHIFT)

    @classmethod
    def heat(cls, kappa: float = 1.0) -> "SemigroupSpec":
        return cls(HEAT, float(kappa))

    @property
    def is_shift(self) -> bool:
        return self.variant in (NILPOTENT_SHIFT, SOBOLEV_SHIFT)

    def describe(self) -> dict:
        out = {"variant": self.variant}
        if self.variant == HEAT:
            out["kappa"] = self.kappa
        return out


class VolatilityLike(Protocol):
    """What the regularity index needs from a volatility model."""

    space: SpaceSpec
    noise_rank: int

    def columns(self, s: float, M: int | None = None) -> np.ndarray: ...

    def time_step(self) -> float | None: ...


@dataclass
class RegimeReport:
    exponent: float
    case: str
    t_grid: list
    p_values: list
    r_squared: float | None
    statements: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "exponent": self.exponent if np.isfinite(self.exponent) else "inf",
            "case": self.case,
            "t_grid": list(self.t_grid),
            "p_values": list(self.p_values),
            "r_squared": self.r_squared,
            "statements": list(self.statements),
        }


class SemigroupService:
    """Applies semigroups and probes regularity on discretized spaces."""

    def check_space(self, S: SemigroupSpec, space: SpaceSpec) -> None:
        home = _HOME_SPACE.get(S.variant)
        if home is not None and space.variant != home:
            raise DimensionError(f"{S.variant} acts on {home}, not {space.variant}")

    def shift_cells(self, t: float, space: SpaceSpec) -> int:
        """Number of grid cells in a shift by t."""
        k = t / space.step
        if abs(k - round(k)) > 1e-9 * max(1.0, abs(k)):
            raise GridError(f"shift t={t} is not a multiple of the grid step {space.step}")
        return int(round(k))

    # ── Batch actions along the last axis ──────────────────────

    def apply_array(self, S: SemigroupSpec, t: float, coeffs: np.ndarray, space: SpaceSpec) -> np.ndarray:
        if t < 0:
            raise DomainError(f"semigroups are defined for t >= 0, got {t}")
        self.check_space(S, space)
        coeffs = np.asarray(coeffs, dtype=float)
        if S.variant == IDENTITY or t == 0:
            return coeffs.copy()
        if S.variant == HEAT:
            return coeffs * self._heat_symbol(S, t, space)
        k = self.shift_cells(t, space)
        J = space.J
        if S.variant == NILPOTENT_SHIFT:
            out = np.zeros_like(coeffs)
            if k < J:
                out[..., : J - k] = coeffs[..., k:]
            return out
        # Sobolev shift: exact on node values, h(x) -> h(min(x + t, 1))
        values = space.dual(coeffs)
        shifted = values[..., np.minimum(np.arange(J) + k, J - 1)]
        return space.solve_gram(shifted)

    def apply_adjoint_array(
        self, S: SemigroupSpec, t: float, coeffs: np.ndarray, space: SpaceSpec
    ) -> np.ndarray:
        if t < 0:
            raise DomainError(f"semigroups are defined for t >= 0, got {t}")
        self.check_space(S, space)
        coeffs = np.asarray(coeffs, dtype=float)
        if S.variant == IDENTITY or t == 0:
            return coeffs.copy()
        if S.variant == HEAT:
            return coeffs * self._heat_symbol(S, t, space)
        k = self.shift_cells(t, space)
        J = space.J
        out = np.zeros_like(coeffs)
        if S.variant == NILPOTENT_SHIFT:
            if k < J:
                out[..., k:] = coeffs[..., : J - k]
            return out
        # Sobolev adjoint moves kernel-frame mass right, piling up at x = 1
        if k >= J:
            out[..., J - 1] = coeffs.sum(axis=-1)
            return out
        out[..., k:] = coeffs[..., : J - k]
        out[..., J - 1] += coeffs[..., J - k :].sum(axis=-1)
        return out

    def _heat_symbol(self, S: SemigroupSpec, t: float, space: SpaceSpec) -> np.ndarray:
        j = space.points
        return np.exp(-(np.pi**2) * j**2 * S.kappa * t)

    def matrix(self, S: SemigroupSpec, t: float, space: SpaceSpec) -> np.ndarray:
        """P with S(t) f = P f on coefficient vectors."""
        return self.apply_array(S, t, np.eye(space.J), space).T

    # ── Public operations ──────────────────────────────────────

    def apply(self, S: SemigroupSpec, t: float, f: GridFunction) -> GridFunction:
        return GridFunction(f.space, self.apply_array(S, t, f.coeffs, f.space))

    def apply_adjoint(self, S: SemigroupSpec, t: float, f: GridFunction) -> GridFunction:
        return GridFunction(f.space, self.apply_adjoint_array(S, t, f.coeffs, f.space))

    def favard_probe(
        self,
        S: SemigroupSpec,
        gamma: float,
        f: GridFunction,
        t_grid: Sequence[float],
        adjoint: bool = False,
    ) -> float:
        """max_t t^{-gamma} ||f - S(t) f|| over the grid (S(t)* when adjoint)."""
        if not 0 < gamma <= 1:
            raise DomainError(f"Favard exponent must lie in (0, 1], got {gamma}")
        t_grid = list(t_grid)
        if not t_grid:
            raise ArgumentError("empty t grid")
        act = self.apply_adjoint if adjoint else self.apply
        best = 0.0
        for t in t_grid:
            if t <= 0:
                raise DomainError(f"probe times must be positive, got {t}")
            gap = hilbert_core.norm(f - act(S, t, f))
            best = max(best, gap * t ** (-gamma))
        return best

    def quadrature_rule(self, lower: float, upper: float, step: float | None = None):
        """Simpson nodes and weights on [lower, upper].

        With a grid step the nodes sit on multiples of it (shift models);
        otherwise QUADRATURE_NODES equispaced nodes are used.
        """
        if upper < lower:
            raise ArgumentError(f"reversed interval [{lower}, {upper}]")
        if upper == lower:
            return np.array([lower]), np.array([0.0])
        if step is not None:
            i0 = round(lower / step)
            i1 = round(upper / step)
            for t, i in ((lower, i0), (upper, i1)):
                if abs(t / step - i) > 1e-9 * max(1.0, abs(i)):
                    raise GridError(f"time {t} is not a multiple of the grid step {step}")
            nodes = np.arange(i0, i1 + 1) * step
            if len(nodes) < settings.QUADRATURE_NODES:
                logger.debug(f"{len(nodes)} commensurate quadrature nodes on [{lower}, {upper}]")
        else:
            nodes = np.linspace(lower, upper, settings.QUADRATURE_NODES)
        if len(nodes) == 2:
            return nodes, np.full(2, 0.5 * (nodes[1] - nodes[0]))
        weights = integrate.simpson(np.eye(len(nodes)), x=nodes, axis=0)
        return nodes, weights

    def vol_regularity_index(
        self,
        S: SemigroupSpec,
        vol: VolatilityLike,
        t_grid: Sequence[float],
        horizon: float = 1.0,
    ) -> RegimeReport:
        """Decay exponent of p(t) = int_0^T ||(S(t) - I) sigma_s||_HS ds and the implied regime."""
        space = vol.space
        self.check_space(S, space)
        t_grid = sorted(float(t) for t in t_grid)
        if not t_grid:
            raise ArgumentError("empty t grid")
        step = vol.time_step()
        if S.is_shift:
            step = space.step
        nodes, weights = self.quadrature_rule(0.0, horizon, step)
        L = space.gram_factor
        columns = [vol.columns(s, vol.noise_rank) for s in nodes]

        p_values = []
        for t in t_grid:
            P = self.matrix(S, t, space) - np.eye(space.J)
            norms = [np.linalg.norm(L.T @ (P @ C), "fro") for C in columns]
            p_values.append(float(np.dot(weights, norms)))

        p = np.asarray(p_values)
        scale = max(np.max(p), 0.0)
        sigma_size = max(float(np.dot(weights, [np.linalg.norm(L.T @ C, "fro") for C in columns])), 0.0)
        if scale <= 1e-12 * max(sigma_size, 1e-300) or sigma_size == 0.0:
            logger.info("p(t) vanishes on the grid, reporting case (i)")
            return RegimeReport(float("inf"), "i", t_grid, p_values, None, [REGIME_STATEMENTS["i"]])

        keep = p > 0
        if not np.all(keep):
            logger.warning(f"dropping {int((~keep).sum())} zero p(t) values before the fit")
        if keep.sum() < 2:
            raise ArgumentError("need at least two positive p(t) values for the fit")
        fit = stats.linregress(np.log(np.asarray(t_grid)[keep]), np.log(p[keep]))
        exponent = float(fit.slope)
        case = self.classify(exponent)
        statements = [REGIME_STATEMENTS[case]]
        if exponent < 0.25 - settings.REGIME_TOLERANCE:
            statements.append("p(t) decays slower than t^(1/4): RV may fail even the LLN.")
        logger.info(f"regularity exponent {exponent:.3f} -> case ({case})")
        return RegimeReport(exponent, case, t_grid, p_values, float(fit.rvalue**2), statements)

    def classify(self, exponent: float) -> str:
        tol = settings.REGIME_TOLERANCE
        if exponent > 0.75:
            return "i"
        if exponent > 0.5 + tol:
            return "ii"
        if exponent >= 0.5 - tol:
            return "iii"
        return "iv"


semigroup_service = SemigroupService()
