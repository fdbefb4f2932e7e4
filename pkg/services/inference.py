"""
SPDE Volatility Lab - Inference Service
Feasible CLT statistics, confidence intervals for volatility functionals and
the Monte Carlo machinery behind coverage, normality and rate checks.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import stats

from config import settings
from services.errors import ArgumentError, DomainError
from services.estimators import variation_estimators
from services.hilbert_core import GridFunction, HSOperator, RankOneTestTensor, hilbert_core
from services.semigroups import SemigroupSpec
from services.simulation import PathSample, SimConfig, VolModel, simulation_service

logger = logging.getLogger("Inference")


@dataclass
class CltStat:
    value: float
    numerator: float
    denom_sq: float
    degenerate: bool


@dataclass
class ConfidenceInterval:
    lower: float
    upper: float
    estimate: float
    level: float
    degenerate: bool = False

    def contains(self, x: float) -> bool:
        return not self.degenerate and self.lower <= x <= self.upper


@dataclass
class NormalityReport:
    count: int
    mean: float
    variance: float
    skewness: float
    excess_kurtosis: float
    ks_distance: float


@dataclass
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    points: int


@dataclass
class McReport:
    """Per-n Monte Carlo summaries of one campaign."""

    label: str
    n_grid: list
    replications: int
    seed_base: int
    error_means: dict = field(default_factory=dict)
    error_ses: dict = field(default_factory=dict)
    slopes: dict = field(default_factory=dict)
    coverage: list | None = None
    degenerate_fraction: list | None = None
    diagnostics: dict = field(default_factory=dict)
    checks: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.replications < 1:
            raise ArgumentError("a report needs at least one replication")

    @property
    def passed(self) -> bool:
        return all(self.checks.values())

    def rows(self) -> list[dict]:
        """One table row per n."""
        out = []
        for idx, n in enumerate(self.n_grid):
            row = {"n": n}
            for name, means in self.error_means.items():
                row[f"{name}_mean"] = means[idx]
                row[f"{name}_se"] = self.error_ses[name][idx]
            if self.coverage is not None:
                row["coverage"] = self.coverage[idx]
            if self.degenerate_fraction is not None:
                row["degenerate_fraction"] = self.degenerate_fraction[idx]
            out.append(row)
        return out

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "n_grid": list(self.n_grid),
            "replications": self.replications,
            "seed_base": self.seed_base,
            "rows": self.rows(),
            "slopes": {k: (asdict(v) if v is not None else None) for k, v in self.slopes.items()},
            "diagnostics": self.diagnostics,
            "checks": self.checks,
            "passed": self.passed,
        }


class InferenceService:
    """Feasible inference and Monte Carlo validation."""

    def __init__(self):
        self.floor = settings.DEGENERACY_FLOOR

    # ── Statistics ─────────────────────────────────────────────

    def feasible_t_stat(
        self,
        path: PathSample,
        S: SemigroupSpec | None,
        B: RankOneTestTensor,
        t: float | None,
        target: HSOperator | float,
    ) -> CltStat:
        """dt^{-1/2} <SARCV_t - target, B> / sqrt(<Gamma-hat_t B, B>); S=None uses raw increments."""
        increments = variation_estimators._increments(path, S, t)
        c = variation_estimators.functional_terms(increments, B)
        truth = target if isinstance(target, (int, float)) else hilbert_core.pair(target, B)
        numerator = float((c.sum() - truth) / np.sqrt(path.dt))
        denom_sq = variation_estimators._gamma_from_terms(c, path.dt)
        if denom_sq < self.floor:
            return CltStat(float("nan"), numerator, denom_sq, True)
        return CltStat(numerator / np.sqrt(denom_sq), numerator, denom_sq, False)

    def ci_functional(
        self,
        path: PathSample,
        S: SemigroupSpec | None,
        B: RankOneTestTensor,
        t: float | None,
        level: float,
    ) -> ConfidenceInterval:
        """<SARCV_t, B> +- z dt^{1/2} sqrt(<Gamma-hat_t B, B>)."""
        if not 0 <= level < 1:
            raise DomainError(f"confidence level must lie in [0, 1), got {level}")
        increments = variation_estimators._increments(path, S, t)
        c = variation_estimators.functional_terms(increments, B)
        estimate = float(c.sum())
        denom_sq = variation_estimators._gamma_from_terms(c, path.dt)
        if denom_sq < self.floor:
            return ConfidenceInterval(float("nan"), float("nan"), estimate, level, degenerate=True)
        half = float(stats.norm.ppf(0.5 + 0.5 * level)) * np.sqrt(path.dt * denom_sq)
        return ConfidenceInterval(estimate - half, estimate + half, estimate, level)

    # ── Monte Carlo plumbing ───────────────────────────────────

    def run_replications(self, task: Callable[[int], object], R: int, seed_base: int, threads: int = 1) -> list:
        """task(seed) for seed_base + r, r = 0..R-1, results in replicate order."""
        seeds = [seed_base + r for r in range(R)]
        if threads <= 1:
            return [task(s) for s in seeds]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(task, seeds))

    def summarize(self, values: Sequence[float]) -> tuple[float, float]:
        """Mean and standard error."""
        arr = np.asarray(values, dtype=float)
        if len(arr) < 2:
            return float(arr.mean()), 0.0
        return float(arr.mean()), float(arr.std(ddof=1) / np.sqrt(len(arr)))

    def coverage_experiment(
        self,
        vol: VolModel,
        S: SemigroupSpec,
        B: RankOneTestTensor,
        n_grid: Sequence[int],
        R: int,
        level: float,
        seed_base: int,
        T: float = 1.0,
        M: int | None = None,
        y0: GridFunction | None = None,
        target: HSOperator | None = None,
        threads: int = 1,
        label: str = "coverage",
        t: float | None = None,
        substeps: int | None = None,
    ) -> McReport:
        """Fraction of R feasible intervals over (0, t] that contain <target, B> at each n."""
        if R < 1:
            raise ArgumentError("R must be at least 1")
        t = T if t is None else t
        if target is None:
            target = simulation_service.integrated_volatility(vol, t)
        truth = hilbert_core.pair(target, B)
        coverage, degenerate, t_stats = [], [], {}

        for n in n_grid:
            k = substeps or simulation_service.commensurate_substeps(vol, S, n, T)

            def one(seed: int, n=n, k=k):
                cfg = SimConfig(n=n, substeps=k, M=M, T=T, seed=seed, y0=y0)
                path = simulation_service.simulate_mild(vol, S, cfg)
                ci = self.ci_functional(path, S, B, t, level)
                stat = self.feasible_t_stat(path, S, B, t, truth)
                return ci, stat

            results = self.run_replications(one, R, seed_base, threads)
            valid = [(ci, st) for ci, st in results if not ci.degenerate]
            degenerate.append(1.0 - len(valid) / R)
            coverage.append(
                float(np.mean([ci.contains(truth) for ci, _ in valid])) if valid else None
            )
            t_stats[n] = [st.value for _, st in valid]
            logger.info(f"[{label}] n={n}: coverage={coverage[-1]} degenerate={degenerate[-1]:.3f}")

        report = McReport(
            label=label,
            n_grid=list(n_grid),
            replications=R,
            seed_base=seed_base,
            coverage=coverage,
            degenerate_fraction=degenerate,
        )
        report.diagnostics["truth"] = truth
        report.diagnostics["t_stats"] = {str(n): v for n, v in t_stats.items()}
        last = t_stats[n_grid[-1]]
        if len(last) >= 30:
            report.diagnostics["normality"] = asdict(self.normality_diagnostics(last))
        return report

    # ── Summaries ──────────────────────────────────────────────

    def convergence_rate_fit(self, ns: Sequence[float], errors: Sequence[float]) -> RateFit:
        """Least-squares fit of log error against log n."""
        ns = np.asarray(ns, dtype=float)
        errors = np.asarray(errors, dtype=float)
        if ns.shape != errors.shape:
            raise ArgumentError("one error per n expected")
        if len(np.unique(ns)) < 3:
            raise ArgumentError("a rate fit needs at least 3 distinct n")
        keep = np.isfinite(errors) & (errors > 0)
        if not np.all(keep):
            logger.warning(f"dropping {int((~keep).sum())} nonpositive errors from the rate fit")
        if len(np.unique(ns[keep])) < 2:
            raise ArgumentError("fewer than 2 usable points after filtering")
        fit = stats.linregress(np.log(ns[keep]), np.log(errors[keep]))
        return RateFit(float(fit.slope), float(fit.intercept), float(fit.rvalue**2), int(keep.sum()))

    def normality_diagnostics(self, samples: Sequence[float]) -> NormalityReport:
        x = np.asarray(samples, dtype=float)
        if len(x) < 30:
            raise ArgumentError(f"need at least 30 samples, got {len(x)}")
        variance = float(x.var(ddof=1))
        if variance > 0:
            skewness = float(stats.skew(x))
            kurt = float(stats.kurtosis(x, fisher=True))
        else:
            skewness = kurt = float("nan")
        ks = float(stats.kstest(x, "norm").statistic)
        return NormalityReport(len(x), float(x.mean()), variance, skewness, kurt, ks)


inference_service = InferenceService()
