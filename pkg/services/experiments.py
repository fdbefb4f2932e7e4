"""
SPDE Volatility Lab - Experiment Runner
Every CLI/HTTP command: simulation, estimation, Monte Carlo campaigns for
the laws of large numbers and the feasible CLTs, the counterexample
demonstrations, the regime report and the fully discrete pipelines.

Each command writes one run directory (report.json, config.toml and CSV
tables) and returns a RunResult whose `passed` flag drives exit code 3.
"""

import dataclasses
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from config import settings
from services.artifacts import artifact_writer
from services.discrete_sampling import CASE_A, CASE_B, discrete_sampling
from services.errors import ArgumentError, ConfigError, DimensionError
from services.estimators import variation_estimators
from services.experiment_config import (
    ExperimentConfig,
    build_functionals,
    build_semigroup,
    build_space,
    build_vol,
    campaign_resolution,
    canonical_hash,
    config_from_dict,
    config_hash,
    derived_seed,
    dump_config,
    needs_commensurate_grid,
)
from services.hilbert_core import H1, SPECTRAL, HSOperator, SpaceSpec, hilbert_core
from services.inference import inference_service
from services.semigroups import HEAT, IDENTITY, SOBOLEV_SHIFT, SemigroupSpec, semigroup_service
from services.simulation import SimConfig, TerminalWeight, VolModel, simulation_service

logger = logging.getLogger("Experiments")

COMMANDS = (
    "simulate",
    "estimate",
    "validate-lln",
    "validate-clt",
    "counterexample",
    "regime-report",
    "discrete-demo",
    "heat-demo",
)
COUNTEREXAMPLE_NAMES = ("rv-lln", "rv-clt", "sarcv-clt-sharpness")

# Monte Carlo thresholds are only judged with enough replications
MIN_CHECK_REPLICATIONS = 100
MOMENT_STATS = ("gamma_hat", "sampv4", "sampv22", "sampv3")
MOMENT_ODD_SE = 3.0
SARCV_REDUCTION = 0.40
SHARPNESS_GROWTH = 1.3
BIAS_SE_MULTIPLE = 3.0


@dataclass
class RunResult:
    command: str
    report: dict
    directory: Path
    passed: bool = True


@dataclass(frozen=True)
class Counterexample:
    """A frozen rank-one model sigma_s = e (x) S(s)X (or e (x) X when not transported)."""

    name: str
    space: SpaceSpec
    hurst: float | None
    interval: tuple | None
    transport: bool
    fixed_path: bool
    n_grid: tuple = (64, 128, 256, 512)
    T: float = 1.0

    def control(self) -> "Counterexample":
        if self.hurst is None:
            raise ArgumentError(f"{self.name} has no Brownian control run")
        return dataclasses.replace(self, name=f"{self.name}-control", hurst=0.5)

    def describe(self) -> dict:
        return {
            "name": self.name,
            "space": self.space.describe(),
            "semigroup": "nilpotent_shift",
            "path": "fbm" if self.hurst is not None else "indicator",
            "hurst": self.hurst,
            "interval": list(self.interval) if self.interval else None,
            "transport": self.transport,
            "fixed_path": self.fixed_path,
            "T": self.T,
        }


# Grid step 1/512 in every case, so each n in the default grid divides the fine steps
COUNTEREXAMPLES = {
    "rv-lln": Counterexample("rv-lln", SpaceSpec.l2(1024, 0.0, 2.0), 0.25, None, True, False),
    "rv-clt": Counterexample("rv-clt", SpaceSpec.l2(1536, 0.0, 3.0), None, (1.0, 2.0), True, True),
    "sarcv-clt-sharpness": Counterexample(
        "sarcv-clt-sharpness", SpaceSpec.l2(1024, 0.0, 2.0), 0.25, None, False, True
    ),
}


class _ErrorTable:
    """Per-estimator, per-n lists of replicate errors."""

    def __init__(self, names, n_grid):
        self.n_grid = list(n_grid)
        self.values = {name: [[] for _ in self.n_grid] for name in names}

    def add(self, name: str, idx: int, value: float) -> None:
        self.values[name][idx].append(float(value))

    def summary(self):
        means, ses = {}, {}
        for name, cols in self.values.items():
            stats = [inference_service.summarize(col) for col in cols]
            means[name] = [m for m, _ in stats]
            ses[name] = [s for _, s in stats]
        return means, ses

    def replicate_rows(self, seed_base: int) -> list[dict]:
        rows = []
        for name, cols in self.values.items():
            for idx, col in enumerate(cols):
                for r, v in enumerate(col):
                    rows.append({"estimator": name, "n": self.n_grid[idx], "seed": seed_base + r, "error": v})
        return rows


class _BiasTable:
    """Running sums of D^T D against a fixed target, for sqrt(n) * ||mean error||_HS and its standard error."""

    def __init__(self, names, n_grid, target: HSOperator):
        self.target = target
        self.n_grid = list(n_grid)
        J = target.space.J
        self.sums = {name: [np.zeros((J, J)) for _ in self.n_grid] for name in names}
        self.sq = {name: [0.0 for _ in self.n_grid] for name in names}

    def add(self, name: str, idx: int, D: np.ndarray, norm: float) -> None:
        self.sums[name][idx] += D.T @ D
        self.sq[name][idx] += norm**2

    def series(self, name: str, R: int):
        bias, se = [], []
        space = self.target.space
        for idx, n in enumerate(self.n_grid):
            mean_err = HSOperator(space, self.sums[name][idx] / R - self.target.kernel)
            mean_norm = hilbert_core.hs_norm(mean_err)
            spread = max(self.sq[name][idx] / R - mean_norm**2, 0.0)
            bias.append(float(np.sqrt(n) * mean_norm))
            se.append(float(np.sqrt(n) * np.sqrt(spread / R)))
        return bias, se


class ExperimentRunner:
    """Runs the lab commands and writes their artifacts."""

    # ── Plumbing ───────────────────────────────────────────────

    def _threads(self, threads: int | None) -> int:
        return max(1, threads if threads is not None else settings.THREADS)

    def _replicate(self, task: Callable[[int], object], R: int, seed_base: int, threads: int, consume) -> None:
        """Run task for seeds seed_base..seed_base+R-1 in batches, consuming results in replicate order."""
        batch = max(1, threads)
        for start in range(0, R, batch):
            size = min(batch, R - start)
            results = inference_service.run_replications(task, size, seed_base + start, threads)
            for offset, result in enumerate(results):
                consume(start + offset, result)
            logger.debug(f"{start + size}/{R} replications done")
        logger.info(f"{R} replications done (seeds {seed_base}..{seed_base + R - 1})")

    def _model(self, cfg: ExperimentConfig, n_grid: list[int], seed: int | None = None):
        J = campaign_resolution(cfg, n_grid)
        space = build_space(cfg, J)
        S = build_semigroup(cfg)
        try:
            semigroup_service.check_space(S, space)
        except DimensionError as exc:
            raise ConfigError(str(exc), location="semigroup.variant") from exc
        return space, S, build_vol(cfg, space, seed)

    def _substeps(self, cfg: ExperimentConfig, vol: VolModel, S: SemigroupSpec, n: int) -> int:
        if cfg.simulation.substeps is not None:
            return cfg.simulation.substeps
        if needs_commensurate_grid(cfg) or vol.time_step() is not None:
            return simulation_service.commensurate_substeps(vol, S, n, cfg.simulation.T)
        return 1

    def _simulate(self, cfg: ExperimentConfig, vol: VolModel, S: SemigroupSpec, n: int, seed: int):
        sim = SimConfig(
            n=n,
            substeps=self._substeps(cfg, vol, S, n),
            M=cfg.simulation.M,
            T=cfg.simulation.T,
            seed=seed,
        )
        return simulation_service.simulate_mild(vol, S, sim)

    def _describe(self, space: SpaceSpec, S: SemigroupSpec, vol: VolModel | None) -> dict:
        return {
            "space": space.describe(),
            "semigroup": S.describe(),
            "volatility": vol.describe() if vol is not None else None,
        }

    def _finish(
        self,
        command: str,
        digest: str,
        config_dump: dict,
        body: dict,
        directory: Path,
        tables: dict | None = None,
        checks: dict | None = None,
        config_text: str | None = None,
    ) -> RunResult:
        checks = {k: bool(v) for k, v in (checks or {}).items()}
        report = {
            "command": command,
            "config_hash": digest,
            "code_version": settings.CODE_VERSION,
            "config": config_dump,
            "checks": checks,
            "passed": all(checks.values()),
            **body,
        }
        for name, rows in (tables or {}).items():
            artifact_writer.write_rows(directory / f"{name}.csv", rows)
        if config_text is not None:
            artifact_writer.write_text(directory / "config.toml", config_text)
        artifact_writer.write_json(directory / "report.json", report)
        status = "passed" if report["passed"] else "FAILED"
        logger.info(f"{command} {status}, artifacts in {directory}")
        return RunResult(command, report, directory, report["passed"])

    def _finish_cfg(self, command, cfg: ExperimentConfig, body, out=None, **kwargs) -> RunResult:
        digest = config_hash(cfg)
        directory = kwargs.pop("directory", None) or artifact_writer.run_dir(command, digest, out or cfg.output_dir)
        return self._finish(
            command, digest, cfg.model_dump(mode="json"), body, directory, config_text=dump_config(cfg), **kwargs
        )

    def run(
        self,
        command: str,
        cfg: ExperimentConfig | None = None,
        threads: int | None = None,
        out: str | None = None,
        path=None,
        which: str | None = None,
        replications: int | None = None,
        seed: int | None = None,
        control: bool = False,
        n_grid: list[int] | None = None,
        reference: HSOperator | None = None,
    ) -> RunResult:
        """Dispatch one command by name."""
        if command not in COMMANDS:
            raise ArgumentError(f"unknown command {command!r}, expected one of {COMMANDS}")
        logger.info(f"running {command}")
        if command == "counterexample":
            if which is None:
                raise ArgumentError(f"counterexample needs one of {COUNTEREXAMPLE_NAMES}")
            return self.cmd_counterexample(
                which,
                R=replications if replications is not None else 200,
                seed=seed,
                threads=threads,
                control=control,
                n_grid=n_grid,
                out=out,
            )
        if cfg is None:
            raise ConfigError(f"{command} needs an experiment config")
        if seed is not None or replications is not None or n_grid is not None:
            # overrides go back through validation
            data = cfg.model_dump(mode="json", exclude_none=True)
            if seed is not None:
                data["seed"] = seed
            if replications is not None:
                data["campaign"]["replications"] = replications
            if n_grid is not None:
                data["campaign"]["n_grid"] = list(n_grid)
            cfg = config_from_dict(data)
        if command == "simulate":
            return self.cmd_simulate(cfg, out)
        if command == "estimate":
            return self.cmd_estimate(cfg, path, out, reference=reference)
        if command == "regime-report":
            return self.cmd_regime_report(cfg, out)
        handler = {
            "validate-lln": self.cmd_validate_lln,
            "validate-clt": self.cmd_validate_clt,
            "discrete-demo": self.cmd_discrete_demo,
            "heat-demo": self.cmd_heat_demo,
        }[command]
        return handler(cfg, threads, out)

    # ── simulate / estimate ────────────────────────────────────

    def cmd_simulate(self, cfg: ExperimentConfig, out: str | None = None) -> RunResult:
        """One path, its terminal state and int_0^T Sigma_s ds as the reference for estimate."""
        n = cfg.simulation.n
        space, S, vol = self._model(cfg, [n])
        path = self._simulate(cfg, vol, S, n, cfg.seed)
        directory = artifact_writer.run_dir("simulate", config_hash(cfg), out or cfg.output_dir)
        artifact_writer.write_path(directory, path)
        artifact_writer.write_function(directory / "terminal.csv", path.observations[-1])
        artifact_writer.write_operator(
            directory / "integrated.csv", simulation_service.integrated_volatility(vol, path.horizon)
        )
        body = {
            "model": self._describe(space, S, vol),
            "path": {"file": "path.csv", "n": path.n, "dt": path.dt, "J": space.J},
            "terminal": "terminal.csv",
            "integrated": "integrated.csv",
        }
        return self._finish_cfg("simulate", cfg, body, directory=directory)

    def cmd_estimate(
        self, cfg: ExperimentConfig, path=None, out: str | None = None, reference: HSOperator | None = None
    ) -> RunResult:
        """Estimators and functional intervals on a simulated (or supplied) path.

        A supplied path carries no volatility model; `reference`, when given,
        stands in for int_0^t Sigma_s ds at t = the path's horizon.
        """
        if path is None:
            space, S, vol = self._model(cfg, [cfg.simulation.n])
            path = self._simulate(cfg, vol, S, cfg.simulation.n, cfg.seed)
        else:
            space, S, vol = path.space, path.semigroup, path.true_vol
        t = cfg.campaign.t if cfg.campaign.t is not None else path.horizon
        U = cfg.campaign.U

        if vol is not None:
            integrated = simulation_service.integrated_volatility(vol, t)
        elif reference is not None and abs(t - path.horizon) <= 1e-12 * max(1.0, t):
            if reference.space != space:
                raise DimensionError("reference operator and path live on different spaces")
            integrated = reference
        else:
            integrated = None
        operators, rows = {}, []
        for name in cfg.estimators:
            if name == "sarcv":
                op = variation_estimators.sarcv(path, S, t)
                target = integrated
            elif name == "rv":
                op = variation_estimators.rv(path, t)
                target = integrated
            else:
                op = variation_estimators.conditional_cov_estimator(path, S, U, t)
                target = None
                if vol is not None:
                    target = simulation_service.integrated_volatility(vol, t, TerminalWeight(t, S), lower=U)
            operators[name] = op
            row = {"estimator": name, "hs_norm": hilbert_core.hs_norm(op), "min_eigenvalue": hilbert_core.min_eigenvalue(op)}
            if target is not None:
                row["hs_error"] = hilbert_core.hs_norm(op - target)
            rows.append(row)

        functional_rows = []
        for label, B in build_functionals(cfg, space):
            ci = inference_service.ci_functional(path, S, B, t, cfg.campaign.level)
            row = {
                "functional": label,
                "estimate": ci.estimate,
                "lower": ci.lower,
                "upper": ci.upper,
                "degenerate": ci.degenerate,
            }
            if integrated is not None:
                truth = hilbert_core.pair(integrated, B)
                stat = inference_service.feasible_t_stat(path, S, B, t, truth)
                row.update({"truth": truth, "t_stat": stat.value})
            functional_rows.append(row)

        directory = artifact_writer.run_dir("estimate", config_hash(cfg), out or cfg.output_dir)
        for name, op in operators.items():
            artifact_writer.write_operator(directory / f"{name}.csv", op)
        body = {
            "model": self._describe(space, S, vol),
            "window": {"t": t, "U": U, "n": path.n, "dt": path.dt},
            "estimators": rows,
            "functionals": functional_rows,
        }
        tables = {"estimators": rows}
        if functional_rows:
            tables["functionals"] = functional_rows
        return self._finish_cfg("estimate", cfg, body, directory=directory, tables=tables)

    # ── LLN campaign ───────────────────────────────────────────

    def cmd_validate_lln(self, cfg: ExperimentConfig, threads: int | None = None, out: str | None = None) -> RunResult:
        """hs_norm(estimator - target) over the n grid, R replications per n."""
        threads = self._threads(threads)
        n_grid = cfg.campaign.n_grid
        R = cfg.campaign.replications
        t, U = cfg.horizon, cfg.campaign.U
        space, S, vol = self._model(cfg, n_grid)
        per_replicate = cfg.volatility.model == "rank_one_frozen" and cfg.volatility.shape == "fbm"
        names = list(dict.fromkeys(cfg.estimators))
        if per_replicate:
            logger.info("fBm volatility path is redrawn for every replication")
        pairs = self._moment_pairs(build_functionals(cfg, space))
        moment_grid = [n for n in n_grid if n >= 2]
        moment_names = [f"{stat}:{label}" for label, _, _ in pairs for stat in MOMENT_STATS]

        def targets_for(v: VolModel) -> dict:
            out = {}
            if "sarcv" in names or "rv" in names:
                out["integrated"] = simulation_service.integrated_volatility(v, t)
            if "conditional" in names:
                out["conditional"] = simulation_service.integrated_volatility(v, t, TerminalWeight(t, S), lower=U)
            for label, h, g in pairs:
                for stat, value in variation_estimators.moment_targets(v, h, g, t).items():
                    out[f"{stat}:{label}"] = value
            return out

        shared = None if per_replicate else targets_for(vol)

        def task(seed: int):
            v = build_vol(cfg, space, seed) if per_replicate else vol
            targets = targets_for(v) if per_replicate else shared
            errors, moments = {}, {}
            for name in moment_names:
                moments[(name, "target")] = targets[name]
            for idx, n in enumerate(n_grid):
                path = self._simulate(cfg, v, S, n, seed)
                if n >= 2:
                    for label, h, g in pairs:
                        stats = variation_estimators.moment_statistics(path, S, h, g, t)
                        for stat, value in stats.items():
                            moments[(f"{stat}:{label}", moment_grid.index(n))] = value
                for name in names:
                    if name == "sarcv":
                        op, target = variation_estimators.sarcv(path, S, t), targets["integrated"]
                    elif name == "rv":
                        op, target = variation_estimators.rv(path, t), targets["integrated"]
                    else:
                        op = variation_estimators.conditional_cov_estimator(path, S, U, t)
                        target = targets["conditional"]
                    errors[(name, idx)] = hilbert_core.hs_norm(op - target)
            return errors, moments

        table = _ErrorTable(names, n_grid)
        moment_table = _ErrorTable(moment_names, moment_grid)
        target_table = _ErrorTable(moment_names, [0])

        def consume(r, result):
            errors, moments = result
            for (name, idx), value in errors.items():
                table.add(name, idx, value)
            for (name, idx), value in moments.items():
                if idx == "target":
                    target_table.add(name, 0, value)
                else:
                    moment_table.add(name, idx, value)

        self._replicate(task, R, cfg.seed, threads, consume)
        means, ses = table.summary()

        checks, diagnostics, slopes = {}, {}, {}
        acc = cfg.acceptance
        for name in names:
            m = means[name]
            if len(n_grid) >= 3:
                slopes[name] = inference_service.convergence_rate_fit(n_grid, m)
            if len(n_grid) >= 2:
                if name == "sarcv":
                    checks["sarcv_decreasing"] = all(b < a for a, b in zip(m, m[1:]))
                    if name in slopes:
                        checks["sarcv_slope"] = acc.slope_min <= slopes[name].slope <= acc.slope_max
                elif name == "conditional":
                    checks["conditional_reduction"] = m[-1] <= (1.0 - acc.conditional_reduction) * m[0]
                else:
                    diagnostics["rv_status"] = self._divergence_status(m)
        moment_rows = []
        if moment_grid and moment_names:
            m_means, m_ses = moment_table.summary()
            t_means, _ = target_table.summary()
            for name in moment_names:
                stat, label = name.split(":", 1)
                target = t_means[name][0]
                for i, n in enumerate(moment_grid):
                    moment_rows.append(
                        {
                            "functional": label,
                            "statistic": stat,
                            "n": n,
                            "mean": m_means[name][i],
                            "se": m_ses[name][i],
                            "target": target,
                        }
                    )
                if R >= MIN_CHECK_REPLICATIONS:
                    checks[f"{stat}[{label}]"] = self._moment_check(
                        stat, m_means[name][-1], m_ses[name][-1], target, acc.moment_band
                    )
            diagnostics["moments"] = moment_rows
        body = {
            "model": self._describe(space, S, vol),
            "window": {"t": t, "U": U},
            "replications": R,
            "n_grid": n_grid,
            "error_means": means,
            "error_ses": ses,
            "slopes": {k: dataclasses.asdict(v) for k, v in slopes.items()},
            "diagnostics": diagnostics,
        }
        rows = [
            {"n": n, **{f"{name}_mean": means[name][i] for name in names}, **{f"{name}_se": ses[name][i] for name in names}}
            for i, n in enumerate(n_grid)
        ]
        tables = {"errors": rows, "replicates": table.replicate_rows(cfg.seed)}
        if moment_rows:
            tables["moments"] = moment_rows
        return self._finish_cfg("validate-lln", cfg, body, out=out, tables=tables, checks=checks)

    def _moment_pairs(self, functionals) -> list[tuple]:
        """(label, h, g): each functional's factor h paired with the next functional's factor g."""
        pairs = []
        for i, (label, B) in enumerate(functionals):
            g = functionals[(i + 1) % len(functionals)][1].factors[0]
            pairs.append((label, B.factors[0], g))
        return pairs

    def _moment_check(self, stat: str, mean: float, se: float, target: float, band: float) -> bool:
        # odd power variations vanish in the limit; the rest are judged relative to their target
        if stat == "sampv3":
            return abs(mean) <= MOMENT_ODD_SE * se
        if target <= 0:
            return True
        return abs(mean - target) <= band * target

    def _divergence_status(self, means: list[float]) -> str:
        first, last = means[0], means[-1]
        if first <= 0:
            return "CONVERGENT"
        decrease = (first - last) / first
        return "DIVERGENT" if decrease < settings.DIVERGENCE_TOLERANCE else "CONVERGENT"

    # ── CLT campaign ───────────────────────────────────────────

    def cmd_validate_clt(self, cfg: ExperimentConfig, threads: int | None = None, out: str | None = None) -> RunResult:
        """Coverage and normality of the feasible statistic for every configured functional."""
        threads = self._threads(threads)
        n_grid = cfg.campaign.n_grid
        R = cfg.campaign.replications
        space, S, vol = self._model(cfg, n_grid)
        functionals = build_functionals(cfg, space)
        if not functionals:
            raise ConfigError("validate-clt needs at least one functional", location="functionals")
        t = cfg.horizon
        target = simulation_service.integrated_volatility(vol, t)

        acc = cfg.acceptance
        checks, reports, rows, stat_rows = {}, {}, [], []
        judged = R >= MIN_CHECK_REPLICATIONS
        for label, B in functionals:
            report = inference_service.coverage_experiment(
                vol,
                S,
                B,
                n_grid,
                R,
                cfg.campaign.level,
                cfg.seed,
                T=cfg.simulation.T,
                M=cfg.simulation.M,
                target=target,
                threads=threads,
                label=label,
                t=t,
                substeps=cfg.simulation.substeps,
            )
            reports[label] = report.to_dict()
            for row in report.rows():
                rows.append({"functional": label, **row})
            for n, values in report.diagnostics["t_stats"].items():
                stat_rows.extend({"functional": label, "n": int(n), "t_stat": v} for v in values)
            if judged:
                cov = report.coverage[-1]
                checks[f"{label}_coverage"] = cov is not None and acc.coverage_min <= cov <= acc.coverage_max
                normality = report.diagnostics.get("normality")
                if normality is not None:
                    checks[f"{label}_ks"] = normality["ks_distance"] < acc.ks_max
        if not judged:
            logger.info(f"R={R} below {MIN_CHECK_REPLICATIONS}, coverage thresholds not judged")

        body = {
            "model": self._describe(space, S, vol),
            "window": {"t": t},
            "replications": R,
            "level": cfg.campaign.level,
            "n_grid": n_grid,
            "functionals": reports,
            "thresholds_judged": judged,
        }
        tables = {"coverage": rows, "t_stats": stat_rows}
        return self._finish_cfg("validate-clt", cfg, body, out=out, tables=tables, checks=checks)

    # ── Counterexamples ────────────────────────────────────────

    def cmd_counterexample(
        self,
        which: str,
        R: int = 200,
        seed: int | None = None,
        threads: int | None = None,
        control: bool = False,
        n_grid: list[int] | None = None,
        out: str | None = None,
    ) -> RunResult:
        """Replays a frozen counterexample model and flags divergence of the targeted estimator."""
        if which not in COUNTEREXAMPLES:
            raise ArgumentError(f"unknown counterexample {which!r}, expected one of {COUNTEREXAMPLE_NAMES}")
        if R < 1:
            raise ArgumentError("R must be at least 1")
        ce = COUNTEREXAMPLES[which]
        if control:
            ce = ce.control()
        n_grid = list(n_grid or ce.n_grid)
        if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
            raise ConfigError("n_grid must be strictly increasing", location="n_grid")
        seed = settings.DEFAULT_SEED if seed is None else seed
        threads = self._threads(threads)
        S = SemigroupSpec.nilpotent_shift()
        space = ce.space

        def make_vol(s: int) -> VolModel:
            if ce.hurst is None:
                X = hilbert_core.indicator(space, *ce.interval)
            else:
                X = simulation_service.fbm_function(space, ce.hurst, derived_seed(s, 1))
            return VolModel.rank_one(X, S if ce.transport else None)

        fixed = make_vol(seed) if ce.fixed_path else None
        fixed_target = simulation_service.integrated_volatility(fixed, ce.T) if fixed is not None else None
        sample_vol = fixed if fixed is not None else make_vol(seed)
        substeps = {n: simulation_service.commensurate_substeps(sample_vol, S, n, ce.T) for n in n_grid}
        names = ("sarcv", "rv")
        hurst = ce.hurst if ce.hurst is not None else 0.5

        def task(s: int):
            vol = fixed if fixed is not None else make_vol(s)
            target = fixed_target if fixed is not None else simulation_service.integrated_volatility(vol, ce.T)
            out = {}
            for idx, n in enumerate(n_grid):
                path = simulation_service.simulate_mild(
                    vol, S, SimConfig(n=n, substeps=substeps[n], M=1, T=ce.T, seed=s)
                )
                parts = {
                    "sarcv": variation_estimators._increments(path, S, ce.T),
                    "rv": variation_estimators._increments(path, None, ce.T),
                }
                norms = {
                    name: hilbert_core.hs_norm(HSOperator(space, D.T @ D - target.kernel))
                    for name, D in parts.items()
                }
                drift = parts["rv"] - parts["sarcv"]
                # sum_i ||(S(dt) - I) Y_{i-1}||^4
                lower = float(np.sum((space.step * np.sum(drift**2, axis=1)) ** 2))
                out[idx] = (parts if fixed is not None else None, norms, lower)
            return out

        errors = _ErrorTable(names, n_grid)
        bias = _BiasTable(names, n_grid, fixed_target) if fixed is not None else None
        lower_bound = [[] for _ in n_grid]

        def consume(r, result):
            for idx, (parts, norms, lower) in result.items():
                for name in names:
                    errors.add(name, idx, norms[name])
                    if bias is not None:
                        bias.add(name, idx, parts[name], norms[name])
                lower_bound[idx].append(lower)

        self._replicate(task, R, seed, threads, consume)
        means, ses = errors.summary()
        ratio = [rv / sa if sa > 0 else float("inf") for rv, sa in zip(means["rv"], means["sarcv"])]
        reference = [
            (1.0 / n) ** (2.0 + 4.0 * hurst) * sum((i - 1) ** 2 for i in range(1, n + 1)) for n in n_grid
        ]
        diagnostics = {
            "rv_sarcv_error_ratio": ratio,
            "rv_lower_bound_mean": [float(np.mean(col)) for col in lower_bound],
            "rv_lower_bound_reference": reference,
        }

        checks = {}
        if which == "rv-lln":
            status = self._divergence_status(means["rv"]) if len(n_grid) >= 2 else "UNDETERMINED"
            diagnostics["rv_status"] = status
            if len(n_grid) >= 2:
                reduction = 1.0 - means["sarcv"][-1] / means["sarcv"][0]
                diagnostics["sarcv_reduction"] = reduction
                if control:
                    checks["no_divergence_flag"] = status != "DIVERGENT"
                else:
                    checks["rv_divergent"] = status == "DIVERGENT"
                    checks["sarcv_reduction"] = reduction >= SARCV_REDUCTION
        else:
            rv_bias, rv_se = bias.series("rv", R)
            sa_bias, sa_se = bias.series("sarcv", R)
            diagnostics.update(
                {"rv_sqrt_n_bias": rv_bias, "rv_bias_se": rv_se, "sarcv_sqrt_n_bias": sa_bias, "sarcv_bias_se": sa_se}
            )
            if which == "rv-clt":
                checks["rv_biased"] = all(b > BIAS_SE_MULTIPLE * s for b, s in zip(rv_bias, rv_se))
                checks["sarcv_centered"] = all(b <= BIAS_SE_MULTIPLE * s for b, s in zip(sa_bias, sa_se))
            else:
                growth = sa_bias[-1] / sa_bias[0] if sa_bias[0] > 0 else float("inf")
                flagged = growth >= SHARPNESS_GROWTH and sa_bias[-1] > BIAS_SE_MULTIPLE * sa_se[-1]
                diagnostics["sarcv_bias_growth"] = growth
                diagnostics["sarcv_status"] = "DIVERGENT" if flagged else "BOUNDED"
                if len(n_grid) >= 2:
                    checks["no_divergence_flag" if control else "sarcv_bias_grows"] = flagged != control

        params = {"which": which, "control": control, "R": R, "seed": seed, "n_grid": n_grid}
        digest = canonical_hash({**params, "model": ce.describe()})
        directory = artifact_writer.run_dir(f"counterexample-{ce.name}", digest, out)
        body = {
            "model": ce.describe(),
            "replications": R,
            "n_grid": n_grid,
            "error_means": means,
            "error_ses": ses,
            "diagnostics": diagnostics,
        }
        rows = [
            {
                "n": n,
                "sarcv_mean": means["sarcv"][i],
                "sarcv_se": ses["sarcv"][i],
                "rv_mean": means["rv"][i],
                "rv_se": ses["rv"][i],
                "rv_lower_bound": diagnostics["rv_lower_bound_mean"][i],
                "reference": reference[i],
            }
            for i, n in enumerate(n_grid)
        ]
        return self._finish("counterexample", digest, params, body, directory, tables={"errors": rows}, checks=checks)

    # ── Regime report ──────────────────────────────────────────

    def default_t_grid(self, space: SpaceSpec, S: SemigroupSpec, horizon: float) -> list[float]:
        if S.is_shift:
            grid = [k * space.step for k in (1, 2, 4, 8, 16, 32)]
            return [t for t in grid if t <= horizon] or [space.step]
        return list(np.geomspace(1e-3, 1e-1, 8))

    def cmd_regime_report(self, cfg: ExperimentConfig, out: str | None = None) -> RunResult:
        space = build_space(cfg)
        S = build_semigroup(cfg)
        try:
            semigroup_service.check_space(S, space)
        except DimensionError as exc:
            raise ConfigError(str(exc), location="semigroup.variant") from exc
        vol = build_vol(cfg, space)
        t_grid = cfg.campaign.t_grid or self.default_t_grid(space, S, cfg.horizon)
        regime = semigroup_service.vol_regularity_index(S, vol, t_grid, horizon=cfg.horizon)
        body = {"model": self._describe(space, S, vol), "regime": regime.to_dict()}
        return self._finish_cfg("regime-report", cfg, body, out=out)

    # ── Fully discrete pipelines ───────────────────────────────

    def cmd_discrete_demo(self, cfg: ExperimentConfig, threads: int | None = None, out: str | None = None) -> RunResult:
        """Node-sampled H1 data: kernel system checks and the projected estimator over the n grid."""
        threads = self._threads(threads)
        if cfg.space.variant != H1:
            raise ConfigError("the discrete demo samples an H1 path", location="space.variant")
        S = build_semigroup(cfg)
        if S.variant not in (IDENTITY, SOBOLEV_SHIFT):
            raise ConfigError("the discrete demo needs the identity or sobolev_shift semigroup", location="semigroup.variant")
        case = CASE_B if S.variant == SOBOLEV_SHIFT else CASE_A
        n_grid = cfg.campaign.n_grid
        R = cfg.campaign.replications
        T = cfg.simulation.T
        x = 0.5

        kernel_rows = []
        for n in sorted(set([2, 4, 8, 16, 32, 64] + list(n_grid))):
            ks = discrete_sampling.kernel_system(n)
            curve = 1.0 + np.minimum(0.4, ks.nodes)
            f = discrete_sampling.project_h1(curve, ks)
            node_err = float(np.max(np.abs(ks.space.dual(f.coeffs) - curve)))
            fine = np.linspace(0.0, 1.0, 1001)
            off_err = float(np.max(np.abs(hilbert_core.evaluate(f, fine) - (1.0 + np.minimum(0.4, fine)))))
            kernel_rows.append(
                {
                    "n": n,
                    "residual": ks.residual,
                    "closed_form": ks.used_closed_form,
                    "node_error": node_err,
                    "off_node_error": off_err,
                }
            )

        models = {}
        for n in n_grid:
            space = SpaceSpec.h1(n)
            vol = build_vol(cfg, space)
            integrated = simulation_service.integrated_volatility(vol, T)
            dx = hilbert_core.evaluation_functional(space, x) if space.node_index(x) is not None else None
            point_truth = hilbert_core.quad_form(integrated, dx, dx) if dx is not None else None
            models[n] = (space, vol, integrated, point_truth)

        def task(seed: int):
            out = {}
            for idx, n in enumerate(n_grid):
                space, vol, integrated, point_truth = models[n]
                path = simulation_service.simulate_mild(vol, S, SimConfig(n=n, substeps=1, M=cfg.simulation.M, T=T, seed=seed))
                data = discrete_sampling.sample_on_grid(path, case)
                est = discrete_sampling.sigma_hat_discrete(data, case)
                covered = None
                if point_truth is not None:
                    pw = discrete_sampling.pointwise_vol_estimate(data, x, case, level=cfg.campaign.level)
                    covered = bool(pw.lower[-1] <= point_truth <= pw.upper[-1]) if np.isfinite(pw.lower[-1]) else None
                out[idx] = (hilbert_core.hs_norm(est - integrated), covered)
            return out

        table = _ErrorTable(["sigma_hat"], n_grid)
        hits = [[] for _ in n_grid]

        def consume(r, result):
            for idx, (err, covered) in result.items():
                table.add("sigma_hat", idx, err)
                if covered is not None:
                    hits[idx].append(covered)

        self._replicate(task, R, cfg.seed, threads, consume)

        # the seed-base sample at the finest n, as the fully discrete data the estimator sees
        n_top = n_grid[-1]
        vol_top = models[n_top][1]
        top = simulation_service.simulate_mild(
            vol_top, S, SimConfig(n=n_top, substeps=1, M=cfg.simulation.M, T=T, seed=cfg.seed)
        )
        directory = artifact_writer.run_dir("discrete-demo", config_hash(cfg), out or cfg.output_dir)
        artifact_writer.write_discrete(directory / "sample.csv", discrete_sampling.sample_on_grid(top, case))
        means, ses = table.summary()
        coverage = [float(np.mean(h)) if h else None for h in hits]

        small = [row for row in kernel_rows if row["n"] <= 64]
        checks = {
            "kernel_residual": all(row["residual"] <= settings.KINV_RESIDUAL_TOL for row in small),
            "node_exact": all(row["node_error"] <= 1e-9 for row in kernel_rows),
        }
        if len(n_grid) >= 2:
            m = means["sigma_hat"]
            checks["sigma_hat_decreasing"] = all(b < a for a, b in zip(m, m[1:]))

        body = {
            "case": case,
            "semigroup": S.describe(),
            "replications": R,
            "n_grid": n_grid,
            "kernel_systems": kernel_rows,
            "error_means": means,
            "error_ses": ses,
            "pointwise": {"x": x, "level": cfg.campaign.level, "coverage": coverage},
            "sample": "sample.csv",
        }
        rows = [
            {"n": n, "mean": means["sigma_hat"][i], "se": ses["sigma_hat"][i], "pointwise_coverage": coverage[i]}
            for i, n in enumerate(n_grid)
        ]
        tables = {"errors": rows, "kernel_systems": kernel_rows}
        return self._finish_cfg("discrete-demo", cfg, body, directory=directory, tables=tables, checks=checks)

    def cmd_heat_demo(self, cfg: ExperimentConfig, threads: int | None = None, out: str | None = None) -> RunResult:
        """Local averages of a heat-equation path on m = n bins against the projected t Q."""
        threads = self._threads(threads)
        if cfg.space.variant != SPECTRAL or cfg.semigroup.variant != HEAT:
            raise ConfigError("the heat demo needs a Spectral space and the heat semigroup", location="space.variant")
        if cfg.volatility.model != "heat_diagonal":
            raise ConfigError("the heat demo needs the heat_diagonal volatility", location="volatility.model")
        n_grid = cfg.campaign.n_grid
        if any(n % 2 for n in n_grid):
            raise ConfigError("bins must split (0, 1) at 1/2, so every n must be even", location="campaign.n_grid")
        R = cfg.campaign.replications
        t = cfg.horizon
        space, S, vol = self._model(cfg, n_grid)
        Q = simulation_service.covariance(vol, 0.0)

        projected = {}
        for n in n_grid:
            target = t * discrete_sampling.project_to_bins(Q, n)
            h = hilbert_core.indicator(target.space, 0.0, 0.5)
            qhh = hilbert_core.quad_form(target, h, h) / t
            projected[n] = (target, h, qhh)

        def task(seed: int):
            out = {}
            for idx, n in enumerate(n_grid):
                target, h, _ = projected[n]
                path = self._simulate(cfg, vol, S, n, seed)
                data = discrete_sampling.local_average_ingest(path, n)
                diff = discrete_sampling.sigma_hat_heat(data, t) - target
                out[idx] = (hilbert_core.hs_norm(diff), float(np.sqrt(n) * hilbert_core.quad_form(diff, h, h)))
            return out

        table = _ErrorTable(["sigma_hat"], n_grid)
        scalars = [[] for _ in n_grid]

        def consume(r, result):
            for idx, (err, stat) in result.items():
                table.add("sigma_hat", idx, err)
                scalars[idx].append(stat)

        self._replicate(task, R, cfg.seed, threads, consume)
        means, ses = table.summary()
        variances = [float(np.var(col, ddof=1)) if len(col) > 1 else float("nan") for col in scalars]
        limits = [2.0 * t * projected[n][2] ** 2 for n in n_grid]

        checks = {}
        if len(n_grid) >= 2:
            m = means["sigma_hat"]
            checks["sigma_hat_decreasing"] = all(b < a for a, b in zip(m, m[1:]))
        if R >= MIN_CHECK_REPLICATIONS:
            band = cfg.acceptance.heat_variance_band
            checks["scalar_variance"] = abs(variances[-1] / limits[-1] - 1.0) <= band

        body = {
            "model": self._describe(space, S, vol),
            "window": {"t": t},
            "replications": R,
            "n_grid": n_grid,
            "error_means": means,
            "error_ses": ses,
            "scalar_variance": variances,
            "scalar_variance_limit": limits,
        }
        rows = [
            {
                "n": n,
                "m": n,
                "mean": means["sigma_hat"][i],
                "se": ses["sigma_hat"][i],
                "scalar_variance": variances[i],
                "limit": limits[i],
            }
            for i, n in enumerate(n_grid)
        ]
        return self._finish_cfg("heat-demo", cfg, body, out=out, tables={"errors": rows}, checks=checks)


experiment_runner = ExperimentRunner()
