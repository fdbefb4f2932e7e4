"""
SPDE Volatility Lab - Experiment Config
TOML experiment files validated by pydantic; unknown keys are rejected and
errors point at the offending line. Builders turn a validated config into
spaces, semigroups, volatility models and test functionals.
"""

import hashlib
import json
import logging
import math
import re

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from pathlib import Path
from typing import Literal

import numpy as np
import tomli_w
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from config import settings
from services.errors import ConfigError, LabError
from services.hilbert_core import L2, RankOneTestTensor, SpaceSpec, hilbert_core
from services.semigroups import SemigroupSpec
from services.simulation import (
    CONSTANT_KERNEL,
    RANK_ONE_FROZEN,
    VolModel,
    simulation_service,
)

logger = logging.getLogger("Config")

MODULATIONS = {
    "none": None,
    "sine": lambda s: 1.0 + 0.5 * math.sin(2.0 * math.pi * s),
    "linear": lambda s: 1.0 + s,
    "decay": lambda s: math.exp(-s),
}


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class SpaceConfig(_Section):
    variant: Literal["L2", "H1", "Spectral"] = "L2"
    J: int = Field(32, ge=1)
    a: float = 0.0
    b: float = 1.0

    @model_validator(mode="after")
    def _interval(self):
        if not self.b > self.a:
            raise ValueError(f"empty interval ({self.a}, {self.b})")
        if self.variant != L2 and (self.a, self.b) != (0.0, 1.0):
            raise ValueError(f"{self.variant} lives on (0, 1)")
        return self


class SemigroupConfig(_Section):
    variant: Literal["identity", "nilpotent_shift", "sobolev_shift", "heat"] = "identity"
    kappa: float = Field(1.0, gt=0)


class VolatilityConfig(_Section):
    model: Literal["constant_kernel", "rank_one_frozen", "heat_diagonal"] = "constant_kernel"
    kernel: Literal["gaussian", "damped_gaussian", "exponential"] = "gaussian"
    scale: float = Field(1.0, ge=0)
    length: float = Field(0.2, gt=0)
    shape: Literal["fbm", "indicator"] = "indicator"
    hurst: float = Field(0.5, gt=0, lt=1)
    interval: list[float] | None = None
    transport: bool = True
    c: float = Field(1.0, ge=0)
    r: float = Field(2.0, ge=0)
    eps: float = Field(0.1, gt=0)
    modulation: Literal["none", "sine", "linear", "decay"] = "none"
    drift: float = 0.0

    @field_validator("interval")
    @classmethod
    def _pair(cls, v):
        if v is not None and (len(v) != 2 or not v[1] > v[0]):
            raise ValueError("interval must be [lo, hi] with lo < hi")
        return v


class SimulationConfig(_Section):
    n: int = Field(256, ge=1)
    substeps: int | None = Field(None, ge=1)
    T: float = Field(1.0, gt=0)
    M: int | None = Field(None, ge=1)


class CampaignConfig(_Section):
    n_grid: list[int] = Field(default_factory=lambda: [64, 128, 256, 512])
    replications: int = Field(200, ge=1)
    level: float = Field(0.95, ge=0, lt=1)
    t: float | None = Field(None, gt=0)
    U: float = Field(0.0, ge=0)
    t_grid: list[float] | None = None

    @field_validator("n_grid")
    @classmethod
    def _increasing(cls, v):
        if not v:
            raise ValueError("n_grid is empty")
        if any(n < 1 for n in v):
            raise ValueError("n_grid entries must be positive")
        if any(b <= a for a, b in zip(v, v[1:])):
            raise ValueError("n_grid must be strictly increasing")
        return v

    @field_validator("t_grid")
    @classmethod
    def _positive(cls, v):
        if v is not None and (not v or any(t <= 0 for t in v)):
            raise ValueError("t_grid entries must be positive")
        return v


class FunctionalConfig(_Section):
    kind: Literal["interval_square", "point_square", "spread_square", "mode_square"]
    lo: float | None = None
    hi: float | None = None
    x: float | None = None
    y: float | None = None
    j: int | None = Field(None, ge=1)

    @model_validator(mode="after")
    def _fields(self):
        needed = {
            "interval_square": ("lo", "hi"),
            "point_square": ("x",),
            "spread_square": ("x", "y"),
            "mode_square": ("j",),
        }[self.kind]
        missing = [k for k in needed if getattr(self, k) is None]
        if missing:
            raise ValueError(f"{self.kind} needs {', '.join(missing)}")
        if self.kind == "interval_square" and not self.hi > self.lo:
            raise ValueError("interval_square needs lo < hi")
        return self

    @property
    def label(self) -> str:
        if self.kind == "interval_square":
            return f"interval[{self.lo:g},{self.hi:g}]"
        if self.kind == "point_square":
            return f"point[{self.x:g}]"
        if self.kind == "spread_square":
            return f"spread[{self.x:g},{self.y:g}]"
        return f"mode[{self.j}]"


class AcceptanceConfig(_Section):
    slope_min: float = -0.65
    slope_max: float = -0.35
    coverage_min: float = 0.92
    coverage_max: float = 0.98
    ks_max: float = 0.06
    conditional_reduction: float = 0.5
    heat_variance_band: float = 0.25
    moment_band: float = Field(default=0.10, gt=0)


class ExperimentConfig(_Section):
    seed: int = Field(default_factory=lambda: settings.DEFAULT_SEED, ge=0)
    output_dir: str | None = None
    estimators: list[Literal["sarcv", "rv", "conditional"]] = Field(default_factory=lambda: ["sarcv"])
    space: SpaceConfig = Field(default_factory=SpaceConfig)
    semigroup: SemigroupConfig = Field(default_factory=SemigroupConfig)
    volatility: VolatilityConfig = Field(default_factory=VolatilityConfig)
    simulation: SimulationConfig = Field(default_factory=SimulationConfig)
    campaign: CampaignConfig = Field(default_factory=CampaignConfig)
    functionals: list[FunctionalConfig] = Field(default_factory=list)
    acceptance: AcceptanceConfig = Field(default_factory=AcceptanceConfig)

    @model_validator(mode="after")
    def _domain(self):
        a, b = self.space.a, self.space.b
        for f in self.functionals:
            for key in ("lo", "hi", "x", "y"):
                v = getattr(f, key)
                if v is not None and not a <= v <= b:
                    raise ValueError(f"functional {f.kind}: {key}={v} outside [{a}, {b}]")
            if f.j is not None and f.j > self.space.J:
                raise ValueError(f"functional mode_square: j={f.j} exceeds J={self.space.J}")
        iv = self.volatility.interval
        if iv is not None and not (a <= iv[0] and iv[1] <= b):
            raise ValueError(f"volatility interval {iv} outside [{a}, {b}]")
        if self.campaign.t is not None and self.campaign.t > self.simulation.T:
            raise ValueError(f"campaign t={self.campaign.t} exceeds the simulated horizon T={self.simulation.T}")
        if self.campaign.U > self.horizon:
            raise ValueError(f"campaign U={self.campaign.U} exceeds the horizon {self.horizon}")
        return self

    @property
    def horizon(self) -> float:
        return self.campaign.t if self.campaign.t is not None else self.simulation.T


# ── Load / dump ────────────────────────────────────────────────


def load_config(source: str | Path, text: str | None = None) -> ExperimentConfig:
    """Parse a TOML file (or the given text) into a validated config."""
    if text is None:
        path = Path(source)
        try:
            text = path.read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}", location=str(path)) from exc
    return parse_config(text)


def parse_config(text: str) -> ExperimentConfig:
    try:
        data = tomllib.loads(text)
    except tomllib.TOMLDecodeError as exc:
        match = re.search(r"line (\d+)", str(exc))
        raise ConfigError(f"invalid TOML: {exc}", line=int(match.group(1)) if match else None) from exc
    return config_from_dict(data, text)


def config_from_dict(data: dict, text: str | None = None) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        err = exc.errors()[0]
        loc = [str(p) for p in err["loc"]]
        line = _locate(text, err["loc"]) if text else None
        raise ConfigError(err["msg"], location=".".join(loc) or None, line=line) from exc


def _locate(text: str, loc: tuple) -> int | None:
    """Best-effort line number of a key path inside TOML text."""
    lines = text.splitlines()
    start = 0
    keys = [p for p in loc if isinstance(p, str)]
    if not keys:
        return None
    section, key = keys[:-1], keys[-1]
    if section:
        header = re.compile(r"^\s*\[\[?\s*" + re.escape(".".join(section)) + r"\s*\]\]?\s*$")
        for i, line in enumerate(lines):
            if header.match(line):
                start = i
                break
    key_re = re.compile(r"^\s*" + re.escape(key) + r"\s*=")
    for i in range(start, len(lines)):
        if key_re.match(lines[i]):
            return i + 1
    # a whole section failed its own validation
    header = re.compile(r"^\s*\[\[?\s*" + re.escape(".".join(keys)) + r"\s*\]\]?\s*$")
    for i, line in enumerate(lines):
        if header.match(line):
            return i + 1
    return None


def dump_config(cfg: ExperimentConfig) -> str:
    return tomli_w.dumps(cfg.model_dump(mode="json", exclude_none=True))


def canonical_hash(payload: dict) -> str:
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def config_hash(cfg: ExperimentConfig) -> str:
    return canonical_hash(cfg.model_dump(mode="json"))


# ── Builders ───────────────────────────────────────────────────


def derived_seed(seed: int, stream: int) -> int:
    """Independent seed for a secondary random stream of one replicate."""
    return int(np.random.SeedSequence([seed, stream]).generate_state(1)[0])


def build_space(cfg: ExperimentConfig, J: int | None = None) -> SpaceSpec:
    s = cfg.space
    try:
        return SpaceSpec(s.variant, int(J or s.J), s.a, s.b)
    except LabError as exc:
        raise ConfigError(str(exc), location="space") from exc


def build_semigroup(cfg: ExperimentConfig) -> SemigroupSpec:
    return SemigroupSpec(cfg.semigroup.variant, cfg.semigroup.kappa)


def kernel_function(cfg: ExperimentConfig):
    """Covariance-style kernel q(x, y) for constant_kernel models."""
    v = cfg.volatility
    a, b = cfg.space.a, cfg.space.b
    width = b - a

    def gaussian(x, y):
        return v.scale * np.exp(-((x - y) ** 2) / (2.0 * v.length**2))

    if v.kernel == "gaussian":
        return gaussian
    if v.kernel == "damped_gaussian":
        return lambda x, y: gaussian(x, y) * np.sin(np.pi * (x - a) / width) * np.sin(np.pi * (y - a) / width)
    return lambda x, y: v.scale * np.exp(-np.abs(x - y) / v.length)


def build_vol(cfg: ExperimentConfig, space: SpaceSpec, seed: int | None = None) -> VolModel:
    """Volatility model on the given space; fBm paths are drawn from a stream derived from seed."""
    v = cfg.volatility
    S = build_semigroup(cfg)
    try:
        if v.model == CONSTANT_KERNEL:
            vol = VolModel.constant(hilbert_core.kernel_operator(space, kernel_function(cfg)))
        elif v.model == RANK_ONE_FROZEN:
            if v.shape == "fbm":
                X = simulation_service.fbm_function(space, v.hurst, derived_seed(cfg.seed if seed is None else seed, 1))
            else:
                lo, hi = v.interval if v.interval is not None else (space.a, space.b)
                X = hilbert_core.indicator(space, lo, hi)
            vol = VolModel.rank_one(X, S if v.transport else None)
        else:
            vol = VolModel.heat_diagonal(space, v.c, v.r, v.eps)
        if v.modulation != "none":
            vol = vol.modulated(MODULATIONS[v.modulation], v.modulation)
        if v.drift:
            vol = vol.with_drift(hilbert_core.constant(space, v.drift))
    except LabError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(str(exc), location="volatility") from exc
    return vol


def build_functionals(cfg: ExperimentConfig, space: SpaceSpec):
    """(label, test tensor) pairs for the configured functionals."""
    out = []
    for i, f in enumerate(cfg.functionals):
        try:
            if f.kind == "interval_square":
                h = hilbert_core.indicator(space, f.lo, f.hi)
            elif f.kind == "point_square":
                h = hilbert_core.evaluation_functional(space, f.x)
            elif f.kind == "spread_square":
                h = hilbert_core.evaluation_functional(space, f.x) - hilbert_core.evaluation_functional(space, f.y)
            else:
                h = hilbert_core.basis_vector(space, f.j)
        except LabError as exc:
            raise ConfigError(str(exc), location=f"functionals.{i}") from exc
        out.append((f.label, RankOneTestTensor.square(h)))
    return out


def needs_commensurate_grid(cfg: ExperimentConfig) -> bool:
    return cfg.semigroup.variant in ("nilpotent_shift", "sobolev_shift")


def campaign_resolution(cfg: ExperimentConfig, n_grid: list[int] | None = None) -> int:
    """Grid size J shared by every n of a campaign.

    Shift models need the fine step on the grid, so the cells spanned by the
    horizon must be a multiple of every n; the configured J is refined if not.
    """
    J = cfg.space.J
    if not needs_commensurate_grid(cfg):
        return J
    n_grid = n_grid or cfg.campaign.n_grid
    T = cfg.simulation.T
    width = cfg.space.b - cfg.space.a
    per_horizon = J * T / width
    lcm = math.lcm(*n_grid)
    if abs(per_horizon - round(per_horizon)) < 1e-9 * per_horizon and round(per_horizon) % lcm == 0:
        return J
    cells = lcm * math.ceil(per_horizon / lcm - 1e-9)
    target = cells * width / T
    if abs(target - round(target)) > 1e-9 * target:
        raise ConfigError(
            f"no grid on ({cfg.space.a}, {cfg.space.b}) puts every n in {n_grid} on whole cells for T={T}",
            location="space.J",
        )
    refined = int(round(target))
    logger.info(f"grid refined from J={J} to J={refined} for shift commensurability")
    return refined
