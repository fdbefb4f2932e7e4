"""
SPDE Volatility Lab - Artifact Writer
Plain-text run outputs: one directory per run holding report.json and CSV
tables. Writes go through a single lock so campaign workers never interleave.
"""

import csv
import json
import logging
import math
import threading
from pathlib import Path

import numpy as np

from config import settings
from services.errors import ArgumentError, DimensionError
from services.discrete_sampling import DiscreteSample
from services.hilbert_core import H1, L2, GridFunction, HSOperator, SpaceSpec
from services.semigroups import SemigroupSpec
from services.simulation import PathSample

logger = logging.getLogger("Artifacts")

_FMT = "%.17g"


def _clean(obj):
    """JSON-safe copy: numpy scalars and arrays unwrapped, non-finite floats as null."""
    if isinstance(obj, dict):
        return {str(k): _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _clean(obj.tolist())
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


class ArtifactWriter:
    """Reads and writes run artifacts."""

    def __init__(self):
        self._lock = threading.Lock()

    def run_dir(self, command: str, config_hash: str, output_dir: str | None = None) -> Path:
        root = Path(output_dir) if output_dir else Path(settings.OUTPUT_DIR) / f"{command}-{config_hash[:12]}"
        root.mkdir(parents=True, exist_ok=True)
        return root

    # ── Generic ────────────────────────────────────────────────

    def write_json(self, path: Path, payload: dict) -> Path:
        text = json.dumps(_clean(payload), indent=2, sort_keys=True) + "\n"
        with self._lock:
            Path(path).write_text(text, encoding="utf-8")
        logger.debug(f"wrote {path}")
        return Path(path)

    def write_text(self, path: Path, text: str) -> Path:
        with self._lock:
            Path(path).write_text(text, encoding="utf-8")
        return Path(path)

    def write_rows(self, path: Path, rows: list[dict]) -> Path:
        """CSV table with the union of row keys as header, in first-seen order."""
        header: list[str] = []
        for row in rows:
            header.extend(k for k in row if k not in header)
        with self._lock, open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=header)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: self._cell(v) for k, v in row.items()})
        return Path(path)

    @staticmethod
    def _cell(v):
        if isinstance(v, (float, np.floating)):
            return "" if not math.isfinite(v) else _FMT % v
        return v

    # ── Domain objects ─────────────────────────────────────────

    def write_function(self, path: Path, f: GridFunction) -> Path:
        space = f.space
        if space.variant == L2:
            cols, first = ("x", "value"), space.points
        elif space.variant == H1:
            cols, first = ("node", "coeff"), space.points
        else:
            cols, first = ("mode", "coeff"), space.points.astype(int)
        rows = [{cols[0]: p, cols[1]: float(c)} for p, c in zip(first.tolist(), f.coeffs)]
        return self.write_rows(path, rows)

    def write_operator(self, path: Path, A: HSOperator) -> Path:
        with self._lock:
            np.savetxt(path, A.kernel, fmt=_FMT, delimiter=",")
        return Path(path)

    def read_operator(self, path: Path, space: SpaceSpec) -> HSOperator:
        Q = np.loadtxt(path, delimiter=",", ndmin=2)
        if Q.shape != (space.J, space.J):
            raise DimensionError(f"{path} holds a {Q.shape} kernel, expected {space.J}x{space.J}")
        return HSOperator(space, Q)

    def read_reference(self, csv_path: Path, space: SpaceSpec, name: str = "integrated") -> HSOperator | None:
        """The <name>.csv operator simulate writes next to a path, if present."""
        ref = Path(csv_path).with_name(f"{name}.csv")
        if not ref.exists():
            return None
        return self.read_operator(ref, space)

    def write_path(self, directory: Path, sample: PathSample, name: str = "path") -> Path:
        """Coefficient rows in <name>.csv plus a <name>.json sidecar."""
        directory = Path(directory)
        csv_path = directory / f"{name}.csv"
        with self._lock:
            np.savetxt(csv_path, sample.values, fmt=_FMT, delimiter=",")
        meta = {
            "space": sample.space.describe(),
            "dt": sample.dt,
            "n": sample.n,
            "semigroup": sample.semigroup.describe(),
            "seed": sample.seed,
            "volatility": sample.true_vol.describe() if sample.true_vol is not None else None,
        }
        self.write_json(directory / f"{name}.json", meta)
        return csv_path

    def read_path(self, csv_path: Path) -> PathSample:
        csv_path = Path(csv_path)
        sidecar = csv_path.with_suffix(".json")
        if not sidecar.exists():
            raise ArgumentError(f"missing sidecar {sidecar}")
        meta = json.loads(sidecar.read_text(encoding="utf-8"))
        sp = meta["space"]
        space = SpaceSpec(sp["variant"], sp["J"], sp.get("a", 0.0), sp.get("b", 1.0))
        sg = meta["semigroup"]
        S = SemigroupSpec(sg["variant"], sg.get("kappa", 1.0))
        values = np.loadtxt(csv_path, delimiter=",", ndmin=2)
        return PathSample(space, values, float(meta["dt"]), S, seed=meta.get("seed"))

    def write_discrete(self, path: Path, data: DiscreteSample) -> Path:
        header = (
            f"spatial_step={_FMT % data.spatial_step},temporal_step={_FMT % data.temporal_step},"
            f"case={data.case},a={_FMT % data.domain[0]},b={_FMT % data.domain[1]}"
        )
        with self._lock:
            np.savetxt(path, data.values, fmt=_FMT, delimiter=",", header=header)
        return Path(path)

    def read_discrete(self, path: Path) -> DiscreteSample:
        with open(path, encoding="utf-8") as fh:
            first = fh.readline().lstrip("#").strip()
        meta = dict(item.split("=", 1) for item in first.split(","))
        values = np.loadtxt(path, delimiter=",", ndmin=2)
        return DiscreteSample(
            values,
            float(meta["spatial_step"]),
            float(meta["temporal_step"]),
            meta["case"],
            (float(meta["a"]), float(meta["b"])),
        )


artifact_writer = ArtifactWriter()
