"""Output files: atomic CSV/JSON writes, manifests, resume bookkeeping."""

from __future__ import annotations

import csv
import io
import json
import os
import tempfile
from pathlib import Path
from typing import Any, Iterable, Optional, Sequence

import numpy as np

from core.errors import ConfigError, VdwCoherenceError
from core.logger import get_logger
from core.models import CoherenceCurve, NoiseCorrelation, RunManifest, SpinPair, SweepResult

COHERENCE_HEADER = ["t_ms", "L_abs", "L_re", "L_im"]
CORRELATION_HEADER = ["t_ms", "C_rad2_per_ms2"]
PAIR_HEADER = ["i", "j", "omega_m1", "delta", "kappa", "contribution", "r_ij_A", "theta_deg"]
_SWEEP_COMPONENTS = (("host", "host"), ("substrate", "sub"), ("total", "total"))
SWEEP_HEADER = ["delta_nm"] + [
    column
    for _, short in _SWEEP_COMPONENTS
    for column in (
        f"T2_{short}_ms",
        f"n_{short}",
        f"T2_{short}_mean_ms",
        f"T2_{short}_std_ms",
        f"n_{short}_mean",
        f"n_{short}_std",
    )
]
MANIFEST_FILE = "manifest.json"
PROGRESS_FILE = "progress.json"
ERROR_FILE = "error.json"


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    handle, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(handle, "w", encoding="utf-8", newline="") as stream:
            stream.write(text)
            stream.flush()
            os.fsync(stream.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def jsonable(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(key): jsonable(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [jsonable(item) for item in value]
    if isinstance(value, np.ndarray):
        return jsonable(value.tolist())
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (float, np.floating)):
        value = float(value)
        return value if np.isfinite(value) else str(value)
    return value


def atomic_write_json(path: Path, payload: Any) -> None:
    text = json.dumps(jsonable(payload), indent=2, sort_keys=True, ensure_ascii=False, allow_nan=False)
    atomic_write_text(path, text + "\n")


def write_csv(path: Path, fieldnames: Sequence[str], rows: Iterable[dict[str, Any]]) -> None:
    buffer = io.StringIO()
    writer = csv.DictWriter(buffer, fieldnames=list(fieldnames), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow({key: _cell(row[key]) for key in fieldnames})
    atomic_write_text(path, buffer.getvalue())


def _cell(value: Any) -> Any:
    if isinstance(value, (float, np.floating)):
        return repr(float(value))
    if isinstance(value, np.integer):
        return int(value)
    return value


def coherence_rows(curve: CoherenceCurve) -> list[dict[str, Any]]:
    raw = curve.raw if curve.raw is not None else np.asarray(curve.values, dtype=complex)
    return [
        {"t_ms": t, "L_abs": value, "L_re": z.real, "L_im": z.imag}
        for t, value, z in zip(curve.times, curve.values, raw)
    ]


def write_coherence_csv(path: Path, curve: CoherenceCurve) -> None:
    write_csv(path, COHERENCE_HEADER, coherence_rows(curve))


def read_coherence_csv(path: Path, seed: Optional[int] = None) -> CoherenceCurve:
    with open(path, encoding="utf-8", newline="") as handle:
        reader = csv.DictReader(handle)
        if reader.fieldnames != COHERENCE_HEADER:
            raise ConfigError(f"{path} is not a coherence table.")
        rows = list(reader)
    times = np.array([float(row["t_ms"]) for row in rows])
    values = np.array([float(row["L_abs"]) for row in rows])
    raw = np.array([complex(float(row["L_re"]), float(row["L_im"])) for row in rows])
    return CoherenceCurve(times=times, values=values, raw=raw, seed=seed)


def write_correlation_csv(path: Path, correlation: NoiseCorrelation) -> None:
    write_csv(
        path,
        CORRELATION_HEADER,
        ({"t_ms": t, "C_rad2_per_ms2": c} for t, c in zip(correlation.times, correlation.values)),
    )


def write_pair_csv(path: Path, pairs: Sequence[SpinPair]) -> None:
    write_csv(
        path,
        PAIR_HEADER,
        (
            {
                "i": pair.i,
                "j": pair.j,
                "omega_m1": pair.omega_m1,
                "delta": pair.delta,
                "kappa": pair.kappa,
                "contribution": pair.contribution,
                "r_ij_A": pair.r_ij,
                "theta_deg": pair.theta_deg,
            }
            for pair in pairs
        ),
    )


def write_sweep_csv(path: Path, sweep: SweepResult) -> None:
    """One row per thickness: ensemble-curve fits plus mean and SD of the per-configuration fits."""
    nan = float("nan")
    rows = []
    for k, delta in enumerate(sweep.deltas):
        row: dict[str, Any] = {"delta_nm": delta}
        for component, short in _SWEEP_COMPONENTS:
            fit = getattr(sweep, component)[k]
            row[f"T2_{short}_ms"] = fit.T2
            row[f"n_{short}"] = fit.n
            stats = sweep.statistics[k][component] if sweep.statistics else None
            row[f"T2_{short}_mean_ms"] = stats.T2_mean if stats else nan
            row[f"T2_{short}_std_ms"] = stats.T2_std if stats else nan
            row[f"n_{short}_mean"] = stats.n_mean if stats else nan
            row[f"n_{short}_std"] = stats.n_std if stats else nan
        rows.append(row)
    write_csv(path, SWEEP_HEADER, rows)


def write_long_csv(path: Path, series: dict[str, CoherenceCurve], label: str = "series") -> None:
    """Plot-ready long format: one row per (series, time)."""
    rows = [
        {label: name, "t_ms": t, "L_abs": value}
        for name, curve in series.items()
        for t, value in zip(curve.times, curve.values)
    ]
    write_csv(path, [label, "t_ms", "L_abs"], rows)


def write_manifest(out_dir: Path, manifest: RunManifest) -> Path:
    path = Path(out_dir) / MANIFEST_FILE
    atomic_write_json(path, manifest.to_dict())
    return path


def write_error(out_dir: Optional[Path], exc: VdwCoherenceError) -> dict[str, Any]:
    payload = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code}
    if out_dir is not None:
        try:
            atomic_write_json(Path(out_dir) / ERROR_FILE, payload)
        except OSError as write_exc:
            get_logger().error("Could not write %s: %s", ERROR_FILE, write_exc)
    return payload


def clear_error(out_dir: Path) -> None:
    """Drop an error file left behind by an earlier failed run."""
    path = Path(out_dir) / ERROR_FILE
    if path.is_file():
        path.unlink()
        get_logger().info("Removed stale %s", path)


class ProgressTracker:
    """Per-seed completion record; a different config hash starts over.

    Each completed item may carry a small record (diagnostic counters) that a
    resumed run reads back instead of recomputing.
    """

    def __init__(self, out_dir: Path, config_hash: str) -> None:
        self.path = Path(out_dir) / PROGRESS_FILE
        self.config_hash = config_hash
        self.records: dict[str, dict[str, Any]] = {}
        self.logger = get_logger()
        self._load()

    def _load(self) -> None:
        if not self.path.is_file():
            return
        try:
            data = json.loads(self.path.read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as exc:
            self.logger.warning("Ignoring unreadable %s: %s", self.path, exc)
            return
        if data.get("config_hash") != self.config_hash:
            self.logger.info("Config changed since the last run; starting over.")
            return
        stored = data.get("records", {})
        self.records = {
            str(item): dict(stored.get(str(item), {})) for item in data.get("completed", [])
        }

    def done(self, item: str) -> bool:
        return str(item) in self.records

    def record(self, item: str) -> dict[str, Any]:
        return dict(self.records.get(str(item), {}))

    def mark(self, item: str, **record: Any) -> None:
        self.records[str(item)] = record
        atomic_write_json(
            self.path,
            {
                "config_hash": self.config_hash,
                "completed": sorted(self.records),
                "records": {key: self.records[key] for key in sorted(self.records)},
            },
        )
