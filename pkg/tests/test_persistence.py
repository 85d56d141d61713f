import csv
import json

import numpy as np
import pytest

from core.errors import ConfigError, InsufficientDecayError
from core.models import CoherenceCurve, DecayFit, EnsembleStatistics, RunManifest, SweepResult
from core.persistence import (
    SWEEP_HEADER,
    ProgressTracker,
    atomic_write_json,
    atomic_write_text,
    clear_error,
    jsonable,
    read_coherence_csv,
    write_coherence_csv,
    write_error,
    write_long_csv,
    write_manifest,
    write_sweep_csv,
)


def test_atomic_write_leaves_no_temporary_files(tmp_path):
    target = tmp_path / "nested" / "out.txt"
    atomic_write_text(target, "first\n")
    atomic_write_text(target, "second\n")
    assert target.read_text(encoding="utf-8") == "second\n"
    assert [path.name for path in target.parent.iterdir()] == ["out.txt"]


def test_jsonable_handles_numpy_and_infinities(tmp_path):
    payload = {"a": np.float64(1.5), "b": np.arange(3), "c": float("inf"), 4: (np.int64(2),)}
    assert jsonable(payload) == {"a": 1.5, "b": [0, 1, 2], "c": "inf", "4": [2]}
    atomic_write_json(tmp_path / "x.json", payload)
    assert json.loads((tmp_path / "x.json").read_text(encoding="utf-8"))["c"] == "inf"


def test_coherence_csv_preserves_values_exactly(tmp_path):
    times = np.linspace(0.0, 1.0, 7)
    raw = np.exp(-times**2 / 3) * np.exp(0.1j * times)
    curve = CoherenceCurve(times=times, values=np.abs(raw), raw=raw)
    path = tmp_path / "coherence.csv"
    write_coherence_csv(path, curve)
    assert path.read_text(encoding="utf-8").splitlines()[0] == "t_ms,L_abs,L_re,L_im"

    loaded = read_coherence_csv(path, seed=4)
    np.testing.assert_array_equal(loaded.values, curve.values)
    np.testing.assert_array_equal(loaded.raw, raw)
    assert loaded.seed == 4

    write_coherence_csv(tmp_path / "again.csv", loaded)
    assert (tmp_path / "again.csv").read_bytes() == path.read_bytes()


def test_read_rejects_foreign_tables(tmp_path):
    path = tmp_path / "other.csv"
    path.write_text("a,b\n1,2\n", encoding="utf-8")
    with pytest.raises(ConfigError):
        read_coherence_csv(path)


def test_long_csv(tmp_path):
    times = np.array([0.0, 1.0])
    series = {"a": CoherenceCurve(times=times, values=np.array([1.0, 0.5]))}
    write_long_csv(tmp_path / "fig.csv", series)
    assert (tmp_path / "fig.csv").read_text(encoding="utf-8") == (
        "series,t_ms,L_abs\na,0.0,1.0\na,1.0,0.5\n"
    )


def test_manifest_lists_files_sorted(tmp_path):
    manifest = RunManifest(config_hash="abc", code_version="0.1.0", command="coherence", files=["b", "a"])
    path = write_manifest(tmp_path, manifest)
    data = json.loads(path.read_text(encoding="utf-8"))
    assert data["files"] == ["a", "b"]
    assert data["config_hash"] == "abc"


def test_error_file_carries_exit_code(tmp_path):
    payload = write_error(tmp_path, InsufficientDecayError("flat"))
    assert payload == {"error": "InsufficientDecayError", "message": "flat", "exit_code": 4}
    assert json.loads((tmp_path / "error.json").read_text(encoding="utf-8")) == payload


def test_progress_resumes_only_for_the_same_config(tmp_path):
    progress = ProgressTracker(tmp_path, "hash-1")
    progress.mark(12)
    progress.mark(7)
    assert ProgressTracker(tmp_path, "hash-1").done(12)
    assert ProgressTracker(tmp_path, "hash-1").done("7")
    assert not ProgressTracker(tmp_path, "hash-2").done(12)

    (tmp_path / "progress.json").write_text("{not json", encoding="utf-8")
    assert not ProgressTracker(tmp_path, "hash-1").done(12)


def test_progress_keeps_per_item_records(tmp_path):
    progress = ProgressTracker(tmp_path, "hash-1")
    progress.mark(3, divergence_count=2, clip_count=1)
    progress.mark(4)
    reloaded = ProgressTracker(tmp_path, "hash-1")
    assert reloaded.record(3) == {"divergence_count": 2, "clip_count": 1}
    assert reloaded.record("4") == {}
    assert reloaded.record(5) == {}
    assert ProgressTracker(tmp_path, "hash-2").record(3) == {}


def test_stale_error_file_is_cleared(tmp_path):
    write_error(tmp_path, InsufficientDecayError("flat"))
    clear_error(tmp_path)
    assert not (tmp_path / "error.json").exists()
    clear_error(tmp_path)


def _fit(t2, n):
    return DecayFit(T2=t2, n=n, residual=0.0, window=(0.0, 1.0))


def test_sweep_csv_carries_ensemble_statistics(tmp_path):
    stats = EnsembleStatistics(
        ensemble_fit=_fit(2.0, 1.5),
        member_fits=(_fit(1.8, 2.0), _fit(2.4, 2.2)),
        n_mean=2.1,
        n_std=0.14,
        T2_mean=2.1,
        T2_std=0.42,
    )
    sweep = SweepResult(
        deltas=(5.0, 10.0),
        host=(_fit(2.0, 1.5),) * 2,
        substrate=(_fit(2.0, 1.5),) * 2,
        total=(_fit(2.0, 1.5),) * 2,
        configurations=2,
        statistics=({"host": stats, "substrate": stats, "total": stats},) * 2,
    )
    path = tmp_path / "sweep.csv"
    write_sweep_csv(path, sweep)
    with path.open(encoding="utf-8", newline="") as handle:
        rows = list(csv.DictReader(handle))
    assert list(rows[0]) == SWEEP_HEADER
    assert {"n_total_std", "T2_sub_mean_ms", "n_host_mean"} <= set(SWEEP_HEADER)
    assert float(rows[1]["n_total_std"]) == pytest.approx(0.14)
    assert float(rows[0]["T2_sub_std_ms"]) == pytest.approx(0.42)

    one = (_fit(2.0, 1.5),)
    bare = SweepResult(deltas=(5.0,), host=one, substrate=one, total=one, configurations=1)
    write_sweep_csv(path, bare)
    with path.open(encoding="utf-8", newline="") as handle:
        row = next(csv.DictReader(handle))
    assert np.isnan(float(row["n_host_mean"]))
    assert float(row["T2_host_ms"]) == pytest.approx(2.0)
