import json

import pytest

from cli.commands import execute
from main import main

EMPTY_BATH = """
[stack]
bath_radius_A = 12.0

[stack.host]
material = "Si28"
n_layers = 1

[time]
t_max_ms = 1.0
points = 11

[ensemble]
size = 2
master_seed = 3
"""

SPARSE_CARBON = """
[stack]
bath_radius_A = 25.0

[stack.host]
material = "graphene"
n_layers = 1

[stack.substrate_below]
material = "graphene"
n_layers = 1
gap_A = 3.4

[cce]
order = 2

[time]
t_max_ms = 4.0
points = 21

[ensemble]
size = 3
master_seed = 17
"""


def _write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text, encoding="utf-8")
    return path


def _manifest(out_dir):
    return json.loads((out_dir / "manifest.json").read_text(encoding="utf-8"))


def test_materials_listing(capsys):
    assert main(["materials"]) == 0
    output = capsys.readouterr().out
    listed = [line.strip() for line in output.split("Isotopes")[0].splitlines() if line.startswith("  ")]
    assert len(listed) >= 8
    assert {"MoS2", "WS2", "graphene", "hBN"} <= set(listed)
    isotopes = {line.split()[0] for line in output.split("Isotopes")[1].splitlines()[1:] if line.strip()}
    assert {"13C", "183W", "95Mo", "33S"} <= isotopes


def test_material_details(capsys):
    assert main(["materials", "--name", "hBN"]) == 0
    assert json.loads(capsys.readouterr().out.split("\n", 1)[1])["name"] == "hBN"


def test_unknown_material_query(capsys):
    assert main(["materials", "--name", "unobtainium"]) == 2
    assert "unobtainium" in capsys.readouterr().err


def test_threads_must_be_positive(tmp_path):
    assert main(["coherence", "--config", str(tmp_path / "x.toml"), "--threads", "0"]) == 2


def test_config_errors_exit_with_two(tmp_path):
    config = _write(tmp_path, EMPTY_BATH + "\n[field]\ncolour = 1\n")
    out_dir = tmp_path / "out"
    assert main(["coherence", "--config", str(config), "--out", str(out_dir)]) == 2
    error = json.loads((out_dir / "error.json").read_text(encoding="utf-8"))
    assert error["exit_code"] == 2
    assert "field.colour" in error["message"]


def test_missing_config(tmp_path):
    result = execute("coherence", config_path=None, out_dir=tmp_path / "out")
    assert result.exit_code == 2 and not result.success


def test_empty_bath_reports_insufficient_decay(data_dir, tmp_path):
    config = _write(tmp_path, EMPTY_BATH)
    out_dir = tmp_path / "out"
    assert main(["coherence", "--config", str(config), "--out", str(out_dir)]) == 4

    ensemble = (out_dir / "coherence_ensemble.csv").read_text(encoding="utf-8").splitlines()
    assert all(line.split(",")[1] == "1.0" for line in ensemble[1:])
    assert json.loads((out_dir / "error.json").read_text(encoding="utf-8"))["exit_code"] == 4
    assert _manifest(out_dir)["results"]["fit"] == "insufficient decay"


def test_pseudospin_without_pairs(data_dir, tmp_path):
    config = _write(tmp_path, EMPTY_BATH)
    out_dir = tmp_path / "out"
    assert main(["pseudospin", "--config", str(config), "--out", str(out_dir)]) == 0
    assert (out_dir / "pairs.csv").read_text(encoding="utf-8") == (
        "i,j,omega_m1,delta,kappa,contribution,r_ij_A,theta_deg\n"
    )
    manifest = _manifest(out_dir)
    assert manifest["results"]["pair_count"] == 0
    assert "coherence_pseudospin.csv" in manifest["files"]


def test_successful_run_clears_a_stale_error_file(data_dir, tmp_path):
    config = _write(tmp_path, EMPTY_BATH)
    out_dir = tmp_path / "out"
    out_dir.mkdir()
    (out_dir / "error.json").write_text('{"exit_code": 5}', encoding="utf-8")
    assert main(["pseudospin", "--config", str(config), "--out", str(out_dir)]) == 0
    assert not (out_dir / "error.json").exists()
    assert "error.json" not in _manifest(out_dir)["files"]


def _data_files(out_dir):
    return {
        path.name: path.read_bytes()
        for path in sorted(out_dir.iterdir())
        if path.suffix in (".csv", ".xyz")
    }


def test_runs_are_byte_identical_across_thread_counts(data_dir, tmp_path):
    config = _write(tmp_path, SPARSE_CARBON)
    codes = []
    for threads, name in ((1, "serial"), (3, "threaded")):
        codes.append(
            main(["coherence", "--config", str(config), "--out", str(tmp_path / name), "--threads", str(threads)])
        )
    assert codes[0] == codes[1]
    assert codes[0] in (0, 4)
    serial, threaded = _data_files(tmp_path / "serial"), _data_files(tmp_path / "threaded")
    assert serial and serial == threaded
    assert _manifest(tmp_path / "serial")["config_hash"] == _manifest(tmp_path / "threaded")["config_hash"]


def test_resumed_run_reproduces_outputs(data_dir, tmp_path):
    config = _write(tmp_path, SPARSE_CARBON)
    out_dir = tmp_path / "out"
    main(["coherence", "--config", str(config), "--out", str(out_dir)])
    first = _data_files(out_dir)
    counters = {key: _manifest(out_dir)["diagnostics"][key] for key in ("divergence_count", "clip_count")}
    main(["coherence", "--config", str(config), "--out", str(out_dir)])
    assert _data_files(out_dir) == first
    manifest = _manifest(out_dir)
    assert len(manifest["diagnostics"]["resumed_seeds"]) == 3
    assert {key: manifest["diagnostics"][key] for key in counters} == counters
    records = json.loads((out_dir / "progress.json").read_text(encoding="utf-8"))["records"]
    assert len(records) == 3
    assert all(set(record) == {"divergence_count", "clip_count"} for record in records.values())
    assert sorted(manifest["files"]) == manifest["files"]


def test_seed_flag_overrides_the_config(data_dir, tmp_path):
    config = _write(tmp_path, SPARSE_CARBON)
    out_dir = tmp_path / "out"
    main(["coherence", "--config", str(config), "--out", str(out_dir), "--seed", "0x10"])
    assert _manifest(out_dir)["parameters"]["master_seed"] == 16


@pytest.mark.parametrize("command", ["sweep", "crossover"])
def test_substrate_commands_validate_their_blocks(data_dir, tmp_path, command):
    config = _write(tmp_path, EMPTY_BATH)
    assert main([command, "--config", str(config), "--out", str(tmp_path / "out")]) == 2


def test_noise_scan_reports_decay_per_thickness(data_dir, tmp_path):
    text = SPARSE_CARBON + '\n[noise]\ncompare_cce = false\ndelta_scan_nm = [0.4, 0.8]\n'
    config = _write(tmp_path, text)
    out_dir = tmp_path / "out"
    assert main(["noise", "--config", str(config), "--out", str(out_dir)]) == 0
    lines = (out_dir / "tau_c_scan.csv").read_text(encoding="utf-8").splitlines()
    assert lines[0] == "delta_nm,b,tau_C_ms,residual,T2_ms,n"
    assert len(lines) == 3
    scan = _manifest(out_dir)["results"]["tau_c_scan"]
    assert [row["delta_nm"] for row in scan] == [0.4, 0.8]
    assert all({"T2_ms", "n"} <= set(row) for row in scan)
