"""
Command line: run / compare / quadratic subcommands and their exit codes.
"""
import json

import pytest
import yaml

from slam.cli import EXIT_CONFIG, EXIT_NO_MANIFEST, EXIT_OK, main
from slam.reporting import load_manifest, read_csv


def run_minimal(minimal_scenario_path, out, *extra):
    return main(["run", "--config", str(minimal_scenario_path), "--runs", "1", "--out", str(out), *extra])


def test_quadratic_demo_prints_iterates(capsys):
    assert main(["quadratic"]) == EXIT_OK
    out = capsys.readouterr().out
    assert "5.4935" in out
    assert "4.8701" in out
    assert "(conv)" in out
    assert "IPLF closer to the true posterior: yes" in out


def test_run_writes_outputs(minimal_scenario_path, tmp_path, capsys):
    out = tmp_path / "ipl"
    assert run_minimal(minimal_scenario_path, out) == EXIT_OK

    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert printed["ok"] is True
    assert printed["failed_runs"] == 0

    rows = read_csv(out / "run_000_steps.csv")
    assert [r["step"] for r in rows] == ["1", "2"]
    manifest = load_manifest(out)
    assert manifest["seed"] == 7
    assert manifest["linearizer"] == "ipl"
    assert manifest["step_csvs"] == ["run_000_steps.csv"]
    names = {f["file"] for f in manifest["files"]}
    assert {"run_000_steps.csv", "summary.csv", "ue_summary.csv"} <= names
    assert all(len(f["sha256"]) == 64 for f in manifest["files"])


def test_run_without_timing_is_byte_identical(minimal_scenario_path, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_minimal(minimal_scenario_path, a, "--no-timing") == EXIT_OK
    assert run_minimal(minimal_scenario_path, b, "--no-timing") == EXIT_OK
    for name in ("run_000_steps.csv", "summary.csv", "ue_summary.csv", "manifest.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes(), name


def test_run_ek_reports_single_iteration(minimal_scenario_path, tmp_path):
    out = tmp_path / "ek"
    assert run_minimal(minimal_scenario_path, out, "--filter", "ek", "--no-timing") == EXIT_OK
    assert load_manifest(out)["linearizer"] == "ek"
    assert {r["iplf_iters"] for r in read_csv(out / "run_000_steps.csv")} == {"1"}


def test_run_bad_config_exits_2(tmp_path, minimal_scenario_path, capsys):
    data = yaml.safe_load(minimal_scenario_path.read_text())
    data["filter"]["bogus"] = True
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump(data))
    assert main(["run", "--config", str(bad), "--out", str(tmp_path / "x")]) == EXIT_CONFIG
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert printed["ok"] is False
    assert "filter.bogus" in printed["error"]
    assert not (tmp_path / "x").exists()


def test_run_rejects_zero_runs(minimal_scenario_path):
    with pytest.raises(SystemExit):
        main(["run", "--config", str(minimal_scenario_path), "--runs", "0"])


def test_compare_self_has_zero_deltas(minimal_scenario_path, tmp_path, capsys):
    out = tmp_path / "ipl"
    assert run_minimal(minimal_scenario_path, out, "--no-timing") == EXIT_OK
    cmp_dir = tmp_path / "cmp"
    assert main(["compare", str(out), str(out), "--out", str(cmp_dir)]) == EXIT_OK
    assert "gospa_va_mean" in capsys.readouterr().out

    rows = read_csv(cmp_dir / "comparison.csv")
    assert rows[0]["metric"] == "linearizer"
    assert all(float(r["delta"]) == 0.0 for r in rows[1:])
    steps = read_csv(cmp_dir / "comparison_steps.csv")
    assert [r["step"] for r in steps] == ["1", "2"]
    assert all(r["gospa_va_a"] == r["gospa_va_b"] for r in steps)


def test_compare_missing_manifest_exits_4(tmp_path, capsys):
    (tmp_path / "empty").mkdir()
    assert main(["compare", str(tmp_path / "empty"), str(tmp_path / "missing")]) == EXIT_NO_MANIFEST
    printed = json.loads(capsys.readouterr().out.strip().splitlines()[-1])
    assert printed["ok"] is False
