"""Result files: per-step CSVs, summaries, run manifest and run comparison."""
from __future__ import annotations

import csv
import hashlib
import json
import logging
from collections.abc import Iterable, Sequence
from pathlib import Path
from typing import Any

import numpy as np

from slam import __version__
from slam.errors import MissingManifest
from slam.metrics import ue_error_summary
from slam.schemas import ScenarioConfig
from slam.simulation import STEP_COLUMNS, RunResult, aggregate_runs

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"
SUMMARY_NAME = "summary.csv"
UE_SUMMARY_NAME = "ue_summary.csv"
# Final steps averaged for the end-of-run comparison rows.
TAIL_STEPS = 10


def _sha256(p: Path) -> str:
    """Compute SHA256 hash of a file."""
    h = hashlib.sha256()
    with p.open("rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _fmt(value: Any) -> str:
    if isinstance(value, (int, np.integer)) and not isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return f"{float(value):.9g}"
    return "" if value is None else str(value)


def write_csv(path: Path, columns: Sequence[str], rows: Iterable[dict[str, Any]]) -> Path:
    """UTF-8 CSV with a header row and fixed column order."""
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(row.get(c)) for c in columns])
    return path


def read_csv(path: Path) -> list[dict[str, str]]:
    with path.open("r", encoding="utf-8", newline="") as f:
        return list(csv.DictReader(f))


def step_csv_name(run: int) -> str:
    return f"run_{run:03d}_steps.csv"


def write_run_outputs(out_dir: str | Path, scenario: ScenarioConfig, results: Sequence[RunResult]) -> Path:
    """Write every result file of a Monte Carlo experiment, the manifest last.

    Returns:
        Path to manifest.json.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []

    step_files = []
    for res in results:
        p = write_csv(out / step_csv_name(res.run), STEP_COLUMNS, res.records)
        written.append(p)
        step_files.append(p.name)

    summary_rows = aggregate_runs(results)
    summary_columns = ["step", "runs"] + [f"{c}_{s}" for c in STEP_COLUMNS[1:] for s in ("mean", "std")]
    written.append(write_csv(out / SUMMARY_NAME, summary_columns, summary_rows))

    completed = [r for r in results if r.records]
    if completed:
        ue = ue_error_summary(
            [np.vstack(r.estimates) for r in completed],
            [np.vstack(r.truths) for r in completed],
            [np.vstack(r.stds) for r in completed],
        )
        ue_rows = [{"metric": k, "value": v} for k, v in vars(ue).items()]
        written.append(write_csv(out / UE_SUMMARY_NAME, ["metric", "value"], ue_rows))

    manifest = {
        "code_version": __version__,
        "seed": scenario.seed,
        "linearizer": scenario.filter.linearizer.value,
        "gamma": scenario.filter.gamma,
        "runs": len(results),
        "config": scenario.model_dump(mode="json"),
        "step_csvs": step_files,
        "summary": SUMMARY_NAME,
        "failed_runs": [{"run": r.run, "seed": r.seed, "error": r.error} for r in results if r.diverged],
        "files": [
            {"file": p.name, "sha256": _sha256(p), "size_bytes": p.stat().st_size} for p in written
        ],
    }
    manifest_path = out / MANIFEST_NAME
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    logger.info(f"Wrote {len(written)} result files and {MANIFEST_NAME} to {out}")
    return manifest_path


def load_manifest(run_dir: str | Path) -> dict[str, Any]:
    """Read a run directory's manifest.

    Raises:
        MissingManifest: directory or manifest absent or unreadable.
    """
    path = Path(run_dir) / MANIFEST_NAME
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as e:
        raise MissingManifest(f"no readable manifest in {run_dir}: {e}") from e


def _summary_columns(run_dir: Path) -> dict[str, np.ndarray]:
    rows = read_csv(run_dir / SUMMARY_NAME)
    if not rows:
        return {}
    return {k: np.array([float(r[k]) for r in rows]) for k in rows[0]}


def _ue_summary(run_dir: Path) -> dict[str, float]:
    path = run_dir / UE_SUMMARY_NAME
    if not path.exists():
        return {}
    return {r["metric"]: float(r["value"]) for r in read_csv(path) if r["value"] != ""}


def _headline(run_dir: Path) -> dict[str, float]:
    cols = _summary_columns(run_dir)
    out: dict[str, float] = {}
    if cols:
        tail = slice(-TAIL_STEPS, None)
        for c in ("gospa_va", "gospa_sp"):
            out[f"{c}_mean"] = float(cols[f"{c}_mean"].mean())
            out[f"{c}_tail_mean"] = float(cols[f"{c}_mean"][tail].mean())
        for c in ("iplf_iters", "predict_ms", "update_ms", "step_ms"):
            out[f"{c}_mean"] = float(cols[f"{c}_mean"].mean())
    ue = _ue_summary(run_dir)
    for k in ("pos_rmse", "heading_rmse_deg", "bias_rmse", "pos_std", "heading_std_deg", "bias_std"):
        if k in ue:
            out[k] = ue[k]
    return out


def compare_runs(dir_a: str | Path, dir_b: str | Path, out_dir: str | Path | None = None) -> list[dict[str, Any]]:
    """Side-by-side headline metrics of two run directories.

    Writes comparison.csv (metric, a, b, delta) and comparison_steps.csv
    (per-step mean GOSPA curves) into `out_dir` when given.

    Raises:
        MissingManifest: either directory lacks a manifest.
    """
    dir_a, dir_b = Path(dir_a), Path(dir_b)
    man_a, man_b = load_manifest(dir_a), load_manifest(dir_b)
    head_a, head_b = _headline(dir_a), _headline(dir_b)

    rows = [
        {"metric": "linearizer", "a": man_a.get("linearizer"), "b": man_b.get("linearizer"), "delta": None}
    ]
    for metric in [k for k in head_a if k in head_b]:
        a, b = head_a[metric], head_b[metric]
        rows.append({"metric": metric, "a": a, "b": b, "delta": b - a})

    if out_dir is not None:
        out = Path(out_dir)
        write_csv(out / "comparison.csv", ["metric", "a", "b", "delta"], rows)
        cols_a, cols_b = _summary_columns(dir_a), _summary_columns(dir_b)
        if cols_a and cols_b:
            n = min(len(cols_a["step"]), len(cols_b["step"]))
            curve = [
                {
                    "step": int(cols_a["step"][i]),
                    "gospa_va_a": cols_a["gospa_va_mean"][i],
                    "gospa_va_b": cols_b["gospa_va_mean"][i],
                    "gospa_sp_a": cols_a["gospa_sp_mean"][i],
                    "gospa_sp_b": cols_b["gospa_sp_mean"][i],
                }
                for i in range(n)
            ]
            write_csv(
                out / "comparison_steps.csv",
                ["step", "gospa_va_a", "gospa_va_b", "gospa_sp_a", "gospa_sp_b"],
                curve,
            )
    return rows


def format_comparison(rows: Sequence[dict[str, Any]]) -> str:
    """Plain-text table of compare_runs rows."""
    lines = [f"{'metric':<22} {'a':>14} {'b':>14} {'delta':>14}"]
    for r in rows:
        lines.append(f"{r['metric']:<22} {_fmt(r['a']):>14} {_fmt(r['b']):>14} {_fmt(r['delta']):>14}")
    return "\n".join(lines)
