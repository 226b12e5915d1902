"""Turn run directories into summary artifacts: seed-aggregated results
tables, ablation tables, reliability curves and communication accounting,
emitted as CSV or aligned plain text.  Every number is recomputed from the
run directory alone, so re-running a report is byte-identical.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import federation as fed
from . import metrics

SCHEMA_VERSION = "1"


class ReportError(ValueError):
    pass


@dataclass
class ResultsTable:
    columns: tuple
    rows: list
    schema_version: str = SCHEMA_VERSION

    def to_csv(self) -> str:
        lines = [",".join(self.columns)]
        for row in self.rows:
            lines.append(",".join(_format_cell(v) for v in row))
        return "\n".join(lines) + "\n"

    def to_text(self) -> str:
        cells = [[str(c) for c in self.columns]] + [[_format_cell(v) for v in row] for row in self.rows]
        widths = [max(len(r[i]) for r in cells) for i in range(len(self.columns))]
        lines = []
        for ridx, row in enumerate(cells):
            lines.append("  ".join(value.ljust(widths[i]) for i, value in enumerate(row)).rstrip())
            if ridx == 0:
                lines.append("  ".join("-" * widths[i] for i in range(len(widths))).rstrip())
        return "\n".join(lines) + "\n"


def _format_cell(value) -> str:
    if isinstance(value, float):
        return f"{value:.4f}"
    return str(value)


# ---------------------------------------------------------------------------
# run-directory access


def is_run_dir(path) -> bool:
    return (Path(path) / "records.jsonl").exists()


@dataclass
class LoadedRun:
    path: Path
    cfg: fed.RunConfig
    seed: int
    records: list
    metrics_rows: list  # dicts parsed from metrics.csv

    def client_mean(self, column: str) -> float:
        return float(np.mean([row[column] for row in self.metrics_rows]))


def load_run(run_dir) -> LoadedRun:
    run_dir = Path(run_dir)
    if not is_run_dir(run_dir):
        raise ReportError(f"{run_dir} is not a run directory (no records.jsonl)")
    cfg = fed.load_config(run_dir / "config.txt")
    seed = int((run_dir / "seed.txt").read_text().strip())
    records = [json.loads(line) for line in (run_dir / "records.jsonl").read_text().splitlines()]
    rows = []
    lines = (run_dir / "metrics.csv").read_text().splitlines()
    header = lines[0].split(",")
    for line in lines[1:]:
        parts = line.split(",")
        row = dict(zip(header, parts))
        for key in ("f1", "ece", "bytes_up_per_round"):
            row[key] = float(row[key])
        rows.append(row)
    return LoadedRun(path=run_dir, cfg=cfg, seed=seed, records=records, metrics_rows=rows)


def _config_mismatch(a: fed.RunConfig, b: fed.RunConfig, ignore=()) -> list:
    differing = []
    for f in dataclasses.fields(fed.RunConfig):
        if f.name in ignore:
            continue
        if getattr(a, f.name) != getattr(b, f.name):
            differing.append(f.name)
    return differing


# ---------------------------------------------------------------------------
# tables


def _mean_std(values: np.ndarray) -> tuple:
    """Mean and population std; exactly zero std for identical values."""
    mean = float(values.mean())
    std = 0.0 if np.ptp(values) == 0.0 else float(values.std())
    return mean, std


def aggregate_seeds(run_dirs) -> ResultsTable:
    """Mean and population std of the final-round client-averaged F1 (and
    ECE) per (method, dataset), across runs differing only in seed.

    Runs are sorted by seed before reduction so the output is invariant to
    the order the directories are passed in.
    """
    runs = [load_run(d) for d in run_dirs]
    if not runs:
        raise ReportError("no runs to aggregate")
    groups: dict = {}
    for run in runs:
        groups.setdefault((run.cfg.method, run.cfg.dataset), []).append(run)
    rows = []
    for (method, dataset), members in sorted(groups.items()):
        members = sorted(members, key=lambda r: (r.seed, r.path.name))
        reference = members[0]
        for other in members[1:]:
            differing = _config_mismatch(reference.cfg, other.cfg)
            if differing:
                raise ReportError(f"runs disagree on config keys {differing}; not a pure seed group")
        f1_mean, f1_std = _mean_std(np.array([m.client_mean("f1") for m in members]))
        ece_mean, ece_std = _mean_std(np.array([m.client_mean("ece") for m in members]))
        rows.append((method, dataset, f1_mean, f1_std, ece_mean, ece_std, len(members)))
    return ResultsTable(
        columns=("method", "dataset", "mean_f1", "std_f1", "mean_ece", "std_ece", "n_seeds"), rows=rows
    )


def ablation_table(sweep: dict, param: str) -> ResultsTable:
    """One row per swept value, sorted by value; ``sweep`` maps the swept
    value to the run directories of its seeds."""
    if not sweep:
        raise ReportError("empty sweep")
    loaded = {value: [load_run(d) for d in dirs] for value, dirs in sweep.items()}
    reference = next(iter(loaded.values()))[0]
    ignore = (param, "seeds")
    for runs in loaded.values():
        for run in runs:
            differing = _config_mismatch(reference.cfg, run.cfg, ignore=ignore)
            if differing:
                raise ReportError(f"not a one-parameter sweep over {param!r}: {differing} also differ")
    rows = []
    for value in sorted(loaded):
        runs = sorted(loaded[value], key=lambda r: (r.seed, r.path.name))
        f1_mean, f1_std = _mean_std(np.array([r.client_mean("f1") for r in runs]))
        ece_mean, ece_std = _mean_std(np.array([r.client_mean("ece") for r in runs]))
        rows.append((param, value, f1_mean, f1_std, ece_mean, ece_std, len(runs)))
    return ResultsTable(
        columns=("param", "value", "mean_f1", "std_f1", "mean_ece", "std_ece", "n_seeds"), rows=rows
    )


def calibration_curve(run_dir, n_bins: int = 15):
    """Hard-binned reliability data pooled over the run's clients.

    Returns (table, ece); the table rows are (bin, conf, acc, mass).
    """
    run_dir = Path(run_dir)
    conf_path = run_dir / "confidences.npz"
    if not conf_path.exists():
        raise ReportError(f"{run_dir} has no stored confidences")
    data = np.load(conf_path)
    conf_parts = [data[k] for k in sorted(data.files) if k.startswith("conf_")]
    label_parts = [data[k] for k in sorted(data.files) if k.startswith("labels_")]
    confidences = np.concatenate([p for p in conf_parts if len(p)]) if conf_parts else np.empty(0)
    labels = np.concatenate([p for p in label_parts if len(p)]) if label_parts else np.empty(0)
    if confidences.size == 0:
        raise ReportError("run stored no test-pair confidences")
    conf_b, acc_b, mass = metrics.reliability_bins(confidences, labels, n_bins)
    ece = float(np.sum(mass * np.abs(acc_b - conf_b)))
    rows = [(b, float(conf_b[b]), float(acc_b[b]), float(mass[b])) for b in range(n_bins)]
    return ResultsTable(columns=("bin", "conf", "acc", "mass"), rows=rows), ece


def communication_table(run_dir) -> ResultsTable:
    run = load_run(run_dir)
    report = fed.communication_report(run.records, run.cfg)
    rows = [tuple(report.get(c) for c in ("method", "scalars_per_client_round", "bytes_per_client_round_mean", "bytes_total", "payload_body_bytes", "header_bytes", "paper_figure_bytes"))]
    return ResultsTable(
        columns=(
            "method",
            "scalars_per_client_round",
            "bytes_per_client_round_mean",
            "bytes_total",
            "payload_body_bytes",
            "header_bytes",
            "paper_figure_bytes",
        ),
        rows=rows,
    )


def render(table: ResultsTable, fmt: str) -> str:
    if fmt == "csv":
        return table.to_csv()
    if fmt == "txt":
        return table.to_text()
    raise ReportError(f"unknown format {fmt!r}")
