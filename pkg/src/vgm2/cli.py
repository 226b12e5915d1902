"""Command-line entry points: run, ablate, attack, report.

Exit codes: 0 success, 2 configuration error, 3 numerical failure at runtime.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import federation as fed
from . import privacy, reporting

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NUMERICAL = 3

# short aliases accepted by --sweep in addition to raw RunConfig field names
SWEEP_ALIASES = {"K": "components", "lambda": "lambda0", "cal": "eta_cal", "umap_dim": "embed_dim"}


def _run_one_seed(cfg: fed.RunConfig, seed: int, out_root: Path) -> Path:
    out = out_root / f"{cfg.method}-seed{seed}"
    result = fed.execute_run(cfg, seed, out_dir=out)
    print(f"[vgm2] {cfg.method} seed={seed} mean_f1={result.mean_f1():.4f} mean_ece={result.mean_ece():.4f} -> {out}")
    return out


def cmd_run(args) -> int:
    cfg = fed.load_config(args.config)
    if args.method:
        cfg = dataclasses.replace(cfg, method=args.method).validate()
    out_root = Path(args.out)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(cfg.seeds)
    run_dirs = [_run_one_seed(cfg, seed, out_root) for seed in seeds]
    if len(run_dirs) > 1:
        table = reporting.aggregate_seeds(run_dirs)
        print(table.to_text(), end="")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = fed.load_config(args.config)
    key, _, raw_values = args.sweep.partition("=")
    key = key.strip()
    field = SWEEP_ALIASES.get(key, key)
    if field not in {f.name for f in dataclasses.fields(fed.RunConfig)}:
        raise fed.ConfigError(f"--sweep key {key!r} is not a config field")
    if not raw_values:
        raise fed.ConfigError("--sweep expects key=v1,v2,...")
    current = getattr(cfg, field)
    values = [type(current)(float(v)) if isinstance(current, (int, float)) else v for v in raw_values.split(",")]
    out_root = Path(args.out)
    sweep_dirs: dict = {}
    for value in values:
        swept = dataclasses.replace(cfg, **{field: value}).validate()
        value_root = out_root / f"{field}={value}"
        sweep_dirs[value] = [_run_one_seed(swept, seed, value_root) for seed in swept.seeds]
    table = reporting.ablation_table(sweep_dirs, field)
    (out_root / "ablation.csv").write_text(table.to_csv())
    print(table.to_text(), end="")
    return EXIT_OK


def cmd_attack(args) -> int:
    records, rounds_seen = fed.load_attack_records(args.run)
    out = {}
    for surface in args.surfaces.split(","):
        aucs = []
        for attack_seed in range(args.attack_seeds):
            rng = np.random.default_rng(np.random.SeedSequence(entropy=(10_000 + attack_seed,)))
            aucs.append(privacy.mi_attack(records, rng, surface=surface.strip(), n_rounds_seen=rounds_seen))
        out[surface.strip()] = {"auc_mean": float(np.mean(aucs)), "auc_per_seed": aucs}
        print(f"[vgm2] attack surface={surface.strip()} auc={np.mean(aucs):.4f} (n={len(aucs)})")
    report_path = Path(args.run) / "attack_report.json"
    report_path.write_text(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_report(args) -> int:
    target = Path(args.run)
    fmt = args.format
    if reporting.is_run_dir(target):
        table = reporting.aggregate_seeds([target])
        print(reporting.render(table, fmt), end="")
        print(reporting.render(reporting.communication_table(target), fmt), end="")
        try:
            curve, ece = reporting.calibration_curve(target)
        except reporting.ReportError:
            curve, ece = None, None
        if curve is not None:
            (target / "calibration.csv").write_text(curve.to_csv())
            print(f"ece = {ece:.4f}  (reliability data -> {target / 'calibration.csv'})")
        return EXIT_OK
    subruns = sorted(d for d in target.iterdir() if d.is_dir() and reporting.is_run_dir(d))
    if not subruns:
        raise fed.ConfigError(f"{target} contains no run directories")
    table = reporting.aggregate_seeds(subruns)
    out_path = target / f"report.{fmt}"
    out_path.write_text(reporting.render(table, fmt))
    print(reporting.render(table, fmt), end="")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vgm2", description="Federated mixture-marker experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="execute a configured federation run")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out", default="runs")
    p_run.add_argument("--method", choices=fed.METHODS, default=None, help="override the config method")
    p_run.add_argument("--seeds", default=None, help="comma-separated seed override")
    p_run.set_defaults(func=cmd_run)

    p_ablate = sub.add_parser("ablate", help="sweep one config parameter")
    p_ablate.add_argument("--config", required=True)
    p_ablate.add_argument("--sweep", required=True, help="e.g. K=1,2,3,5")
    p_ablate.add_argument("--out", default="ablation")
    p_ablate.set_defaults(func=cmd_ablate)

    p_attack = sub.add_parser("attack", help="membership-inference stress test on a finished run")
    p_attack.add_argument("--run", required=True)
    p_attack.add_argument("--surfaces", default="client,aggregate")
    p_attack.add_argument("--attack-seeds", type=int, default=5)
    p_attack.set_defaults(func=cmd_attack)

    p_report = sub.add_parser("report", help="summarize a run directory (or a directory of runs)")
    p_report.add_argument("--run", required=True)
    p_report.add_argument("--format", choices=("csv", "txt"), default="txt")
    p_report.set_defaults(func=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (fed.ConfigError, reporting.ReportError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (fed.RuntimeFailure, privacy.PrivacyError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
