"""Batch runner: single runs and alpha / loss / block-size sweeps to CSV.

Exit codes: 0 converged with positive rate, 1 invalid configuration,
2 zero rate, 3 infeasible constraint set, 4 solver failure (or an
uncertified bound), 5 Frank-Wolfe did not reach the gap tolerance.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from pydantic import ValidationError

from .config import RunConfig, load_config
from .finitesize import CSV_COLUMNS, KeyRateReport
from .matfun import NotPositiveError
from .objective import SupportError
from .optimizer import InfeasibleSetError, SolverFailure
from .pipeline import key_rate_at, optimize_alpha

log = logging.getLogger("renyi_qkd")

EXIT_CODES = {
    "converged": 0,
    "invalid_config": 1,
    "zero_rate": 2,
    "infeasible": 3,
    "solver_failure": 4,
    "not_converged": 5,
}
COLUMNS = CSV_COLUMNS + ("status",)
AXES = ("alpha", "loss", "blocksize")
WORKERS_ENV = "RENYI_QKD_WORKERS"


@dataclass
class RunResult:
    """Outcome of one pipeline run, successful or not."""

    config: RunConfig
    status: str
    reason: str = ""
    report: KeyRateReport | None = None
    log: list[dict] = field(default_factory=list)

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.status]

    def csv_row(self) -> dict:
        cfg = self.config
        if self.report is not None:
            row = self.report.csv_row(cfg.depol_p, cfg.loss)
        else:
            row = dict.fromkeys(CSV_COLUMNS, "")
            alpha = cfg.alpha if cfg.alpha != "scan" else ""
            row.update(alpha=alpha, beta=1.0 / alpha if alpha else "", N=cfg.N,
                       p_gen=cfg.p_gen, depol=cfg.depol_p, loss=cfg.loss)
        row["status"] = self.status
        return row


def _status(reports: Sequence[KeyRateReport], best: KeyRateReport) -> tuple[str, str]:
    uncertified = [r.alpha for r in reports if not r.diagnostics.get("certified", False)]
    if uncertified:
        return "solver_failure", f"dual certificate failed at alpha={uncertified}"
    # stopping below the zero-rate threshold settles the rate, so it is not a stall
    stalled = [
        r.alpha for r in reports
        if not r.diagnostics.get("fw_converged", False)
        and r.diagnostics.get("fw_stop") != "below_stop_value"
    ]
    if stalled:
        return "not_converged", f"Frank-Wolfe gap above tolerance at alpha={stalled}"
    if best.key_rate <= 0:
        return "zero_rate", "certified key length is not positive"
    return "converged", ""


def _jsonable(o):
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    return str(o)


def run_single(cfg: RunConfig) -> RunResult:
    """Run the full pipeline for one configuration.

    With ``alpha == "scan"`` the key rate is maximized over the configured
    grid; otherwise the fixed order is used. Failures are returned, not
    raised, so sweeps can record them in-row.
    """
    run_log: list[dict] = [{"event": "config", **cfg.model_dump()}]
    try:
        inst = cfg.instance()
        fp, sp, settings = cfg.finite_size(), cfg.security(), cfg.solver()
        if cfg.alpha == "scan":
            scan = optimize_alpha(inst, fp, sp, cfg.grid(), settings, run_log)
            reports, best = scan.reports, scan.best
        else:
            best = key_rate_at(inst, fp, sp, float(cfg.alpha), settings, run_log)
            reports = [best]
    except InfeasibleSetError as exc:
        reason = f"{exc} (violated: {', '.join(exc.violated) or 'unknown'})"
        return _failed(cfg, "infeasible", reason, run_log)
    except (SolverFailure, NotPositiveError, SupportError) as exc:
        return _failed(cfg, "solver_failure", str(exc), run_log)

    for r in reports:
        run_log.append({"event": "alpha_point", "alpha": r.alpha, "min_f": r.min_f_certified,
                        "key_length": r.key_length, "key_rate": r.key_rate, **r.diagnostics})
    status, reason = _status(reports, best)
    run_log.append({"event": "result", "status": status, "reason": reason, **best.csv_row(cfg.depol_p, cfg.loss)})
    return RunResult(cfg, status, reason, best, run_log)


def _failed(cfg, status, reason, run_log) -> RunResult:
    log.warning("%s: %s", status, reason)
    run_log.append({"event": "result", "status": status, "reason": reason})
    return RunResult(cfg, status, reason, None, run_log)


def scan_configs(cfg: RunConfig, axis: str, values: Sequence[float]) -> list[RunConfig]:
    """One configuration per sweep value; raises on an invalid axis or value."""
    if axis not in AXES:
        raise ValueError(f"axis must be one of {AXES}, got {axis!r}")
    if not len(values):
        raise ValueError("scan needs at least one value")
    key = {"alpha": "alpha", "loss": "loss", "blocksize": "N"}[axis]
    return [cfg.replace(**{key: v}) for v in values]


def _workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"{WORKERS_ENV} must be an integer, got {raw!r}") from None
    return max(n, 1)


def run_scan(cfg: RunConfig, axis: str, values: Sequence[float], workers: int | None = None) -> list[RunResult]:
    """Independent pipelines along ``axis``; results keep the input order."""
    configs = scan_configs(cfg, axis, values)
    workers = _workers() if workers is None else max(int(workers), 1)
    if workers == 1 or len(configs) == 1:
        return [run_single(c) for c in configs]
    with ProcessPoolExecutor(max_workers=min(workers, len(configs))) as pool:
        return list(pool.map(run_single, configs))


def write_csv(results: Sequence[RunResult], path: str | None, append: bool = False) -> None:
    rows = [r.csv_row() for r in results]
    if path is None:
        w = csv.DictWriter(sys.stdout, fieldnames=COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
        return
    p = Path(path)
    header = not (append and p.exists() and p.stat().st_size > 0)
    with p.open("a" if append else "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COLUMNS, lineterminator="\n")
        if header:
            w.writeheader()
        w.writerows(rows)


def write_log(results: Sequence[RunResult], path: str | None, append: bool = False) -> None:
    if path is None:
        return
    with open(path, "a" if append else "w") as fh:
        for i, r in enumerate(results):
            for entry in r.log:
                fh.write(json.dumps({"point": i, **entry}, default=_jsonable) + "\n")


def _log_path(args, cfg: RunConfig) -> str | None:
    if args.log:
        return args.log
    if cfg.output_path:
        return str(Path(cfg.output_path).with_suffix(".log.jsonl"))
    return None


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="renyi-qkd", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)

    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML or JSON file with RunConfig keys")
    common.add_argument("--log", help="JSONL run log (default: next to output_path)")
    for name in RunConfig.model_fields:
        flags = [f"--{name}"]
        if "_" in name:
            flags.append(f"--{name.replace('_', '-')}")
        common.add_argument(*flags, dest=name, default=None, metavar=name.upper())

    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("run", parents=[common], help="single run")
    scan = sub.add_parser("scan", parents=[common], help="sweep one axis")
    scan.add_argument("--axis", required=True, choices=AXES)
    scan.add_argument("--values", required=True, nargs="+", type=float)
    return parser


def _config_from_args(args) -> RunConfig:
    data = load_config(args.config) if args.config else {}
    for name in RunConfig.model_fields:
        v = getattr(args, name)
        if v is None:
            continue
        if name == "alpha_grid" and not v.startswith("log:"):
            v = [float(a) for a in v.split(",")]
        data[name] = v
    return RunConfig(**data)


def main(argv: Sequence[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse uses 2 for usage errors, which collides with "zero rate"
        return EXIT_CODES["invalid_config"] if exc.code else 0
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config_from_args(args)
        if args.command == "scan":
            scan_configs(cfg, args.axis, args.values)
    except (ValidationError, ValueError, OSError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CODES["invalid_config"]

    if args.command == "run":
        results = [run_single(cfg)]
        append = True
        code = results[0].exit_code
    else:
        results = run_scan(cfg, args.axis, args.values)
        append = False
        failed = [r for r in results if r.status not in ("converged", "zero_rate")]
        code = failed[0].exit_code if failed else 0

    write_csv(results, cfg.output_path, append=append)
    write_log(results, _log_path(args, cfg), append=append)
    for r in results:
        if r.reason:
            print(f"{r.status}: {r.reason}", file=sys.stderr)
    return code
