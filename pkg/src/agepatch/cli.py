"""Command-line front end.

Subcommands: validate, simulate, spectral, fixed-point, classify, bounds,
envelope. Numeric series go to CSV (12 significant digits, atomic
writes), analysis results to report.json; exit codes are the machine
status channel: 0 ok, 2 validation failure, 1 numerical failure, 64
usage error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import analysis, renewal, spectral
from .errors import NumericalError, ScenarioError
from .scenario import load_scenario, validate_scenario

COMMANDS = ("validate", "simulate", "spectral", "fixed-point", "classify", "bounds", "envelope")

USAGE = (
    "usage: agepatch <command> <scenario-file> [--out DIR] "
    "[--snapshot-times t1,t2,...] [--epsilon E] [--seed S]\n"
    "commands: " + " ".join(COMMANDS) + "\n"
)


@dataclass
class RunReport:
    command: str
    inputs: str  # content digest of the scenario document
    outputs: list
    status: str  # "ok", "validation_failed" or "numerical_failure"


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise _UsageError(message)


def _format(x) -> str:
    return f"{float(x):.12g}"


def _series_csv(column: str, times, values) -> str:
    n = values.shape[1]
    lines = ["t," + ",".join(f"{column}_{k + 1}" for k in range(n))]
    for t, row in zip(times, values):
        lines.append(",".join([_format(t)] + [_format(v) for v in row]))
    return "\n".join(lines) + "\n"


def _snapshot_csv(ages, column_values) -> str:
    n = column_values.shape[1]
    lines = ["age," + ",".join(f"patch_{k + 1}" for k in range(n))]
    for a, row in zip(ages, column_values):
        lines.append(",".join([_format(a)] + [_format(v) for v in row]))
    return "\n".join(lines) + "\n"


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.floating, float)):
        return float(obj)
    if isinstance(obj, (np.integer, int)):
        return int(obj)
    return obj


def emit_outputs(results: dict, destination) -> list:
    """Atomically write named text files; returns the written paths.

    results maps file names to their full text content. Each file is
    written to a temporary name and renamed into place, so re-running an
    identical scenario reproduces byte-identical files.
    """
    dest = Path(destination)
    dest.mkdir(parents=True, exist_ok=True)
    written = []
    for name, text in results.items():
        path = dest / name
        fd, tmp = tempfile.mkstemp(dir=dest, prefix=name + ".tmp")
        try:
            with os.fdopen(fd, "w") as handle:
                handle.write(text)
            os.replace(tmp, path)
        except BaseException:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        written.append(str(path))
    return written


def _report_json(command: str, **extra) -> str:
    body = {"command": command, "sigma": None, "classification": None, "rho_star": None,
            "bounds": None, "sandwich": None}
    body.update(extra)
    return json.dumps(_jsonable(body), indent=2, sort_keys=True) + "\n"


def _fixed_point_payload(fp: spectral.FixedPoint):
    if fp.kind == "stationary":
        return fp.rho_star
    return fp.trajectory.rho


def _run_command(args, spec) -> dict:
    """Produce the output files for one successfully validated scenario."""
    command = args.command
    if command == "simulate":
        result = renewal.march(spec)
        totals = renewal.total_population(result.field)
        files = {
            "newborns.csv": _series_csv("rho", result.newborns.times, result.newborns.rho),
            "population.csv": _series_csv("N", result.field.times, totals),
        }
        for t in args.snapshot_times:
            i = int(round(t / spec.grid.delta))
            i = min(max(i, 0), spec.grid.n_time_steps)
            t_grid = i * spec.grid.delta
            files[f"field_t{_format(t_grid)}.csv"] = _snapshot_csv(result.field.ages, result.field.values[i])
        return files

    if command == "spectral":
        if spec.environment == "constant":
            op = spectral.build_R0(spec)
        elif spec.environment == "periodic":
            op = spectral.build_R0_periodic(spec)
        else:
            raise ScenarioError("spectral requires a constant or periodic environment")
        return {"report.json": _report_json("spectral", sigma=op.sigma, perron=op.perron, kind=op.kind)}

    if command == "fixed-point":
        if spec.environment == "constant":
            fp = spectral.solve_rho_star(spec)
        elif spec.environment == "periodic":
            fp = spectral.solve_rho_star_periodic(spec)
        else:
            raise ScenarioError("fixed-point requires a constant or periodic environment")
        return {
            "report.json": _report_json(
                "fixed-point",
                rho_star=_fixed_point_payload(fp),
                kind=fp.kind,
                converged=fp.converged,
                iterations=fp.iterations,
            )
        }

    if command == "classify":
        if spec.environment == "irregular":
            raise ScenarioError("classify requires a constant or periodic environment")
        verdict = analysis.classify(spec)
        return {
            "report.json": _report_json(
                "classify",
                sigma=verdict.sigma,
                classification=verdict.classification,
                rho_star=_fixed_point_payload(verdict.fixed_point),
                evidence=verdict.evidence,
            )
        }

    if command == "bounds":
        if spec.environment != "constant":
            raise ScenarioError("bounds requires a constant environment")
        sigmas = analysis.isolated_rates(spec)
        bound = analysis.dispersal_lower_bound(spec)
        return {
            "report.json": _report_json(
                "bounds", bounds={"isolated_sigma": sigmas, "dispersal_lower_bound": bound}
            )
        }

    if command == "envelope":
        if spec.environment != "irregular":
            raise ScenarioError("envelope requires an irregular environment")
        report = analysis.envelope_analysis(spec, epsilon=args.epsilon)
        extra = {
            "classification": report.classification,
            "sigma_minus": report.sigma_minus,
            "sigma_plus": report.sigma_plus,
            "sandwich": report.sandwich,
        }
        if report.rho_minus is not None:
            extra["rho_minus"] = _fixed_point_payload(report.rho_minus)
            extra["rho_plus"] = _fixed_point_payload(report.rho_plus)
        return {"report.json": _report_json("envelope", **extra)}

    raise AssertionError(f"unhandled command {command}")


def _print_report(report: RunReport, extra=None):
    body = {"command": report.command, "inputs": report.inputs, "outputs": report.outputs,
            "status": report.status}
    if extra:
        body.update(extra)
    print(json.dumps(_jsonable(body), indent=2, sort_keys=True))


def dispatch(argv) -> tuple:
    """Run one CLI invocation; returns (RunReport, exit_code)."""
    if not argv or argv[0] in ("-h", "--help"):
        sys.stdout.write(USAGE)
        return RunReport("", "", [], "validation_failed"), 64
    command = argv[0]
    if command not in COMMANDS:
        sys.stdout.write(f"unknown command '{command}'\n{USAGE}")
        return RunReport(command, "", [], "validation_failed"), 64

    parser = _Parser(prog=f"agepatch {command}", add_help=False)
    parser.add_argument("scenario")
    parser.add_argument("--out", default=".")
    parser.add_argument("--snapshot-times", default="")
    parser.add_argument("--epsilon", type=float, default=analysis.DEFAULT_SANDWICH_EPSILON)
    parser.add_argument("--seed", type=int, default=None)
    try:
        args = parser.parse_args(argv[1:])
        args.snapshot_times = [float(tok) for tok in args.snapshot_times.split(",") if tok.strip()]
    except (_UsageError, ValueError) as exc:
        sys.stdout.write(f"{exc}\n{USAGE}")
        return RunReport(command, "", [], "validation_failed"), 64
    args.command = command

    try:
        raw = Path(args.scenario).read_bytes()
    except OSError as exc:
        report = RunReport(command, "", [], "validation_failed")
        _print_report(report, {"error": f"cannot read scenario: {exc}"})
        return report, 2
    digest = hashlib.sha256(raw).hexdigest()

    try:
        spec = load_scenario(raw.decode("utf-8"), seed_override=args.seed)
    except ScenarioError as exc:
        report = RunReport(command, digest, [], "validation_failed")
        _print_report(report, {"diagnostics": [str(exc)]})
        return report, 2

    diagnostics = validate_scenario(spec)
    if command == "validate":
        if diagnostics:
            report = RunReport(command, digest, [], "validation_failed")
            _print_report(report, {"diagnostics": diagnostics})
            return report, 2
        files = {"validation.json": json.dumps({"diagnostics": []}, indent=2) + "\n"}
        outputs = emit_outputs(files, args.out)
        report = RunReport(command, digest, outputs, "ok")
        _print_report(report, {"diagnostics": []})
        return report, 0
    if diagnostics:
        report = RunReport(command, digest, [], "validation_failed")
        _print_report(report, {"diagnostics": diagnostics})
        return report, 2

    try:
        files = _run_command(args, spec)
        outputs = emit_outputs(files, args.out)
    except ScenarioError as exc:
        report = RunReport(command, digest, [], "validation_failed")
        _print_report(report, {"diagnostics": [str(exc)]})
        return report, 2
    except (NumericalError, OSError) as exc:
        report = RunReport(command, digest, [], "numerical_failure")
        _print_report(report, {"error": str(exc)})
        return report, 1

    report = RunReport(command, digest, outputs, "ok")
    _print_report(report)
    return report, 0


def main():
    sys.exit(dispatch(sys.argv[1:])[1])


if __name__ == "__main__":
    main()
