"""Command-line front end.

Subcommands::

    ggreg simulate   --config sim.json --out DIR
    ggreg fit        --X X.csv --U U.csv --out DIR [--method lasso] [--u-point 0,0,...]
    ggreg evaluate   --model model.json --truth truth.json --out DIR
    ggreg experiment --table table2 --row 400,25,50 -R 50 --out DIR

Exit codes: 0 ok, 2 user error, 3 I/O error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from . import evaluation as ev
from . import simulation as sim
from .exceptions import (
    DimensionMismatch, EmptyGrid, GGRegError, InvalidSparsity, NonFiniteInput, ZeroScale,
)
from .graph_regression import precision_at
from .two_step import METHODS, FittedModel, PipelineConfig, fit_pipeline

EXIT_OK, EXIT_USER, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
SCHEMA_VERSION = 1
EXPERIMENT_ROWS = tuple((n, p, q) for n in (200, 400) for p in (25, 50) for q in (50, 100))

_USER_ERRORS = (DimensionMismatch, NonFiniteInput, ZeroScale, InvalidSparsity, EmptyGrid)


class UserError(Exception):
    """Bad input that the caller can fix; maps to exit code 2."""


# ---------------------------------------------------------------- file formats

def write_csv(path, matrix, header: Optional[Sequence[str]] = None) -> None:
    """Comma-separated, shortest round-trip float text, no header unless given."""
    M = np.atleast_2d(np.asarray(matrix, dtype=float))
    with open(path, "w", encoding="utf-8", newline="") as fh:
        if header is not None:
            fh.write(",".join(header) + "\n")
        for row in M:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")


def read_csv(path, header: bool = False) -> np.ndarray:
    """Parse a rectangular numeric CSV; errors name the offending row and column."""
    rows = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        width = None
        for lineno, record in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not record or all(not c.strip() for c in record):
                continue
            if width is None:
                width = len(record)
            elif len(record) != width:
                raise UserError(f"{path}: row {lineno} has {len(record)} columns, expected {width}")
            values = []
            for col, cell in enumerate(record, start=1):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise UserError(f"{path}: row {lineno}, column {col}: not a number: {cell!r}") from None
            rows.append(values)
    if not rows:
        raise UserError(f"{path}: no data rows")
    return np.array(rows, dtype=float)


def _write_json(path, doc) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True, default=ev._json_default)
        fh.write("\n")


def _read_json(path) -> dict:
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except json.JSONDecodeError as exc:
        raise UserError(f"{path}: invalid JSON ({exc})") from None


def load_config(path) -> dict:
    """Read a versioned config file.

    The document holds optional ``"simulation"`` and ``"pipeline"`` sections;
    a document without sections is taken as a simulation config.
    """
    if path is None:
        return {"schema_version": SCHEMA_VERSION}
    doc = _read_json(path)
    if not isinstance(doc, dict):
        raise UserError(f"{path}: config must be a JSON object")
    version = doc.get("schema_version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise UserError(f"{path}: unsupported schema_version {version!r}")
    if "simulation" not in doc and "pipeline" not in doc:
        doc = {"schema_version": version, "simulation": {k: v for k, v in doc.items() if k != "schema_version"}}
    return doc


def _sim_config(section: dict, seed: Optional[int]) -> sim.SimConfig:
    unknown = set(section) - set(sim.SimConfig.__dataclass_fields__)
    if unknown:
        raise UserError(f"unknown simulation settings: {sorted(unknown)}")
    try:
        cfg = sim.SimConfig.from_dict(section)
        return replace(cfg, seed=seed) if seed is not None else cfg
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid simulation config: {exc}") from None


def _pipeline_config(section: dict, **overrides) -> PipelineConfig:
    unknown = set(section) - set(PipelineConfig.__dataclass_fields__)
    if unknown:
        raise UserError(f"unknown pipeline settings: {sorted(unknown)}")
    doc = dict(section)
    doc.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return PipelineConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UserError(f"invalid pipeline config: {exc}") from None


def _manifest(out: Path, command: str, config: dict, seed, inputs: dict, outputs: dict, start: float) -> None:
    _write_json(out / "manifest.json", {
        "command": command,
        "config": config,
        "seed": seed,
        "tool_version": __version__,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "wall_time": time.perf_counter() - start,
    })


def resolve_threads(value: Optional[int]) -> int:
    """``--threads``, else ``GGREG_THREADS``, else the available cores."""
    if value is None:
        env = os.environ.get("GGREG_THREADS")
        if env:
            try:
                value = int(env)
            except ValueError:
                raise UserError(f"GGREG_THREADS must be an integer, got {env!r}") from None
        else:
            value = len(os.sched_getaffinity(0)) if hasattr(os, "sched_getaffinity") else os.cpu_count() or 1
    if value < 1:
        raise UserError("thread count must be at least 1")
    return value


# ---------------------------------------------------------------- commands

def cmd_simulate(config_path, out_dir, seed: Optional[int] = None) -> dict:
    """Write ``X.csv``, ``U.csv``, ``truth.json`` and ``manifest.json``."""
    start = time.perf_counter()
    doc = load_config(config_path)
    cfg = _sim_config(doc.get("simulation", {}), seed)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    truth, data = sim.simulate(cfg)
    paths = {"X": out / "X.csv", "U": out / "U.csv", "truth": out / "truth.json"}
    write_csv(paths["X"], data.X)
    write_csv(paths["U"], data.U)
    truth_doc = truth.to_dict()
    truth_doc.update(schema_version=SCHEMA_VERSION, kind="ground_truth",
                     discrete_columns=[int(c) for c in data.discrete_columns])
    _write_json(paths["truth"], truth_doc)
    _manifest(out, "simulate", {"schema_version": SCHEMA_VERSION, "simulation": cfg.to_dict()}, cfg.seed,
              {"config": config_path}, paths, start)
    return paths


def parse_u_point(text: str, q: int) -> np.ndarray:
    try:
        u = np.array([float(v) for v in text.split(",")] if text.strip() else [], dtype=float)
    except ValueError:
        raise UserError(f"--u-point must be comma-separated numbers, got {text!r}") from None
    if u.size != q:
        raise UserError(f"--u-point has {u.size} values but the model has q = {q} covariates")
    return u


def cmd_fit(x_path, u_path, out_dir, config_path=None, method: Optional[str] = None,
            header: bool = False, u_point: Optional[str] = None, threads: int = 1,
            standardize: Optional[bool] = None, rule: Optional[str] = None) -> dict:
    """Fit the two-step model; writes ``model.json``, ``edges.csv`` and the manifest."""
    start = time.perf_counter()
    doc = load_config(config_path)
    cfg = _pipeline_config(doc.get("pipeline", {}), method=method, standardize_covariates=standardize, rule=rule)
    X = read_csv(x_path, header)
    U = read_csv(u_path, header)
    if X.shape[0] != U.shape[0]:
        raise UserError(f"X has {X.shape[0]} rows but U has {U.shape[0]}")
    u = parse_u_point(u_point, U.shape[1]) if u_point is not None else None
    model = fit_pipeline(X, U, cfg, threads=threads)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"model": out / "model.json", "edges": out / "edges.csv"}
    _write_json(paths["model"], model.to_dict())
    edges = sorted(model.precision.edges(), key=lambda e: (-abs(e[3]), e[0], e[1], e[2]))
    with open(paths["edges"], "w", encoding="utf-8", newline="") as fh:
        fh.write("j,k,h,value\n")
        for j, k, h, v in edges:
            fh.write(f"{j},{k},{h},{v!r}\n")
    if u is not None:
        paths["omega"] = out / "Omega_at_u.csv"
        write_csv(paths["omega"], precision_at(model.precision, u))
    config_echo = {"schema_version": SCHEMA_VERSION, "pipeline": cfg.to_dict()}
    if cfg.method == "lasso":
        config_echo["pipeline"].pop("ratio_grid", None)
    _manifest(out, "fit", config_echo, cfg.seed,
              {"X": x_path, "U": u_path, "config": config_path}, paths, start)
    return paths


def _load_model(path) -> FittedModel:
    doc = _read_json(path)
    if not isinstance(doc, dict) or doc.get("kind") != "fitted_model":
        raise UserError(f"{path}: not a fitted model document")
    try:
        return FittedModel.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise UserError(f"{path}: malformed model ({exc})") from None


def _load_truth(path) -> sim.GroundTruth:
    doc = _read_json(path)
    try:
        return sim.GroundTruth.from_dict(doc)
    except (KeyError, TypeError, ValueError) as exc:
        raise UserError(f"{path}: malformed ground truth ({exc})") from None


def cmd_evaluate(model_path, truth_path, out_dir) -> dict:
    """Compare a fitted model with the ground truth; writes ``metrics.json``."""
    start = time.perf_counter()
    model = _load_model(model_path)
    truth = _load_truth(truth_path)
    if model.gamma_hat.shape != truth.gamma.shape:
        raise UserError(f"model has (p, q) = {model.gamma_hat.shape}, truth has {truth.gamma.shape}")
    metrics = ev.evaluate_fit(model, truth)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"metrics": out / "metrics.json"}
    _write_json(paths["metrics"], {
        "schema_version": SCHEMA_VERSION,
        "gamma": dict(metrics["counts_gamma"], error=metrics["error_gamma"]),
        "beta": dict(metrics["counts_beta"], error=metrics["error_beta"]),
    })
    _manifest(out, "evaluate", {"schema_version": SCHEMA_VERSION}, None,
              {"model": model_path, "truth": truth_path}, paths, start)
    return paths


def parse_row(text: str) -> tuple:
    try:
        row = tuple(int(v) for v in text.replace("(", "").replace(")", "").split(","))
    except ValueError:
        raise UserError(f"row must look like 'n,p,q', got {text!r}") from None
    if row not in EXPERIMENT_ROWS:
        raise UserError(f"unknown row {text!r}; choose n in (200, 400), p in (25, 50), q in (50, 100)")
    return row


def cmd_experiment(table: str, row: str, R: int, out_dir, seed: int = 0, threads: int = 1,
                   config_path=None, stream=None) -> dict:
    """Run one table row and write ``report.json`` and ``report.txt``."""
    start = time.perf_counter()
    if table not in ("table1", "table2"):
        raise UserError(f"table must be 'table1' or 'table2', got {table!r}")
    if R < 1:
        raise UserError("R must be at least 1")
    n, p, q = parse_row(row)
    doc = load_config(config_path)
    cfg = _sim_config(dict(doc.get("simulation", {}), n=n, p=p, q=q), seed)
    pipeline = ev.experiment_pipeline_config(**doc.get("pipeline", {}))
    methods = list(METHODS) if table == "table2" else ["reggmm"]
    report = ev.run_experiment(cfg, methods, R, pipeline, threads=threads, gamma_only=table == "table1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {"report": out / "report.json", "table": out / "report.txt"}
    text = report.render(table)
    paths["report"].write_text(report.to_json() + "\n", encoding="utf-8")
    paths["table"].write_text(text + "\n", encoding="utf-8")
    print(text, file=stream or sys.stdout)
    _manifest(out, "experiment", {"schema_version": SCHEMA_VERSION, "table": table, "R": R,
                                  "simulation": cfg.to_dict(), "pipeline": pipeline.to_dict()},
              seed, {"config": config_path}, paths, start)
    return paths


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ggreg", description="Gaussian graphical regression tools.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def threads_flag(p):
        p.add_argument("--threads", type=int, default=None,
                       help="worker count (default: $GGREG_THREADS or all available cores)")

    s = sub.add_parser("simulate", help="draw a ground truth and one dataset")
    s.add_argument("--config", help="JSON config with a 'simulation' section")
    s.add_argument("--out", required=True, help="output directory")
    s.add_argument("--seed", type=int, help="override the config seed")
    threads_flag(s)

    f = sub.add_parser("fit", help="fit the two-step model to CSV data")
    f.add_argument("--X", dest="x", required=True, help="n x p response CSV")
    f.add_argument("--U", dest="u", required=True, help="n x q covariate CSV")
    f.add_argument("--out", required=True, help="output directory")
    f.add_argument("--config", help="JSON config with a 'pipeline' section")
    f.add_argument("--method", choices=METHODS, help="node-wise estimator (default reggmm)")
    f.add_argument("--rule", choices=("max", "min"), help="symmetrization rule")
    f.add_argument("--header", action="store_true", help="skip one header line in each CSV")
    f.add_argument("--no-standardize", dest="standardize", action="store_false", default=None,
                   help="fit on raw covariates")
    f.add_argument("--u-point", help="comma-separated u; also write Omega_at_u.csv")
    threads_flag(f)

    e = sub.add_parser("evaluate", help="score a fitted model against a ground truth")
    e.add_argument("--model", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--out", required=True)

    x = sub.add_parser("experiment", help="reproduce one row of the simulation tables")
    x.add_argument("--table", required=True, choices=("table1", "table2"))
    x.add_argument("--row", required=True, help="n,p,q, e.g. 400,25,50")
    x.add_argument("-R", "--replications", dest="R", type=int, default=50)
    x.add_argument("--out", required=True)
    x.add_argument("--seed", type=int, default=0, help="master seed")
    x.add_argument("--config", help="JSON config overriding simulation or pipeline settings")
    threads_flag(x)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "simulate":
            resolve_threads(args.threads)
            cmd_simulate(args.config, args.out, args.seed)
        elif args.command == "fit":
            cmd_fit(args.x, args.u, args.out, args.config, args.method, args.header, args.u_point,
                    resolve_threads(args.threads), args.standardize, args.rule)
        elif args.command == "evaluate":
            cmd_evaluate(args.model, args.truth, args.out)
        else:
            cmd_experiment(args.table, args.row, args.R, args.out, args.seed,
                           resolve_threads(args.threads), args.config)
    except UserError as exc:
        print(f"ggreg: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except _USER_ERRORS as exc:
        print(f"ggreg: error: {exc}", file=sys.stderr)
        return EXIT_USER
    except GGRegError as exc:
        print(f"ggreg: numerical failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except OSError as exc:
        print(f"ggreg: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
