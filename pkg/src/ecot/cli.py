"""Command-line interface: ``ecot simulate``, ``ecot test`` and ``ecot oracle-check``.

Configuration files are YAML (plain JSON is valid YAML).  Values are
resolved in the order built-in defaults, then the config file, then
command-line flags, so a flag always wins.  Unknown keys are rejected.

Random streams use numpy's PCG64 seeded through ``SeedSequence``; see
``ecot.sim`` and ``ecot.methods`` for the key layout.  Every report embeds
the resolved config and seed, and carries no timestamps, so reruns with the
same inputs are byte-identical.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
import tempfile
from dataclasses import replace
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from .core import ECOTError, TestingProblem
from .methods import MethodSpec, check_requirements, run_method
from .oracle import SUITES, OracleBudget, run_oracle_checks
from .sim import ScenarioConfig, monte_carlo_many

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CHECK_FAILED, EXIT_INPUT = 0, 1, 2
FORMATS = ("json", "csv", "both")
U64 = 2**64


class InputError(ECOTError, ValueError):
    """Bad config, flag or dataset file."""


# ---------------------------------------------------------------- datasets


def read_dataset(path, role: str = "test"):
    """Read a dataset CSV with columns ``f1..fd`` and an optional ``label`` column.

    Returns ``(features, labels)`` where ``labels`` is ``None`` when the
    column is absent or entirely empty.  Raises :class:`InputError` naming the
    row and column of the first bad cell.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"cannot read {role} file {path}: {exc.strerror}") from None
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise InputError(f"{path}: empty file, expected a header row")
    header = [h.strip() for h in rows[0]]
    feats = [h for h in header if h != "label"]
    expected = [f"f{i}" for i in range(1, len(feats) + 1)]
    if not feats or feats != expected or header.count("label") > 1:
        raise InputError(f"{path}: header must be f1..fd plus an optional label column, got {header}")
    fpos = [header.index(f) for f in feats]
    lpos = header.index("label") if "label" in header else None
    X = np.empty((len(rows) - 1, len(feats)))
    raw_labels = []
    for r, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise InputError(f"{path}: row {r} has {len(row)} fields, expected {len(header)}")
        for c, pos in enumerate(fpos):
            cell = row[pos].strip()
            try:
                v = float(cell)
            except ValueError:
                v = math.nan
            if not math.isfinite(v):
                raise InputError(f"{path}: row {r}, column {feats[c]}: missing or non-finite value {cell!r}")
            X[r - 2, c] = v
        if lpos is not None:
            raw_labels.append(row[lpos].strip())
    labels = None
    if lpos is not None and any(raw_labels):
        if not all(lab in ("0", "1") for lab in raw_labels):
            bad = next(i for i, lab in enumerate(raw_labels) if lab not in ("0", "1"))
            raise InputError(f"{path}: row {bad + 2}, column label: expected 0 or 1, got {raw_labels[bad]!r}")
        labels = np.array([int(lab) for lab in raw_labels])
    return X, labels


def write_dataset(path, X, labels=None):
    """Write ``X`` (and labels) in the dataset schema; values use 17 significant digits."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    header = [f"f{i}" for i in range(1, X.shape[1] + 1)] + (["label"] if labels is not None else [])
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for i, row in enumerate(X):
        cells = [f"{v:.17g}" for v in row]
        if labels is not None:
            cells.append(str(int(labels[i])))
        w.writerow(cells)
    atomic_write(path, buf.getvalue())


def load_problem(data: dict) -> TestingProblem:
    """Build a problem from ``{null, nonnull, labeled, test}`` paths."""
    unknown = set(data) - {"null", "nonnull", "labeled", "test"}
    if unknown:
        raise InputError(f"unknown data keys: {sorted(unknown)}")
    if "test" not in data:
        raise InputError("data.test is required")
    xu, tl = read_dataset(data["test"], "test")
    if tl is not None:
        raise InputError(f"{data['test']}: test files must not carry labels")
    d = xu.shape[1]
    parts0, parts1 = [], []
    if "labeled" in data:
        xl, ll = read_dataset(data["labeled"], "labeled")
        if ll is None:
            raise InputError(f"{data['labeled']}: labeled file needs a label column")
        parts0.append(xl[ll == 0])
        parts1.append(xl[ll == 1])
    for key, want, bucket in (("null", 0, parts0), ("nonnull", 1, parts1)):
        if key in data:
            x, lab = read_dataset(data[key], key)
            if lab is not None and np.any(lab != want):
                raise InputError(f"{data[key]}: every label in the {key} file must be {want}")
            bucket.append(x)
    for x in parts0 + parts1:
        if x.shape[1] != d:
            raise InputError(f"feature count mismatch: test has {d}, a labeled file has {x.shape[1]}")
    x0 = np.vstack(parts0) if parts0 else np.empty((0, d))
    x1 = np.vstack(parts1) if parts1 else np.empty((0, d))
    return TestingProblem(x0, x1, xu)


# ---------------------------------------------------------------- output


def atomic_write(path, text: str):
    """Write via a temporary file in the target directory, then rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_jsonable) + "\n"


def _jsonable(o):
    if isinstance(o, np.integer):
        return int(o)
    if isinstance(o, np.floating):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (set, frozenset)):
        return sorted(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _num(v) -> str:
    return "" if v is None or (isinstance(v, float) and math.isnan(v)) else f"{float(v):.17g}"


# ---------------------------------------------------------------- config


COMMON = {"seed": 0, "alpha": 0.1, "threads": 1, "out": "ecot-out", "format": "both"}
SIMULATE_KEYS = {"command", "replicates", "scenario", "grid", "methods", *COMMON}
TEST_KEYS = {"command", "data", "method", *COMMON}
ORACLE_KEYS = {"command", "instances", "budget", "checks", "broken", *COMMON}


def load_config(path) -> dict:
    if path is None:
        return {}
    try:
        with open(path) as fh:
            cfg = yaml.safe_load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise InputError(f"config {path} does not parse: {exc}") from None
    if cfg is None:
        return {}
    if not isinstance(cfg, dict):
        raise InputError("the config file must hold a mapping at the top level")
    return cfg


def resolve(cfg: dict, args, command: str, allowed: set) -> dict:
    """Merge defaults, config and flags; reject unknown keys."""
    unknown = set(cfg) - allowed
    if unknown:
        raise InputError(f"unknown config keys for {command}: {sorted(unknown)}")
    if cfg.get("command", command) != command:
        raise InputError(f"config is for {cfg['command']!r}, not {command!r}")
    out = {**COMMON, **{k: v for k, v in cfg.items() if k != "command"}}
    for key in COMMON:
        v = getattr(args, key, None)
        if v is not None:
            out[key] = v
    seed = out["seed"]
    if not isinstance(seed, int) or isinstance(seed, bool) or not 0 <= seed < U64:
        raise InputError("seed must be an integer in [0, 2^64)")
    alpha = out["alpha"]
    if isinstance(alpha, bool) or not isinstance(alpha, (int, float)) or not 0 < alpha < 1:
        raise InputError("alpha must lie in (0, 1)")
    if not isinstance(out["threads"], int) or out["threads"] < 1:
        raise InputError("threads must be a positive integer")
    if out["format"] not in FORMATS:
        raise InputError(f"format must be one of {FORMATS}")
    return out


def _method_spec(d, alpha: float, seed: int) -> MethodSpec:
    if isinstance(d, str):
        d = {"name": d}
    if not isinstance(d, dict):
        raise InputError("a method entry must be a name or a mapping")
    d = dict(d)
    d["alpha"] = alpha
    d.setdefault("seed", seed)
    return MethodSpec.from_dict(d)


def _grid_points(base: ScenarioConfig, grid) -> list:
    """``[(label, ScenarioConfig)]``; parameter ``n`` sets ``n0:n1 = 4:1``."""
    if grid is None:
        return [("", base)]
    if not isinstance(grid, dict) or set(grid) != {"parameter", "values"}:
        raise InputError("grid needs exactly the keys 'parameter' and 'values'")
    name, values = grid["parameter"], grid["values"]
    if not isinstance(values, list) or not values:
        raise InputError("grid.values must be a non-empty list")
    points = []
    for v in values:
        if name == "n":
            n = int(v)
            cfg = replace(base, n0=n - n // 5, n1=n // 5)
        elif name in base.to_dict() and name != "seed":
            cfg = ScenarioConfig.from_dict({**base.to_dict(), name: v})
        else:
            raise InputError(f"grid parameter {name!r} is not a scenario key or 'n'")
        points.append((f"{name}={v}", cfg))
    return points


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    cfg = resolve(load_config(args.config), args, "simulate", SIMULATE_KEYS)
    if args.replicates is not None:
        cfg["replicates"] = args.replicates
    reps = cfg.setdefault("replicates", 10)
    if not isinstance(reps, int) or reps < 1:
        raise InputError("replicates must be a positive integer")
    scen = cfg.setdefault("scenario", {})
    if not isinstance(scen, dict):
        raise InputError("scenario must be a mapping")
    base = ScenarioConfig.from_dict({k: v for k, v in scen.items()})
    methods = cfg.setdefault("methods", ["ecot-bi"])
    if not isinstance(methods, list) or not methods:
        raise InputError("methods must be a non-empty list")
    specs = [_method_spec(m, cfg["alpha"], cfg["seed"]) for m in methods]
    points = _grid_points(base, cfg.get("grid"))
    for _, point in points:
        for spec in specs:
            check_requirements(spec, point.n0, point.n1)

    results = []
    for label, point in points:
        reports = monte_carlo_many(specs, point, reps, seed=cfg["seed"], threads=cfg["threads"])
        for spec, rep in zip(specs, reports):
            results.append({"method": spec.name, "parameter": label, "scenario": point.to_dict(),
                            **rep.to_dict(include_replicates=True)})
    echo = {**cfg, "methods": [s.to_dict() for s in specs]}
    report = {"schema_version": SCHEMA_VERSION, "tool": "ecot", "version": __version__,
              "command": "simulate", "seed": cfg["seed"], "config": echo, "results": results}
    rows = [[r["method"], r["parameter"], _num(r["fdr_mean"]), _num(r["fdr_se"]),
             _num(r["power_mean"]), _num(r["power_se"])] for r in results]
    out = Path(cfg["out"])
    if cfg["format"] in ("json", "both"):
        atomic_write(out / "simulate.json", _json(report))
    if cfg["format"] in ("csv", "both"):
        atomic_write(out / "simulate.csv", _csv(["method", "parameter", "fdr", "fdr_se", "power", "power_se"], rows))
    for r in results:
        print(f"{r['method']:>14s} {r['parameter'] or '-':>10s}  fdr {r['fdr_mean']:.4f} ± {r['fdr_se']:.4f}"
              f"  power {r['power_mean']:.4f} ± {r['power_se']:.4f}")
    return EXIT_OK


def cmd_test(args) -> int:
    cfg = resolve(load_config(args.config), args, "test", TEST_KEYS)
    data = dict(cfg.get("data") or {})
    for key in ("null", "nonnull", "labeled", "test"):
        v = getattr(args, f"data_{key}", None)
        if v is not None:
            data[key] = v
    cfg["data"] = data
    method = cfg.get("method", "ecot-bi")
    if args.method is not None:
        method = {**(method if isinstance(method, dict) else {"name": method}), "name": args.method}
    spec = _method_spec(method, cfg["alpha"], cfg["seed"])
    problem = load_problem(data)
    check_requirements(spec, problem.n0, problem.n1)
    report = run_method(problem, spec)

    m = problem.m
    rejected = np.zeros(m, dtype=int)
    rejected[report.positions()] = 1
    pvals = report.pvalues if report.pvalues is not None else np.full(m, np.nan)
    scores = report.scores if report.scores is not None else np.full(m, np.nan)
    rows = [[i, _num(scores[i]), _num(pvals[i]), rejected[i]] for i in range(m)]
    summary = {
        "schema_version": SCHEMA_VERSION, "tool": "ecot", "version": __version__, "command": "test",
        "seed": cfg["seed"], "config": {**cfg, "method": spec.to_dict()},
        "method": spec.name, "alpha": cfg["alpha"], "n0": problem.n0, "n1": problem.n1, "m": m,
        "rejections": len(report.rejected), "rejected_rows": report.positions(),
        "pruned": report.pruned, "null_prop_estimate": report.null_prop_estimate,
    }
    out = Path(cfg["out"])
    if cfg["format"] in ("csv", "both"):
        atomic_write(out / "test_results.csv", _csv(["index", "score", "p_value", "rejected"], rows))
    if cfg["format"] in ("json", "both"):
        atomic_write(out / "test_summary.json", _json(summary))
    print(f"{spec.name}: {len(report.rejected)} of {m} test points rejected at alpha={cfg['alpha']}")
    return EXIT_OK


def cmd_oracle_check(args) -> int:
    cfg = resolve(load_config(args.config), args, "oracle-check", ORACLE_KEYS)
    if args.instances is not None:
        cfg["instances"] = args.instances
    instances = cfg.setdefault("instances", 100)
    if not isinstance(instances, int) or instances < 1:
        raise InputError("instances must be a positive integer")
    budget_cfg = cfg.setdefault("budget", {})
    if not isinstance(budget_cfg, dict) or set(budget_cfg) - {"max_free_indices", "max_test_points"}:
        raise InputError("budget accepts only max_free_indices and max_test_points")
    for key in ("max_free_indices", "max_test_points"):
        v = getattr(args, key, None)
        if v is not None:
            budget_cfg[key] = v
    budget = OracleBudget(**budget_cfg)
    checks = cfg.setdefault("checks", list(SUITES))
    if not isinstance(checks, list) or set(checks) - set(SUITES):
        raise InputError(f"checks must be a list drawn from {SUITES}")
    broken = bool(cfg.get("broken", False) or args.inject_broken)
    cfg["broken"] = broken
    results = run_oracle_checks(instances, cfg["seed"], budget, broken, checks)

    print(f"{'check':<12s} {'status':<8s} {'instances':>9s} {'failures':>8s} {'max_gap':>8s}")
    for r in results:
        print(f"{r.name:<12s} {r.status:<8s} {r.instances:>9d} {r.failures:>8d} {r.max_discrepancy:>8.3g}"
              + (f"  {r.note}" if r.note else ""))
    report = {"schema_version": SCHEMA_VERSION, "tool": "ecot", "version": __version__,
              "command": "oracle-check", "seed": cfg["seed"], "config": cfg,
              "results": [r.to_dict() for r in results]}
    out = Path(cfg["out"])
    if cfg["format"] in ("json", "both"):
        atomic_write(out / "oracle_check.json", _json(report))
    if cfg["format"] in ("csv", "both"):
        rows = [[r.name, r.status, r.instances, r.failures, _num(r.max_discrepancy)] for r in results]
        atomic_write(out / "oracle_check.csv",
                     _csv(["check", "status", "instances", "failures", "max_discrepancy"], rows))
    return EXIT_CHECK_FAILED if any(r.status == "fail" for r in results) else EXIT_OK


# ---------------------------------------------------------------- entry point


def _u64(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"{text!r} is not an integer") from None
    if not 0 <= v < U64:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2^64)")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ecot", description="Conformal outlier testing with FDR control.")
    parser.add_argument("--version", action="version", version=f"ecot {__version__}")
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="YAML or JSON config file")
    shared.add_argument("--seed", type=_u64, help="master seed (unsigned 64-bit)")
    shared.add_argument("--alpha", type=float, help="target FDR level")
    shared.add_argument("--threads", type=int, help="worker processes for replicates")
    shared.add_argument("--out", help="output directory")
    shared.add_argument("--format", choices=FORMATS, help="report format")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", parents=[shared], help="Monte Carlo FDR and power on synthetic scenarios")
    p.add_argument("--replicates", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("test", parents=[shared], help="test a CSV dataset")
    p.add_argument("--null", dest="data_null", help="CSV of labeled null samples")
    p.add_argument("--nonnull", dest="data_nonnull", help="CSV of labeled non-null samples")
    p.add_argument("--labeled", dest="data_labeled", help="CSV with a 0/1 label column")
    p.add_argument("--test", dest="data_test", help="CSV of test samples")
    p.add_argument("--method", help="method name (overrides the config)")
    p.set_defaults(func=cmd_test)

    p = sub.add_parser("oracle-check", parents=[shared], help="brute-force equivalence checks")
    p.add_argument("--instances", type=int)
    p.add_argument("--max-free-indices", type=int, dest="max_free_indices")
    p.add_argument("--max-test-points", type=int, dest="max_test_points")
    p.add_argument("--inject-broken", action="store_true", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_oracle_check)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ECOTError, ValueError, TypeError) as exc:
        print(f"ecot {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
