"""Command-line interface: ``changeplane fit | test | simulate``.

Exit codes are 0 on success, 1 for problems with the user's input and 2 for
anything else. Failures print a JSON object ``{"error": {...}}`` on stderr.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time
from dataclasses import dataclass
from importlib import resources

import numpy as np

from .core import Dataset, FitConfig

EXIT_OK, EXIT_USER, EXIT_INTERNAL = 0, 1, 2


class UserError(Exception):
    """Bad flags, files or configuration."""


# -- schemas and JSON -----------------------------------------------------------

def load_schema(name):
    text = resources.files("changeplane").joinpath("schemas", f"{name}.schema.json").read_text()
    return json.loads(text)


def validate(instance, name):
    """Validate against a shipped schema; the error names the offending key path."""
    import jsonschema

    try:
        jsonschema.validate(instance, load_schema(name))
    except jsonschema.ValidationError as exc:
        path = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise UserError(f"{name}: invalid value at {path}: {exc.message}") from None


def to_json(obj):
    """Serialize with every float written to 17 significant digits."""
    if isinstance(obj, dict):
        items = (f"{json.dumps(str(k))}: {to_json(v)}" for k, v in obj.items())
        return "{" + ", ".join(items) + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        return "[" + ", ".join(to_json(v) for v in obj) + "]"
    if isinstance(obj, (bool, np.bool_)):
        return "true" if obj else "false"
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        v = float(obj)
        if not math.isfinite(v):
            raise ValueError(f"cannot serialize non-finite number {v}")
        return format(v, ".17g")
    if obj is None:
        return "null"
    return json.dumps(obj)


def _write_json(payload, path):
    text = to_json(payload) + "\n"
    if path in (None, "-"):
        sys.stdout.write(text)
    else:
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(text)


def _tau_value(tau):
    return "inf" if math.isinf(tau) else float(tau)


# -- data loading -------------------------------------------------------------

@dataclass(frozen=True)
class ColumnSpec:
    response: str
    baseline: tuple
    difference: tuple
    grouping: tuple
    add_intercept_x: bool = False
    add_intercept_z: bool = False
    add_intercept_u: bool = False

    @classmethod
    def from_dict(cls, d):
        validate(d, "column_spec")
        return cls(d["response"], tuple(d["baseline"]), tuple(d["difference"]),
                   tuple(d["grouping"]), bool(d.get("add_intercept_x", False)),
                   bool(d.get("add_intercept_z", False)), bool(d.get("add_intercept_u", False)))

    @classmethod
    def from_file(cls, path):
        return cls.from_dict(_read_json(path))

    def check(self):
        for name in ("baseline", "difference", "grouping"):
            if self.response in getattr(self, name):
                raise UserError(f"response column {self.response!r} also listed as {name}")
            cols = getattr(self, name)
            if len(set(cols)) != len(cols):
                raise UserError(f"{name} lists a column more than once")
        if not (self.baseline or self.add_intercept_x):
            raise UserError("baseline block is empty")
        if not (self.difference or self.add_intercept_z):
            raise UserError("difference block is empty")
        if len(self.grouping) + self.add_intercept_u < 2:
            raise UserError("grouping block needs at least two columns")


def _read_json(path):
    try:
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise UserError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise UserError(f"{path}: invalid JSON ({exc.msg} at line {exc.lineno})") from None


def load_csv(path, spec: ColumnSpec) -> Dataset:
    """Read a CSV with a header row into a Dataset.

    Rows are numbered from 1 for the first data row in error messages.
    """
    spec.check()
    try:
        fh = open(path, newline="", encoding="utf-8")
    except FileNotFoundError:
        raise UserError(f"file not found: {path}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise UserError(f"{path}: file is empty")
        header = [h.strip() for h in header]
        index = {name: j for j, name in enumerate(header)}
        needed = [spec.response, *spec.baseline, *spec.difference, *spec.grouping]
        for name in needed:
            if name not in index:
                raise UserError(f"missing column {name!r} in {path}")
        rows = []
        for i, row in enumerate(reader, start=1):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise UserError(f"row {i} has {len(row)} fields, header has {len(header)}")
            vals = {}
            for name in set(needed):
                cell = row[index[name]].strip()
                try:
                    vals[name] = float(cell)
                except ValueError:
                    raise UserError(f"non-numeric cell {cell!r} at (row {i}, column {name!r})",
                                    (i, name)) from None
            rows.append(vals)
    if not rows:
        raise UserError(f"{path}: no data rows")

    def block(cols, intercept):
        parts = [np.ones(len(rows))] if intercept else []
        parts += [np.array([r[c] for r in rows]) for c in cols]
        return np.column_stack(parts)

    y = np.array([r[spec.response] for r in rows])
    return Dataset.from_arrays(y, block(spec.baseline, spec.add_intercept_x),
                               block(spec.difference, spec.add_intercept_z),
                               block(spec.grouping, spec.add_intercept_u))


# -- commands -----------------------------------------------------------------

def _parse_h(text):
    if text == "auto":
        return {"h_policy": "rule_of_thumb"}
    if text == "cv":
        return {"h_policy": "cross_validation"}
    try:
        h = float(text)
    except ValueError:
        raise UserError(f"--h must be auto, cv or a positive number, got {text!r}") from None
    if not h > 0:
        raise UserError("--h must be positive")
    return {"h_policy": "fixed", "h": h}


def _parse_tau(text):
    if text == "auto":
        return "adaptive", None
    if text == "inf":
        return "infinite", None
    try:
        tau = float(text)
    except ValueError:
        raise UserError(f"--tau must be auto, inf or a positive number, got {text!r}") from None
    if not tau > 0:
        raise UserError("--tau must be positive")
    return "fixed", tau


def cmd_fit(args):
    from .changeplane_fit import bootstrap_ci, fit_alternating

    d = load_csv(args.data, ColumnSpec.from_file(args.spec))
    policy, tau = _parse_tau(args.tau)
    cfg = FitConfig(kernel=args.kernel, tau_policy=policy, tau=tau, seed=args.seed,
                    **_parse_h(args.h))
    fit = fit_alternating(d, cfg)
    ci = None
    if args.bootstrap:
        level = 0.95 if args.level is None else args.level
        res = bootstrap_ci(d, cfg, B=args.bootstrap, level=level, point=fit,
                           threads=args.threads)
        p, q = d.p, d.q
        sl = {"alpha": slice(0, p), "beta": slice(p, p + q), "eta": slice(p + q, None)}
        ci = {"level": level, "B": res.B, "dropped": res.dropped}
        for k, s in sl.items():
            ci[k] = {"lower": res.lower[s], "upper": res.upper[s]}
    out = {
        "command": "fit", "n": d.n, "p": d.p, "q": d.q, "r": d.r,
        "kernel": fit.kernel, "h": fit.h, "tau": _tau_value(fit.tau),
        "alpha": fit.params.alpha, "beta": fit.params.beta, "eta": fit.params.eta,
        "converged": fit.converged, "iterations": fit.iterations,
        "loss_trace": fit.loss_trace, "subgroup_labels": fit.subgroup_labels,
        "seed": args.seed, "ci": ci,
    }
    validate(json.loads(to_json(out)), "fit_output")
    _write_json(out, args.out)
    return EXIT_OK


def cmd_test(args):
    from .core import derive_stream
    from .subgroup_test import bootstrap_pvalue, fit_null

    d = load_csv(args.data, ColumnSpec.from_file(args.spec))
    level = 0.05 if args.level is None else args.level
    if not 0 < level < 1:
        raise UserError("--level must be in (0, 1)")
    if args.B < 100:
        raise UserError("--B must be at least 100")
    if args.tau is None:
        tau_policy = None
    else:
        policy, tau = _parse_tau(args.tau)
        tau_policy = tau if policy == "fixed" else policy
    if args.method == "wast" and tau_policy not in (None, "infinite"):
        raise UserError("wast always uses least squares; drop --tau")
    start = time.perf_counter()
    if tau_policy is None:
        tau_policy = "adaptive" if args.method == "rwast" else "infinite"
    nf = fit_null(d.X, d.y, tau_policy)
    res = bootstrap_pvalue(d, args.method, args.B, derive_stream(args.seed), nf=nf,
                           M=args.sst_grid)
    runtime = time.perf_counter() - start
    out = {
        "command": "test", "method": res.method, "n": d.n, "statistic": res.statistic,
        "p_value": res.p_value, "B": res.B, "level": level, "reject": res.p_value <= level,
        "tau": _tau_value(nf.tau), "sst_grid": args.sst_grid if args.method == "sst" else None,
        "seed": args.seed, "runtime_seconds": runtime,
    }
    validate(json.loads(to_json(out)), "test_output")
    _write_json(out, args.out)
    return EXIT_OK


def _simulation_setup(cfg_json, suite):
    from .simlab import EST_METHODS, TEST_METHODS, DgpConfig

    validate(cfg_json, "simulate_config")
    grid = dict(cfg_json.get("grid", {}))
    allowed = EST_METHODS if suite == "estimation" else TEST_METHODS
    for m in grid.get("method", []):
        if m not in allowed:
            raise UserError(f"simulate_config: invalid value at grid/method: {m!r} is not a "
                            f"{suite} method {allowed}")
    if suite == "estimation" and "beta_scale" in grid:
        raise UserError("simulate_config: invalid value at grid/beta_scale: "
                        "only the test suite varies the signal; set dgp/beta_scale instead")
    try:
        dgp = DgpConfig(**{k: (tuple(v) if isinstance(v, list) else v)
                           for k, v in cfg_json.get("dgp", {}).items()})
        fit_cfg = FitConfig(**cfg_json.get("fit", {}))
    except ValueError as exc:
        raise UserError(f"simulate_config: {exc}") from None
    return grid, dgp, fit_cfg


def cmd_simulate(args):
    from .simlab import run_estimation_experiment, run_test_experiment, write_plot_csv

    cfg_json = _read_json(args.config) if args.config else {}
    grid, dgp, fit_cfg = _simulation_setup(cfg_json, args.suite)
    if args.reps < 1:
        raise UserError("--reps must be at least 1")
    os.makedirs(args.out_dir, exist_ok=True)
    if args.suite == "estimation":
        report = run_estimation_experiment(grid, args.reps, base_seed=args.seed, dgp=dgp,
                                           fit_cfg=fit_cfg,
                                           h_rule=cfg_json.get("h_rule", "default"),
                                           threads=args.threads)
    else:
        if args.B < 100:
            raise UserError("--B must be at least 100")
        report = run_test_experiment(grid, args.reps, args.B, base_seed=args.seed, dgp=dgp,
                                     M=cfg_json.get("sst_grid", 1000),
                                     level=cfg_json.get("level", 0.05), threads=args.threads)
    report.to_csv(os.path.join(args.out_dir, "report.csv"))
    report.raw_to_csv(os.path.join(args.out_dir, "raw.csv"))
    write_plot_csv(report, os.path.join(args.out_dir, "plot_data.csv"))
    return EXIT_OK


# -- entry point --------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UserError(message)


def _seed(text):
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"seed must be an integer, got {text!r}") from None
    if not 0 <= v < 2 ** 64:
        raise argparse.ArgumentTypeError("seed must be an unsigned 64-bit integer")
    return v


def build_parser():
    parser = _Parser(prog="changeplane", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    threads = {"type": int, "default": os.cpu_count() or 1,
               "help": "worker processes (CHANGEPLANE_THREADS overrides)"}

    f = sub.add_parser("fit", help="fit the change-plane model to a CSV file")
    f.add_argument("--data", required=True)
    f.add_argument("--spec", required=True, help="ColumnSpec JSON")
    f.add_argument("--kernel", choices=["sigmoid", "normcdf", "normmix"], default="sigmoid")
    f.add_argument("--h", default="auto", help="auto, cv or a positive value")
    f.add_argument("--tau", default="auto", help="auto, inf or a positive value")
    f.add_argument("--bootstrap", type=int, default=0, metavar="B",
                   help="bootstrap replicates for confidence intervals (0 = none)")
    f.add_argument("--level", type=float, default=None, help="confidence level (0.95)")
    f.add_argument("--seed", type=_seed, default=0)
    f.add_argument("--threads", **threads)
    f.add_argument("--out", default="-")
    f.set_defaults(func=cmd_fit)

    t = sub.add_parser("test", help="test for the existence of a subgroup")
    t.add_argument("--data", required=True)
    t.add_argument("--spec", required=True, help="ColumnSpec JSON")
    t.add_argument("--method", choices=["rwast", "wast", "sst"], default="rwast")
    t.add_argument("--B", type=int, default=1000)
    t.add_argument("--sst-grid", type=int, default=1000, dest="sst_grid")
    t.add_argument("--tau", default=None, help="auto, inf or a positive value")
    t.add_argument("--level", type=float, default=None, help="significance level (0.05)")
    t.add_argument("--seed", type=_seed, default=0)
    t.add_argument("--out", default="-")
    t.set_defaults(func=cmd_test)

    s = sub.add_parser("simulate", help="run a Monte Carlo suite")
    s.add_argument("--suite", choices=["estimation", "test"], required=True)
    s.add_argument("--config", default=None, help="suite configuration JSON")
    s.add_argument("--reps", type=int, default=100)
    s.add_argument("--B", type=int, default=300)
    s.add_argument("--seed", type=_seed, default=0)
    s.add_argument("--out-dir", required=True, dest="out_dir")
    s.add_argument("--threads", **threads)
    s.set_defaults(func=cmd_simulate)
    return parser


def _fail(kind, exc, code):
    payload = {"error": {"type": kind, "message": str(exc.args[0]) if exc.args else str(exc)}}
    if isinstance(exc, UserError) and len(exc.args) > 1:
        row, col = exc.args[1]
        payload["error"]["location"] = {"row": row, "column": col}
    sys.stderr.write(json.dumps(payload) + "\n")
    return code


def main(argv=None):
    from .huber import CalibrationError

    try:
        args = build_parser().parse_args(argv)
        return args.func(args)
    except UserError as exc:
        return _fail("UserError", exc, EXIT_USER)
    except (ValueError, CalibrationError, np.linalg.LinAlgError, OSError) as exc:
        return _fail(type(exc).__name__, exc, EXIT_USER)
    except Exception as exc:  # noqa: BLE001 - last-resort handler
        return _fail(type(exc).__name__, exc, EXIT_INTERNAL)


if __name__ == "__main__":
    sys.exit(main())
