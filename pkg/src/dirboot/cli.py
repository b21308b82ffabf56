"""Batch front door for the library's analysis pipelines.

Six subcommands: ``simulate-tables`` (size/power rejection-rate tables with
matching limit-law rows and plot-ready curve points), ``test-monotone``
(monotonicity of a quantile treatment-effect curve from a CSV sample),
``test-moments`` (max-coordinate moment-inequality test), ``test-dominance``
(one-sided CvM stochastic-dominance test for paired samples),
``diagnose-bootstrap`` (standard vs derivative-composed resampling laws for
an absolute-mean statistic), and ``bl-distance`` (distance between two
empirical laws).

Configs are flat JSON files; command-line flags override file values; every
run writes a manifest from which the outputs can be reproduced exactly.
Exit codes: 0 success, 1 usage error, 2 statistical-pipeline failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .bootstrap import (
    ResampleScheme,
    bootstrap_ensemble,
    law_degeneracy,
    run_test,
    statistic_law,
)
from .core import (
    EmpiricalLaw,
    EstimateBundle,
    empirical_law_to_csv,
    law_distance,
)
from .derivatives import (
    AbsMean,
    DerivativeTuning,
    MaxCoord,
    StochDomCvM,
    estimate_derivative,
)
from .core import GridFunction
from .lp import LinearProgramError
from .projection import ProjectionError
from .qr import QRSolveError
from .quantile_sim import (
    QuantileSimConfig,
    TreatmentSample,
    monotonicity_test,
    run_monte_carlo,
    theoretical_local_rejection,
)

__all__ = ["RunConfig", "UsageError", "parse_config", "dispatch",
           "rerun_from_manifest", "main"]

_PROFILES = ("ci", "desk", "full")

_ENV_OUT = "DIRBOOT_OUT"


class UsageError(Exception):
    """Bad flags, bad config file, or bad input data — exit code 1."""


# ---------------------------------------------------------------------------
# parameter schema
# ---------------------------------------------------------------------------


_REQUIRED = object()


@dataclass(frozen=True)
class _Param:
    key: str
    kind: str  # int | float | str | path | bool | int_list | float_list | pair_list
    default: object  # value, per-profile dict, or _REQUIRED
    check: Callable[[object], str | None]
    help: str


def _ok(_value) -> str | None:
    return None


def _open01(x) -> str | None:
    return None if 0.0 < x < 1.0 else f"must lie strictly inside (0, 1), got {x!r}"


def _positive(x) -> str | None:
    return None if x > 0 else f"must be positive, got {x!r}"


def _nonnegative(x) -> str | None:
    return None if x >= 0 else f"must be nonnegative, got {x!r}"


def _at_least(bound):
    def check(x):
        return None if x >= bound else f"must be at least {bound}, got {x!r}"

    return check


def _each(check):
    def run(values):
        if not values:
            return "must be a nonempty list"
        for i, v in enumerate(values):
            msg = check(v)
            if msg is not None:
                return f"[{i}]: {msg}"
        return None

    return run


def _epsilon_pairs(values) -> str | None:
    if not values:
        return "must be a nonempty list of [const, exponent] pairs"
    for i, pair in enumerate(values):
        if len(pair) != 2:
            return f"[{i}]: expected [const, exponent], got {pair!r}"
        c, k = pair
        if not c > 0:
            return f"[{i}]: const must be positive, got {c!r}"
        if not 0.0 < k < 1.0:
            return f"[{i}]: exponent must lie strictly inside (0, 1), got {k!r}"
    return None


def _metric_name(x) -> str | None:
    return None if x in ("bl", "ks") else f"must be 'bl' or 'ks', got {x!r}"


_DEFAULT_EPSILONS = ((1.0, 0.25), (1.0, 1.0 / 3.0), (0.01, 0.25), (0.01, 1.0 / 3.0))

_SCHEMAS: dict[str, tuple[_Param, ...]] = {
    "simulate-tables": (
        _Param("n_values", "int_list", {"ci": [200], "desk": [200, 500], "full": [200, 500]},
               _each(_at_least(50)), "sample sizes"),
        _Param("size_drifts", "float_list",
               {"ci": [0.0, 2.0], "desk": [0.0, 1.0, 2.0], "full": [0.0, 1.0, 2.0]},
               _each(_ok), "local drifts for the size table"),
        _Param("power_drifts", "float_list",
               {"ci": [-4.0, -6.0, -8.0],
                "desk": [-float(d) for d in range(1, 9)],
                "full": [-float(d) for d in range(1, 9)]},
               _each(_ok), "local drifts for the power table"),
        _Param("epsilon_settings", "pair_list",
               [list(p) for p in _DEFAULT_EPSILONS],
               _epsilon_pairs, "activity-threshold settings [const, exponent]"),
        _Param("alphas", "float_list", [0.1, 0.05, 0.01], _each(_open01),
               "size-table test levels"),
        _Param("power_alpha", "float", 0.05, _open01, "power-table test level"),
        _Param("mc_reps", "int", {"ci": 500, "desk": 1000, "full": 5000},
               _at_least(1), "replications per cell"),
        _Param("bootstrap_draws", "int", 200, _at_least(2), "resampling draws per replication"),
        _Param("tau_knots", "int", 25, _at_least(2), "quantile-level grid size"),
        _Param("tau_min", "float", 0.2, _open01, "lowest quantile level"),
        _Param("tau_max", "float", 0.8, _open01, "highest quantile level"),
        _Param("include_theoretical", "bool", True, _ok,
               "append limit-law rejection rows"),
        _Param("oracle_n", "int", {"ci": 20_000, "desk": 50_000, "full": 100_000},
               _at_least(1000), "sample size for limit-law calibration fits"),
        _Param("oracle_fits", "int", {"ci": 30, "desk": 60, "full": 100},
               _at_least(10), "number of limit-law calibration fits"),
        _Param("limit_draws", "int", 100_000, _at_least(10_000),
               "draws from the calibrated limit law"),
    ),
    "test-monotone": (
        _Param("data", "path", _REQUIRED, _ok, "CSV with columns Y, D, Z1..Zk"),
        _Param("alpha", "float", 0.1, _open01, "test level"),
        _Param("bootstrap_draws", "int", 200, _at_least(2), "resampling draws"),
        _Param("epsilon_const", "float", 1.0, _positive, "activity-threshold constant"),
        _Param("epsilon_exponent", "float", 1.0 / 3.0, _open01,
               "activity-threshold decay exponent"),
        _Param("tau_knots", "int", 25, _at_least(2), "quantile-level grid size"),
        _Param("tau_min", "float", 0.2, _open01, "lowest quantile level"),
        _Param("tau_max", "float", 0.8, _open01, "highest quantile level"),
        _Param("quadrature_scale", "float", 1.0, _positive, "grid-weight scale factor"),
    ),
    "test-moments": (
        _Param("data", "path", _REQUIRED, _ok, "CSV of coordinate columns"),
        _Param("alpha", "float", 0.05, _open01, "test level"),
        _Param("bootstrap_draws", "int", 500, _at_least(2), "resampling draws"),
        _Param("delta_bump", "float", 0.0, _nonnegative, "critical-value bump"),
        _Param("slack_tol", "float", None, _nonnegative,
               "near-max selection window (default n^(-1/3))"),
    ),
    "test-dominance": (
        _Param("data", "path", _REQUIRED, _ok, "CSV with two sample columns"),
        _Param("alpha", "float", 0.05, _open01, "test level"),
        _Param("bootstrap_draws", "int", 500, _at_least(2), "resampling draws"),
        _Param("delta_bump", "float", 0.0, _nonnegative, "critical-value bump"),
        _Param("grid_knots", "int", 25, _at_least(2), "evaluation grid size"),
        _Param("contact_tol", "float", None, _nonnegative,
               "near-contact selection window (default n^(-1/3))"),
    ),
    "diagnose-bootstrap": (
        _Param("data", "path", _REQUIRED, _ok, "CSV with one sample column"),
        _Param("bootstrap_draws", "int", 2000, _at_least(2), "resampling draws"),
        _Param("slack_tol", "float", None, _nonnegative,
               "kink-window size (default n^(-1/3))"),
        _Param("divergence_threshold", "float", 0.05, _positive,
               "KS distance above which the laws are flagged as diverging"),
    ),
    "bl-distance": (
        _Param("data1", "path", _REQUIRED, _ok, "first sample CSV"),
        _Param("data2", "path", _REQUIRED, _ok, "second sample CSV"),
        _Param("metric", "str", "bl", _metric_name, "distance metric: bl or ks"),
    ),
}


@dataclass(frozen=True)
class RunConfig:
    """Fully validated run description: command, parameters, bookkeeping."""

    command: str
    parameters: dict
    master_seed: int
    out_dir: str
    profile: str
    workers: int


# ---------------------------------------------------------------------------
# parsing
# ---------------------------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage problems, not argparse's 2
        raise UsageError(message)


def _flag(key: str) -> str:
    return "--" + key.replace("_", "-")


def _add_param_flag(parser: argparse.ArgumentParser, p: _Param) -> None:
    flag = _flag(p.key)
    if p.kind == "bool":
        parser.add_argument(flag, default=None, help=p.help,
                            action=argparse.BooleanOptionalAction)
    elif p.kind == "int":
        parser.add_argument(flag, default=None, type=int, help=p.help)
    elif p.kind == "float":
        parser.add_argument(flag, default=None, type=float, help=p.help)
    elif p.kind in ("str", "path"):
        parser.add_argument(flag, default=None, type=str, help=p.help)
    elif p.kind == "int_list":
        parser.add_argument(flag, default=None, type=int, nargs="+", help=p.help)
    elif p.kind == "float_list":
        parser.add_argument(flag, default=None, type=float, nargs="+", help=p.help)
    elif p.kind == "pair_list":
        parser.add_argument(flag, default=None, type=str, nargs="+",
                            help=p.help + " (each 'const,exponent')")
    else:  # pragma: no cover - schema typo guard
        raise AssertionError(f"unknown param kind {p.kind}")


def _build_parser() -> _Parser:
    parser = _Parser(prog="dirboot",
                     description="Inference for directionally differentiable "
                                 "functionals: simulation tables and tests.")
    sub = parser.add_subparsers(dest="command", metavar="command")
    for command, schema in _SCHEMAS.items():
        p = sub.add_parser(command, prog=f"dirboot {command}")
        p.error = parser.error  # type: ignore[method-assign]
        p.add_argument("--config", default=None, type=str,
                       help="flat JSON config file; flags override its values")
        p.add_argument("--seed", default=None, type=int, help="master seed")
        p.add_argument("--out", default=None, type=str, help="output directory")
        p.add_argument("--profile", default=None, choices=_PROFILES,
                       help="budget profile (default ci)")
        p.add_argument("--workers", default=None, type=int,
                       help="worker threads; never changes results")
        for param in schema:
            _add_param_flag(p, param)
    return parser


def _coerce(key: str, kind: str, value):
    """Type-check one config value (from JSON or from a parsed flag)."""
    numbers = (int, float)
    if kind == "int":
        if isinstance(value, bool) or not isinstance(value, int):
            raise UsageError(f"{key}: expected an integer, got {value!r}")
        return int(value)
    if kind == "float":
        if isinstance(value, bool) or not isinstance(value, numbers):
            raise UsageError(f"{key}: expected a number, got {value!r}")
        return float(value)
    if kind in ("str", "path"):
        if not isinstance(value, str):
            raise UsageError(f"{key}: expected a string, got {value!r}")
        return value
    if kind == "bool":
        if not isinstance(value, bool):
            raise UsageError(f"{key}: expected true/false, got {value!r}")
        return value
    if kind == "int_list":
        if not isinstance(value, (list, tuple)):
            raise UsageError(f"{key}: expected a list of integers, got {value!r}")
        return [_coerce(f"{key}[{i}]", "int", v) for i, v in enumerate(value)]
    if kind == "float_list":
        if not isinstance(value, (list, tuple)):
            raise UsageError(f"{key}: expected a list of numbers, got {value!r}")
        return [_coerce(f"{key}[{i}]", "float", v) for i, v in enumerate(value)]
    if kind == "pair_list":
        if not isinstance(value, (list, tuple)):
            raise UsageError(f"{key}: expected a list of pairs, got {value!r}")
        out = []
        for i, item in enumerate(value):
            if isinstance(item, str):  # flag form 'const,exponent'
                bits = item.split(",")
                if len(bits) != 2:
                    raise UsageError(
                        f"{key}[{i}]: expected 'const,exponent', got {item!r}")
                try:
                    item = [float(bits[0]), float(bits[1])]
                except ValueError:
                    raise UsageError(
                        f"{key}[{i}]: expected 'const,exponent', got {item!r}"
                    ) from None
            if not isinstance(item, (list, tuple)) or len(item) != 2:
                raise UsageError(
                    f"{key}[{i}]: expected [const, exponent], got {item!r}")
            out.append([_coerce(f"{key}[{i}][0]", "float", item[0]),
                        _coerce(f"{key}[{i}][1]", "float", item[1])])
        return out
    raise AssertionError(f"unknown param kind {kind}")  # pragma: no cover


def parse_config(argv: Sequence[str] | None = None) -> RunConfig:
    """Parse flags (and an optional JSON config file) into a RunConfig.

    Precedence: explicit flags > config-file values > profile defaults.
    Unknown config keys, type mismatches, and constraint violations raise
    ``UsageError`` with the offending key path in the message.
    """
    parser = _build_parser()
    ns = parser.parse_args(list(argv) if argv is not None else None)
    if ns.command is None:
        raise UsageError("missing command; expected one of: "
                         + ", ".join(_SCHEMAS))
    schema = _SCHEMAS[ns.command]

    file_values: dict = {}
    if ns.config is not None:
        path = Path(ns.config)
        if not path.is_file():
            raise UsageError(f"config: file not found: {path}")
        try:
            loaded = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"config: invalid JSON ({exc})") from None
        if not isinstance(loaded, dict):
            raise UsageError("config: top level must be a JSON object")
        file_values = loaded

    known = {p.key for p in schema}
    reserved = {"command", "seed", "out", "profile", "workers"}
    for key in file_values:
        if key not in known and key not in reserved:
            raise UsageError(f"unknown config key: {key}")
    if "command" in file_values and file_values["command"] != ns.command:
        raise UsageError(
            f"command: config file says {file_values['command']!r} but the "
            f"command line says {ns.command!r}")

    def reserved_value(key, flag_value, kind, default):
        if flag_value is not None:
            return _coerce(key, kind, flag_value)
        if key in file_values:
            return _coerce(key, kind, file_values[key])
        return default

    profile = reserved_value("profile", ns.profile, "str", "ci")
    if profile not in _PROFILES:
        raise UsageError(f"profile: must be one of {_PROFILES}, got {profile!r}")
    master_seed = reserved_value("seed", ns.seed, "int", 0)
    out_dir = reserved_value("out", ns.out, "str",
                             os.environ.get(_ENV_OUT, "dirboot-out"))
    workers = reserved_value("workers", ns.workers, "int", 1)
    if workers < 1:
        raise UsageError(f"workers: must be at least 1, got {workers}")

    parameters: dict = {}
    for p in schema:
        flag_value = getattr(ns, p.key)
        if flag_value is not None:
            value = _coerce(p.key, p.kind, flag_value)
        elif p.key in file_values:
            value = _coerce(p.key, p.kind, file_values[p.key])
        else:
            default = p.default
            if isinstance(default, dict):
                default = default[profile]
            if default is _REQUIRED:
                raise UsageError(f"{p.key}: required (flag {_flag(p.key)} "
                                 "or config key)")
            value = default
        if value is not None:
            msg = p.check(value)
            if msg is not None:
                raise UsageError(f"{p.key}{msg}" if msg.startswith("[")
                                 else f"{p.key}: {msg}")
        parameters[p.key] = value

    if "tau_min" in parameters and parameters["tau_min"] >= parameters["tau_max"]:
        raise UsageError("tau_min: must be strictly below tau_max")

    return RunConfig(command=ns.command, parameters=parameters,
                     master_seed=master_seed, out_dir=out_dir,
                     profile=profile, workers=workers)


# ---------------------------------------------------------------------------
# data ingestion
# ---------------------------------------------------------------------------


def _read_table(path_str: str) -> tuple[list[str], np.ndarray]:
    """Read a headered CSV of floats -> (column names, (n, k) array)."""
    path = Path(path_str)
    if not path.is_file():
        raise UsageError(f"data file not found: {path}")
    rows = [row for row in csv.reader(io.StringIO(path.read_text())) if row]
    if len(rows) < 2:
        raise UsageError(f"{path}: need a header row and at least one data row")
    header = [c.strip() for c in rows[0]]
    try:
        data = np.array([[float(v) for v in row] for row in rows[1:]])
    except ValueError as exc:
        raise UsageError(f"{path}: non-numeric data ({exc})") from None
    if data.shape[1] != len(header):
        raise UsageError(f"{path}: ragged rows")
    return header, data


def _read_sample(path_str: str) -> np.ndarray:
    """Read a single-column sample; a non-numeric first row is a header."""
    path = Path(path_str)
    if not path.is_file():
        raise UsageError(f"data file not found: {path}")
    rows = [row for row in csv.reader(io.StringIO(path.read_text())) if row]
    if not rows:
        raise UsageError(f"{path}: empty file")
    start = 0
    try:
        float(rows[0][0])
    except ValueError:
        start = 1
    if len(rows) <= start:
        raise UsageError(f"{path}: no data rows")
    try:
        return np.array([float(row[0]) for row in rows[start:]])
    except ValueError as exc:
        raise UsageError(f"{path}: non-numeric data ({exc})") from None


def _treatment_sample(path: str) -> TreatmentSample:
    header, data = _read_table(path)
    missing = [c for c in ("Y", "D") if c not in header]
    if missing:
        raise UsageError(f"{path}: missing required columns {missing}; "
                         "expected Y, D, Z1..Zk")
    y = data[:, header.index("Y")]
    d = data[:, header.index("D")]
    z_cols = [i for i, c in enumerate(header) if c not in ("Y", "D")]
    z = np.column_stack([np.ones(len(y))] + [data[:, i] for i in z_cols])
    return TreatmentSample(y=y, treatment=d, covariates=z)


# ---------------------------------------------------------------------------
# command handlers (each returns the list of files written)
# ---------------------------------------------------------------------------


def _write(out_dir: Path, name: str, text: str, outputs: list) -> None:
    (out_dir / name).write_text(text)
    outputs.append(name)


def _tau_grid(p: dict) -> tuple:
    return tuple(np.linspace(p["tau_min"], p["tau_max"], p["tau_knots"]))


def _run_simulate_tables(config: RunConfig, out_dir: Path) -> list:
    p = config.parameters
    taus = _tau_grid(p)
    combos = [tuple(pair) for pair in p["epsilon_settings"]]

    def cell_configs(drifts, alphas):
        return [
            QuantileSimConfig(
                n=n, drift=drift, tau_grid=taus,
                bootstrap_draws=p["bootstrap_draws"], mc_reps=p["mc_reps"],
                epsilon_const=c, epsilon_exponent=k, alphas=tuple(alphas),
                master_seed=config.master_seed,
            )
            for n in p["n_values"] for drift in drifts for (c, k) in combos
        ]

    outputs: list = []
    size_table = run_monte_carlo(cell_configs(p["size_drifts"], p["alphas"]),
                                 workers=config.workers)
    _write(out_dir, "table_size.csv", size_table.to_csv(), outputs)
    power_table = run_monte_carlo(
        cell_configs(p["power_drifts"], [p["power_alpha"]]),
        workers=config.workers)
    _write(out_dir, "table_power.csv", power_table.to_csv(), outputs)

    theor_rows = []
    if p["include_theoretical"]:
        for drift in p["size_drifts"]:
            for alpha in p["alphas"]:
                theor_rows.append(("size", drift, alpha))
        for drift in p["power_drifts"]:
            theor_rows.append(("power", drift, p["power_alpha"]))
        buf = io.StringIO()
        buf.write("block,drift,alpha,reject_rate,oracle_n,oracle_fits,draws\n")
        for block, drift, alpha in theor_rows:
            rate = theoretical_local_rejection(
                drift, alpha=alpha, oracle_n=p["oracle_n"],
                draws=p["limit_draws"], master_seed=config.master_seed,
                oracle_fits=p["oracle_fits"], tau_grid=taus)
            buf.write(f"{block},{drift:.17g},{alpha:.17g},{rate:.17g},"
                      f"{p['oracle_n']},{p['oracle_fits']},{p['limit_draws']}\n")
        _write(out_dir, "table_theoretical.csv", buf.getvalue(), outputs)

    # tidy curve points for plotting: rejection rate against drift
    buf = io.StringIO()
    buf.write("block,series,n,epsilon_const,epsilon_exponent,alpha,drift,"
              "reject_rate\n")
    for block, table in (("size", size_table), ("power", power_table)):
        for r in table.rows:
            series = (f"n={r['n']} eps={r['epsilon_const']:g}"
                      f"*n^-{r['epsilon_exponent']:g}")
            buf.write(f"{block},{series},{r['n']},{r['epsilon_const']:.17g},"
                      f"{r['epsilon_exponent']:.17g},{r['alpha']:.17g},"
                      f"{r['drift']:.17g},{r['reject_rate']:.17g}\n")
    if p["include_theoretical"]:
        text = (out_dir / "table_theoretical.csv").read_text().splitlines()[1:]
        for line in text:
            block, drift, alpha, rate = line.split(",")[:4]
            buf.write(f"{block},limit,,,,{alpha},{drift},{rate}\n")
    _write(out_dir, "plot_curves.csv", buf.getvalue(), outputs)
    return outputs


def _print_report(report) -> None:
    print(report.verdict_line())


def _report_json(report) -> str:
    payload = {
        "statistic": report.statistic,
        "critical_value": report.critical_value,
        "alpha": report.alpha,
        "delta_bump": report.delta_bump,
        "reject": report.reject,
        "p_value": report.p_value,
        "seed_manifest": report.seed_manifest,
        "diagnostics": report.diagnostics,
    }
    return json.dumps(payload, sort_keys=True, indent=2) + "\n"


def _run_test_monotone(config: RunConfig, out_dir: Path) -> list:
    p = config.parameters
    dataset = _treatment_sample(p["data"])
    sim_config = QuantileSimConfig(
        n=dataset.n, drift=0.0, tau_grid=_tau_grid(p),
        bootstrap_draws=p["bootstrap_draws"], mc_reps=1,
        epsilon_const=p["epsilon_const"],
        epsilon_exponent=p["epsilon_exponent"],
        alphas=(p["alpha"],), master_seed=config.master_seed,
        quadrature_scale=p["quadrature_scale"],
    )
    report = monotonicity_test(dataset, sim_config, alpha=p["alpha"])
    outputs: list = []
    _write(out_dir, "report.json", _report_json(report), outputs)
    _print_report(report)
    return outputs


def _run_test_moments(config: RunConfig, out_dir: Path) -> list:
    p = config.parameters
    _, data = _read_table(p["data"])
    spec = MaxCoord(dim=data.shape[1])
    tuning = DerivativeTuning(slack_tol=p["slack_tol"])

    def estimator(rows, weights):
        if weights is None:
            return rows.mean(axis=0)
        return (weights @ rows) / float(np.sum(weights))

    report = run_test(
        data, estimator, spec,
        lambda bundle: estimate_derivative(spec, bundle, tuning=tuning),
        alpha=p["alpha"], delta_bump=p["delta_bump"],
        B=p["bootstrap_draws"], master_seed=config.master_seed,
    )
    outputs: list = []
    _write(out_dir, "report.json", _report_json(report), outputs)
    _print_report(report)
    return outputs


def _run_test_dominance(config: RunConfig, out_dir: Path) -> list:
    p = config.parameters
    header, data = _read_table(p["data"])
    if data.shape[1] != 2:
        raise UsageError(f"{p['data']}: expected exactly two sample columns, "
                         f"got {header}")
    lo, hi = float(np.min(data)), float(np.max(data))
    if not hi > lo:
        raise UsageError(f"{p['data']}: all values identical; no grid to "
                         "compare distributions on")
    grid = np.linspace(lo, hi, p["grid_knots"])
    weight = GridFunction(grid, np.ones(p["grid_knots"]))
    spec = StochDomCvM(weight=weight)
    tuning = DerivativeTuning(contact_tol=p["contact_tol"])

    def estimator(rows, weights):
        w = np.ones(rows.shape[0]) if weights is None else weights
        total = float(np.sum(w))
        cdf_a = ((rows[:, 0][None, :] <= grid[:, None]) @ w) / total
        cdf_b = ((rows[:, 1][None, :] <= grid[:, None]) @ w) / total
        return np.concatenate([cdf_a, cdf_b])

    report = run_test(
        data, estimator, spec,
        lambda bundle: estimate_derivative(spec, bundle, tuning=tuning),
        alpha=p["alpha"], delta_bump=p["delta_bump"],
        B=p["bootstrap_draws"], master_seed=config.master_seed,
    )
    outputs: list = []
    _write(out_dir, "report.json", _report_json(report), outputs)
    _print_report(report)
    return outputs


def _run_diagnose_bootstrap(config: RunConfig, out_dir: Path) -> list:
    p = config.parameters
    sample = _read_sample(p["data"])
    n = sample.shape[0]
    if n < 2:
        raise UsageError(f"{p['data']}: need at least two observations")
    spec = AbsMean()

    def estimator(rows, weights):
        if weights is None:
            return float(np.mean(rows))
        return float(np.average(rows, weights=weights))

    theta_hat = estimator(sample, None)
    bundle = EstimateBundle(theta_hat, n)
    ensemble = bootstrap_ensemble(estimator, sample, p["bootstrap_draws"],
                                  ResampleScheme(), config.master_seed,
                                  theta_hat=theta_hat)
    standard = statistic_law(ensemble, "standard", functional=spec,
                             theta_hat=theta_hat)
    tuning = DerivativeTuning(slack_tol=p["slack_tol"]).resolved(n)
    derivative = estimate_derivative(spec, bundle, tuning=tuning)
    modified = statistic_law(ensemble, "modified", derivative=derivative)

    ks = law_distance(standard, modified, metric="ks")
    bl = law_distance(standard, modified, metric="bl")
    in_kink_window = bool(abs(theta_hat) <= tuning.slack_tol)
    diverged = bool(ks > p["divergence_threshold"])
    diagnosis = {
        "n": n,
        "mean": theta_hat,
        "kink_window": tuning.slack_tol,
        "in_kink_window": in_kink_window,
        "ks_distance": ks,
        "bl_distance": bl,
        "divergence_threshold": p["divergence_threshold"],
        "laws_diverge": diverged,
        "standard_law": law_degeneracy(standard),
        "modified_law": law_degeneracy(modified),
        "seed_manifest": ensemble.seed_manifest,
    }
    outputs: list = []
    _write(out_dir, "standard_law.csv", empirical_law_to_csv(standard), outputs)
    _write(out_dir, "modified_law.csv", empirical_law_to_csv(modified), outputs)
    _write(out_dir, "diagnosis.json",
           json.dumps(diagnosis, sort_keys=True, indent=2) + "\n", outputs)
    state = "inside" if in_kink_window else "outside"
    verdict = ("laws diverge - standard resampling is suspect here"
               if diverged and in_kink_window else
               "laws diverge away from the kink window" if diverged else
               "laws agree")
    print(f"KS={ks:.4f} BL={bl:.4f}; estimate {state} the kink window "
          f"(|{theta_hat:.4g}| vs {tuning.slack_tol:.4g}); {verdict}")
    return outputs


def _run_bl_distance(config: RunConfig, out_dir: Path) -> list:
    p = config.parameters
    law1 = EmpiricalLaw(_read_sample(p["data1"]))
    law2 = EmpiricalLaw(_read_sample(p["data2"]))
    value = law_distance(law1, law2, metric=p["metric"])
    outputs: list = []
    _write(out_dir, "distance.json",
           json.dumps({"metric": p["metric"], "distance": value},
                      sort_keys=True) + "\n", outputs)
    print(f"{value:.6f}")
    return outputs


_HANDLERS = {
    "simulate-tables": _run_simulate_tables,
    "test-monotone": _run_test_monotone,
    "test-moments": _run_test_moments,
    "test-dominance": _run_test_dominance,
    "diagnose-bootstrap": _run_diagnose_bootstrap,
    "bl-distance": _run_bl_distance,
}


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def _config_sha256(config: RunConfig) -> str:
    canonical = json.dumps(
        {"command": config.command, "seed": config.master_seed,
         "profile": config.profile, "parameters": config.parameters},
        sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode()).hexdigest()


def dispatch(config: RunConfig) -> int:
    """Run the command, write artifacts and manifest, return the exit code."""
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        outputs = _HANDLERS[config.command](config, out_dir)
    except UsageError:
        raise
    except (QRSolveError, LinearProgramError, ProjectionError, np.linalg.LinAlgError,
            ValueError, RuntimeError) as exc:
        print(f"error: {config.command}: {exc}", file=sys.stderr)
        return 2
    manifest = {
        "command": config.command,
        "profile": config.profile,
        "seed": config.master_seed,
        "workers": config.workers,
        "parameters": config.parameters,
        "outputs": outputs,
        "config_sha256": _config_sha256(config),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, sort_keys=True, indent=2) + "\n")
    return 0


def rerun_from_manifest(manifest_path: str, out_dir: str) -> int:
    """Re-execute a finished run from its manifest into a fresh directory.

    The manifest records the command, seed, profile, and the full effective
    parameter set, so the rerun reproduces every output byte for byte
    (worker count is free to differ; it never changes results).
    """
    manifest = json.loads(Path(manifest_path).read_text())
    config = RunConfig(
        command=manifest["command"], parameters=manifest["parameters"],
        master_seed=manifest["seed"], out_dir=out_dir,
        profile=manifest["profile"], workers=manifest.get("workers", 1),
    )
    return dispatch(config)


def main(argv: Sequence[str] | None = None) -> int:
    try:
        config = parse_config(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    try:
        return dispatch(config)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
