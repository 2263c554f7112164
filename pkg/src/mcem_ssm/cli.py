"""Command-line entry points: ``simulate``, ``fit``, ``impute`` and ``benchmark``.

Every command reads a YAML config (unknown keys are rejected), applies the
command-line overrides, echoes the resolved config to the output directory
as ``config.yaml`` and writes CSV tables there. Rerunning with the echoed
config reproduces the outputs.

Exit codes: 0 success, 2 config error, 3 data error, 4 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import datetime as _dt
import json
import logging
import sys
from pathlib import Path

import numpy as np
import yaml

from .baselines import SINGLE_IMPUTERS, STRATEGIES, StrategyConfig, impute, impute_arima, impute_mice
from .dgp import DGPConfig, simulate_dgp
from .errors import ConfigError, DataError, MCEMError, NumericalError
from .mcem import MCEMConfig, MCEMResult, run_mcem
from .missingness import MechanismConfig, generate_mask
from .model import ModelSpec, TimeSeriesDataset
from .simulator import METRICS, run_scenario, write_rows

log = logging.getLogger(__name__)

COMMANDS = ("simulate", "fit", "impute", "benchmark")
IMPUTE_STRATEGIES = ("mean", "locf", "linear", "spline", "arima", "mp", "mcem-ssm")
U64_MAX = 2**64 - 1

DATA_DEFAULTS = {"path": None, "time_column": "t", "outcome_column": "y_observed"}
MODEL_KEYS = ("q", "p", "o", "exposures", "covariates", "roles", "segments")
MCEM_EXCLUDED = ("seed", "theta_init")


# --------------------------------------------------------------------------
# Config handling


def _fields(cls, exclude=()):
    return {f.name: f for f in dataclasses.fields(cls) if f.name not in exclude}


def _defaults(cls, exclude=()) -> dict:
    obj = cls() if cls is not ModelSpec else ModelSpec()
    return {k: _plain(getattr(obj, k)) for k in _fields(cls, exclude)}


def _plain(v):
    """YAML-friendly copy (tuples become lists, numpy scalars become Python)."""
    if isinstance(v, dict):
        return {str(k): _plain(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    if isinstance(v, np.generic):
        return v.item()
    return v


def _merge(section: str, defaults: dict, given) -> dict:
    if given is None:
        return dict(defaults)
    if not isinstance(given, dict):
        raise ConfigError(f"section {section!r} must be a mapping")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {unknown}")
    out = dict(defaults)
    out.update(given)
    return out


def _make(cls, section: str, values: dict, **extra):
    kw = dict(values)
    for name, f in _fields(cls).items():
        if name in kw and isinstance(kw[name], list) and "tuple" in str(f.type):
            kw[name] = tuple(kw[name])
    try:
        return cls(**kw, **extra)
    except ConfigError:
        raise
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {section!r} section: {exc}") from exc


def _top_defaults(command: str) -> dict:
    common = {"seed": 0, "out": None}
    mcem = _defaults(MCEMConfig, MCEM_EXCLUDED)
    model = _defaults(ModelSpec)
    if command == "simulate":
        return {**common, "dgp": _defaults(DGPConfig), "mechanism": None}
    if command == "fit":
        return {**common, "data": dict(DATA_DEFAULTS), "model": model, "mcem": mcem}
    if command == "impute":
        return {
            **common,
            "data": dict(DATA_DEFAULTS),
            "model": model,
            "strategies": list(IMPUTE_STRATEGIES),
            "mice": {"m": 20, "iterations": 10},
            "arima": {"max_p": 3, "max_d": 1, "max_q": 3},
            "mcem": mcem,
        }
    return {
        **common,
        "workers": 1,
        "dgp": _defaults(DGPConfig),
        "mechanisms": ["MCAR", "MAR", "MNAR"],
        "rates": [0.5],
        "n_reps": 100,
        "strategies": list(STRATEGIES),
        "analysis": None,
        "mice": {"m": 20, "iterations": 10},
        "arima": {"max_p": 3, "max_d": 1, "max_q": 3},
        "mcem": mcem,
        "ssm": mcem,
    }


MECHANISM_DEFAULTS = {"kind": "MCAR", "target_rate": 0.5, "slopes": None, "intercept": None}
NESTED = ("dgp", "data", "model", "mcem", "ssm", "mice", "arima")


def resolve_config(command: str, raw: dict | None, overrides: dict | None = None) -> dict:
    """Fill defaults, reject unknown keys and apply command-line overrides."""
    if command not in COMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    raw = {} if raw is None else raw
    if not isinstance(raw, dict):
        raise ConfigError("config file must hold a mapping")
    defaults = _top_defaults(command)
    unknown = sorted(set(raw) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown config keys for {command!r}: {unknown}")
    cfg = {}
    for key, default in defaults.items():
        given = raw.get(key)
        if key in NESTED:
            cfg[key] = _merge(key, default, given)
        elif key == "mechanism":
            cfg[key] = None if given is None else _merge(key, MECHANISM_DEFAULTS, given)
        else:
            cfg[key] = default if key not in raw else given
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in cfg:
            raise ConfigError(f"--{key} is not used by {command!r}")
        cfg[key] = value
    _check_common(cfg)
    return cfg


def _check_common(cfg: dict):
    seed = cfg.get("seed")
    if isinstance(seed, bool) or not isinstance(seed, int) or not 0 <= seed <= U64_MAX:
        raise ConfigError("seed must be an integer in [0, 2**64)")
    if "workers" in cfg:
        w = cfg["workers"]
        if isinstance(w, bool) or not isinstance(w, int) or w < 1:
            raise ConfigError("workers must be a positive integer")
    if "strategies" in cfg:
        s = cfg["strategies"]
        if isinstance(s, str):
            s = cfg["strategies"] = _split_list(s)
        if not isinstance(s, list) or not s:
            raise ConfigError("strategy list is empty")


def _split_list(text: str) -> list[str]:
    return [p.strip() for p in text.split(",") if p.strip()]


def load_config(path) -> dict | None:
    if path is None:
        return None
    try:
        with open(path) as fh:
            return yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc


def _mcem_config(section: dict, seed: int) -> MCEMConfig:
    return _make(MCEMConfig, "mcem", section, seed=int(seed) % 2**63)


def _model_spec(section: dict) -> ModelSpec:
    vals = dict(section)
    vals["roles"] = dict(vals.get("roles") or {})
    vals["segments"] = {k: tuple(v) for k, v in (vals.get("segments") or {}).items()}
    return _make(ModelSpec, "model", vals)


# --------------------------------------------------------------------------
# Output


class OutputWriter:
    """The only place files are written; owns the output directory."""

    def __init__(self, out):
        if out is None:
            raise ConfigError("no output directory: pass --out or set 'out' in the config")
        self.root = Path(out)
        try:
            self.root.mkdir(parents=True, exist_ok=True)
        except OSError as exc:
            raise ConfigError(f"cannot create output directory {out}: {exc}") from exc
        self.written: list[Path] = []

    def _path(self, name: str) -> Path:
        p = self.root / name
        self.written.append(p)
        return p

    def rows(self, name: str, columns, rows):
        try:
            write_rows(self._path(name), columns, rows)
        except OSError as exc:
            raise ConfigError(f"cannot write {name}: {exc}") from exc

    def text(self, name: str, text: str):
        try:
            self._path(name).write_text(text)
        except OSError as exc:
            raise ConfigError(f"cannot write {name}: {exc}") from exc

    def config(self, cfg: dict):
        self.text("config.yaml", yaml.safe_dump(_plain(cfg), sort_keys=False))


def _cell(v):
    """Missing values are empty cells."""
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    return float(v) if isinstance(v, (float, np.floating)) else v


# --------------------------------------------------------------------------
# CSV ingestion


def _parse_time(values: list[str]) -> tuple[np.ndarray, np.ndarray]:
    """Day or step offsets (for gap checks) and the labels reported in outputs."""
    try:
        as_float = np.array([float(v) for v in values])
    except ValueError:
        as_float = None
    if as_float is not None:
        if not np.all(np.isfinite(as_float)) or np.any(as_float != np.round(as_float)):
            raise DataError("time index must hold integers or ISO dates")
        t = as_float.astype(np.int64)
        return t, t
    try:
        dates = [_dt.date.fromisoformat(v.strip()[:10]) for v in values]
    except ValueError as exc:
        raise DataError(f"time index must hold integers or ISO dates: {exc}") from exc
    offsets = np.array([(d - dates[0]).days for d in dates], dtype=np.int64) + 1
    return offsets, np.array([d.isoformat() for d in dates])


def _label_before(first):
    """Label of the step preceding the first time point."""
    if isinstance(first, str):
        return (_dt.date.fromisoformat(first) - _dt.timedelta(days=1)).isoformat()
    return int(first) - 1


def _float_column(name: str, values: list[str], allow_missing: bool) -> np.ndarray:
    out = np.empty(len(values))
    for i, v in enumerate(values):
        v = v.strip()
        if v == "" or v.lower() in ("na", "nan"):
            if not allow_missing:
                raise DataError(f"column {name!r} has a missing value at row {i + 1}")
            out[i] = np.nan
            continue
        try:
            out[i] = float(v)
        except ValueError:
            raise DataError(f"column {name!r} has a non-numeric value {v!r} at row {i + 1}") from None
        if not np.isfinite(out[i]):
            raise DataError(f"column {name!r} has a non-finite value at row {i + 1}")
    return out


def read_dataset(path, spec: ModelSpec, time_column: str = "t", outcome_column: str = "y_observed"):
    """Load a CSV with one row per time point.

    Empty cells in the outcome column are missing. The time column must hold
    consecutive increasing integers or ISO dates one day apart. The labels are
    kept as the dataset's time index and reported in every output file.
    """
    try:
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            header = reader.fieldnames or []
            records = list(reader)
    except OSError as exc:
        raise DataError(f"cannot read data file {path}: {exc}") from exc
    needed = [time_column, outcome_column, *spec.exposures, *spec.covariates]
    absent = [c for c in needed if c not in header]
    if absent:
        raise DataError(f"data file lacks columns {absent}")
    if not records:
        raise DataError("data file has no rows")
    t, labels = _parse_time([r[time_column] for r in records])
    steps = np.diff(t)
    if np.any(steps <= 0):
        raise DataError("time index is not strictly increasing")
    if np.any(steps != 1):
        i = int(np.flatnonzero(steps != 1)[0])
        raise DataError(f"time index has a gap after t={labels[i]}")
    y = _float_column(outcome_column, [r[outcome_column] for r in records], True)
    if np.all(np.isnan(y)):
        raise DataError("outcome is missing at every time point")
    exposures = {a: _float_column(a, [r[a] for r in records], False) for a in spec.exposures}
    covariates = {c: _float_column(c, [r[c] for r in records], False) for c in spec.covariates}
    return TimeSeriesDataset(y, exposures, covariates, time=labels)


def _data_path(cfg: dict, positional):
    path = positional if positional is not None else cfg["data"]["path"]
    if path is None:
        raise ConfigError("no data file: pass DATA or set data.path in the config")
    cfg["data"]["path"] = str(path)
    return path


# --------------------------------------------------------------------------
# Commands


def cmd_simulate(cfg: dict) -> OutputWriter:
    """Simulate one series; write ``data.csv``, ``mask.csv`` and ``truth.csv``."""
    dgp = _make(DGPConfig, "dgp", cfg["dgp"])
    ss = np.random.SeedSequence(cfg["seed"])
    data_ss, mask_ss = ss.spawn(2)
    ds, truth = simulate_dgp(dgp, np.random.default_rng(data_ss))
    if cfg["mechanism"] is not None:
        mech = _make(MechanismConfig, "mechanism", cfg["mechanism"])
        mask = generate_mask(mech, np.random.default_rng(mask_ss), ds.y, list(ds.exposures.values()),
                             list(ds.covariates.values()))
    else:
        mask = np.zeros(ds.T, dtype=bool)
    out = OutputWriter(cfg["out"])
    out.config(cfg)
    y_obs = np.where(mask, np.nan, ds.y)
    t = ds.time
    out.rows("data.csv", ("t", "y", "y_observed", "a", "c"),
             zip(t, ds.y, map(_cell, y_obs), ds.exposures["a"], ds.covariates["c"]))
    out.rows("mask.csv", ("t", "missing"), zip(t, mask.astype(int)))
    names = [k for k, v in truth.items() if isinstance(v, np.ndarray)]
    out.rows("truth.csv", ("t", *names), zip(t, *(truth[k] for k in names)))
    out.rows("truth_scalars.csv", ("name", "value"), [("R", float(truth["R"]))])
    print(f"seed {cfg['seed']}")
    return out


def _write_fit(out: OutputWriter, res: MCEMResult, ds: TimeSeriesDataset):
    th = res.theta
    out.text(
        "theta.json",
        json.dumps(
            {
                "names": res.names,
                "roles": res.roles,
                "mu0": th.mu0.tolist(),
                "sigma0": th.sigma0.tolist(),
                "Q": th.Q.tolist(),
                "R": float(th.R),
                "converged": bool(res.converged),
                "level": res.level,
            },
            indent=2,
        )
        + "\n",
    )
    # model time runs 1..T; report the data's own time labels
    label = dict(zip(range(1, ds.T + 1), ds.time.tolist()))
    label[0] = _label_before(label[1])
    rows = []
    for nm, role, (base, lo, hi) in zip(res.names, res.roles, res.origin):
        if nm in res.estimates:
            # random-walk rows carry the path average; their intervals are per time
            a, b = res.intervals.get(nm, (None, None))
            rows.append((nm, base, role, label[lo], "" if hi < 0 else label[hi], res.estimates[nm],
                         _cell(res.posterior_sd.get(nm)), _cell(a), _cell(b)))
    out.rows("coefficients.csv",
             ("name", "coefficient", "role", "segment_after", "segment_until", "estimate", "sd", "lower", "upper"),
             rows)
    traj = []
    for nm, path in res.trajectories.items():
        lo, hi = res.path_intervals[nm]
        traj.extend((label[int(t)], nm, v, a, b) for t, v, a, b in zip(res.times, path, lo, hi))
    out.rows("trajectories.csv", ("t", "name", "estimate", "lower", "upper"), traj)
    cps = [(nm, k + 1, label[int(c)]) for nm, cs in res.change_points.items() for k, c in enumerate(cs)]
    out.rows("change_points.csv", ("coefficient", "index", "change_point"), cps)
    if res.trace:
        keys = list(res.trace[0])
        out.rows("trace.csv", keys, ([r[k] for k in keys] for r in res.trace))
    else:
        out.rows("trace.csv", ("iteration",), [])
    y_imp = np.asarray(res.y_imputed, dtype=float)
    out.rows("imputed.csv", ("t", "y_observed", "y_imputed", "missing"),
             zip(ds.time, map(_cell, ds.y), y_imp, ds.missing.astype(int)))


def cmd_fit(cfg: dict, data=None) -> OutputWriter:
    """Fit the state space model to one CSV series."""
    spec = _model_spec(cfg["model"])
    mcfg = _mcem_config(cfg["mcem"], cfg["seed"])
    path = _data_path(cfg, data)
    ds = read_dataset(path, spec, cfg["data"]["time_column"], cfg["data"]["outcome_column"])
    out = OutputWriter(cfg["out"])
    out.config(cfg)
    res = run_mcem(ds, spec, mcfg)
    _write_fit(out, res, ds)
    return out


def cmd_impute(cfg: dict, data=None) -> OutputWriter:
    """Write one imputed series per strategy (``imputed_<strategy>.csv``)."""
    unknown = [s for s in cfg["strategies"] if s not in IMPUTE_STRATEGIES]
    if unknown:
        raise ConfigError(f"unknown imputation strategies {unknown}; choose from {IMPUTE_STRATEGIES}")
    spec = _model_spec(cfg["model"])
    mcfg = _mcem_config(cfg["mcem"], cfg["seed"])
    path = _data_path(cfg, data)
    ds = read_dataset(path, spec, cfg["data"]["time_column"], cfg["data"]["outcome_column"])
    out = OutputWriter(cfg["out"])
    out.config(cfg)
    ss = np.random.SeedSequence(cfg["seed"])
    observed = [_cell(v) for v in ds.y]
    for s in cfg["strategies"]:
        rng = np.random.default_rng(np.random.SeedSequence(ss.entropy, spawn_key=(IMPUTE_STRATEGIES.index(s),)))
        name = f"imputed_{s}.csv"
        if s in SINGLE_IMPUTERS or s == "arima":
            if s == "arima":
                a = cfg["arima"]
                imp = impute_arima(ds, a["max_p"], a["max_d"], a["max_q"])
            else:
                imp = impute(s, ds)
            out.rows(name, ("t", "y_observed", "y_imputed", "imputed"),
                     zip(ds.time, observed, imp.dataset.y, imp.imputed.astype(int)))
        elif s == "mp":
            imps = impute_mice(ds, spec, cfg["mice"]["m"], cfg["mice"]["iterations"], rng)
            rows = [(imp.draw, t, o, v, int(f)) for imp in imps
                    for t, o, v, f in zip(ds.time, observed, imp.dataset.y, imp.imputed)]
            out.rows(name, ("draw", "t", "y_observed", "y_imputed", "imputed"), rows)
        else:
            res = run_mcem(ds, spec, mcfg)
            out.rows(name, ("t", "y_observed", "y_imputed", "imputed"),
                     zip(ds.time, observed, res.y_imputed, ds.missing.astype(int)))
    return out


def _panel_name(regime: str, coefficient: str, metric: str) -> str:
    safe = coefficient.replace("[", "").replace("]", "")
    return f"panel_{regime}_{safe}_{metric}.csv"


def strategy_config(cfg: dict, dgp: DGPConfig) -> StrategyConfig:
    """Strategy settings of a resolved benchmark config.

    Stationary data are analyzed by OLS and nonstationary data by the state
    space model unless ``analysis`` says otherwise.
    """
    analysis = cfg["analysis"] or ("ols" if dgp.regime == "stationary" else "ssm")
    return _make(
        StrategyConfig,
        "benchmark",
        {},
        analysis=analysis,
        mice_m=cfg["mice"]["m"],
        mice_iterations=cfg["mice"]["iterations"],
        arima_max_p=cfg["arima"]["max_p"],
        arima_max_d=cfg["arima"]["max_d"],
        arima_max_q=cfg["arima"]["max_q"],
        mcem=_mcem_config(cfg["mcem"], 0),
        ssm=_mcem_config(cfg["ssm"], 0),
    )


def cmd_benchmark(cfg: dict) -> OutputWriter:
    """Run the mechanism x rate grid and write tidy, per-cell and per-panel CSVs.

    Every cell uses the same root seed, so a cell rerun on its own
    reproduces its CSV.
    """
    strategies = list(cfg["strategies"])
    unknown = [s for s in strategies if s not in STRATEGIES]
    if unknown:
        raise ConfigError(f"unknown strategies {unknown}; choose from {STRATEGIES}")
    if len(set(strategies)) != len(strategies):
        raise ConfigError("strategy list has duplicates")
    dgp = _make(DGPConfig, "dgp", cfg["dgp"])
    mechanisms = cfg["mechanisms"]
    rates = cfg["rates"]
    if not mechanisms or not rates:
        raise ConfigError("mechanisms and rates must be nonempty lists")
    n_reps = cfg["n_reps"]
    if isinstance(n_reps, bool) or not isinstance(n_reps, int) or n_reps < 2:
        raise ConfigError("n_reps must be an integer >= 2")
    scfg = strategy_config(cfg, dgp)
    cells = [MechanismConfig(str(m), float(r)) for m in mechanisms for r in rates]
    out = OutputWriter(cfg["out"])
    out.config(cfg)
    tidy, reps, cps = [], [], []
    for mech in cells:
        res = run_scenario(dgp, mech, None, strategies, n_reps, cfg["seed"], scfg, cfg["workers"])
        rows = res.rows()
        out.rows(f"cell_{mech.kind}_{mech.target_rate:g}.csv",
                 ("regime", "mechanism", "rate", "strategy", "coefficient", "metric", "value"), rows)
        tidy.extend(rows)
        reps.extend((res.mechanism, res.rate, *r) for r in res.replicate_rows())
        for rec in res.replicates:
            for s, by_coef in rec.change_points.items():
                for coef, points in by_coef.items():
                    cps.extend((res.mechanism, res.rate, rec.index, s, coef, k + 1, c) for k, c in enumerate(points))
    out.rows("results.csv", ("regime", "mechanism", "rate", "strategy", "coefficient", "metric", "value"), tidy)
    out.rows("replicates.csv",
             ("mechanism", "rate", "replicate", "strategy", "coefficient", "estimate", "se", "lower", "upper",
              "truth", "covered"), reps)
    out.rows(f"panel_{dgp.regime}_change_points.csv",
             ("mechanism", "rate", "replicate", "strategy", "coefficient", "index", "change_point"), cps)
    panels: dict[tuple[str, str], list] = {}
    for regime, mech, rate, s, coef, metric, value in tidy:
        if coef != "*" and metric in METRICS and metric != "n":
            panels.setdefault((coef, metric), []).append((mech, rate, s, value))
    for (coef, metric), rows in panels.items():
        out.rows(_panel_name(dgp.regime, coef, metric), ("mechanism", "rate", "strategy", "value"), rows)
    return out


# --------------------------------------------------------------------------
# Entry point


def _seed_arg(text: str) -> int:
    try:
        v = int(text, 0)
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed {text!r}") from None
    if not 0 <= v <= U64_MAX:
        raise argparse.ArgumentTypeError("seed must lie in [0, 2**64)")
    return v


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mcem-ssm", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file")
        p.add_argument("--seed", type=_seed_arg)
        p.add_argument("--out", help="output directory")
        if name in ("fit", "impute"):
            p.add_argument("data", nargs="?", help="CSV data file (overrides data.path)")
        if name == "benchmark":
            p.add_argument("--workers", type=int)
        if name in ("impute", "benchmark"):
            p.add_argument("--strategies", type=_split_list, help="comma-separated strategy ids")
    return parser


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(message)s")
    overrides = {"seed": args.seed, "out": args.out}
    for key in ("workers", "strategies"):
        if hasattr(args, key):
            overrides[key] = getattr(args, key)
    if overrides.get("strategies") == []:
        print("error: strategy list is empty", file=sys.stderr)
        return ConfigError.exit_code
    try:
        cfg = resolve_config(args.command, load_config(args.config), overrides)
        if args.command == "simulate":
            cmd_simulate(cfg)
        elif args.command == "fit":
            cmd_fit(cfg, args.data)
        elif args.command == "impute":
            cmd_impute(cfg, args.data)
        else:
            cmd_benchmark(cfg)
    except MCEMError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (np.linalg.LinAlgError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return NumericalError.exit_code
    return 0


def main(argv=None):
    sys.exit(run(argv))


if __name__ == "__main__":
    main()
