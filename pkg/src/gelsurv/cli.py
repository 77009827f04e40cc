"""Command-line entry points: ``estimate``, ``simulate`` and ``diagnose``.

Settings come from a flat YAML file (``--config``) and are overridden by
``--set key=value`` pairs and the dedicated flags, in that order. Every
JSON artifact carries the resolved configuration and the master seed.

Exit codes: 0 on success, 1 for numerical or pipeline failures, 2 for
usage, input or configuration errors. Errors are written to stderr as a
single JSON object.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Any, Sequence

import yaml

from .data import Schema, load_csv, standardize
from .errors import ConfigError, GelSurvError, InputError
from .gel import get_family
from .inference import weak_id_f
from .nuisance import LearnerSpec, fit_nuisance_bundle
from .pipeline import EstimatorConfig, run_pipeline
from .simulation import DgpSpec, monte_carlo

__all__ = ["main", "build_parser", "resolve_config", "DEFAULTS"]

logger = logging.getLogger(__name__)

# key -> (default, commands that accept it)
_EST = ("estimate", "simulate")
_DATA = ("estimate", "diagnose")
_ALL = ("estimate", "simulate", "diagnose")
DEFAULTS: dict[str, tuple[Any, tuple[str, ...]]] = {
    "seed": (0, _ALL),
    "workers": (1, _ALL),
    "out": (None, _ALL),
    # data schema
    "data": (None, _DATA),
    "outcome": ("y", _DATA),
    "event": ("delta", _DATA),
    "exposure": ("a", _DATA),
    "instruments": (None, _DATA),
    "covariates": (None, _DATA),
    "scatter": (None, ("diagnose",)),
    # nuisance learner
    "learner": ("feedforward", _ALL),
    "depth": (2, _ALL),
    "width": (50, _ALL),
    "learning_rate": (5e-4, _ALL),
    "batch_size": (256, _ALL),
    "max_epochs": (1000, _ALL),
    "validation_fraction": (0.05, _ALL),
    "patience": (5, _ALL),
    # estimator
    "family": ("ET", _EST),
    "estimator": ("gel", _EST),
    "kernel_order": (EstimatorConfig.kernel_order, _EST),
    "bandwidth_constant": (EstimatorConfig.bandwidth_constant, _EST),
    "conditioning": ("a,x", _EST),
    "eps_g": (0.05, _EST),
    "beta_lo": (-10.0, _EST),
    "beta_hi": (10.0, _EST),
    "alpha": (0.05, _EST),
    # simulation design
    "n": (4000, ("simulate",)),
    "m": (10, ("simulate",)),
    "nuisance_shape": ("nonlinear", ("simulate",)),
    "case": (1, ("simulate",)),
    "censoring_rate": (0.4, ("simulate",)),
    "beta0": (0.4, ("simulate",)),
    "h2": (0.2, ("simulate",)),
    "theta": (0.0, ("simulate",)),
    "design_seed": (None, ("simulate",)),
    "heteroscedastic": (True, ("simulate",)),
    "reps": (100, ("simulate",)),
    "full_scale": (False, ("simulate",)),
}

_FULL_SCALE = {"n": 10000, "m": 20, "reps": 200}


def _split(value: Any) -> list[str]:
    if value is None:
        return []
    if isinstance(value, (list, tuple)):
        return [str(v).strip() for v in value]
    return [s.strip() for s in str(value).split(",") if s.strip()]


def _coerce(key: str, value: Any) -> Any:
    """Convert a raw value (YAML scalar or override string) to the key's type."""
    default = DEFAULTS[key][0]
    if isinstance(value, str):
        text = value.strip()
        if text.lower() in ("none", "null", ""):
            return None
        if key in ("theta", "family", "learner", "instruments", "covariates", "conditioning"):
            return text
        value = yaml.safe_load(text)
    if value is None or isinstance(value, (list, tuple)):
        return value
    try:
        if isinstance(default, bool):
            if not isinstance(value, bool):
                raise ValueError
            return value
        if isinstance(default, int):
            if isinstance(value, bool) or float(value) != int(value):
                raise ValueError
            return int(value)
        if isinstance(default, float):
            return float(value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {value!r} for {key!r}") from None
    return value


def resolve_config(
    command: str, path: str | None = None, overrides: Sequence[str] = (), **flags: Any
) -> dict[str, Any]:
    """Merge defaults, the YAML file, ``key=value`` overrides and flags.

    Unknown keys, keys that do not apply to ``command`` and nested values
    raise :class:`ConfigError`.
    """
    cfg = {k: v for k, (v, cmds) in DEFAULTS.items() if command in cmds}

    def put(key: str, value: Any, source: str) -> None:
        if key not in DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r} ({source})")
        if command not in DEFAULTS[key][1]:
            raise ConfigError(f"key {key!r} does not apply to '{command}' ({source})")
        if isinstance(value, dict):
            raise ConfigError(f"nested value for {key!r}; the configuration is flat ({source})")
        cfg[key] = _coerce(key, value)

    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
        try:
            loaded = yaml.safe_load(text)
        except yaml.YAMLError as exc:
            raise ConfigError(f"config file {path} is not valid YAML: {exc}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config file {path} must hold a key-value mapping")
        for key, value in loaded.items():
            put(str(key), value, path)
    for item in overrides:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        put(key.strip(), value, "--set")
    for key, value in flags.items():
        if value is not None:
            put(key, value, f"--{key.replace('_', '-')}")

    if cfg.get("full_scale"):
        for key, value in _FULL_SCALE.items():
            if key not in flags or flags[key] is None:
                cfg[key] = value
    if command == "simulate" and cfg["design_seed"] is None:
        cfg["design_seed"] = cfg["seed"]
    if cfg.get("workers", 1) < 1:
        raise ConfigError("workers must be >= 1")
    return cfg


def _learner(cfg: dict, kind: str | None = None) -> LearnerSpec:
    try:
        return LearnerSpec(
            kind=kind or cfg["learner"], depth=cfg["depth"], width=cfg["width"],
            learning_rate=cfg["learning_rate"], batch_size=cfg["batch_size"],
            max_epochs=cfg["max_epochs"], validation_fraction=cfg["validation_fraction"],
            patience=cfg["patience"], seed=cfg["seed"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _estimator(cfg: dict, learner: LearnerSpec) -> EstimatorConfig:
    try:
        for fam in _split(cfg["family"]):
            get_family(fam)
        return EstimatorConfig(
            learner=learner, families=tuple(_split(cfg["family"])),
            conditioning=tuple(_split(cfg["conditioning"])), kernel_order=cfg["kernel_order"],
            bandwidth_constant=cfg["bandwidth_constant"], eps_g=cfg["eps_g"],
            bounds=(cfg["beta_lo"], cfg["beta_hi"]), alpha=cfg["alpha"],
            estimator=cfg["estimator"],
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _load(cfg: dict):
    if cfg["data"] is None:
        raise ConfigError("a data path is required (--data or 'data' in the config file)")
    path = Path(cfg["data"])
    if not path.is_file():
        raise InputError(f"data file {path} not found")
    instruments = _split(cfg["instruments"])
    covariates = _split(cfg["covariates"])
    if not instruments:
        # default roles: every column named z<k> is an instrument, x<k> a covariate
        with path.open(newline="", encoding="utf-8") as fh:
            header = [h.strip() for h in next(csv.reader(fh), [])]
        instruments = [h for h in header if h[:1] == "z" and h[1:].isdigit()]
        if cfg["covariates"] is None:
            covariates = [h for h in header if h[:1] == "x" and h[1:].isdigit()]
    schema = Schema(cfg["outcome"], cfg["event"], cfg["exposure"], tuple(instruments),
                    tuple(covariates))
    return load_csv(path, schema)


def _out_dir(cfg: dict) -> Path | None:
    if cfg["out"] is None:
        return None
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    return out


def _fmt(v: Any) -> str:
    if v is None:
        return "-"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def _table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    cells = [list(map(str, header))] + [[_fmt(v) for v in r] for r in rows]
    widths = [max(len(c[i]) for c in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(row, widths)).rstrip() for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _emit(doc: dict, out: Path | None, name: str) -> None:
    text = json.dumps(doc, sort_keys=True, allow_nan=True)
    print(text)
    if out is not None:
        (out / name).write_text(text + "\n", encoding="utf-8")


def cmd_estimate(cfg: dict) -> int:
    ds = _load(cfg)
    config = _estimator(cfg, _learner(cfg))
    results = run_pipeline(ds, config)
    reports = {}
    rows = []
    for key, rep in results.items():
        if key == "closed_form":
            reports[key] = {"beta_hat": rep}
            rows.append([key, rep, None, None, None, None, None])
        else:
            reports[key] = rep.to_dict()
            rows.append([key, rep.beta_hat, rep.se, rep.ci_lo, rep.ci_hi, rep.overid_p,
                         rep.f_mawii])
    print(_table(["family", "beta_hat", "se", "ci_lo", "ci_hi", "overid_p", "F"], rows))
    note = next((r.overid_note for r in results.values()
                 if not isinstance(r, float) and r.overid_note), None)
    if note:
        print(f"over-identification test omitted: {note}")
    _emit({"command": "estimate", "seed": cfg["seed"], "config": cfg, "reports": reports},
          _out_dir(cfg), "report.json")
    return 0


_METRIC_COLUMNS = ["theta", "Model", "BIAS", "SD", "SE", "CP", "reject_rate", "n_ok",
                   "n_failed"]


def cmd_simulate(cfg: dict) -> int:
    thetas = [float(t) for t in _split(cfg["theta"])] or [0.0]
    kinds = _split(cfg["learner"])
    try:
        base = DgpSpec(
            n=cfg["n"], m=cfg["m"], nuisance_shape=cfg["nuisance_shape"], case=cfg["case"],
            censoring_rate=cfg["censoring_rate"], beta0=cfg["beta0"], h2=cfg["h2"],
            theta=thetas[0], seed=cfg["seed"], design_seed=cfg["design_seed"],
            heteroscedastic=cfg["heteroscedastic"],
        )
        specs = [replace(base, theta=t) for t in thetas]
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if cfg["reps"] < 2:
        raise ConfigError("reps must be >= 2")
    configs = [_estimator(cfg, _learner(cfg, k)) for k in kinds]

    rows = []
    for spec in specs:
        for config in configs:
            res = monte_carlo(spec, cfg["reps"], config, workers=cfg["workers"])
            for r in res.rows:
                rows.append({"theta": spec.theta, "Model": r.label, "BIAS": r.bias, "SD": r.sd,
                             "SE": r.se, "CP": r.cp, "reject_rate": r.reject_rate,
                             "n_ok": r.n_ok, "n_failed": r.n_failed})
    print(_table(_METRIC_COLUMNS, [[r[c] for c in _METRIC_COLUMNS] for r in rows]))
    out = _out_dir(cfg)
    if out is not None:
        with (out / "metrics.csv").open("w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=_METRIC_COLUMNS)
            writer.writeheader()
            writer.writerows(rows)
    _emit({"command": "simulate", "seed": cfg["seed"], "config": cfg, "metrics": rows},
          out, "metrics.json")
    return 0


def cmd_diagnose(cfg: dict) -> int:
    ds = _load(cfg)
    sds, _ = standardize(ds)
    bundle = fit_nuisance_bundle(sds, _learner(cfg))
    res = weak_id_f(sds, bundle)
    print(_table(["F_MAWII", "weak", "n", "m"], [[res.f_stat, res.weak, ds.n, ds.m]]))
    if cfg["scatter"] is not None:
        with Path(cfg["scatter"]).open("w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["fitted", "target"])
            for f, t in zip(res.fitted, res.target):
                writer.writerow([repr(float(f)), repr(float(t))])
    _emit({"command": "diagnose", "seed": cfg["seed"], "config": cfg,
           "f_mawii": res.f_stat, "weak_flag": res.weak, "n": ds.n, "m": ds.m},
          _out_dir(cfg), "diagnose.json")
    return 0


_COMMANDS = {"estimate": cmd_estimate, "simulate": cmd_simulate, "diagnose": cmd_diagnose}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gelsurv",
        description="Saddle-point estimation of exposure effects on censored survival outcomes.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "estimate": "estimate the exposure effect on a CSV dataset",
        "simulate": "run a Monte Carlo study on a simulated design",
        "diagnose": "weak-identification F statistic for a CSV dataset",
    }
    for name, text in helps.items():
        p = sub.add_parser(name, help=text, description=text)
        p.add_argument("--config", help="flat YAML file of settings")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="override one setting (repeatable)")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--workers", type=int, help="parallel worker processes")
        p.add_argument("--out", help="directory for output artifacts")
        if name != "simulate":
            p.add_argument("--data", help="input CSV path")
        if name == "diagnose":
            p.add_argument("--scatter", help="write (fitted, target) pairs to this CSV")
        if name == "simulate":
            p.add_argument("--reps", type=int, help="number of replicates")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    return parser


def _error(exc: BaseException, code: int) -> int:
    doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": code}
    for attr in ("row", "column", "columns", "query_index", "beta", "grad_norm"):
        val = getattr(exc, attr, None)
        if val is not None:
            doc[attr] = val
    print(json.dumps(doc, sort_keys=True), file=sys.stderr)
    return code


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    flags = {k: getattr(args, k, None) for k in ("seed", "workers", "out", "data", "scatter",
                                                   "reps")}
    flags = {k: v for k, v in flags.items() if v is not None}
    try:
        cfg = resolve_config(args.command, args.config, args.overrides, **flags)
        return _COMMANDS[args.command](cfg)
    except InputError as exc:
        return _error(exc, 2)
    except (GelSurvError, ArithmeticError, ValueError) as exc:
        return _error(exc, 1)
    except OSError as exc:
        return _error(exc, 2)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
