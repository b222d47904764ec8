"""Command-line front end.

Exit codes: 0 on success, 1 on invalid input (bad flags, malformed files,
failed validation), 2 on numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .data import (Config, CSVFormatError, StructuralError, load_rule, read_auxiliary_csv, read_primary_csv,
                   rule_to_dict, save_rule, validate_pair)
from .nuisance import SingleClassError, cio_diagnostic, crossfit_predictions
from .policy_search import coda_search, resolve_mode
from .simulation import mc_true_value, run_study, scenario, study_config

THREADS_ENV = "CODA_THREADS"

log = logging.getLogger("coda")


class InputError(Exception):
    """Raised for anything that should exit with status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise InputError(f"{self.prog}: error: {message}")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON file with Config fields overriding the defaults")
    p.add_argument("--format", choices=("json", "csv", "table"), default="json")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None,
                   help=f"worker processes (default: ${THREADS_ENV} or 1)")
    p.add_argument("--output", "-o", type=Path, help="write the result here instead of stdout")


def _add_model(p: argparse.ArgumentParser) -> None:
    p.add_argument("--mode", choices=("HO", "HE", "auto"), default=None)
    p.add_argument("--depth", type=int, default=None)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--max-iter", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="coda", description="Calibrated optimal decision making with two samples.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sim = sub.add_parser("simulate", help="run a replication study on a built-in scenario")
    sim.add_argument("--scenario", type=int, required=True, choices=range(1, 6), metavar="{1..5}")
    sim.add_argument("--ne", type=int, default=1000)
    sim.add_argument("--nu", type=int, default=2000)
    sim.add_argument("--reps", type=int, default=500)
    sim.add_argument("--hetero", action="store_true", help="shifted auxiliary covariates")
    sim.add_argument("--fixed-only", action="store_true", help="evaluate only the true optimal rule")
    sim.add_argument("--noise-scale", choices=("sd", "variance"), default="sd")
    _add_model(sim)
    _add_common(sim)

    fit = sub.add_parser("fit", help="learn a rule and its calibrated value from two CSV samples")
    fit.add_argument("--primary", type=Path, required=True)
    fit.add_argument("--auxiliary", type=Path, required=True)
    fit.add_argument("--rule-out", type=Path, help="also save the learned rule as JSON")
    _add_model(fit)
    _add_common(fit)

    cio = sub.add_parser("cio-check", help="relative MSE between per-sample intermediate-outcome fits")
    cio.add_argument("--primary", type=Path, required=True)
    cio.add_argument("--auxiliary", type=Path, required=True)
    _add_common(cio)

    tv = sub.add_parser("true-value", help="Monte Carlo value of a rule under a built-in scenario")
    tv.add_argument("--scenario", type=int, required=True, choices=range(1, 6), metavar="{1..5}")
    tv.add_argument("--rule", type=Path, help="rule JSON (default: the scenario's optimal rule)")
    tv.add_argument("--n-mc", type=int, default=10 ** 6)
    tv.add_argument("--noise-scale", choices=("sd", "variance"), default="sd")
    _add_common(tv)
    return parser


def _config(args, base: Config) -> Config:
    d = {}
    if args.config is not None:
        try:
            d = json.loads(args.config.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read config {args.config}: {exc}") from None
        if not isinstance(d, dict):
            raise InputError(f"config {args.config} must hold a JSON object")
        for key in ("clip", "basis", "sampling_terms"):
            if key in d and isinstance(d[key], list):
                d[key] = tuple(d[key])
    flags = {"mode": getattr(args, "mode", None), "depth": getattr(args, "depth", None),
             "alpha": getattr(args, "alpha", None), "max_iter": getattr(args, "max_iter", None),
             "seed": args.seed, "threads": _threads(args)}
    d.update({k: v for k, v in flags.items() if v is not None})
    try:
        return base.replace(**d) if d else base
    except TypeError as exc:
        raise InputError(f"unknown config keys: {exc}") from None
    except ValueError as exc:
        raise InputError(f"invalid configuration: {exc}") from None


def _threads(args) -> Optional[int]:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise InputError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    return None


def _flatten(d: dict, prefix: str = "") -> list:
    rows = []
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            rows.extend(_flatten(v, key + "."))
        else:
            rows.append((key, json.dumps(v) if isinstance(v, (list, tuple)) else v))
    return rows


def _render(obj: dict, fmt: str, table_rows: Optional[list] = None) -> str:
    if fmt == "json":
        return json.dumps(obj, indent=2, default=float) + "\n"
    rows = table_rows if table_rows is not None else [["key", "value"]] + [list(r) for r in _flatten(obj)]
    if fmt == "csv":
        buf = io.StringIO()
        csv.writer(buf, lineterminator="\n").writerows(rows)
        return buf.getvalue()
    rows = [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def _emit(args, text: str) -> None:
    if args.output is not None:
        args.output.write_text(text)
    else:
        sys.stdout.write(text)


def _load_pair(args):
    e = read_primary_csv(args.primary)
    u = read_auxiliary_csv(args.auxiliary)
    report = validate_pair(e, u)
    if not report.ok:
        raise InputError("; ".join(report.errors))
    return e, u, report


def cmd_simulate(args) -> None:
    spec = scenario(args.scenario, args.noise_scale)
    cfg = _config(args, study_config(spec, args.hetero))
    summary = run_study(spec, args.ne, args.nu, args.reps, cfg, seed=cfg.seed, hetero=args.hetero,
                        threads=cfg.threads, fixed_only=args.fixed_only)
    _emit(args, _render(summary.to_dict(), args.format,
                        None if args.format == "json" else summary.table_rows()))


def cmd_fit(args) -> None:
    cfg = _config(args, Config())
    e, u, validation = _load_pair(args)
    mode = resolve_mode(e, u, cfg)
    cfg = cfg.replace(mode=mode)
    preds = crossfit_predictions(e, u, cfg)
    result, report = coda_search(e, u, preds, cfg)
    out = report.to_dict()
    out["rule"] = rule_to_dict(result.rule)
    out["search"] = {"iterations": result.iterations_used, "converged": result.converged,
                     "objective_trace": list(result.trace)}
    out["validation"] = validation.to_dict()
    if args.rule_out is not None:
        save_rule(result.rule, args.rule_out)
    _emit(args, _render(out, args.format))


def cmd_cio(args) -> None:
    cfg = _config(args, Config())
    e, u, _ = _load_pair(args)
    rel = cio_diagnostic(e, u, cfg)
    out = {"relative_mse": [float(x) for x in rel], "outcomes": [f"m{k + 1}" for k in range(e.s)]}
    rows = [["outcome", "relative_mse"]] + [[f"m{k + 1}", f"{x:.6g}"] for k, x in enumerate(rel)]
    _emit(args, _render(out, args.format, None if args.format == "json" else rows))


def cmd_true_value(args) -> None:
    spec = scenario(args.scenario, args.noise_scale)
    rule = load_rule(args.rule) if args.rule is not None else spec.optimal_rule
    seed = 0 if args.seed is None else args.seed
    mc = mc_true_value(spec, rule, args.n_mc, seed)
    out = {"scenario": spec.id, "value": mc.value, "mc_se": mc.se, "n_mc": mc.n_mc, "seed": seed,
           "rule": rule_to_dict(rule)}
    _emit(args, _render(out, args.format))


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "cio-check": cmd_cio, "true-value": cmd_true_value}


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        COMMANDS[args.command](args)
    except SystemExit as exc:
        # --help exits 0 through argparse
        return int(exc.code or 0)
    except (InputError, CSVFormatError, StructuralError, SingleClassError, FileNotFoundError,
            json.JSONDecodeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (np.linalg.LinAlgError, FloatingPointError, RuntimeError, ValueError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
