"""Command-line interface.

Exit codes: 0 success, 1 invalid input or configuration, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import configparser
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .decoy import LPError, bounds_to_csv
from .hermitian import DomainError, ValidationError
from .pipeline import (
    CASES,
    RunConfig,
    evaluate,
    evaluate_numerical,
    optimize_signal_intensity,
    prepare_point,
    reports_to_csv,
    scan_distance,
)
from .sdp import SDPError
from .single_photon import curve_to_csv, single_photon_curve
from .solver import NumericalFailure

EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 1, 2

# flag name -> RunConfig field
_FLAG_FIELDS = {
    "protocol": "protocol",
    "method": "method",
    "e_d": "e_d",
    "e_d_b": "e_d_b",
    "p_dark": "p_dark",
    "eta_d": "eta_d",
    "loss": "loss_db_per_km",
    "f_ec": "f_ec",
    "mu": "mu",
    "nu1": "nu1",
    "nu2": "nu2",
    "mu_out": "mu_out_a",
    "mu_out_b": "mu_out_b",
    "p_z": "p_z",
    "fw_tol": "fw_tol",
    "fw_max_iter": "fw_max_iter",
    "cutoff": "cutoff",
    "observables": "observables",
    "n_phase": "n_phase",
}
_FIELD_TYPES = {f.name: f.type for f in dataclasses.fields(RunConfig)}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def parse_grid(text: str) -> list[float]:
    """``start:stop:step`` (inclusive of ``stop``) or a comma-separated list."""
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise ValidationError(f"grid {text!r} must be start:stop:step")
        lo, hi, step = (float(p) for p in parts)
        if step <= 0 or hi < lo:
            raise ValidationError(f"grid {text!r} needs step > 0 and stop >= start")
        n = int(np.floor((hi - lo) / step + 1e-9))
        return [round(lo + i * step, 12) for i in range(n + 1)]
    vals = [float(v) for v in text.split(",") if v.strip()]
    if not vals:
        raise ValidationError("grid is empty")
    return vals


def _coerce(name: str, raw: str):
    kind = str(_FIELD_TYPES[name])
    if name == "distances":
        return tuple(parse_grid(raw))
    if "bool" in kind:
        low = raw.strip().lower()
        if low not in ("true", "false", "1", "0", "yes", "no"):
            raise ValidationError(f"{name} expects a boolean, got {raw!r}")
        return low in ("true", "1", "yes")
    if "int" in kind:
        return int(raw)
    if "float" in kind:
        return None if raw.strip().lower() == "none" else float(raw)
    return raw.strip()


def load_config_file(path: str | Path) -> dict:
    """Read a key-value file; sections only group keys and are otherwise ignored."""
    cp = configparser.ConfigParser()
    text = Path(path).read_text()
    if not text.lstrip().startswith("["):
        text = "[run]\n" + text
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ValidationError(f"cannot parse config file {path}: {exc}") from exc
    out = {}
    for section in cp.sections():
        for key, raw in cp[section].items():
            if key == "case":
                out["case"] = raw.strip()
                continue
            if key not in _FIELD_TYPES:
                raise ValidationError(f"unknown config key {key!r} in [{section}]")
            try:
                out[key] = _coerce(key, raw)
            except ValueError as exc:
                raise ValidationError(f"bad value for {key}: {raw!r}") from exc
    return out


def build_config(args: argparse.Namespace, **extra) -> RunConfig:
    values = load_config_file(args.config) if args.config else {}
    case = args.case or values.pop("case", None)
    values.pop("case", None)
    for flag, name in _FLAG_FIELDS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    values.update({k: v for k, v in extra.items() if v is not None})
    if case is not None:
        if case not in CASES:
            raise ValidationError(f"unknown case {case!r}; choose from {sorted(CASES)}")
        values = {**CASES[case], **values}
    try:
        return RunConfig(**values)
    except TypeError as exc:
        raise ValidationError(str(exc)) from exc


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key-value configuration file")
    p.add_argument("--case", help=f"parameter preset ({', '.join(sorted(CASES))})")
    p.add_argument("--protocol", type=str.upper, choices=["BB84", "MDI"])
    p.add_argument("--method", type=str.lower, choices=["numerical", "gllp", "both"])
    p.add_argument("--e-d", type=float, help="misalignment error (Alice for MDI)")
    p.add_argument("--e-d-b", type=float, help="Bob's misalignment error (MDI)")
    p.add_argument("--p-dark", type=float, help="dark-click probability per detector")
    p.add_argument("--eta-d", type=float, help="detector efficiency")
    p.add_argument("--loss", type=float, help="fibre loss in dB/km")
    p.add_argument("--f-ec", type=float, help="error-correction efficiency")
    p.add_argument("--mu", type=float, help="signal intensity")
    p.add_argument("--nu1", type=float, help="first decoy intensity")
    p.add_argument("--nu2", type=float, help="second decoy intensity")
    p.add_argument("--mu-out", type=float, help="Trojan-horse back-reflected intensity (Alice for MDI)")
    p.add_argument("--mu-out-b", type=float, help="Bob's back-reflected intensity (MDI)")
    p.add_argument("--p-z", type=float, help="Z-basis probability")
    p.add_argument("--fw-tol", type=float, help="Frank-Wolfe tolerance per sifted bit")
    p.add_argument("--fw-max-iter", type=int)
    p.add_argument("--cutoff", type=int, help="photon-number cutoff of the decoy programs")
    p.add_argument("--observables", choices=["all", "matched"], help="outcomes given decoy constraints")
    p.add_argument("--n-phase", type=int, help="phase grid size for MDI averaging")
    p.add_argument("--out", help="write CSV here instead of stdout")


def make_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="thaqkd", description="Key rates for decoy BB84 and MDI-QKD under Trojan-horse leakage")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("keyrate", help="key rate at one distance")
    _add_common(p)
    p.add_argument("--distance", type=float, required=True, help="distance in km")
    p.add_argument("--optimize-mu", action="store_true", help="optimize the signal intensity")
    p.add_argument("--trace", help="write the solver iteration trace CSV here (numerical method)")

    p = sub.add_parser("scan", help="distance sweep with optimized signal intensity")
    _add_common(p)
    p.add_argument("--distances", help="start:stop:step (km) or comma list; default 0:100:5")
    p.add_argument("--fixed-mu", action="store_true", help="use --mu at every point instead of optimizing")
    p.add_argument("--workers", type=int, help="worker processes (default from THAQKD_WORKERS or 1)")

    for name, hlp in (("simulate", "emit detection statistics CSV"), ("decoy", "emit decoy bounds CSV")):
        p = sub.add_parser(name, help=hlp)
        _add_common(p)
        p.add_argument("--distance", type=float, required=True, help="distance in km")

    p = sub.add_parser("single-photon", help="lossless single-photon rate versus error rate")
    p.add_argument("--mu-out", type=float, default=0.0)
    p.add_argument("--ed-grid", default="0:0.12:0.005", help="error-rate grid start:stop:step")
    p.add_argument("--p-z", type=float, default=0.5)
    p.add_argument("--fw-tol", type=float, default=1e-4)
    p.add_argument("--out", help="write CSV here instead of stdout")
    return parser


def _emit(text: str, out: str | None) -> None:
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)


def _run(args) -> int:
    if args.command == "single-photon":
        grid = parse_grid(args.ed_grid)
        if any(not 0.0 <= e <= 0.5 for e in grid):
            raise ValidationError("error-rate grid must lie in [0, 0.5]")
        if args.mu_out < 0:
            raise ValidationError("mu_out must be non-negative")
        _emit(curve_to_csv(single_photon_curve(args.mu_out, grid, args.p_z, args.fw_tol)), args.out)
        return EXIT_OK

    if args.command == "scan":
        extra = {"distances": tuple(parse_grid(args.distances)) if args.distances else None}
        if args.fixed_mu:
            extra["optimize_mu"] = False
        config = build_config(args, **extra)
        if not args.distances and not (args.config and "distances" in load_config_file(args.config)):
            config = dataclasses.replace(config, distances=tuple(parse_grid("0:100:5")))
        _emit(reports_to_csv(scan_distance(config, args.workers)), args.out)
        return EXIT_OK

    config = build_config(args)
    if args.distance < 0:
        raise ValidationError("distance must be non-negative")
    if args.command == "simulate":
        _emit(prepare_point(config, args.distance).stats.to_csv(), args.out)
        return EXIT_OK
    if args.command == "decoy":
        point = prepare_point(config, args.distance)
        if point.bounds is None:
            raise LPError(point.error)
        _emit(bounds_to_csv(point.bounds), args.out)
        return EXIT_OK

    # keyrate
    reports = []
    for method in config.methods:
        if args.optimize_mu:
            rep = optimize_signal_intensity(config, args.distance, method)[2]
        else:
            point = prepare_point(config, args.distance)
            if method == "numerical" and args.trace:
                rep, solver_rep = evaluate_numerical(config, point, trace=True)
                if solver_rep is not None:
                    Path(args.trace).write_text(solver_rep.trace_csv())
            else:
                rep = evaluate(config, point, method)
        reports.append(rep)
    _emit(reports_to_csv(reports), args.out)
    for rep in reports:
        if rep.status == "infeasible":
            print(f"infeasible constraints: {rep.diagnostic}", file=sys.stderr)
            return EXIT_INVALID
        if rep.status != "ok":
            print(f"{rep.method}: {rep.status}: {rep.diagnostic}", file=sys.stderr)
            return EXIT_NUMERICAL
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    parser = make_parser()
    try:
        args = parser.parse_args(argv)
        return _run(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    except (ValidationError, DomainError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (NumericalFailure, SDPError, LPError, np.linalg.LinAlgError) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    raise SystemExit(main())
