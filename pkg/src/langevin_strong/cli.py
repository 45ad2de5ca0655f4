"""Command-line interface: ``convergence``, ``simulate`` and ``noise-check``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import re
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import LangevinError
from .harness import (
    ConfigError,
    ExperimentConfig,
    ExperimentError,
    default_workers,
    strong_error_experiment,
)
from .models import MODELS, build_model
from .noise import increment_covariance, increment_moments, rng_stream, sample_increments, sample_ou_noise
from .schemes import get_scheme, scheme_names

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
NOISE_CHECK_LIMIT = 4.0
_POW = re.compile(r"^\s*(\d+(?:\.\d*)?)\s*\^\s*([+-]?\d+)\s*$")


def parse_number(token: str) -> float:
    """Parse a float, accepting exact power literals such as ``2^-13``."""
    m = _POW.match(token)
    if m:
        return float(m.group(1)) ** int(m.group(2))
    return float(token)


def parse_list(text: str) -> list[float]:
    return [parse_number(t) for t in text.split(",") if t.strip()]


class _Fail(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _overrides(args) -> dict:
    out = {}
    for key in ("gamma", "sigma", "kbt", "x0", "v0", "omega"):
        val = getattr(args, key, None)
        if val is not None:
            out[key] = val
    return out


def _add_model_args(p: argparse.ArgumentParser, required: bool = True) -> None:
    p.add_argument("--model", required=required, help=f"one of: {', '.join(MODELS)}")
    p.add_argument("--T", type=parse_number, default=None, help="final time (model default if omitted)")
    p.add_argument("--gamma", type=parse_number, help="scalar friction (times identity)")
    p.add_argument("--sigma", type=parse_number, help="scalar noise amplitude (times identity)")
    p.add_argument("--kbt", type=parse_number, help="temperature; sets sigma = sqrt(2 kbt Gamma)")
    p.add_argument("--x0", type=parse_number, help="initial position (all components)")
    p.add_argument("--v0", type=parse_number, help="initial velocity (all components)")
    p.add_argument("--omega", type=parse_number, help="harmonic frequency")
    p.add_argument("--seed", type=int, default=0)


def _header_line(config: dict) -> str:
    return "# config: " + json.dumps(config, sort_keys=True) + "\n"


# ------------------------------------------------------------- convergence

def cmd_convergence(args) -> int:
    try:
        schemes = [s for s in args.schemes.split(",") if s] if args.schemes else scheme_names()
        cfg = ExperimentConfig(
            model=args.model, schemes=schemes, dts=parse_list(args.dts), ref_dt=parse_number(args.ref_dt),
            n_paths=args.paths, seed=args.seed, T=args.T, overrides=_overrides(args),
            reference=args.reference, block_size=args.block_size, min_ratio=args.min_ratio,
        )
        cfg.resolve()
    except (ConfigError, ValueError, KeyError) as exc:
        raise _Fail(EXIT_CONFIG, str(exc.args[0] if exc.args else exc))
    workers = args.workers if args.workers is not None else default_workers()
    try:
        report = strong_error_experiment(cfg, workers=workers)
    except ExperimentError as exc:
        raise _Fail(EXIT_NUMERIC, str(exc))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    buf.write(_header_line(report.config))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["model", "scheme", "dt", "mean_error", "std_error", "n_paths_used", "n_excluded"])
    for c in report.cells:
        w.writerow([report.config["model"], c.scheme, repr(c.dt), repr(c.mean_error),
                    "" if c.std_error is None else repr(c.std_error), c.n_paths_used, c.n_excluded])
    (out / "errors.csv").write_text(buf.getvalue(), encoding="utf-8")
    (out / "report.json").write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.slopes_table())
    unreliable = [f"{c.scheme}@{c.dt}" for c in report.cells if c.unreliable]
    if unreliable:
        print("unreliable cells (>20% excluded): " + ", ".join(unreliable))
    return EXIT_OK


# ---------------------------------------------------------------- simulate

def cmd_simulate(args) -> int:
    try:
        spec = build_model(args.model, _overrides(args))
        scheme = get_scheme(args.scheme)
        dt = parse_number(args.dt)
        T = spec.T if args.T is None else float(args.T)
        N = round(T / dt)
        if dt <= 0 or N < 1 or abs(N * dt - T) > 1e-9 * T:
            raise ValueError(f"T/dt = {T / dt!r} is not a positive integer")
    except (ValueError, KeyError) as exc:
        raise _Fail(EXIT_CONFIG, str(exc.args[0] if exc.args else exc))
    model = spec.model
    stream = rng_stream(args.seed, 0)
    s = spec.initial
    config = {"command": "simulate", "model": spec.name, "scheme": scheme.name, "dt": dt, "T": T,
              "seed": args.seed, "overrides": _overrides(args)}
    rows = []
    e0 = float(spec.energy(s.x, s.v))

    def record(k, st):
        e = float(spec.energy(st.x, st.v))
        rows.append([repr(k * dt), *map(repr, st.x.tolist()), *map(repr, st.v.tolist()), repr(e), repr(e - e0)])

    record(0, s)
    try:
        with np.errstate(all="ignore"):
            for k in range(1, N + 1):
                inc = sample_increments(model.n, dt, stream)
                if scheme.needs_ou:
                    inc = inc.with_ou(sample_ou_noise(model.gamma, model.sigma, dt, stream))
                s = scheme(model, s, inc).check_finite()
                if k % args.every == 0 or k == N:
                    record(k, s)
    except (LangevinError, FloatingPointError) as exc:
        raise _Fail(EXIT_NUMERIC, f"simulation failed at step {k}: {exc}")
    n = model.n
    header = ["t", *(f"x{i}" for i in range(n)), *(f"v{i}" for i in range(n)), "energy", "energy_drift"]
    buf = io.StringIO()
    buf.write(_header_line(config))
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    if args.out == "-":
        sys.stdout.write(buf.getvalue())
    else:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(buf.getvalue(), encoding="utf-8")
        print(f"wrote {len(rows)} rows to {args.out}; final energy drift {rows[-1][-1]}")
    return EXIT_OK


# ------------------------------------------------------------- noise-check

_NAMES = ("dW", "dU", "dV")


def cmd_noise_check(args) -> int:
    try:
        dts = parse_list(args.dts)
        if not dts or any(d <= 0 for d in dts):
            raise ValueError("dts must be positive")
        if args.samples < 2:
            raise ValueError("--samples must be at least 2")
        if args.ratio < 2 or args.ratio % 2:
            raise ValueError("--ratio must be an even integer >= 2")
    except ValueError as exc:
        raise _Fail(EXIT_CONFIG, str(exc))
    modes = ("sampling", "quadrature") if args.mode == "both" else (args.mode,)
    worst = 0.0
    results = []
    for mode in modes:
        for dt in dts:
            est, se = increment_moments(dt, args.samples, mode, args.seed, args.ratio)
            target = args.cov_scale * increment_covariance(dt)
            dev = np.abs(est - target) / np.where(se > 0, se, np.inf)
            iu = np.triu_indices(3)
            m = float(dev[iu].max())
            worst = max(worst, m)
            a, b = np.unravel_index(np.argmax(np.where(np.triu(np.ones((3, 3))) > 0, dev, -1)), dev.shape)
            print(f"{mode:<11} dt={dt:<8g} max deviation {m:6.2f} SE  (at {_NAMES[a]}*{_NAMES[b]})")
            results.append({"mode": mode, "dt": dt, "max_se": m, "estimate": est.tolist(),
                            "stderr": se.tolist(), "target": target.tolist()})
    status = "PASS" if worst <= NOISE_CHECK_LIMIT else "FAIL"
    print(f"{status}: worst deviation {worst:.2f} SE (limit {NOISE_CHECK_LIMIT:g})")
    if args.json:
        cfg = {"command": "noise-check", "dts": dts, "samples": args.samples, "mode": args.mode,
               "ratio": args.ratio, "seed": args.seed}
        Path(args.json).write_text(json.dumps({"config": cfg, "results": results}, indent=2) + "\n")
    return EXIT_OK if worst <= NOISE_CHECK_LIMIT else EXIT_NUMERIC


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="langevin-strong",
                                     description="Strong-order integrators for Langevin dynamics.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("convergence", help="coupled strong-error experiment")
    _add_model_args(p)
    p.add_argument("--schemes", default=None, help=f"comma list (default all): {', '.join(scheme_names())}")
    p.add_argument("--dts", required=True, help="comma list of coarse steps, e.g. 2^-4,2^-5,2^-6")
    p.add_argument("--ref-dt", default="2^-13", help="fine step of path and reference")
    p.add_argument("--paths", type=int, default=100)
    p.add_argument("--reference", choices=("rk4", "em"), default="rk4")
    p.add_argument("--workers", type=int, default=None, help="process count (default $LANGEVIN_STRONG_WORKERS or 1)")
    p.add_argument("--block-size", type=int, default=25, help=argparse.SUPPRESS)
    p.add_argument("--min-ratio", type=int, default=16, help=argparse.SUPPRESS)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_convergence)

    p = sub.add_parser("simulate", help="single trajectory with sampled increments")
    _add_model_args(p)
    p.add_argument("--scheme", required=True)
    p.add_argument("--dt", required=True)
    p.add_argument("--every", type=int, default=1, help="record every k-th step")
    p.add_argument("--out", default="-", help="CSV path or '-' for stdout")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("noise-check", help="Monte-Carlo check of the increment covariance")
    p.add_argument("--dts", default="1,0.1,0.01")
    p.add_argument("--samples", type=int, default=1_000_000)
    p.add_argument("--mode", choices=("sampling", "quadrature", "both"), default="both")
    p.add_argument("--ratio", type=int, default=128, help="fine panels per window in quadrature mode")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", default=None, help="optional JSON output path")
    p.add_argument("--cov-scale", type=float, default=1.0, help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_noise_check)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code is not None else EXIT_CONFIG
    try:
        return args.func(args)
    except _Fail as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    raise SystemExit(main())
