"""Coupled strong-convergence experiments.

For every realisation a fine Brownian path is generated from a per-path
seed. The reference solution and every coarse scheme are driven by that
same path: the schemes read their increments from the path by Simpson
quadrature and the reference integrates the random ODE driven by the
piecewise-quadratic interpolant of the path samples with classical RK4
at the fine step. Simpson quadrature is exact for that interpolant, so
the schemes and the reference see literally the same driving signal and
the reference error (``O(delta^2.5)``) stays far below every coarse error.
A fine-step Euler-Maruyama reference is available as well.

Paths are processed in fixed-size blocks whose composition does not depend
on the number of workers, and block results are folded in path order, so
reports are bit-identical for any worker count.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction
from typing import Any, Optional, Sequence

import numpy as np

from .core import LangevinError, LangevinModel, NonFiniteStateError, PhaseState, mat_exp, matvec
from .models import ModelSpec, build_model, harmonic_drift, harmonic_model
from .noise import (
    LegendreNoise,
    StepIncrements,
    generate_path,
    ou_window_integrals,
    path_seed,
    rng_stream,
    window_integrals,
)
from .schemes import Scheme, get_scheme
from .taylor import taylor_step

__all__ = [
    "ConfigError",
    "ExperimentError",
    "ExperimentConfig",
    "CellResult",
    "SchemeFit",
    "ConvergenceReport",
    "fit_order",
    "run_reference",
    "coupled_increments",
    "run_scheme_coupled",
    "strong_error_experiment",
    "linear_oracle_experiment",
    "default_workers",
    "WORKERS_ENV",
]

WORKERS_ENV = "LANGEVIN_STRONG_WORKERS"
UNRELIABLE_FRACTION = 0.2
_FAILURES = (LangevinError, FloatingPointError, ArithmeticError)


class ConfigError(LangevinError, ValueError):
    """Invalid experiment configuration."""


class ExperimentError(LangevinError):
    """An experiment produced no usable data for some cell."""


# ------------------------------------------------------------------- config

@dataclass
class ExperimentConfig:
    """Everything that determines a convergence report.

    Attributes:
        model: Registry name (``pendulum``, ``lj7``, ``harmonic``).
        schemes: Scheme names, see :func:`~langevin_strong.schemes.get_scheme`.
        dts: Coarse step sizes; each an even multiple of ``ref_dt``.
        ref_dt: Fine step of the Brownian path and the reference solver.
        n_paths: Number of realisations.
        seed: Root seed; path ``p`` uses ``path_seed(seed, p)``.
        T: Final time; the model default when ``None``.
        overrides: Model parameter overrides.
        reference: ``"rk4"`` (default) or ``"em"``.
        block_size: Paths per work unit.
        min_ratio: Smallest allowed ``dt / ref_dt``.
    """

    model: str
    schemes: list
    dts: list
    ref_dt: float
    n_paths: int
    seed: int = 0
    T: Optional[float] = None
    overrides: dict = field(default_factory=dict)
    reference: str = "rk4"
    block_size: int = 25
    min_ratio: int = 16

    def resolve(self) -> ModelSpec:
        """Validate the configuration and return the model it names.

        Raises:
            ConfigError: any inconsistency (unknown names, misaligned grids, ...).
        """
        try:
            spec = build_model(self.model, self.overrides)
            schemes = [get_scheme(s) for s in self.schemes]
        except (KeyError, ValueError) as exc:
            raise ConfigError(str(exc.args[0] if exc.args else exc)) from None
        if not schemes:
            raise ConfigError("no schemes given")
        if len({s.name for s in schemes}) != len(schemes):
            raise ConfigError("duplicate scheme names")
        if int(self.n_paths) < 1:
            raise ConfigError(f"n_paths must be >= 1, got {self.n_paths}")
        if int(self.block_size) < 1:
            raise ConfigError("block_size must be >= 1")
        if self.reference not in ("rk4", "em"):
            raise ConfigError(f"reference must be 'rk4' or 'em', got {self.reference!r}")
        if not self.ref_dt > 0:
            raise ConfigError("ref_dt must be positive")
        if not self.dts:
            raise ConfigError("no dts given")
        if len(set(self.dts)) != len(self.dts):
            raise ConfigError("duplicate dts")
        T = self.horizon(spec)
        if not T > 0:
            raise ConfigError("T must be positive")
        m = _ratio(T, self.ref_dt)
        if m is None:
            raise ConfigError(f"T/ref_dt = {T / self.ref_dt!r} is not an integer")
        if self.reference == "rk4" and m % 2:
            raise ConfigError("the rk4 reference needs an even number of fine steps")
        for dt in self.dts:
            r = _ratio(dt, self.ref_dt)
            if r is None or r % 2:
                raise ConfigError(f"dt={dt!r} is not an even multiple of ref_dt={self.ref_dt!r}")
            if r < self.min_ratio:
                raise ConfigError(f"dt/ref_dt = {r} is below the quadrature floor {self.min_ratio}")
            if _ratio(T, dt) is None:
                raise ConfigError(f"T/dt = {T / dt!r} is not an integer for dt={dt!r}")
        return spec

    def horizon(self, spec: Optional[ModelSpec] = None) -> float:
        if self.T is not None:
            return float(self.T)
        return (spec or build_model(self.model, self.overrides)).T

    def to_dict(self) -> dict:
        d = asdict(self)
        d["dts"] = [float(x) for x in self.dts]
        d["schemes"] = [get_scheme(s).name for s in self.schemes]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f for f in cls.__dataclass_fields__}
        return cls(**{k: v for k, v in d.items() if k in known})


def _ratio(a: float, b: float) -> Optional[int]:
    q = a / b
    k = round(q)
    if k <= 0 or abs(q - k) > 1e-9 * max(1.0, q):
        return None
    return int(k)


# ------------------------------------------------------------------ fitting

def fit_order(dts: Sequence[float], errors: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope of ``log2(error)`` against ``log2(dt)`` and its standard error.

    Raises:
        ValueError: fewer than three points, mismatched lengths, repeated dts
            or non-positive values.
    """
    dts = np.asarray(dts, float)
    errors = np.asarray(errors, float)
    if dts.shape != errors.shape or dts.ndim != 1:
        raise ValueError("dts and errors must be 1-d and of equal length")
    if dts.size < 3:
        raise ValueError("need at least three points to fit an order")
    if np.any(dts <= 0) or np.any(~(errors > 0)):
        raise ValueError("dts and errors must be positive")
    if np.unique(dts).size != dts.size:
        raise ValueError("dts must be distinct")
    X = np.log2(dts)
    Y = np.log2(errors)
    Xc = X - X.mean()
    sxx = float(Xc @ Xc)
    slope = float(Xc @ (Y - Y.mean())) / sxx
    resid = Y - Y.mean() - slope * Xc
    dof = X.size - 2
    stderr = math.sqrt(float(resid @ resid) / dof / sxx) if dof > 0 else 0.0
    return slope, stderr


# ---------------------------------------------------------- reference solve

def _broadcast_state(s0: PhaseState, batch: tuple) -> PhaseState:
    return PhaseState(np.broadcast_to(s0.x, batch + s0.x.shape[-1:]).copy(),
                      np.broadcast_to(s0.v, batch + s0.v.shape[-1:]).copy())


def _check(state: PhaseState) -> PhaseState:
    if not (np.all(np.isfinite(state.x)) and np.all(np.isfinite(state.v))):
        raise NonFiniteStateError("non-finite state")
    return state


def _rk4_reference(model: LangevinModel, s: PhaseState, W: np.ndarray, delta: float) -> PhaseState:
    m = W.shape[-2] - 1
    if m % 2:
        raise ValueError("the rk4 reference needs an even number of fine steps")
    G, S = model.gamma, model.sigma
    x, v = s.x, s.v
    half = 0.5 * delta

    def acc(x, v, noise):
        return model.f(x) - matvec(G, v) + noise

    for i in range(0, m, 2):
        d1 = W[..., i + 1, :] - W[..., i, :]
        d2 = W[..., i + 2, :] - W[..., i, :]
        slope = matvec(S, (d2 - 2.0 * d1) / (delta * delta))
        base = matvec(S, (4.0 * d1 - d2) / (2.0 * delta))
        for u0 in (0.0, delta):
            n0 = base + slope * u0
            n1 = base + slope * (u0 + half)
            n2 = base + slope * (u0 + delta)
            kx1, kv1 = v, acc(x, v, n0)
            kx2, kv2 = v + half * kv1, acc(x + half * kx1, v + half * kv1, n1)
            kx3, kv3 = v + half * kv2, acc(x + half * kx2, v + half * kv2, n1)
            kx4, kv4 = v + delta * kv3, acc(x + delta * kx3, v + delta * kv3, n2)
            x = x + delta / 6.0 * (kx1 + 2.0 * kx2 + 2.0 * kx3 + kx4)
            v = v + delta / 6.0 * (kv1 + 2.0 * kv2 + 2.0 * kv3 + kv4)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise NonFiniteStateError(f"reference blew up near fine step {i}")
    return PhaseState(x, v)


def _em_reference(model: LangevinModel, s: PhaseState, W: np.ndarray, delta: float) -> PhaseState:
    return _march(model, s, get_scheme("taylor1"), coupled_increments(model, W, delta, delta, need_ou=False))


def run_reference(model: LangevinModel, s0: PhaseState, W, delta: Optional[float] = None,
                  method: str = "rk4") -> PhaseState:
    """Terminal state of the fine reference solution driven by path samples ``W``.

    ``W`` is a :class:`BrownianPath` or an array of shape ``(..., m+1, n)``;
    leading axes are independent realisations.

    Raises:
        NonFiniteStateError, CollisionError: the reference diverged.
    """
    if hasattr(W, "W"):
        W, delta = W.W, W.delta if delta is None else delta
    W = np.asarray(W, float)
    s = _broadcast_state(s0, W.shape[:-2])
    with np.errstate(all="ignore"):
        if method == "rk4":
            return _check(_rk4_reference(model, s, W, delta))
        if method == "em":
            return _check(_em_reference(model, s, W, delta))
    raise ValueError(f"unknown reference method {method!r}")


# ------------------------------------------------------------ coarse schemes

def coupled_increments(model: LangevinModel, W: np.ndarray, delta: float, dt: float,
                       need_ou: bool = True) -> StepIncrements:
    """Increments of every coarse step, arrays of shape ``(..., N, n)``.

    When ``dt / delta`` is odd only ``dW`` is available (enough for Euler-Maruyama).
    """
    r = _ratio(dt, delta)
    if r is None:
        raise ValueError(f"dt={dt!r} is not a multiple of delta={delta!r}")
    if r % 2:
        Wc = W[..., ::r, :]
        dW = np.diff(Wc, axis=-2)
        return StepIncrements(float(dt), dW, None, None, None)
    inc = window_integrals(W, delta, dt)
    if need_ou:
        inc = inc.with_ou(ou_window_integrals(W, delta, dt, model.gamma, model.sigma))
    return inc


def _march(model: LangevinModel, s: PhaseState, scheme: Scheme, inc: StepIncrements) -> PhaseState:
    N = inc.dW.shape[-2]
    for k in range(N):
        s = scheme(model, s, inc[..., k, :])
        if not (np.all(np.isfinite(s.x)) and np.all(np.isfinite(s.v))):
            raise NonFiniteStateError(f"{scheme.label} blew up at step {k}")
    return s


def run_scheme_coupled(model: LangevinModel, scheme, s0: PhaseState, W, dt: float,
                       delta: Optional[float] = None,
                       inc: Optional[StepIncrements] = None) -> PhaseState:
    """Terminal state of ``scheme`` at step ``dt`` driven by path samples ``W``."""
    scheme = get_scheme(scheme) if isinstance(scheme, str) else scheme
    if hasattr(W, "W"):
        W, delta = W.W, W.delta if delta is None else delta
    W = np.asarray(W, float)
    if inc is None:
        inc = coupled_increments(model, W, delta, dt, need_ou=scheme.needs_ou)
    s = _broadcast_state(s0, W.shape[:-2])
    with np.errstate(all="ignore"):
        return _march(model, s, scheme, inc)


# ------------------------------------------------------------------ blocks

def _guarded(fn, B: int):
    """Run ``fn(sel)`` on the whole block; on failure retry path by path.

    Returns ``(x, v, reasons)`` with NaN rows and a reason string for failures.
    """
    try:
        st = fn(slice(None))
        return st.x, st.v, [None] * B
    except _FAILURES:
        pass
    xs, vs, reasons = [], [], []
    for p in range(B):
        try:
            st = fn(slice(p, p + 1))
            xs.append(st.x[0])
            vs.append(st.v[0])
            reasons.append(None)
        except _FAILURES as exc:
            xs.append(None)
            vs.append(None)
            reasons.append(type(exc).__name__)
    n = next((a.shape[-1] for a in xs if a is not None), 0)
    X = np.stack([a if a is not None else np.full(n, np.nan) for a in xs]) if n else np.full((B, 1), np.nan)
    V = np.stack([a if a is not None else np.full(n, np.nan) for a in vs]) if n else np.full((B, 1), np.nan)
    return X, V, reasons


def _run_block(cfg_dict: dict, start: int, stop: int) -> dict:
    cfg = ExperimentConfig.from_dict(cfg_dict)
    spec = cfg.resolve()
    model, s0 = spec.model, spec.initial
    T = cfg.horizon(spec)
    seeds = [path_seed(cfg.seed, p) for p in range(start, stop)]
    W = np.stack([generate_path(model.n, T, cfg.ref_dt, sd).W for sd in seeds])
    B = W.shape[0]
    rx, rv, rreason = _guarded(lambda sel: run_reference(model, s0, W[sel], cfg.ref_dt, cfg.reference), B)
    out = {"ref_reasons": rreason, "cells": {}}
    schemes = [get_scheme(s) for s in cfg.schemes]
    for dt in cfg.dts:
        with np.errstate(all="ignore"):
            inc_all = coupled_increments(model, W, cfg.ref_dt, dt, need_ou=any(s.needs_ou for s in schemes))
        for sc in schemes:
            x, v, reasons = _guarded(
                lambda sel: run_scheme_coupled(model, sc, s0, W[sel], dt, cfg.ref_dt, inc_all[sel]), B)
            ex = np.linalg.norm(x - rx, axis=-1)
            ev = np.linalg.norm(v - rv, axis=-1)
            e = np.sqrt(ex * ex + ev * ev)
            out["cells"][(sc.name, float(dt))] = (e, ex, ev, reasons)
    return out


# ------------------------------------------------------------------ report

@dataclass
class CellResult:
    """Aggregated strong error of one scheme at one step size."""

    scheme: str
    dt: float
    mean_error: Optional[float]
    std_error: Optional[float]
    mean_error_x: Optional[float]
    mean_error_v: Optional[float]
    n_paths_used: int
    n_excluded: int
    unreliable: bool
    exclusion_reasons: dict = field(default_factory=dict)


@dataclass
class SchemeFit:
    scheme: str
    label: str
    claimed_order: float
    slope: Optional[float]
    slope_stderr: Optional[float]


@dataclass
class ConvergenceReport:
    """Strong errors per (scheme, dt), fitted orders and the configuration that produced them."""

    config: dict
    cells: list
    fits: dict
    provenance: dict = field(default_factory=dict)

    def cell(self, scheme: str, dt: float) -> CellResult:
        name = get_scheme(scheme).name
        for c in self.cells:
            if c.scheme == name and c.dt == float(dt):
                return c
        raise KeyError((scheme, dt))

    def slope(self, scheme: str) -> Optional[float]:
        return self.fits[get_scheme(scheme).name].slope

    def scheme_cells(self, scheme: str) -> list:
        name = get_scheme(scheme).name
        return [c for c in self.cells if c.scheme == name]

    def to_dict(self) -> dict:
        results = []
        for name, fit in self.fits.items():
            cells = self.scheme_cells(name)
            results.append({
                "scheme": name,
                "label": fit.label,
                "claimed_order": fit.claimed_order,
                "dts": [c.dt for c in cells],
                "errors": [c.mean_error for c in cells],
                "stderrs": [c.std_error for c in cells],
                "slope": fit.slope,
                "slope_stderr": fit.slope_stderr,
                "errors_x": [c.mean_error_x for c in cells],
                "errors_v": [c.mean_error_v for c in cells],
                "n_paths_used": [c.n_paths_used for c in cells],
                "n_excluded": [c.n_excluded for c in cells],
                "unreliable": [c.unreliable for c in cells],
            })
        return {"config": self.config, "results": results, "provenance": self.provenance}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=False)

    def slopes_table(self) -> str:
        lines = [f"{'scheme':<14}{'claimed':>8}{'slope':>9}{'stderr':>9}"]
        for fit in self.fits.values():
            s = "n/a" if fit.slope is None else f"{fit.slope:.3f}"
            e = "n/a" if fit.slope_stderr is None else f"{fit.slope_stderr:.3f}"
            lines.append(f"{fit.label:<14}{fit.claimed_order:>8.1f}{s:>9}{e:>9}")
        return "\n".join(lines)


def _aggregate(name: str, dt: float, e, ex, ev, reasons, n_paths: int) -> CellResult:
    ok = np.isfinite(e)
    used = int(ok.sum())
    excluded = n_paths - used
    counts: dict[str, int] = {}
    for r in reasons:
        if r is not None:
            counts[r] = counts.get(r, 0) + 1
    if used == 0:
        raise ExperimentError(f"all paths excluded for {name} at dt={dt} ({counts})")
    mean = float(np.mean(e[ok]))
    se = float(np.std(e[ok], ddof=1) / math.sqrt(used)) if used > 1 else None
    return CellResult(name, float(dt), mean, se, float(np.mean(ex[ok])), float(np.mean(ev[ok])),
                      used, excluded, excluded > UNRELIABLE_FRACTION * n_paths, counts)


def _fits(cells, schemes) -> dict:
    fits = {}
    for sc in schemes:
        good = [c for c in cells if c.scheme == sc.name and not c.unreliable and c.mean_error > 0]
        slope = stderr = None
        if len(good) >= 3:
            slope, stderr = fit_order([c.dt for c in good], [c.mean_error for c in good])
        fits[sc.name] = SchemeFit(sc.name, sc.label, sc.order, slope, stderr)
    return fits


def default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def strong_error_experiment(cfg: ExperimentConfig, workers: Optional[int] = None) -> ConvergenceReport:
    """Run the coupled experiment described by ``cfg``.

    ``workers`` (default from the ``LANGEVIN_STRONG_WORKERS`` environment
    variable, else 1) only changes wall time, never the report.

    Raises:
        ConfigError: invalid configuration.
        ExperimentError: every path was excluded for some (scheme, dt) cell.
    """
    spec = cfg.resolve()
    workers = default_workers() if workers is None else max(1, int(workers))
    cfg_dict = cfg.to_dict()
    if cfg_dict["T"] is None:
        cfg_dict["T"] = spec.T
    bounds = [(a, min(a + cfg.block_size, cfg.n_paths)) for a in range(0, cfg.n_paths, cfg.block_size)]
    if workers == 1 or len(bounds) == 1:
        blocks = [_run_block(cfg_dict, a, b) for a, b in bounds]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(bounds))) as pool:
            blocks = list(pool.map(_run_block, [cfg_dict] * len(bounds),
                                   [a for a, _ in bounds], [b for _, b in bounds]))
    schemes = [get_scheme(s) for s in cfg.schemes]
    ref_reasons = sum((b["ref_reasons"] for b in blocks), [])
    cells = []
    for dt in cfg.dts:
        for sc in schemes:
            key = (sc.name, float(dt))
            e, ex, ev = (np.concatenate([b["cells"][key][i] for b in blocks]) for i in range(3))
            reasons = sum((b["cells"][key][3] for b in blocks), [])
            reasons = [r if r is not None else (f"reference:{q}" if q is not None else None)
                       for r, q in zip(reasons, ref_reasons)]
            cells.append(_aggregate(sc.name, dt, e, ex, ev, reasons, cfg.n_paths))
    cells.sort(key=lambda c: ([s.name for s in schemes].index(c.scheme), -c.dt))
    provenance = {
        "rng": "Philox keyed by SeedSequence([seed, path_index])",
        "path_seeds": [path_seed(cfg.seed, p) for p in range(cfg.n_paths)],
        "reference_excluded": sum(r is not None for r in ref_reasons),
    }
    return ConvergenceReport(cfg_dict, cells, _fits(cells, schemes), provenance)


# ------------------------------------------------------------ linear oracle

def linear_oracle_experiment(schemes: Sequence[str], dts: Sequence[float], T: float = 1.0,
                             n_paths: int = 200, seed: int = 0, omega: float = 1.0,
                             gamma: float = 1.0, sigma: float = 1.0, x0: float = 1.0,
                             v0: float = 0.0, degree: int = 12) -> ConvergenceReport:
    """Strong errors against the exact solution of the harmonic Langevin SDE.

    On every step the Brownian motion is represented by its first
    ``degree + 1`` shifted-Legendre coordinates. Those coordinates give the
    scheme increments exactly and the exact step
    ``z <- exp(M h) z + int exp(M (h - s)) B dW_s`` to within the
    truncation of a smooth kernel, so no fine path or reference solver is
    involved. Each dt uses its own stream ``(seed, dt index)``.
    """
    model = harmonic_model(omega, gamma, sigma)
    M, Bn = harmonic_drift(model, omega)
    n = model.n
    sc_list = [get_scheme(s) for s in schemes]
    s0 = PhaseState(np.full((n_paths, n), float(x0)), np.full((n_paths, n), float(v0)))
    cells = []
    for i, dt in enumerate(dts):
        N = _ratio(T, dt)
        if N is None:
            raise ConfigError(f"T/dt = {T / dt!r} is not an integer")
        leg = LegendreNoise(dt, degree)
        Z = leg.draw(rng_stream(seed, i), n, (N, n_paths))
        inc = leg.increments(Z, model.gamma, model.sigma)
        Phi = mat_exp(M * dt)
        C = leg.coefficients(lambda s: mat_exp(M * (dt - s)) @ Bn)
        eta = leg.integrate(C, Z)
        z = s0.stacked()
        for k in range(N):
            z = z @ Phi.T + eta[k]
        for sc in sc_list:
            s = s0
            for k in range(N):
                s = sc(model, s, inc[k])
            d = s.stacked() - z
            ex = np.linalg.norm(d[:, :n], axis=-1)
            ev = np.linalg.norm(d[:, n:], axis=-1)
            e = np.linalg.norm(d, axis=-1)
            cells.append(_aggregate(sc.name, dt, e, ex, ev, [None] * n_paths, n_paths))
    names = [s.name for s in sc_list]
    cells.sort(key=lambda c: (names.index(c.scheme), -c.dt))
    config = {"model": "harmonic", "schemes": names, "dts": [float(d) for d in dts], "T": T,
              "n_paths": n_paths, "seed": seed, "omega": omega, "gamma": gamma, "sigma": sigma,
              "x0": x0, "v0": v0, "degree": degree, "reference": "exact-linear"}
    return ConvergenceReport(config, cells, _fits(cells, sc_list), {})
