"""Acceptance suite: one test per criterion, each reporting a PASS/FAIL line.

The summary lines are printed in the "acceptance criteria" section at the
end of the pytest run.
"""

from __future__ import annotations

import json

import numpy as np
import pytest

from langevin_strong.cli import main
from langevin_strong.core import LangevinModel, PhaseState
from langevin_strong.harness import ExperimentConfig, fit_order, linear_oracle_experiment, strong_error_experiment
from langevin_strong.models import harmonic_model, pendulum_model
from langevin_strong.noise import OUNoise, StepIncrements, rng_stream, sample_increments, window_integrals
from langevin_strong.schemes import get_scheme, scheme_names
from langevin_strong.splitting import svv_step, trunc_step
from langevin_strong.taylor import taylor_step

TARGETS_PENDULUM = {
    "direct-ab": (1.0, 0.3), "direct-sym": (1.0, 0.3),
    "trunc1-naive": (1.0, 0.25), "trunc1-sym": (1.0, 0.25), "trunc2-naive": (1.0, 0.25),
    "trunc2-sym": (2.0, 0.25), "trunc3-neri": (3.0, 0.35), "svv": (2.0, 0.25),
    "taylor1": (1.0, 0.25), "taylor2": (2.0, 0.25), "taylor3": (3.0, 0.25),
}
PENDULUM_CFG = dict(model="pendulum", schemes=list(TARGETS_PENDULUM), dts=[2.0**-k for k in range(4, 9)],
                    ref_dt=2.0**-13, n_paths=100, seed=20240611, T=1.0,
                    overrides={"gamma": 1.0, "sigma": 1.0})


def _slope_check(report, targets):
    lines, ok = [], True
    for name, (order, tol) in targets.items():
        s = report.slope(name)
        good = s is not None and abs(s - order) <= tol
        ok &= good
        lines.append(f"{get_scheme(name).label}={s:.3f}{'' if good else '(!)'}")
    return ok, " ".join(lines)


def test_criterion_1_pendulum_orders(acceptance):
    report = strong_error_experiment(ExperimentConfig(**PENDULUM_CFG))
    ok, detail = _slope_check(report, TARGETS_PENDULUM)
    acceptance(1, ok, "pendulum slopes: " + detail)
    assert ok, detail


def test_criterion_2_lj7_orders(acceptance):
    targets = {k: (v[0], 0.4) for k, v in TARGETS_PENDULUM.items()}
    cfg = ExperimentConfig(model="lj7", schemes=list(targets), dts=[2.0**-k for k in range(5, 9)],
                           ref_dt=2.0**-12, n_paths=50, seed=20240611, T=0.25,
                           overrides={"gamma": 10.0, "kbt": 0.3})
    report = strong_error_experiment(cfg)
    ok, detail = _slope_check(report, targets)
    acceptance(2, ok, "LJ-7 slopes: " + detail)
    assert ok, detail


def test_criterion_3_noise_statistics(acceptance, tmp_path, capsys):
    out = tmp_path / "noise.json"
    code = main(["noise-check", "--dts", "1,0.1,0.01", "--samples", "1000000", "--mode", "both",
                 "--json", str(out)])
    results = json.loads(out.read_text())["results"]
    worst = max(r["max_se"] for r in results)
    ok = code == 0 and worst <= 3.0 and len(results) == 6
    acceptance(3, ok, f"worst deviation {worst:.2f} SE over sampling+quadrature, dt in {{1, 0.1, 0.01}}")
    assert ok


def test_criterion_4_integral_identity(acceptance):
    dt = 0.1
    inc = sample_increments(3, dt, rng_stream(11), (1000,))
    b = dt * inc.dW
    constructed = bool(np.array_equal(inc.I_j0, b - inc.I_0j))
    resid_s = np.abs(inc.I_0j + inc.I_j0 - b)
    # The only discrepancy allowed is the rounding of the floating-point operations themselves.
    scale = np.maximum.reduce([np.abs(inc.I_0j), np.abs(inc.I_j0), np.abs(b)])
    one_rounding = bool(np.all(resid_s <= np.spacing(scale)))
    delta = dt / 32
    rng = rng_stream(12)
    W = np.concatenate([np.zeros((1000, 1, 3)),
                        np.cumsum(np.sqrt(delta) * rng.standard_normal((1000, 32, 3)), axis=1)], axis=1)
    q = window_integrals(W, delta, dt)
    rel_q = float(np.max(np.abs(q.I_0j + q.I_j0 - dt * q.dW) / (dt * np.abs(q.dW))))
    ok = constructed and one_rounding and rel_q <= 1e-10
    acceptance(4, ok, f"sampling: I_j0 == dt*dW - I_0j bitwise={constructed}, sum exact to operand rounding={one_rounding}; "
                      f"quadrature max relative residual {rel_q:.1e}")
    assert ok


def test_criterion_5_bch_consistency(acceptance):
    model = pendulum_model(1.0, 1.0)
    N = 10_000
    s = PhaseState(np.full((N, 1), 1.0), np.zeros((N, 1)))
    dts = [2.0**-k for k in range(4, 10)]
    rms = []
    rng = rng_stream(5)
    for dt in dts:
        inc = sample_increments(1, dt, rng, (N,))
        a = trunc_step(model, s, inc, "II", "symmetric").stacked()
        b = taylor_step(model, s, inc, 2).stacked()
        rms.append(float(np.sqrt(np.mean(np.sum((a - b) ** 2, axis=-1)))))
    slope, se = fit_order(dts, rms)
    ok = abs(slope - 2.5) <= 0.2
    acceptance(5, ok, f"RMS(Trunc2Sym - Taylor2) slope {slope:.3f} +- {se:.3f}")
    assert ok


def _global_error(step, model, s0, T, dt, exact):
    s = s0
    for _ in range(round(T / dt)):
        s = step(model, s, dt)
    return s, float(np.linalg.norm(s.stacked() - exact))


def test_criterion_6_deterministic_reductions(acceptance):
    zero = np.zeros(1)
    # Truncation I symmetric with sigma = Gamma = 0 is Stormer-Verlet.
    pend = pendulum_model(0.0, 0.0)
    s = PhaseState(np.array([1.0]), np.array([0.0]))

    def zero_inc(dt):
        return StepIncrements.from_basis(dt, zero, zero, zero)

    max_verlet_gap = 0.0
    dts = [2.0**-k for k in range(3, 8)]
    energy_err = []
    for dt in dts:
        st = s
        e0 = 0.5 * st.v @ st.v + (1 - np.cos(st.x)).sum()
        worst = 0.0
        for _ in range(round(10.0 / dt)):
            new = trunc_step(pend, st, zero_inc(dt), "I", "symmetric")
            xh = st.x + 0.5 * dt * st.v
            v1 = st.v - dt * np.sin(xh)
            max_verlet_gap = max(max_verlet_gap, float(np.abs(new.x - (xh + 0.5 * dt * v1)).max()),
                                 float(np.abs(new.v - v1).max()))
            st = new
            worst = max(worst, abs(0.5 * st.v @ st.v + (1 - np.cos(st.x)).sum() - e0))
        energy_err.append(worst)
    verlet_slope, _ = fit_order(dts, energy_err)

    # Neri on the undamped harmonic oscillator: global error order 4.
    ho = harmonic_model(1.0, 0.0, 0.0)
    s0 = PhaseState(np.array([1.0]), np.array([0.0]))
    T = 2.0
    exact = np.array([np.cos(T), -np.sin(T)])
    ndts = [2.0**-k for k in range(2, 7)]
    nerr = [_global_error(lambda m, st, dt: trunc_step(m, st, zero_inc(dt), "III", "neri"), ho, s0, T, dt, exact)[1]
            for dt in ndts]
    neri_slope, _ = fit_order(ndts, nerr)

    # SVV with Gamma -> 0, sigma = 0 against velocity Verlet, one step at a time.
    svv_gap = 0.0
    for g in (0.0, 1e-14):
        m = LangevinModel(1, pend.force, np.array([[g]]), np.zeros((1, 1)))
        st = s
        for _ in range(200):
            dt = 0.05
            new = svv_step(m, st, dt, OUNoise(zero, zero))
            x1 = st.x + dt * st.v + 0.5 * dt * dt * m.f(st.x)
            v1 = st.v + 0.5 * dt * (m.f(st.x) + m.f(x1))
            svv_gap = max(svv_gap, float(np.abs(new.x - x1).max()), float(np.abs(new.v - v1).max()))
            st = new
    ok = (max_verlet_gap <= 1e-14 and abs(verlet_slope - 2.0) <= 0.25 and abs(neri_slope - 4.0) <= 0.3
          and svv_gap <= 1e-12)
    acceptance(6, ok, f"Trunc1Sym=Verlet gap {max_verlet_gap:.1e}, energy slope {verlet_slope:.3f}; "
                      f"Neri global slope {neri_slope:.3f}; SVV vs velocity Verlet gap {svv_gap:.1e}")
    assert ok


def test_criterion_7_linear_oracle(acceptance):
    names = scheme_names()
    report = linear_oracle_experiment(names, [2.0**-k for k in range(5, 10)], T=1.0, n_paths=400, seed=7)
    targets = {n: (get_scheme(n).order, 0.25) for n in names}
    ok, detail = _slope_check(report, targets)
    acceptance(7, ok, "harmonic exact-solution slopes: " + detail)
    assert ok, detail


@pytest.mark.parametrize("workers", [8])
def test_criterion_8_worker_independence(acceptance, tmp_path, workers, capsys):
    args = ["convergence", "--model", "pendulum", "--dts", "2^-4,2^-5,2^-6,2^-7,2^-8",
            "--ref-dt", "2^-13", "--paths", "100", "--seed", "20240611", "--T", "1"]
    c1 = main(args + ["--workers", "1", "--out", str(tmp_path / "w1")])
    c8 = main(args + ["--workers", str(workers), "--out", str(tmp_path / "w8")])
    a = (tmp_path / "w1" / "report.json").read_bytes()
    b = (tmp_path / "w8" / "report.json").read_bytes()
    ok = c1 == 0 and c8 == 0 and a == b
    acceptance(8, ok, f"report.json bytes identical for 1 and {workers} workers: {a == b}")
    assert ok
