from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from langevin_strong.noise import (
    BrownianPath,
    LegendreNoise,
    MissingIncrementError,
    StepIncrements,
    generate_path,
    increment_covariance,
    increment_moments,
    integrals_from_path,
    load_path,
    ou_integral_covariance,
    ou_window_integrals,
    path_seed,
    rng_stream,
    sample_increments,
    sample_ou_noise,
    save_path,
    simpson_weights,
    window_integrals,
)

KERNELS = {
    "dW": lambda s, h: np.ones_like(s),
    "I_j0": lambda s, h: h - s,
    "I_0j": lambda s, h: s,
    "I_j00": lambda s, h: 0.5 * (h - s) ** 2,
    "I_0j0": lambda s, h: s * (h - s),
    "dU": lambda s, h: s - 0.5 * h,
    "dV": lambda s, h: (h * s - 1.5 * s * s) / 9.0,
}


def _kernel_cov(a, b, h):
    """Covariance of two Wiener integrals by Gauss-Legendre quadrature of the kernel product."""
    x, w = np.polynomial.legendre.leggauss(20)
    s = 0.5 * h * (x + 1)
    return float(np.sum(0.5 * h * w * KERNELS[a](s, h) * KERNELS[b](s, h)))


def test_covariance_dt_one():
    np.testing.assert_allclose(increment_covariance(1.0),
                               [[1, 0, 0], [0, 1 / 12, -1 / 216], [0, -1 / 216, 1 / 2430]], rtol=1e-15)


@pytest.mark.parametrize("h", [1.0, 0.1, 0.01])
def test_covariance_matches_kernels(h):
    C = increment_covariance(h)
    names = ("dW", "dU", "dV")
    for i, a in enumerate(names):
        for j, b in enumerate(names):
            floor = 1e-14 * np.sqrt(C[i, i] * C[j, j])
            assert C[i, j] == pytest.approx(_kernel_cov(a, b, h), rel=1e-12, abs=floor)


def test_covariance_positive_definite_sweep_and_determinant():
    for dt in np.logspace(-6, 1, 30):
        np.linalg.cholesky(increment_covariance(dt) / np.outer(*(2 * [[dt**0.5, dt**1.5, dt**2.5]])))
    dt = 0.1
    C = increment_covariance(dt)
    assert np.linalg.det(C[1:, 1:]) == pytest.approx(dt**8 * (1 / 29160 - 1 / 46656), rel=1e-12)
    with pytest.raises(ValueError):
        increment_covariance(0.0)


def test_derived_integrals_match_kernel_covariances():
    h = 0.3
    inc = sample_increments(1, h, rng_stream(3), (400_000,))
    for name in ("I_j0", "I_0j", "I_j00", "I_0j0"):
        y = getattr(inc, name)[:, 0]
        for ref in ("dW", "dU", "dV"):
            x = getattr(inc, ref)[:, 0]
            est = np.mean(x * y)
            se = np.std(x * y) / np.sqrt(x.size)
            assert abs(est - _kernel_cov(ref, name, h)) < 4 * se


def test_bracket_dv_law():
    h = 0.7
    ids = {"dW": np.array([1.0, 0, 0]), "dU": np.array([0, 1.0, 0]), "dV": np.array([0, 0, 1.0])}
    c = 3 * ids["dV"] + h / 6 * ids["dU"]
    C = increment_covariance(h)
    assert c @ C @ c == pytest.approx(h**5 / 720, rel=1e-12)
    assert c @ C @ ids["dW"] == 0.0
    assert abs(c @ C @ ids["dU"]) < 1e-15
    inc = sample_increments(1, h, rng_stream(1), (5,))
    np.testing.assert_allclose(inc.bracket_dV, h * h * inc.dW / 6 - h * inc.dU / 2 - inc.I_j00, atol=1e-15)


def test_zero_dt_increments():
    inc = sample_increments(2, 0.0, rng_stream(0))
    for name in ("dW", "dU", "dV", "I_j0", "I_0j", "I_j00", "I_0j0"):
        np.testing.assert_array_equal(getattr(inc, name), 0.0)


def test_sampling_moments_and_dw_du_uncorrelated():
    est, se = increment_moments(0.1, 200_000, "sampling", seed=9)
    assert np.all(np.abs(est - increment_covariance(0.1)) <= 4 * se)
    assert abs(est[0, 1]) <= 3 * se[0, 1]


def test_sampling_and_quadrature_modes_agree():
    a, sa = increment_moments(0.5, 100_000, "sampling", seed=2)
    b, sb = increment_moments(0.5, 100_000, "quadrature", seed=2, ratio=64)
    for i, j in [(1, 1), (2, 2), (1, 2)]:
        assert abs(a[i, j] - b[i, j]) <= 3 * np.hypot(sa[i, j], sb[i, j])


def test_scaling_law():
    c = 4.0
    a = sample_increments(1, 0.05, rng_stream(7), (1000,))
    b = sample_increments(1, 0.05 * c, rng_stream(7), (1000,))
    np.testing.assert_allclose(b.dW, np.sqrt(c) * a.dW, rtol=1e-13)
    np.testing.assert_allclose(b.dU, c**1.5 * a.dU, rtol=1e-12)
    np.testing.assert_allclose(b.dV, c**2.5 * a.dV, rtol=1e-12)


@settings(max_examples=50, deadline=None)
@given(dt=st.floats(1e-4, 2.0), seed=st.integers(0, 10**6))
def test_basis_and_integral_views_round_trip(dt, seed):
    inc = sample_increments(2, dt, rng_stream(seed), (3,))
    back = StepIncrements.from_integrals(dt, inc.dW, inc.I_j0, inc.I_j00, inc.I_0j0)
    scale = np.sqrt(dt) * (1 + dt) ** 3
    np.testing.assert_allclose(back.dU, inc.dU, atol=1e-12 * scale)
    np.testing.assert_allclose(back.dV, inc.dV, atol=1e-11 * scale)
    np.testing.assert_array_equal(inc.I_j0, dt * inc.dW - inc.I_0j)


def test_missing_increment():
    inc = StepIncrements(0.1, np.zeros(1))
    with pytest.raises(MissingIncrementError):
        inc.require("I_j0")
    with pytest.raises(MissingIncrementError):
        _ = inc.bracket_dV


def test_generate_path_shape_and_determinism():
    p = generate_path(1, 1.0, 2.0**-3, seed=5)
    assert p.W.shape == (9, 1) and p.m == 8 and p.W[0, 0] == 0.0
    q = generate_path(1, 1.0, 2.0**-3, seed=5)
    assert np.array_equal(p.W, q.W)
    with pytest.raises(ValueError):
        generate_path(1, 1.0, 0.3, seed=1)
    with pytest.raises(OverflowError):
        generate_path(1, 1.0, 2.0**-40, seed=1)


def test_path_terminal_variance():
    T = 0.5
    ends = np.array([generate_path(1, T, 0.25, path_seed(3, p)).W[-1, 0] for p in range(100_000)])
    assert abs(ends.var() - T) < 3 * T * np.sqrt(2 / ends.size)


def test_path_dump_load(tmp_path):
    p = generate_path(3, 1.0, 2.0**-6, seed=2**63 + 11)
    save_path(p, tmp_path / "w.bin")
    q = load_path(tmp_path / "w.bin")
    assert (q.n, q.delta, q.m, q.seed) == (p.n, p.delta, p.m, p.seed)
    assert np.array_equal(q.W, p.W)
    raw = (tmp_path / "w.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"X" + raw[1:])
    with pytest.raises(ValueError):
        load_path(tmp_path / "bad.bin")


def test_streams_are_reproducible_and_distinct():
    a = rng_stream(1, 0).standard_normal(4)
    assert np.array_equal(a, rng_stream(1, 0).standard_normal(4))
    assert not np.array_equal(a, rng_stream(1, 1).standard_normal(4))
    assert path_seed(1, 0) != path_seed(1, 1)


def test_simpson_weights():
    w = simpson_weights(4, 0.5)
    np.testing.assert_allclose(w, np.array([1, 4, 2, 4, 1]) * 0.5 / 3)
    with pytest.raises(ValueError):
        simpson_weights(3, 0.1)


def _path_from(fn, dt, r):
    delta = dt / r
    t = np.arange(r + 1) * delta
    return BrownianPath(1, delta, r, fn(t)[:, None], 0)


def test_quadrature_zero_path():
    inc = integrals_from_path(_path_from(lambda t: 0 * t, 0.5, 16), 0, 0.5)
    for name in ("dW", "I_j0", "I_0j", "I_j00", "I_0j0", "dU", "dV"):
        assert getattr(inc, name)[0] == 0.0


@pytest.mark.parametrize("dt", [0.5, 2.0])
def test_quadrature_linear_path(dt):
    inc = integrals_from_path(_path_from(lambda t: t, dt, 16), 0, dt)
    assert inc.I_j0[0] == pytest.approx(dt**2 / 2, rel=1e-14)
    assert inc.I_0j[0] == pytest.approx(dt**2 / 2, rel=1e-14)
    assert inc.I_j00[0] == pytest.approx(dt**3 / 6, rel=1e-14)
    assert inc.I_0j0[0] == pytest.approx(dt**3 / 6, rel=1e-14)


def test_quadrature_window_alignment_and_k():
    p = generate_path(2, 1.0, 2.0**-6, seed=1)
    inc = integrals_from_path(p, 3, 0.125)
    np.testing.assert_array_equal(inc.dW, p.W[32] - p.W[24])
    with pytest.raises(ValueError):
        integrals_from_path(p, 8, 0.125)
    with pytest.raises(ValueError):
        integrals_from_path(p, 0, 3 * 2.0**-6)
    with pytest.raises(ValueError):
        integrals_from_path(p, 0, 0.1)


def test_quadrature_variance_of_I_j0():
    dt, r, N = 0.2, 32, 100_000
    rng = rng_stream(4)
    W = np.zeros((N, r + 1, 1))
    W[:, 1:] = np.cumsum(np.sqrt(dt / r) * rng.standard_normal((N, r, 1)), axis=1)
    inc = window_integrals(W, dt / r, dt)
    v = inc.I_j0[:, 0, 0] ** 2
    assert abs(v.mean() - dt**3 / 3) < 3 * v.std() / np.sqrt(N)


def test_ou_covariance_gamma_zero():
    S = np.array([[1.0, 0.0], [0.3, 0.5]])
    h = 0.4
    C = ou_integral_covariance(np.zeros((2, 2)), S, h)
    SS = S @ S.T
    np.testing.assert_allclose(C[:2, :2], SS * h, rtol=1e-12)
    np.testing.assert_allclose(C[:2, 2:], SS * h**2 / 2, rtol=1e-12)
    np.testing.assert_allclose(C[2:, 2:], SS * h**3 / 3, rtol=1e-12)


def test_ou_covariance_scalar():
    C = ou_integral_covariance(np.eye(1), np.eye(1), 1.0)
    assert C[0, 0] == pytest.approx((1 - np.exp(-2)) / 2, rel=1e-12)
    assert C[0, 0] == pytest.approx(0.43233, abs=1e-5)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 10**6), h=st.floats(1e-3, 1.0))
def test_ou_covariance_symmetric_psd(seed, h):
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((3, 3))
    G = A @ A.T
    S = rng.standard_normal((3, 3))
    C = ou_integral_covariance(G, S, h)
    np.testing.assert_allclose(C, C.T, atol=1e-15 * np.abs(C).max())
    assert np.linalg.eigvalsh(C).min() > -1e-12 * np.abs(C).max()


def test_ou_sampling_and_quadrature_match_covariance():
    G = np.array([[2.0, 0.5], [0.0, 1.0]])
    S = np.array([[1.0, 0.0], [0.2, 0.7]])
    h, N = 0.5, 100_000
    C = ou_integral_covariance(G, S, h)
    ou = sample_ou_noise(G, S, h, rng_stream(1), (N,))
    y = np.concatenate([ou.v, ou.x], axis=-1)
    est = y.T @ y / N
    se = np.sqrt(np.var(y[:, :, None] * y[:, None, :], axis=0) / N)
    assert np.all(np.abs(est - C) <= 4 * se)

    r = 64
    rng = rng_stream(2)
    W = np.zeros((N, r + 1, 2))
    W[:, 1:] = np.cumsum(np.sqrt(h / r) * rng.standard_normal((N, r, 2)), axis=1)
    q = ou_window_integrals(W, h / r, h, G, S)
    y = np.concatenate([q.v[:, 0], q.x[:, 0]], axis=-1)
    est = y.T @ y / N
    se = np.sqrt(np.var(y[:, :, None] * y[:, None, :], axis=0) / N)
    assert np.all(np.abs(est - C) <= 4 * se)


def test_legendre_representation_is_exact_for_polynomial_kernels():
    h = 0.3
    leg = LegendreNoise(h, degree=6)
    names = ("dW", "dU", "dV")
    coefs = {k: leg.coefficients(lambda s, k=k: KERNELS[k](np.asarray(s), h)) for k in names}
    C = np.array([[coefs[a] @ coefs[b] for b in names] for a in names])
    ref = increment_covariance(h)
    floor = 1e-14 * np.sqrt(np.outer(np.diag(ref), np.diag(ref)))
    assert np.all(np.abs(C - ref) <= 1e-12 * np.abs(ref) + floor)


def test_legendre_ou_matches_covariance():
    G = np.array([[3.0]])
    S = np.array([[1.5]])
    h = 0.25
    leg = LegendreNoise(h, degree=12)
    Z = np.eye(13)[:, :, None]  # unit vectors pick out one coefficient each
    inc = leg.increments(Z, G, S)
    y = np.concatenate([inc.ou.v, inc.ou.x], axis=-1)
    np.testing.assert_allclose(y.T @ y, ou_integral_covariance(G, S, h), rtol=1e-10)
