"""Stochastic increments for one integration step.

Two production routes feed the schemes:

* analytic joint-Gaussian sampling of ``(dW, dU, dV)`` per noise component
  (:func:`sample_increments`) and of the two Ornstein-Uhlenbeck integrals
  (:func:`sample_ou_noise`);
* extraction from a fine Brownian path by composite Simpson quadrature
  (:func:`window_integrals`, :func:`ou_window_integrals`), used when every
  scheme and the reference solution must follow the same realisation.

Every stochastic quantity here is a Wiener integral ``int_0^h k(s) dW_s``
with a deterministic kernel ``k``. On a step of length ``h`` the kernels
used are (``s`` measured from the start of the step)::

    dW      1
    I_j0    h - s                 I_0j   s
    I_j00   (h - s)^2 / 2         I_0j0  s (h - s)
    dU      s - h/2               dV     (h s - 3 s^2 / 2) / 9

so ``(dW, dU, dV)`` determines all the others exactly. Integrating by parts,
each of these equals ``int_0^h p(s) W_s ds`` for a polynomial ``p`` of degree
at most one (plus a boundary term), which composite Simpson integrates
without error on the piecewise-quadratic interpolant of the fine samples.
That interpolant is therefore the driving path in coupled mode.
"""

from __future__ import annotations

import functools
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from .core import LangevinError, cholesky, matvec, phi_functions

__all__ = [
    "MissingIncrementError",
    "OUNoise",
    "StepIncrements",
    "BrownianPath",
    "rng_stream",
    "path_seed",
    "increment_covariance",
    "sample_increments",
    "generate_path",
    "simpson_weights",
    "window_integrals",
    "integrals_from_path",
    "ou_integral_covariance",
    "sample_ou_noise",
    "ou_window_integrals",
    "LegendreNoise",
    "save_path",
    "load_path",
    "increment_moments",
]

MAX_FINE_STEPS = 2**34
_PATH_MAGIC = b"BMPATH01"
_PATH_HEADER = struct.Struct("<8sqdqQ")


class MissingIncrementError(LangevinError, KeyError):
    """A scheme asked for an increment the sampler did not provide."""


@dataclass(frozen=True)
class OUNoise:
    """The two exponentially weighted noise integrals of the B sub-flow.

    ``v = int_0^h exp(-Gamma (h - s)) sigma dW_s`` and
    ``x = int_0^h int_0^t exp(-Gamma (t - s)) sigma dW_s dt``.
    """

    v: np.ndarray
    x: np.ndarray

    def __getitem__(self, idx) -> "OUNoise":
        return OUNoise(self.v[idx], self.x[idx])


@dataclass(frozen=True)
class StepIncrements:
    """Stochastic quantities for one step of length ``dt``.

    Arrays have shape ``(..., n)``. ``dU = I_0j - dt dW / 2`` and
    ``dV = (I_0j0 - I_j00 - dt dU) / 9``.
    """

    dt: float
    dW: np.ndarray
    I_j0: Optional[np.ndarray] = None
    I_0j: Optional[np.ndarray] = None
    dU: Optional[np.ndarray] = None
    dV: Optional[np.ndarray] = None
    I_j00: Optional[np.ndarray] = None
    I_0j0: Optional[np.ndarray] = None
    ou: Optional[OUNoise] = field(default=None, compare=False)

    @classmethod
    def from_basis(cls, dt, dW, dU, dV, ou=None) -> "StepIncrements":
        """Fill every integral from ``(dW, dU, dV)`` through the kernel identities."""
        dt = float(dt)
        I_0j = dU + 0.5 * dt * dW
        I_j0 = dt * dW - I_0j
        I_j00 = dt * dt / 6.0 * dW - (2.0 * dt / 3.0) * dU - 3.0 * dV
        I_0j0 = 9.0 * dV + I_j00 + dt * dU
        return cls(dt, dW, I_j0, I_0j, dU, dV, I_j00, I_0j0, ou)

    @classmethod
    def from_integrals(cls, dt, dW, I_j0, I_j00=None, I_0j0=None, ou=None) -> "StepIncrements":
        dt = float(dt)
        I_0j = dt * dW - I_j0
        dU = I_0j - 0.5 * dt * dW
        dV = None
        if I_j00 is not None and I_0j0 is not None:
            dV = (I_0j0 - I_j00 - dt * dU) / 9.0
        return cls(dt, dW, I_j0, I_0j, dU, dV, I_j00, I_0j0, ou)

    @property
    def bracket_dV(self) -> np.ndarray:
        """Coefficient of the triple bracket ``[[X0, Xj], X0]`` in the Kunita exponent.

        Equals ``dt^2 dW / 6 - dt dU / 2 - I_j00``, i.e. the Wiener integral of
        ``-(1/2)((s - h/2)^2 - h^2/12)``: independent of ``dW`` and ``dU`` with
        variance ``dt^5 / 720``. In terms of ``dV`` it is ``3 dV + dt dU / 6``.
        """
        self.require("dV")
        return 3.0 * self.dV + self.dt * self.dU / 6.0

    def require(self, *names: str) -> "StepIncrements":
        for name in names:
            if getattr(self, name) is None:
                raise MissingIncrementError(f"increment {name!r} not available")
        return self

    def __getitem__(self, idx) -> "StepIncrements":
        """Slice every array field along the leading (batch/step) axes."""

        def take(a):
            return None if a is None else a[idx]

        return replace(
            self,
            dW=self.dW[idx], I_j0=take(self.I_j0), I_0j=take(self.I_0j), dU=take(self.dU),
            dV=take(self.dV), I_j00=take(self.I_j00), I_0j0=take(self.I_0j0),
            ou=None if self.ou is None else self.ou[idx],
        )

    def with_ou(self, ou: OUNoise) -> "StepIncrements":
        return replace(self, ou=ou)


# --------------------------------------------------------------------------- RNG

def rng_stream(seed: int, path_index: int = 0) -> np.random.Generator:
    """Counter-based (Philox) generator keyed by ``(seed, path_index)``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(path_index)])
    return np.random.Generator(np.random.Philox(ss))


def path_seed(seed: int, path_index: int) -> int:
    """64-bit seed of fine path number ``path_index`` within a run seeded by ``seed``."""
    ss = np.random.SeedSequence([int(seed) & 0xFFFFFFFFFFFFFFFF, int(path_index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


# ---------------------------------------------------------------- (dW, dU, dV)

def increment_covariance(dt: float) -> np.ndarray:
    """Per-component covariance of ``(dW, dU, dV)`` on a step of length ``dt``."""
    dt = float(dt)
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return np.array([
        [dt, 0.0, 0.0],
        [0.0, dt**3 / 12.0, -dt**4 / 216.0],
        [0.0, -dt**4 / 216.0, dt**5 / 2430.0],
    ])


@functools.lru_cache(maxsize=None)
def _unit_increment_factor() -> np.ndarray:
    L = cholesky(increment_covariance(1.0))
    L.setflags(write=False)
    return L


def sample_increments(n: int, dt: float, stream: np.random.Generator,
                      size: Sequence[int] = ()) -> StepIncrements:
    """Draw ``(dW, dU, dV)`` jointly and derive the remaining integrals.

    Components are independent; within a component the triple has covariance
    :func:`increment_covariance`. The factor at ``dt`` is the ``dt = 1`` factor
    rescaled by ``diag(dt^0.5, dt^1.5, dt^2.5)``.
    """
    size = tuple(np.atleast_1d(size).astype(int)) if np.size(size) else ()
    dt = float(dt)
    if dt < 0:
        raise ValueError(f"dt must be non-negative, got {dt}")
    z = stream.standard_normal(size + (n, 3))
    if dt == 0.0:
        zero = np.zeros(size + (n,))
        return StepIncrements.from_basis(0.0, zero, zero.copy(), zero.copy())
    trio = z @ _unit_increment_factor().T
    trio *= np.array([dt**0.5, dt**1.5, dt**2.5])
    return StepIncrements.from_basis(dt, trio[..., 0], trio[..., 1], trio[..., 2])


# ------------------------------------------------------------------ fine paths

@dataclass(frozen=True, eq=False)
class BrownianPath:
    """Brownian samples ``W[i] = W(i * delta)`` with ``W[0] = 0``; shape ``(m+1, n)``."""

    n: int
    delta: float
    m: int
    W: np.ndarray
    seed: int

    @property
    def T(self) -> float:
        return self.m * self.delta


def _integer_ratio(a: float, b: float, what: str) -> int:
    q = a / b
    k = int(round(q))
    if k <= 0 or abs(q - k) > 1e-9 * max(1.0, q):
        raise ValueError(f"{what}: {a!r} / {b!r} = {q!r} is not a positive integer")
    return k


def generate_path(n: int, T: float, delta: float, seed: int) -> BrownianPath:
    """Brownian path on ``[0, T]`` at spacing ``delta``, reproducible from ``seed``."""
    m = _integer_ratio(T, delta, "T/delta")
    if m > MAX_FINE_STEPS:
        raise OverflowError(f"m = {m} fine steps exceeds {MAX_FINE_STEPS}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(int(seed))))
    W = np.zeros((m + 1, n))
    np.cumsum(np.sqrt(delta) * rng.standard_normal((m, n)), axis=0, out=W[1:])
    W.setflags(write=False)
    return BrownianPath(int(n), float(delta), m, W, int(seed))


def save_path(path: BrownianPath, target) -> None:
    """Write ``path`` as a little-endian header (n, delta, m, seed) plus float64 payload."""
    with open(target, "wb") as fh:
        fh.write(_PATH_HEADER.pack(_PATH_MAGIC, path.n, path.delta, path.m, path.seed))
        fh.write(np.ascontiguousarray(path.W, dtype="<f8").tobytes())


def load_path(source) -> BrownianPath:
    raw = Path(source).read_bytes()
    magic, n, delta, m, seed = _PATH_HEADER.unpack_from(raw)
    if magic != _PATH_MAGIC:
        raise ValueError("not a Brownian path file")
    W = np.frombuffer(raw, dtype="<f8", offset=_PATH_HEADER.size)
    if W.size != (m + 1) * n:
        raise ValueError(f"payload has {W.size} values, expected {(m + 1) * n}")
    W = W.reshape(m + 1, n).astype(float)
    W.setflags(write=False)
    return BrownianPath(n, delta, m, W, seed)


# --------------------------------------------------------------- quadrature

def simpson_weights(r: int, delta: float) -> np.ndarray:
    """Composite Simpson weights for ``r`` panels of width ``delta`` (``r`` even)."""
    if r < 2 or r % 2:
        raise ValueError(f"Simpson needs an even panel count, got {r}")
    w = np.ones(r + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (delta / 3.0)


def panel_ratio(dt: float, delta: float) -> int:
    r = _integer_ratio(dt, delta, "dt/delta")
    if r % 2:
        raise ValueError(f"dt/delta = {r} must be even for Simpson quadrature")
    return r


def _windows(W: np.ndarray, r: int, start: int = 0, count: Optional[int] = None) -> np.ndarray:
    """Relative window views ``W[kr + i] - W[kr]``, shape ``(..., N, r+1, n)``."""
    m = W.shape[-2] - 1
    total = m // r
    count = total - start if count is None else count
    if start < 0 or count < 0 or (start + count) * r > m:
        raise ValueError(f"windows [{start}, {start + count}) of {r} panels exceed path of {m} steps")
    idx = (start + np.arange(count))[:, None] * r + np.arange(r + 1)[None, :]
    Wk = W[..., idx, :]
    return Wk - Wk[..., :1, :]


def window_integrals(W: np.ndarray, delta: float, dt: float, start: int = 0,
                     count: Optional[int] = None) -> StepIncrements:
    """Multiple integrals on consecutive coarse windows of fine samples ``W``.

    ``W`` has shape ``(..., m+1, n)``; the result has shape ``(..., N, n)``.
    ``dW`` is read from the window end points, ``I_j0``, ``I_j00`` and ``I_0j0``
    come from Simpson quadrature of ``p(s) W_s`` and ``I_0j`` from the exact
    identity ``I_0j + I_j0 = dt dW``.
    """
    r = panel_ratio(dt, delta)
    h = r * delta
    w = simpson_weights(r, delta)
    s = np.arange(r + 1) * delta
    Wr = _windows(np.asarray(W, float), r, start, count)
    dW = Wr[..., -1, :]
    I_j0 = np.einsum("i,...in->...n", w, Wr)
    I_j00 = np.einsum("i,...in->...n", w * (h - s), Wr)
    I_0j0 = np.einsum("i,...in->...n", w * (2.0 * s - h), Wr)
    return StepIncrements.from_integrals(h, dW, I_j0, I_j00, I_0j0)


def integrals_from_path(path: BrownianPath, k: int, dt: float) -> StepIncrements:
    """Increments of coarse step ``k`` (window ``[k dt, (k+1) dt]``) of ``path``."""
    return window_integrals(path.W, path.delta, dt, start=k, count=1)[0]


# ------------------------------------------------------ Ornstein-Uhlenbeck noise

def _ou_kernels(gamma: np.ndarray, r: float) -> tuple[np.ndarray, np.ndarray]:
    """``exp(-Gamma r)`` and ``int_0^r exp(-Gamma u) du`` for lag ``r``."""
    E, P1, _ = phi_functions(-gamma * r)
    return E, r * P1


def _ou_cov_gl(gamma, sigma, dt, nodes):
    x, wq = np.polynomial.legendre.leggauss(nodes)
    lags = 0.5 * dt * (x + 1.0)
    wq = 0.5 * dt * wq
    n = gamma.shape[0]
    C = np.zeros((2 * n, 2 * n))
    for r, wr in zip(lags, wq):
        E, K2 = _ou_kernels(gamma, r)
        G = np.vstack([E @ sigma, K2 @ sigma])
        C += wr * (G @ G.T)
    return C


@functools.lru_cache(maxsize=256)
def _ou_cov_cached(gbytes: bytes, sbytes: bytes, n: int, dt: float) -> np.ndarray:
    gamma = np.frombuffer(gbytes).reshape(n, n)
    sigma = np.frombuffer(sbytes).reshape(n, n)
    nodes = 16
    C = _ou_cov_gl(gamma, sigma, dt, nodes)
    while True:
        nodes *= 2
        C2 = _ou_cov_gl(gamma, sigma, dt, nodes)
        scale = max(np.max(np.abs(C2)), 1e-300)
        if np.max(np.abs(C2 - C)) <= 1e-13 * scale:
            C2.setflags(write=False)
            return C2
        if nodes >= 1024:
            raise LangevinError(f"OU covariance quadrature did not converge (dt={dt})")
        C = C2


def ou_integral_covariance(gamma, sigma, dt: float) -> np.ndarray:
    """Joint covariance of the OU noise pair ``(v, x)`` of :class:`OUNoise`.

    Gauss-Legendre quadrature over the lag, doubling the node count until two
    successive estimates agree to 1e-13 relative. Cached per ``(Gamma, sigma, dt)``.
    Returns a ``2n x 2n`` matrix ordered ``[v; x]``.
    """
    dt = float(dt)
    if not dt > 0:
        raise ValueError(f"dt must be positive, got {dt}")
    gamma = np.ascontiguousarray(gamma, dtype=float)
    sigma = np.ascontiguousarray(sigma, dtype=float)
    n = gamma.shape[0]
    return _ou_cov_cached(gamma.tobytes(), sigma.tobytes(), n, dt)


@functools.lru_cache(maxsize=256)
def _ou_factor_cached(gbytes, sbytes, n, dt):
    C = _ou_cov_cached(gbytes, sbytes, n, dt)
    d = np.concatenate([np.full(n, dt**0.5), np.full(n, dt**1.5)])
    L = d[:, None] * cholesky(C / np.outer(d, d), tol=1e-13)
    L.setflags(write=False)
    return L


def sample_ou_noise(gamma, sigma, dt: float, stream: np.random.Generator,
                    size: Sequence[int] = ()) -> OUNoise:
    """Exact joint Gaussian draw of the OU noise pair for one step."""
    gamma = np.ascontiguousarray(gamma, dtype=float)
    sigma = np.ascontiguousarray(sigma, dtype=float)
    n = gamma.shape[0]
    ou_integral_covariance(gamma, sigma, dt)
    L = _ou_factor_cached(gamma.tobytes(), sigma.tobytes(), n, float(dt))
    size = tuple(np.atleast_1d(size).astype(int)) if np.size(size) else ()
    y = stream.standard_normal(size + (2 * n,)) @ L.T
    return OUNoise(y[..., :n], y[..., n:])


@functools.lru_cache(maxsize=64)
def _ou_quadrature_weights(gbytes, n, r, delta):
    gamma = np.frombuffer(gbytes).reshape(n, n)
    w = simpson_weights(r, delta)
    h = r * delta
    out = np.empty((r + 1, n, n))
    for i in range(r + 1):
        out[i] = w[i] * _ou_kernels(gamma, h - i * delta)[0]
    out.setflags(write=False)
    return out


def ou_window_integrals(W: np.ndarray, delta: float, dt: float, gamma, sigma,
                        start: int = 0, count: Optional[int] = None) -> OUNoise:
    """OU noise pair on coarse windows of fine samples (Simpson, after integrating by parts).

    ``x = int exp(-Gamma (h - s)) sigma W_s ds`` and ``v = sigma dW - Gamma x``.
    """
    gamma = np.ascontiguousarray(gamma, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    n = gamma.shape[0]
    r = panel_ratio(dt, delta)
    wE = _ou_quadrature_weights(gamma.tobytes(), n, r, float(delta))
    Y = matvec(sigma, _windows(np.asarray(W, float), r, start, count))
    x = np.einsum("iab,...ib->...a", wE, Y)
    v = Y[..., -1, :] - matvec(gamma, x)
    return OUNoise(v, x)


# ------------------------------------------------------- Legendre representation

class LegendreNoise:
    """Brownian motion on one step expanded in orthonormal shifted Legendre polynomials.

    With ``p_k`` orthonormal on ``[0, h]`` the coordinates
    ``Z_k = int_0^h p_k(s) dW_s`` are i.i.d. standard normal, and any Wiener
    integral is ``int g dW = sum_k <g, p_k> Z_k``. Truncating at ``degree``
    drops only the components of ``g`` beyond that degree, so polynomial
    kernels of degree <= 2 (all of :class:`StepIncrements`) are exact and
    smooth kernels such as ``exp(M (h - s))`` are accurate to
    ``(|M| h)^(degree+1) / (degree+1)!``.
    """

    def __init__(self, dt: float, degree: int = 12, nodes: int = 48):
        self.dt = float(dt)
        self.degree = int(degree)
        x, w = np.polynomial.legendre.leggauss(nodes)
        self.s = 0.5 * self.dt * (x + 1.0)
        self.w = 0.5 * self.dt * w
        V = np.polynomial.legendre.legvander(x, self.degree)
        self.basis = V * np.sqrt((2 * np.arange(self.degree + 1) + 1) / self.dt)

    def coefficients(self, kernel: Callable[[float], np.ndarray]) -> np.ndarray:
        """Coefficients ``<g, p_k>`` of a (matrix-valued) kernel, shape ``(degree+1, *g.shape)``."""
        vals = np.array([np.asarray(kernel(s), float) for s in self.s])
        return np.einsum("q,qk,q...->k...", self.w, self.basis, vals)

    def draw(self, stream: np.random.Generator, n: int, size: Sequence[int] = ()) -> np.ndarray:
        size = tuple(np.atleast_1d(size).astype(int)) if np.size(size) else ()
        return stream.standard_normal(size + (self.degree + 1, n))

    @staticmethod
    def integrate(coef: np.ndarray, Z: np.ndarray) -> np.ndarray:
        """``sum_k coef_k Z_k`` for scalar (``(K,)``) or matrix (``(K, q, n)``) coefficients."""
        if coef.ndim == 1:
            return np.einsum("k,...kn->...n", coef, Z)
        return np.einsum("kqn,...kn->...q", coef, Z)

    def increments(self, Z: np.ndarray, gamma=None, sigma=None) -> StepIncrements:
        h = self.dt
        dW = self.integrate(self.coefficients(lambda s: 1.0), Z)
        dU = self.integrate(self.coefficients(lambda s: s - 0.5 * h), Z)
        dV = self.integrate(self.coefficients(lambda s: (h * s - 1.5 * s * s) / 9.0), Z)
        ou = None
        if gamma is not None and sigma is not None:
            gamma = np.asarray(gamma, float)
            sigma = np.asarray(sigma, float)
            cv = self.coefficients(lambda s: _ou_kernels(gamma, h - s)[0] @ sigma)
            cx = self.coefficients(lambda s: _ou_kernels(gamma, h - s)[1] @ sigma)
            ou = OUNoise(self.integrate(cv, Z), self.integrate(cx, Z))
        return StepIncrements.from_basis(h, dW, dU, dV, ou)


# --------------------------------------------------------------- self-check

def increment_moments(dt: float, n_samples: int, mode: str = "sampling", seed: int = 0,
                      ratio: int = 128, chunk: int = 100_000) -> tuple[np.ndarray, np.ndarray]:
    """Monte-Carlo second moments of ``(dW, dU, dV)`` and their standard errors.

    ``mode='sampling'`` uses :func:`sample_increments`; ``mode='quadrature'``
    extracts each sample from an independent fine path of ``ratio`` panels.
    The means are known to be zero, so raw second moments are used and the
    standard error of entry ``(a, b)`` is ``std(y_a y_b) / sqrt(N)``.
    """
    if mode not in ("sampling", "quadrature"):
        raise ValueError(f"mode must be 'sampling' or 'quadrature', got {mode!r}")
    if n_samples < 2:
        raise ValueError("need at least two samples")
    stream = rng_stream(seed, 0 if mode == "sampling" else 1)
    delta = dt / ratio
    s1 = np.zeros((3, 3))
    s2 = np.zeros((3, 3))
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        if mode == "sampling":
            inc = sample_increments(1, dt, stream, (k,))
        else:
            W = np.zeros((k, ratio + 1, 1))
            np.cumsum(np.sqrt(delta) * stream.standard_normal((k, ratio, 1)), axis=1, out=W[:, 1:])
            inc = window_integrals(W, delta, dt)
        y = np.stack([inc.dW, inc.dU, inc.dV], axis=-1).reshape(k, 3)
        prod = y[:, :, None] * y[:, None, :]
        s1 += prod.sum(axis=0)
        s2 += (prod * prod).sum(axis=0)
        done += k
    mean = s1 / n_samples
    var = (s2 - n_samples * mean * mean) / (n_samples - 1)
    return mean, np.sqrt(np.maximum(var, 0.0) / n_samples)
