"""Shared domain types and small dense linear-algebra kernels.

The Langevin system integrated throughout the package is

    x' = v,    v' = f(x) - Gamma v + sigma W'(t)

with constant ``n x n`` friction ``Gamma`` and noise amplitude ``sigma``.
States may carry leading batch dimensions: ``x`` and ``v`` have shape
``(..., n)`` and every kernel acts on the trailing axis.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.linalg import expm

__all__ = [
    "LangevinError",
    "NonFiniteStateError",
    "LangevinModel",
    "PhaseState",
    "mat_exp",
    "phi_functions",
    "phi1",
    "phi2",
    "cholesky",
    "matvec",
]

ForceFn = Callable[[np.ndarray], np.ndarray]
JvpFn = Callable[[np.ndarray, np.ndarray], np.ndarray]


class LangevinError(Exception):
    """Base class for errors raised by this package."""


class NonFiniteStateError(LangevinError, FloatingPointError):
    """A step produced NaN or infinite entries."""


def _as_square(M, name: str = "M") -> np.ndarray:
    M = np.asarray(M, dtype=float)
    if M.ndim == 0:
        M = M.reshape(1, 1)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"{name} must be a square matrix, got shape {M.shape}")
    if not np.all(np.isfinite(M)):
        raise ValueError(f"{name} has non-finite entries")
    return M


def matvec(M: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Apply ``M`` to the trailing axis of a (possibly batched) vector array."""
    return u @ M.T


@dataclass(frozen=True, eq=False)
class LangevinModel:
    """Additive-noise Langevin system.

    Attributes:
        n: Dimension of the position (and velocity) vector.
        force: Conservative force ``f``; maps arrays of shape ``(..., n)`` to
            the same shape.
        gamma: Constant friction matrix.
        sigma: Constant noise matrix; column ``j`` multiplies ``dW^j``.
        jvp: Optional directional derivative ``(x, u) -> Df(x) u``. When
            absent a finite-difference product is used instead.
        d2f: Optional second directional derivative ``(x, u) -> D^2 f(x)[u, u]``,
            used by the third-order Taylor scheme.
        name: Label used in reports.
    """

    n: int
    force: ForceFn
    gamma: np.ndarray
    sigma: np.ndarray
    jvp: Optional[JvpFn] = None
    name: str = "model"
    d2f: Optional[JvpFn] = None

    def __post_init__(self):
        if int(self.n) <= 0:
            raise ValueError("n must be positive")
        gamma = _as_square(self.gamma, "gamma")
        sigma = _as_square(self.sigma, "sigma")
        for name, mat in (("gamma", gamma), ("sigma", sigma)):
            if mat.shape != (self.n, self.n):
                raise ValueError(f"{name} must be {self.n}x{self.n}, got {mat.shape}")
        gamma.setflags(write=False)
        sigma.setflags(write=False)
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "gamma", gamma)
        object.__setattr__(self, "sigma", sigma)

    def f(self, x: np.ndarray) -> np.ndarray:
        out = np.asarray(self.force(x), dtype=float)
        if out.shape != np.shape(x):
            raise ValueError(f"force returned shape {out.shape} for input {np.shape(x)}")
        return out

    def drift_matrix(self, stiffness: Optional[np.ndarray] = None) -> np.ndarray:
        """Return the ``2n x 2n`` linear drift ``[[0, I], [-K, -Gamma]]``.

        Only meaningful for linear forces ``f(x) = -K x``.
        """
        n = self.n
        K = np.zeros((n, n)) if stiffness is None else np.asarray(stiffness, float)
        top = np.hstack([np.zeros((n, n)), np.eye(n)])
        bottom = np.hstack([-K, -self.gamma])
        return np.vstack([top, bottom])


@dataclass(frozen=True)
class PhaseState:
    """Position/velocity pair; arrays of shape ``(..., n)``."""

    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        v = np.asarray(self.v, dtype=float)
        if x.shape != v.shape:
            raise ValueError(f"x and v shapes differ: {x.shape} vs {v.shape}")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)

    @property
    def n(self) -> int:
        return self.x.shape[-1]

    def stacked(self) -> np.ndarray:
        """Concatenate ``(x, v)`` along the trailing axis."""
        return np.concatenate([self.x, self.v], axis=-1)

    def is_finite(self) -> np.ndarray:
        return np.isfinite(self.x).all(axis=-1) & np.isfinite(self.v).all(axis=-1)

    def check_finite(self) -> "PhaseState":
        if not (np.all(np.isfinite(self.x)) and np.all(np.isfinite(self.v))):
            raise NonFiniteStateError("state contains NaN or Inf")
        return self


def mat_exp(M) -> np.ndarray:
    """Matrix exponential (scaling and squaring with Pade approximants)."""
    return expm(_as_square(M))


def phi_functions(M) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Return ``(exp(M), phi1(M), phi2(M))``.

    ``phi1(M) = M^{-1}(e^M - I)`` and ``phi2(M) = M^{-2}(e^M - I - M)`` are read
    off the first block row of the exponential of the augmented matrix
    ``[[M, I, 0], [0, 0, I], [0, 0, 0]]``, so no inverse of ``M`` is formed and
    singular ``M`` (including ``M = 0``) is handled exactly.
    """
    M = _as_square(M)
    n = M.shape[0]
    aug = np.zeros((3 * n, 3 * n))
    aug[:n, :n] = M
    aug[:n, n:2 * n] = np.eye(n)
    aug[n:2 * n, 2 * n:] = np.eye(n)
    E = expm(aug)
    return E[:n, :n].copy(), E[:n, n:2 * n].copy(), E[:n, 2 * n:].copy()


def phi1(M) -> np.ndarray:
    return phi_functions(M)[1]


def phi2(M) -> np.ndarray:
    return phi_functions(M)[2]


def cholesky(S, tol: float = 1e-12) -> np.ndarray:
    """Lower-triangular factor ``L`` with ``L @ L.T == S``.

    Positive-definite input goes through LAPACK. Semi-definite input falls
    back to an outer-product factorisation that zeroes columns whose pivot is
    below ``tol * max(diag(S))``.

    Raises:
        np.linalg.LinAlgError: if ``S`` has a negative pivot beyond tolerance.
    """
    S = _as_square(S, "S")
    if not np.allclose(S, S.T, rtol=1e-12, atol=1e-300):
        raise ValueError("S must be symmetric")
    try:
        return np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        pass
    k = S.shape[0]
    scale = max(float(np.max(np.abs(np.diag(S)))), 0.0)
    thresh = tol * scale
    A = S.copy()
    L = np.zeros_like(A)
    for j in range(k):
        d = A[j, j]
        if d < -thresh:
            raise np.linalg.LinAlgError(f"matrix is indefinite (pivot {d:.3e} at {j})")
        if d <= thresh:
            continue
        L[j:, j] = A[j:, j] / np.sqrt(d)
        A[j:, j:] -= np.outer(L[j:, j], L[j:, j])
    return L
