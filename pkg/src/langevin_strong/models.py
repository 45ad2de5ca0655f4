"""Test systems: pendulum, seven-particle Lennard-Jones cluster, harmonic oscillator."""

from __future__ import annotations

import functools
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping, Optional

import numpy as np

from .core import LangevinError, LangevinModel, PhaseState, cholesky, mat_exp

__all__ = [
    "CollisionError",
    "ModelSpec",
    "pendulum_model",
    "lj_energy",
    "lj_force",
    "lj7_initial_positions",
    "lj7_model",
    "harmonic_model",
    "harmonic_exact_moments",
    "noise_from_temperature",
    "MODELS",
    "build_model",
]

LJ_MINIMUM = 2.0 ** (1.0 / 6.0)
COLLISION_RADIUS = 0.1


class CollisionError(LangevinError, FloatingPointError):
    """Two Lennard-Jones particles came closer than the collision radius."""


@dataclass(frozen=True, eq=False)
class ModelSpec:
    """A model together with its default initial state and horizon."""

    name: str
    model: LangevinModel
    initial: PhaseState
    T: float
    kbt: Optional[float] = None
    params: dict = field(default_factory=dict)
    potential: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def energy(self, x: np.ndarray, v: np.ndarray) -> np.ndarray:
        """Kinetic plus potential energy (unit masses); requires ``potential``."""
        if self.potential is None:
            raise ValueError(f"model {self.name!r} has no potential")
        return 0.5 * np.sum(np.asarray(v) ** 2, axis=-1) + self.potential(x)


def noise_from_temperature(kbt: float, gamma) -> np.ndarray:
    """``sigma`` with ``sigma sigma^T = 2 kbt Gamma`` (lower Cholesky factor)."""
    if kbt < 0:
        raise ValueError("kbt must be non-negative")
    gamma = np.atleast_2d(np.asarray(gamma, float))
    return cholesky(2.0 * kbt * 0.5 * (gamma + gamma.T))


def _matrix(value, n: int, name: str) -> np.ndarray:
    a = np.asarray(value, float)
    if a.ndim == 0:
        return float(a) * np.eye(n)
    if a.ndim == 1 and a.shape == (n,):
        return np.diag(a)
    if a.shape != (n, n):
        raise ValueError(f"{name} must be a scalar, length-{n} vector or {n}x{n} matrix")
    return a


def _vector(value, n: int, name: str) -> np.ndarray:
    a = np.asarray(value, float)
    if a.ndim == 0:
        return np.full(n, float(a))
    if a.shape != (n,):
        raise ValueError(f"{name} must be a scalar or length-{n} vector")
    return a


# --------------------------------------------------------------------- pendulum

def _pendulum_force(x):
    return -np.sin(x)


def _pendulum_jvp(x, u):
    return -np.cos(x) * u


def _pendulum_d2f(x, u):
    return np.sin(x) * u * u


def pendulum_potential(x):
    return np.sum(1.0 - np.cos(x), axis=-1)


def pendulum_model(gamma=1.0, sigma=1.0) -> LangevinModel:
    """``f(x) = -sin x`` with analytic first and second directional derivatives."""
    return LangevinModel(1, _pendulum_force, _matrix(gamma, 1, "gamma"), _matrix(sigma, 1, "sigma"),
                         jvp=_pendulum_jvp, d2f=_pendulum_d2f, name="pendulum")


# --------------------------------------------------------------- Lennard-Jones

def _pair_geometry(x, dim):
    q = np.asarray(x, float)
    P = q.reshape(q.shape[:-1] + (-1, dim))
    diff = P[..., :, None, :] - P[..., None, :, :]
    r2 = np.einsum("...d,...d->...", diff, diff)
    N = P.shape[-2]
    iu = np.triu_indices(N, 1)
    return P, diff, r2, iu


def lj_energy(x: np.ndarray, dim: int = 3) -> np.ndarray:
    """``E = sum_{i<j} (r_ij^-12 - r_ij^-6)``."""
    _, _, r2, iu = _pair_geometry(x, dim)
    r2 = r2[..., iu[0], iu[1]]
    inv6 = r2**-3
    return np.sum(inv6 * inv6 - inv6, axis=-1)


def lj_force(x: np.ndarray, dim: int = 3, collision_radius: float = COLLISION_RADIUS) -> np.ndarray:
    """Pairwise force ``(12 r^-13 - 6 r^-7)`` along ``(x_i - x_j)/r``; no cutoff.

    Raises:
        CollisionError: some pair is closer than ``collision_radius`` (or not finite).
    """
    x = np.asarray(x, float)
    P, diff, r2, iu = _pair_geometry(x, dim)
    pair_r2 = r2[..., iu[0], iu[1]]
    if not np.all(pair_r2 >= collision_radius**2):
        finite = pair_r2[np.isfinite(pair_r2)]
        dmin = np.sqrt(finite.min()) if finite.size else float("nan")
        raise CollisionError(f"particle collision or non-finite positions (min distance {dmin:.3g})")
    N = P.shape[-2]
    safe = r2 + np.eye(N)
    inv2 = 1.0 / safe
    inv6 = inv2**3
    # (12 r^-13 - 6 r^-7) / r = 12 r^-14 - 6 r^-8
    coef = (12.0 * inv6 * inv6 - 6.0 * inv6) * inv2
    coef = coef * (1.0 - np.eye(N))
    F = np.einsum("...ij,...ijd->...id", coef, diff)
    return F.reshape(x.shape)


def lj7_initial_positions() -> np.ndarray:
    """Regular hexagon of side ``2^(1/6)`` plus its centre, in the ``z = 0`` plane."""
    ang = np.arange(6) * np.pi / 3.0
    ring = np.stack([LJ_MINIMUM * np.cos(ang), LJ_MINIMUM * np.sin(ang), np.zeros(6)], axis=1)
    return np.vstack([np.zeros((1, 3)), ring]).reshape(-1)


def lj7_model(gamma=10.0, sigma=None, kbt: float = 0.3) -> LangevinModel:
    """Seven LJ particles in 3D (``n = 21``); ``sigma = sqrt(2 kbt Gamma)`` unless given."""
    n = 21
    G = _matrix(gamma, n, "gamma")
    S = noise_from_temperature(kbt, G) if sigma is None else _matrix(sigma, n, "sigma")
    return LangevinModel(n, lj_force, G, S, name="lj7")


# -------------------------------------------------------------------- harmonic

def _harmonic_force(x, omega2):
    return -omega2 * x


def _harmonic_jvp(x, u, omega2):
    return -omega2 * u


def _harmonic_d2f(x, u):
    return np.zeros_like(u)


def _harmonic_potential(x, omega2):
    return 0.5 * omega2 * np.sum(np.asarray(x) ** 2, axis=-1)


def harmonic_model(omega: float = 1.0, gamma=1.0, sigma=1.0, n: int = 1) -> LangevinModel:
    """``f(x) = -omega^2 x``; picklable (forces are partials of module functions)."""
    w2 = float(omega) ** 2
    return LangevinModel(n, functools.partial(_harmonic_force, omega2=w2),
                         _matrix(gamma, n, "gamma"), _matrix(sigma, n, "sigma"),
                         jvp=functools.partial(_harmonic_jvp, omega2=w2), d2f=_harmonic_d2f,
                         name="harmonic")


def harmonic_drift(model: LangevinModel, omega: float) -> tuple[np.ndarray, np.ndarray]:
    """Linear drift ``M`` and noise input ``B = [0; sigma]`` of the harmonic SDE."""
    n = model.n
    M = model.drift_matrix(float(omega) ** 2 * np.eye(n))
    B = np.vstack([np.zeros((n, n)), model.sigma])
    return M, B


def harmonic_exact_moments(model: LangevinModel, omega: float, t: float):
    """Mean propagator ``exp(M t)`` and covariance ``int_0^t e^{Ms} B B^T e^{M^T s} ds``.

    The covariance comes from the Van Loan block exponential
    ``exp([[-M, B B^T], [0, M^T]] t)``.
    """
    M, B = harmonic_drift(model, omega)
    k = M.shape[0]
    blk = np.zeros((2 * k, 2 * k))
    blk[:k, :k] = -M
    blk[:k, k:] = B @ B.T
    blk[k:, k:] = M.T
    E = mat_exp(blk * t)
    Phi = E[k:, k:].T
    Q = Phi @ E[:k, k:]
    return Phi, 0.5 * (Q + Q.T)


# -------------------------------------------------------------------- registry

def _noise_overrides(n, gamma, overrides, default_sigma):
    if "sigma" in overrides and "kbt" in overrides:
        raise ValueError("give either sigma or kbt, not both")
    if "kbt" in overrides:
        kbt = float(overrides["kbt"])
        return noise_from_temperature(kbt, gamma), kbt
    return _matrix(overrides.get("sigma", default_sigma), n, "sigma"), None


def _build_pendulum(o):
    G = _matrix(o.get("gamma", 1.0), 1, "gamma")
    S, kbt = _noise_overrides(1, G, o, 1.0)
    m = pendulum_model(G, S)
    s0 = PhaseState(_vector(o.get("x0", 1.0), 1, "x0"), _vector(o.get("v0", 0.0), 1, "v0"))
    return ModelSpec("pendulum", m, s0, float(o.get("T", 1.0)), kbt, potential=pendulum_potential)


def _build_lj7(o):
    G = _matrix(o.get("gamma", 10.0), 21, "gamma")
    if "sigma" in o and "kbt" not in o:
        S, kbt = _matrix(o["sigma"], 21, "sigma"), None
    else:
        kbt = float(o.get("kbt", 0.3))
        S = noise_from_temperature(kbt, G)
    m = LangevinModel(21, lj_force, G, S, name="lj7")
    x0 = _vector(o["x0"], 21, "x0") if "x0" in o else lj7_initial_positions()
    s0 = PhaseState(x0, _vector(o.get("v0", 0.0), 21, "v0"))
    return ModelSpec("lj7", m, s0, float(o.get("T", 0.25)), kbt, potential=lj_energy)


def _build_harmonic(o):
    omega = float(o.get("omega", 1.0))
    G = _matrix(o.get("gamma", 1.0), 1, "gamma")
    S, kbt = _noise_overrides(1, G, o, 1.0)
    m = harmonic_model(omega, G, S)
    s0 = PhaseState(_vector(o.get("x0", 1.0), 1, "x0"), _vector(o.get("v0", 0.0), 1, "v0"))
    return ModelSpec("harmonic", m, s0, float(o.get("T", 1.0)), kbt, {"omega": omega},
                     functools.partial(_harmonic_potential, omega2=omega * omega))


MODELS: dict[str, Callable[[Mapping[str, Any]], ModelSpec]] = {
    "pendulum": _build_pendulum,
    "lj7": _build_lj7,
    "harmonic": _build_harmonic,
}
_ALLOWED = {
    "pendulum": {"gamma", "sigma", "kbt", "x0", "v0", "T"},
    "lj7": {"gamma", "sigma", "kbt", "x0", "v0", "T"},
    "harmonic": {"gamma", "sigma", "kbt", "x0", "v0", "T", "omega"},
}


def build_model(name: str, overrides: Optional[Mapping[str, Any]] = None) -> ModelSpec:
    """Look up a model by name and apply parameter overrides.

    Raises:
        KeyError: unknown model name (message lists the valid names).
        ValueError: unknown or malformed override.
    """
    key = name.lower().replace("-", "").replace("_", "")
    if key not in MODELS:
        raise KeyError(f"unknown model {name!r}; valid models: {', '.join(sorted(MODELS))}")
    overrides = dict(overrides or {})
    extra = set(overrides) - _ALLOWED[key]
    if extra:
        raise ValueError(f"unsupported overrides for {key}: {sorted(extra)}")
    return MODELS[key](overrides)
