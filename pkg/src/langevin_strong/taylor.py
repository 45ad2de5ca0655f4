"""Itô-Taylor one-step maps of strong order 1, 2 and 3.

Write ``z = (x, v)``, drift ``a(z) = (v, f(x) - Gamma v)`` and the ``j``-th
diffusion column ``b_j = (0, sigma_j)``. With additive noise every
coefficient function carrying two noise indices vanishes, and so does
``L^0 b_j``; the schemes are

    order 1:  z + a h + b dW
    order 2:  ... + f_00 h^2/2 + f_j0 I_j0
    order 3:  ... + f_000 h^3/6 + f_j00 I_j00

with

    f_00  = (f - Gamma v,  Df v - Gamma f + Gamma^2 v)
    f_j0  = (sigma_j,  -Gamma sigma_j)
    f_000 = (Df v - Gamma f + Gamma^2 v,
             D^2f[v, v] - Gamma Df v + (Df + Gamma^2)(f - Gamma v))
    f_j00 = (-Gamma sigma_j,  Df sigma_j + Gamma^2 sigma_j).

The diffusion operator ``(1/2) sigma sigma^T : d^2/dv^2`` drops out of
``f_000`` because ``f_00`` is affine in ``v``.
"""

from __future__ import annotations

import numpy as np

from .core import LangevinModel, NonFiniteStateError, PhaseState, matvec
from .noise import StepIncrements

__all__ = ["TAYLOR_ORDERS", "jvp", "jvp_fd", "second_directional", "taylor_step"]

TAYLOR_ORDERS = (1, 2, 3)
_REQUIRED = {1: ("dW",), 2: ("dW", "I_j0"), 3: ("dW", "I_j0", "I_j00")}
_EPS = np.finfo(float).eps
_TINY = 1e-300


def _norm(u: np.ndarray) -> np.ndarray:
    return np.linalg.norm(u, axis=-1, keepdims=True)


def jvp_fd(model: LangevinModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """Forward-difference ``Df(x) u`` with ``eps = sqrt(eps_mach) (1 + |x|) / |u|``.

    Rows with ``|u|`` below ``1e-300`` return exactly zero.
    """
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    un = _norm(u)
    live = un > _TINY
    h = np.sqrt(_EPS) * (1.0 + _norm(x)) / np.where(live, un, 1.0)
    out = (model.f(x + h * u) - model.f(x)) / h
    if not np.all(np.isfinite(out)):
        raise NonFiniteStateError("force is not finite at a finite-difference probe")
    return np.where(live, out, 0.0)


def jvp(model: LangevinModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``Df(x) u`` from the model if available, otherwise by finite differences."""
    if model.jvp is not None:
        return np.asarray(model.jvp(x, u), float)
    return jvp_fd(model, x, u)


def second_directional(model: LangevinModel, x: np.ndarray, u: np.ndarray) -> np.ndarray:
    """``D^2 f(x)[u, u]``.

    Uses ``model.d2f`` when present, a central difference of the analytic
    ``jvp`` (step ``eps^(1/3)``) when only that is present, and a second
    difference of ``f`` (step ``eps^(1/4)``) otherwise.
    """
    if model.d2f is not None:
        return np.asarray(model.d2f(x, u), float)
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    un = _norm(u)
    live = un > _TINY
    scale = (1.0 + _norm(x)) / np.where(live, un, 1.0)
    if model.jvp is not None:
        h = _EPS ** (1.0 / 3.0) * scale
        out = (model.jvp(x + h * u, u) - model.jvp(x - h * u, u)) / (2.0 * h)
    else:
        h = _EPS**0.25 * scale
        out = (model.f(x + h * u) - 2.0 * model.f(x) + model.f(x - h * u)) / (h * h)
    return np.where(live, out, 0.0)


def taylor_step(model: LangevinModel, s: PhaseState, inc: StepIncrements,
                order: int) -> PhaseState:
    """Advance ``s`` by one Itô-Taylor step of strong order ``order``.

    Raises:
        ValueError: unsupported order.
        MissingIncrementError: ``inc`` lacks an integral the order needs.
    """
    if order not in _REQUIRED:
        raise ValueError(f"Taylor order must be one of {TAYLOR_ORDERS}, got {order!r}")
    inc.require(*_REQUIRED[order])
    G, S = model.gamma, model.sigma
    h = inc.dt
    x, v = s.x, s.v
    fx = model.f(x)
    Gv = matvec(G, v)
    drift_v = fx - Gv
    sdW = matvec(S, inc.dW)

    x1 = x + h * v
    v1 = v + h * drift_v + sdW
    if order >= 2:
        Dfv = jvp(model, x, v)
        a00_v = Dfv - matvec(G, fx) + matvec(G, Gv)
        sJ = matvec(S, inc.I_j0)
        x1 = x1 + 0.5 * h * h * drift_v + sJ
        v1 = v1 + 0.5 * h * h * a00_v - matvec(G, sJ)
    if order >= 3:
        d2 = second_directional(model, x, v)
        a000_v = (d2 - matvec(G, Dfv) + jvp(model, x, drift_v)
                  + matvec(G, matvec(G, drift_v)))
        sK = matvec(S, inc.I_j00)
        x1 = x1 + h**3 / 6.0 * a00_v - matvec(G, sK)
        v1 = v1 + h**3 / 6.0 * a000_v + jvp(model, x, sK) + matvec(G, matvec(G, sK))
    return PhaseState(x1, v1)
