"""Splitting integrators: direct A/B, stochastic velocity Verlet, Kunita truncations.

The Kunita truncations replace one step of the SDE by the time-1 flow of
an ODE whose vector field is split into a position part ``A`` (``v``
frozen) and a velocity part ``B`` (``x`` frozen)::

    A:  x' = h v - sigma dU + Gamma sigma dV*
    B:  v' = h f(x) - h Gamma v + sigma dW + Gamma sigma dU
             - (Df(x) sigma + Gamma^2 sigma) dV*

Truncation I keeps only the ``h``/``dW`` terms, truncation II adds the
``dU`` terms and truncation III the ``dV*`` terms. Both sub-flows are
solved exactly; ``B`` through ``phi_1`` so that negative substeps and
``Gamma = 0`` need no special casing.

``dV*`` is the coefficient of ``[[X0, Xj], X0]`` that makes the third-order
expansion of the composed flows agree with the Itô-Taylor scheme; see
:attr:`StepIncrements.bracket_dV`.
"""

from __future__ import annotations

import functools
from typing import Literal

import numpy as np

from .core import LangevinError, LangevinModel, PhaseState, matvec, phi_functions
from .noise import OUNoise, StepIncrements
from .taylor import jvp

__all__ = [
    "NERI_C",
    "NERI_D",
    "a_flow",
    "b_flow",
    "truncation_vectors",
    "trunc_step",
    "direct_split_step",
    "svv_coefficients",
    "svv_step",
]

_CBRT2 = 2.0 ** (1.0 / 3.0)
_c1 = 1.0 / (2.0 * (2.0 - _CBRT2))
_d1 = 1.0 / (2.0 - _CBRT2)
NERI_C = (_c1, 0.5 - _c1, 0.5 - _c1, _c1)
NERI_D = (_d1, 1.0 - 2.0 * _d1, _d1)

Truncation = Literal["I", "II", "III"]
Composition = Literal["naive", "symmetric", "neri"]
_TRUNCATIONS = {"I": 1, "II": 2, "III": 3, 1: 1, 2: 2, 3: 3}


@functools.lru_cache(maxsize=512)
def _decay_cached(gbytes: bytes, n: int, tau: float):
    gamma = np.frombuffer(gbytes).reshape(n, n)
    E, P1, P2 = phi_functions(-gamma * tau)
    for a in (E, P1, P2):
        a.setflags(write=False)
    return E, P1, P2


def decay_matrices(gamma: np.ndarray, tau: float):
    """Cached ``(exp(-Gamma tau), phi1(-Gamma tau), phi2(-Gamma tau))``."""
    gamma = np.ascontiguousarray(gamma, dtype=float)
    return _decay_cached(gamma.tobytes(), gamma.shape[0], float(tau))


def a_flow(s: PhaseState, displacement: np.ndarray) -> PhaseState:
    """Shift positions by ``displacement`` with velocities frozen."""
    displacement = np.asarray(displacement, float)
    if displacement.shape[-1] != s.n:
        raise ValueError(f"displacement has {displacement.shape[-1]} components, state has {s.n}")
    return PhaseState(s.x + displacement, s.v)


def b_flow(model: LangevinModel, s: PhaseState, c: np.ndarray, fraction: float,
           dt: float) -> PhaseState:
    """Solve ``v' = c - dt Gamma v`` exactly over pseudo-time ``fraction`` with ``x`` frozen.

    ``v <- exp(-Gamma dt fraction) v + fraction phi1(-Gamma dt fraction) c``.
    ``fraction`` may be negative.
    """
    E, P1, _ = decay_matrices(model.gamma, dt * fraction)
    return PhaseState(s.x, matvec(E, s.v) + fraction * matvec(P1, c))


def _bracket_dv(inc: StepIncrements, bracket: str) -> np.ndarray:
    if bracket == "corrected":
        return inc.bracket_dV
    if bracket == "raw":
        return inc.require("dV").dV
    raise ValueError(f"bracket must be 'corrected' or 'raw', got {bracket!r}")


def truncation_vectors(model: LangevinModel, inc: StepIncrements, level: int,
                       bracket: str = "corrected"):
    """Constant parts of the A and B fields and the ``dV`` noise term builder.

    Returns ``(a_const, b_const, dv_term)`` where the A displacement over a
    full unit of pseudo-time is ``h v + a_const`` and the B forcing is
    ``h f(x) + b_const + dv_term(x)``.
    """
    G, S = model.gamma, model.sigma
    inc.require("dW")
    a_const = np.zeros_like(inc.dW)
    b_const = matvec(S, inc.dW)
    dv_term = None
    if level >= 2:
        inc.require("dU")
        sU = matvec(S, inc.dU)
        a_const = a_const - sU
        b_const = b_const + matvec(G, sU)
    if level >= 3:
        sV = matvec(S, _bracket_dv(inc, bracket))
        a_const = a_const + matvec(G, sV)
        b_const = b_const - matvec(G, matvec(G, sV))

        def dv_term(x, sV=sV):
            return -jvp(model, x, sV)

    return a_const, b_const, dv_term


def trunc_step(model: LangevinModel, s: PhaseState, inc: StepIncrements,
               truncation: Truncation | int, composition: Composition,
               bracket: str = "corrected") -> PhaseState:
    """One step of a Kunita-truncation splitting scheme.

    Compositions, in execution order:

    * ``naive``: full A-flow, then full B-flow;
    * ``symmetric``: A/2, B, A/2;
    * ``neri``: c1 A, d1 B, c2 A, d2 B, c3 A, d3 B, c4 A (truncation III only).

    ``bracket='raw'`` feeds ``dV`` itself into the triple-bracket slot
    instead of the corrected coefficient; it exists to demonstrate the
    loss of order and is not meant for production use.
    """
    level = _TRUNCATIONS.get(truncation)
    if level is None:
        raise ValueError(f"unknown truncation {truncation!r}")
    if composition == "neri":
        if level != 3:
            raise ValueError("the Neri composition is only defined for truncation III")
        a_fr, b_fr = NERI_C, NERI_D
    elif composition == "symmetric":
        a_fr, b_fr = (0.5, 0.5), (1.0,)
    elif composition == "naive":
        a_fr, b_fr = (1.0,), (1.0,)
    else:
        raise ValueError(f"unknown composition {composition!r}")
    h = inc.dt
    a_const, b_const, dv_term = truncation_vectors(model, inc, level, bracket)

    def do_a(st, fr):
        return a_flow(st, fr * (h * st.v + a_const))

    def do_b(st, fr):
        c = h * model.f(st.x) + b_const
        if dv_term is not None:
            c = c + dv_term(st.x)
        return b_flow(model, st, c, fr, h)

    st = s
    for i, fa in enumerate(a_fr):
        st = do_a(st, fa)
        if i < len(b_fr):
            st = do_b(st, b_fr[i])
    return st


def direct_split_step(model: LangevinModel, s: PhaseState, dt: float, noise: OUNoise,
                      variant: Literal["AB", "sym"] = "AB") -> PhaseState:
    """Direct A/B splitting of the Langevin SDE itself.

    ``A``: ``x <- x + tau v``. ``B``: ``v <- exp(-Gamma dt) v + phi1(-Gamma dt) dt f(x)
    + noise.v``, where ``noise.v`` is the exact stochastic convolution over the step.
    ``AB`` runs A over ``dt`` then B; ``sym`` runs A/2, B, A/2.
    """
    if noise is None:
        raise LangevinError("direct splitting needs an OU noise sample")
    E, P1, _ = decay_matrices(model.gamma, dt)

    def do_b(st):
        v = matvec(E, st.v) + dt * matvec(P1, model.f(st.x)) + noise.v
        return PhaseState(st.x, v)

    if variant == "AB":
        return do_b(PhaseState(s.x + dt * s.v, s.v))
    if variant == "sym":
        st = do_b(PhaseState(s.x + 0.5 * dt * s.v, s.v))
        return PhaseState(st.x + 0.5 * dt * st.v, st.v)
    raise ValueError(f"variant must be 'AB' or 'sym', got {variant!r}")


def svv_coefficients(gamma: np.ndarray, dt: float):
    """``c0 = exp(-Gamma dt)``, ``c1 = phi1(-Gamma dt)``, ``c2 = phi2(-Gamma dt)``."""
    return decay_matrices(gamma, dt)


def svv_step(model: LangevinModel, s: PhaseState, dt: float, noise: OUNoise,
             f_x: np.ndarray | None = None) -> PhaseState:
    """Stochastic velocity Verlet step.

    ``x1 = x + c1 v dt + c2 dt^2 f(x) + noise.x`` and
    ``v1 = c0 v + c1 dt f(x) + c2 dt (f(x1) - f(x)) + noise.v``.
    """
    if noise is None:
        raise LangevinError("SVV needs an OU noise sample")
    c0, c1, c2 = svv_coefficients(model.gamma, dt)
    fx = model.f(s.x) if f_x is None else f_x
    x1 = s.x + dt * matvec(c1, s.v) + dt * dt * matvec(c2, fx) + noise.x
    f1 = model.f(x1)
    v1 = matvec(c0, s.v) + dt * matvec(c1, fx) + dt * matvec(c2, f1 - fx) + noise.v
    return PhaseState(x1, v1)
