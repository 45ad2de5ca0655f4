"""Registry of named one-step schemes with a uniform ``step(model, state, inc)`` call."""

from __future__ import annotations

import functools
from dataclasses import dataclass
from typing import Callable

from .core import LangevinModel, PhaseState
from .noise import StepIncrements
from .splitting import direct_split_step, svv_step, trunc_step
from .taylor import taylor_step

__all__ = ["Scheme", "SCHEMES", "get_scheme", "scheme_names"]

StepFn = Callable[[LangevinModel, PhaseState, StepIncrements], PhaseState]


@dataclass(frozen=True)
class Scheme:
    """A one-step map and what it consumes.

    Attributes:
        name: Command-line name, e.g. ``trunc2-sym``.
        label: Display name, e.g. ``Trunc2Sym``.
        order: Claimed strong order.
        needs_ou: Whether the step reads the OU noise pair ``inc.ou``.
        step: ``(model, state, inc) -> state``.
    """

    name: str
    label: str
    order: float
    needs_ou: bool
    step: StepFn

    def __call__(self, model, state, inc):
        return self.step(model, state, inc)


def _direct(model, s, inc, variant):
    return direct_split_step(model, s, inc.dt, inc.ou, variant)


def _svv(model, s, inc):
    return svv_step(model, s, inc.dt, inc.ou)


def _trunc(model, s, inc, truncation, composition):
    return trunc_step(model, s, inc, truncation, composition)


def _taylor(model, s, inc, order):
    return taylor_step(model, s, inc, order)


_P = functools.partial
SCHEMES: dict[str, Scheme] = {
    s.name: s
    for s in (
        Scheme("direct-ab", "DirectAB", 1.0, True, _P(_direct, variant="AB")),
        Scheme("direct-sym", "DirectSym", 1.0, True, _P(_direct, variant="sym")),
        Scheme("svv", "SVV", 2.0, True, _svv),
        Scheme("trunc1-naive", "Trunc1Naive", 1.0, False, _P(_trunc, truncation="I", composition="naive")),
        Scheme("trunc1-sym", "Trunc1Sym", 1.0, False, _P(_trunc, truncation="I", composition="symmetric")),
        Scheme("trunc2-naive", "Trunc2Naive", 1.0, False, _P(_trunc, truncation="II", composition="naive")),
        Scheme("trunc2-sym", "Trunc2Sym", 2.0, False, _P(_trunc, truncation="II", composition="symmetric")),
        Scheme("trunc3-neri", "Trunc3Neri", 3.0, False, _P(_trunc, truncation="III", composition="neri")),
        Scheme("taylor1", "Taylor1", 1.0, False, _P(_taylor, order=1)),
        Scheme("taylor2", "Taylor2", 2.0, False, _P(_taylor, order=2)),
        Scheme("taylor3", "Taylor3", 3.0, False, _P(_taylor, order=3)),
    )
}


def _key(name: str) -> str:
    return name.lower().replace("-", "").replace("_", "")


_ALIASES = {_key(s.name): s.name for s in SCHEMES.values()}
_ALIASES.update({_key(s.label): s.name for s in SCHEMES.values()})


def scheme_names() -> list[str]:
    return list(SCHEMES)


def get_scheme(name: str) -> Scheme:
    """Resolve a scheme by CLI name or label, ignoring case, dashes and underscores."""
    try:
        return SCHEMES[_ALIASES[_key(name)]]
    except KeyError:
        raise KeyError(f"unknown scheme {name!r}; valid schemes: {', '.join(SCHEMES)}") from None
