"""Strong-order integrators for additive-noise Langevin dynamics."""

from .core import LangevinError, LangevinModel, NonFiniteStateError, PhaseState

__all__ = ["LangevinError", "LangevinModel", "NonFiniteStateError", "PhaseState"]
__version__ = "0.1.0"
