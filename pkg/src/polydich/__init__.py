"""Certification of polynomial dichotomies for nonautonomous linear
difference equations through admissibility of the weighted operator T_Z."""

from polydich.errors import PolyDichError
from polydich.system import Cocycle, OperatorSequence, load_system, make_generator

__version__ = "0.1.0"

__all__ = ["Cocycle", "OperatorSequence", "PolyDichError", "load_system", "make_generator"]
