"""Electromagnetic noise near nanostructured metals and its effect on spin qubits."""

from .emcore import CONST, BathSpec, Convention, GreenSample, Provenance
from .mesh import Material, TetMesh

__all__ = ["CONST", "BathSpec", "Convention", "GreenSample", "Provenance", "Material", "TetMesh"]
__version__ = "0.1.0"
