"""Finite-volume heat solvers and message-passing networks that learn them."""

__version__ = "0.1.0"

from .fvm import Field, SchemeKind, step  # noqa: E402
from .gnn import FeatureScheme, MpsModel, construct_exact_fvm_weights  # noqa: E402
from .kernels import BACKEND  # noqa: E402
from .mesh import Mesh, generate_irregular_mesh, generate_regular_mesh  # noqa: E402

__all__ = [
    "__version__",
    "BACKEND",
    "Field",
    "SchemeKind",
    "step",
    "FeatureScheme",
    "MpsModel",
    "construct_exact_fvm_weights",
    "Mesh",
    "generate_irregular_mesh",
    "generate_regular_mesh",
]
