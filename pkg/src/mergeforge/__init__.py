"""mergeforge: streaming merging engine for task-specialized checkpoints."""

from .dtypes import DType
from .kernels import backend_name
from .recipes import METHODS, MergeRecipe
from .tensor import BinaryMask, Tensor

__version__ = "0.1.0"

__all__ = [
    "BinaryMask",
    "DType",
    "METHODS",
    "MergeRecipe",
    "Tensor",
    "backend_name",
    "__version__",
]
