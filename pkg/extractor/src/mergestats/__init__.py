"""mergestats: extract per-task statistics bundles for checkpoint merging."""

from .bundles import checkpoint_fingerprint, state_dict_fingerprint, write_task
from .fisher import fisher_diagonals
from .gram import gram_matrices
from .masks import MaskTrainingConfig, MaskTrainingResult, train_masks

__version__ = "0.1.0"

__all__ = [
    "MaskTrainingConfig",
    "MaskTrainingResult",
    "checkpoint_fingerprint",
    "fisher_diagonals",
    "gram_matrices",
    "state_dict_fingerprint",
    "train_masks",
    "write_task",
    "__version__",
]
