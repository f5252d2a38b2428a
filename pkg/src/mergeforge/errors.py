"""Exception hierarchy.

Exit-code mapping used by the CLI: ValidationError -> 1,
CheckpointError / OSError -> 2, StatsError -> 3.
"""


class MergeForgeError(Exception):
    """Base class for all errors raised by this package."""


class ValidationError(MergeForgeError):
    """Recipe, schema, or checkpoint-set validation failure."""


class ShapeMismatchError(ValidationError):
    def __init__(self, key: str, expected, got):
        super().__init__(f"shape mismatch for {key!r}: expected {tuple(expected)}, got {tuple(got)}")
        self.key = key
        self.expected = tuple(expected)
        self.got = tuple(got)


class KeyMismatchError(ValidationError):
    def __init__(self, key: str, detail: str = ""):
        msg = f"key mismatch: {key!r}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.key = key


class DtypeMismatchError(ValidationError):
    def __init__(self, key: str, expected, got):
        super().__init__(f"dtype mismatch for {key!r}: expected {expected}, got {got}")
        self.key = key
        self.expected = expected
        self.got = got


class ConsensusRequiresTwoTasksError(ValidationError):
    def __init__(self, n: int):
        super().__init__(f"consensus merging needs at least 2 tasks, got {n}")
        self.n = n


class CheckpointError(MergeForgeError):
    """Checkpoint file I/O or format failure."""


class MalformedHeaderError(CheckpointError):
    pass


class UnsupportedDtypeError(CheckpointError):
    pass


class OverlappingRangesError(CheckpointError):
    pass


class MissingShardError(CheckpointError):
    pass


class DuplicateKeyError(CheckpointError):
    def __init__(self, key: str):
        super().__init__(f"duplicate tensor key {key!r}")
        self.key = key


class StatsError(MergeForgeError):
    """Stats bundle loading or validation failure."""


class KindMismatchError(StatsError):
    pass


class NegativeFisherError(StatsError):
    def __init__(self, task: str, key: str, index: int, value: float):
        super().__init__(
            f"negative Fisher value {value!r} in task {task!r}, key {key!r}, flat index {index}"
        )
        self.task = task
        self.key = key
        self.index = index
        self.value = value


class AsymmetricGramError(StatsError):
    def __init__(self, task: str, key: str, rel_err: float):
        super().__init__(
            f"gram matrix for task {task!r}, key {key!r} is asymmetric (relative error {rel_err:.3e})"
        )
        self.task = task
        self.key = key


class GramShapeMismatchError(StatsError):
    def __init__(self, key: str, detail: str):
        super().__init__(f"gram shape mismatch for {key!r}: {detail}")
        self.key = key


class MissingStatsError(StatsError):
    def __init__(self, key: str, kind: str):
        super().__init__(f"no {kind} statistics for key {key!r}")
        self.key = key


class RegMeanSolveError(MergeForgeError):
    def __init__(self, key: str):
        super().__init__(f"linear solve failed for {key!r} even after diagonal jitter")
        self.key = key


class SearchError(MergeForgeError):
    """Hyperparameter search failure (e.g. every candidate's evaluation failed)."""


class HookError(SearchError):
    """A single evaluation hook invocation failed."""
