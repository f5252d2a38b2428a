"""Merge recipes: method choice plus exactly the hyperparameters it uses."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .errors import ValidationError

METHODS = (
    "model_soup",
    "task_arithmetic",
    "fisher",
    "regmean",
    "ties",
    "dare",
    "consensus_ta",
    "ls_dataless",
    "ls_trained",
)

# method -> (required fields, optional fields); anything else is rejected
_FIELDS = {
    "model_soup": (frozenset(), frozenset()),
    "task_arithmetic": (frozenset({"lam"}), frozenset()),
    "fisher": (frozenset({"stats_path"}), frozenset()),
    "regmean": (frozenset({"alpha", "stats_path"}), frozenset()),
    "ties": (frozenset({"sparsity", "lam"}), frozenset()),
    "dare": (frozenset({"drop_rate", "lam"}), frozenset({"seed"})),
    "consensus_ta": (frozenset({"lam", "per_task_lambda"}), frozenset()),
    "ls_dataless": (frozenset({"sparsity"}), frozenset()),
    "ls_trained": (frozenset({"stats_path"}), frozenset()),
}

_ALIASES = {
    "lambda": "lam",
    "scaling_coefficient": "lam",
    "p": "drop_rate",
    "s": "sparsity",
}


@dataclass(frozen=True)
class MergeRecipe:
    method: str
    lam: Optional[float] = None
    per_task_lambda: Optional[tuple[float, ...]] = None
    drop_rate: Optional[float] = None
    sparsity: Optional[float] = None
    alpha: Optional[float] = None
    stats_path: Optional[str] = None
    seed: Optional[int] = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValidationError(
                f"unknown merge method {self.method!r}; expected one of {', '.join(METHODS)}"
            )
        required, optional = _FIELDS[self.method]
        allowed = required | optional
        for name in ("lam", "per_task_lambda", "drop_rate", "sparsity", "alpha",
                     "stats_path", "seed"):
            value = getattr(self, name)
            if value is not None and name not in allowed:
                raise ValidationError(
                    f"field {name!r} does not apply to method {self.method!r}"
                )
            if value is None and name in required:
                raise ValidationError(f"method {self.method!r} requires field {name!r}")
        if self.method == "dare" and self.seed is None:
            object.__setattr__(self, "seed", 0)
        if self.lam is not None and not self.lam > 0:
            raise ValidationError(f"scaling coefficient must be positive, got {self.lam}")
        if self.drop_rate is not None and not (0.0 <= self.drop_rate < 1.0):
            raise ValidationError(f"drop rate must be in [0, 1), got {self.drop_rate}")
        if self.sparsity is not None and not (0.0 < self.sparsity <= 1.0):
            raise ValidationError(f"sparsity must be in (0, 1], got {self.sparsity}")
        if self.alpha is not None and not (0.0 < self.alpha <= 1.0):
            raise ValidationError(f"alpha must be in (0, 1], got {self.alpha}")
        if self.per_task_lambda is not None:
            object.__setattr__(self, "per_task_lambda", tuple(float(v) for v in self.per_task_lambda))
            if any(v < 0 for v in self.per_task_lambda):
                raise ValidationError("per-task mask thresholds must be nonnegative")
        if self.seed is not None and not (0 <= int(self.seed) < 2 ** 64):
            raise ValidationError(f"seed must be an unsigned 64-bit integer, got {self.seed}")

    @classmethod
    def from_dict(cls, data: dict) -> "MergeRecipe":
        data = dict(data)
        method = data.pop("name", None) or data.pop("method", None)
        if method is None:
            raise ValidationError("recipe needs a method name")
        method = str(method).strip().lower().replace("-", "_")
        kwargs = {}
        for raw_key, value in data.items():
            key = _ALIASES.get(raw_key, raw_key)
            if key not in ("lam", "per_task_lambda", "drop_rate", "sparsity", "alpha",
                           "stats_path", "seed"):
                raise ValidationError(f"unknown recipe field {raw_key!r}")
            if key in kwargs:
                raise ValidationError(f"recipe field {key!r} given twice")
            kwargs[key] = tuple(value) if key == "per_task_lambda" else value
        return cls(method=method, **kwargs)

    def needs_stats(self) -> bool:
        return self.method in ("fisher", "regmean", "ls_trained")

    def hyperparameters(self) -> dict:
        out = {}
        for name in ("lam", "per_task_lambda", "drop_rate", "sparsity", "alpha", "seed"):
            value = getattr(self, name)
            if value is not None:
                out[name] = list(value) if isinstance(value, tuple) else value
        return out

    def replace(self, **changes) -> "MergeRecipe":
        current = {
            "method": self.method,
            "lam": self.lam,
            "per_task_lambda": self.per_task_lambda,
            "drop_rate": self.drop_rate,
            "sparsity": self.sparsity,
            "alpha": self.alpha,
            "stats_path": self.stats_path,
            "seed": self.seed,
        }
        current.update(changes)
        return MergeRecipe(**current)
