"""Reading and validating auxiliary-statistics bundles.

Directory layout:

    <bundle>/manifest.json
    <bundle>/<task_name>/<kind>.safetensors      one file per task

manifest.json: {"kind": "fisher_diag"|"gram"|"mask", "task_names": [...],
"sample_count": int, "base_model_fingerprint": hex64} plus optional
"fisher_mode" (recorded by the extractor, not interpreted here) and
"token_counts" {task: int} used to put per-task gram sums on a common
scale. Fisher and gram tensors are float; masks are uint8 0/1. Validation
is eager and total: a malformed bundle raises a typed StatsError.
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .checkpoint import CheckpointManifest, _entries_from_file
from .dtypes import DType, decode_to_f32
from .errors import (
    AsymmetricGramError,
    CheckpointError,
    GramShapeMismatchError,
    KindMismatchError,
    MissingStatsError,
    NegativeFisherError,
    StatsError,
)

KINDS = ("fisher_diag", "gram", "mask")

_FLOAT_DTYPES = frozenset({DType.float32, DType.float16, DType.bfloat16})
_GRAM_SYMMETRY_RTOL = 1e-4


class _StatsFile:
    """Lazy positional reader over one per-task stats file."""

    def __init__(self, path: Path, allowed_dtypes):
        self.path = path
        self.entries = _entries_from_file(path, allowed_dtypes=allowed_dtypes)
        self._fd: Optional[int] = None
        self._lock = threading.Lock()

    def read(self, key: str) -> np.ndarray:
        entry = self.entries[key]
        with self._lock:
            if self._fd is None:
                self._fd = os.open(self.path, os.O_RDONLY)
            fd = self._fd
        raw = os.pread(fd, entry.nbytes, entry.data_start)
        if entry.dtype is DType.uint8:
            return np.frombuffer(raw, dtype=np.uint8).reshape(entry.shape).copy()
        return decode_to_f32(raw, entry.dtype, entry.shape)

    def close(self) -> None:
        with self._lock:
            if self._fd is not None:
                os.close(self._fd)
                self._fd = None


@dataclass
class StatsBundle:
    kind: str
    path: Path
    task_names: list[str]
    sample_count: int
    base_model_fingerprint: str
    fisher_mode: Optional[str]
    token_counts: Optional[dict[str, int]]
    files: dict[str, _StatsFile]

    def has(self, task: str, key: str) -> bool:
        f = self.files.get(task)
        return f is not None and key in f.entries

    def covers(self, key: str, tasks) -> bool:
        return all(self.has(t, key) for t in tasks)

    def tensor(self, task: str, key: str) -> np.ndarray:
        f = self.files.get(task)
        if f is None or key not in f.entries:
            raise MissingStatsError(key, self.kind)
        return f.read(key)

    def gram(self, task: str, key: str) -> np.ndarray:
        """Gram matrix in float64, normalized by the task's token count when
        the manifest records one (per-task sums must share a scale)."""
        g = np.asarray(self.tensor(task, key), dtype=np.float64)
        if self.token_counts and self.token_counts.get(task):
            g = g / float(self.token_counts[task])
        return g

    def close(self) -> None:
        for f in self.files.values():
            f.close()


def _validate_fisher(task: str, sf: _StatsFile, checkpoints: Optional[CheckpointManifest]) -> None:
    for key in sf.entries:
        values = sf.read(key)
        if checkpoints is not None and key in checkpoints.entries:
            expected = checkpoints.entries[key].shape
            if tuple(values.shape) != expected:
                raise StatsError(
                    f"fisher tensor {key!r} for task {task!r} has shape {tuple(values.shape)}, "
                    f"parameter is {expected}"
                )
        flat = values.reshape(-1)
        worst = int(np.argmin(flat))
        if flat[worst] < 0:
            raise NegativeFisherError(task, key, worst, float(flat[worst]))


def _validate_gram(task: str, sf: _StatsFile, checkpoints: Optional[CheckpointManifest]) -> None:
    for key in sf.entries:
        g = sf.read(key)
        if g.ndim != 2 or g.shape[0] != g.shape[1]:
            raise GramShapeMismatchError(key, f"task {task!r}: gram must be square, got {g.shape}")
        if checkpoints is not None and key in checkpoints.entries:
            pshape = checkpoints.entries[key].shape
            if len(pshape) != 2 or g.shape[0] != pshape[1]:
                raise GramShapeMismatchError(
                    key, f"task {task!r}: gram side {g.shape[0]} vs parameter {pshape}"
                )
        scale = float(np.abs(g).max())
        if scale > 0:
            rel = float(np.abs(g - g.T).max()) / scale
            if rel > _GRAM_SYMMETRY_RTOL:
                raise AsymmetricGramError(task, key, rel)


def _validate_mask(task: str, sf: _StatsFile, checkpoints: Optional[CheckpointManifest]) -> None:
    for key, entry in sf.entries.items():
        if entry.dtype is not DType.uint8:
            raise StatsError(
                f"mask tensor {key!r} for task {task!r} must be uint8, got {entry.dtype.code}"
            )
        values = sf.read(key)
        if checkpoints is not None and key in checkpoints.entries:
            expected = checkpoints.entries[key].shape
            if tuple(values.shape) != expected:
                raise StatsError(
                    f"mask tensor {key!r} for task {task!r} has shape {tuple(values.shape)}, "
                    f"parameter is {expected}"
                )
        if values.max(initial=0) > 1:
            raise StatsError(f"mask tensor {key!r} for task {task!r} has values outside {{0,1}}")


_VALIDATORS = {"fisher_diag": _validate_fisher, "gram": _validate_gram, "mask": _validate_mask}
_ALLOWED = {
    "fisher_diag": _FLOAT_DTYPES,
    "gram": _FLOAT_DTYPES,
    "mask": frozenset({DType.uint8}),
}


def load_stats(path: str | Path, expected_kind: str,
               checkpoints: Optional[CheckpointManifest] = None) -> StatsBundle:
    """Open and fully validate a stats bundle.

    checkpoints, when given, is the pretrained manifest: shapes are checked
    against it and the bundle's base-model fingerprint must match. Keys the
    bundle does not cover are allowed; the merge falls back per method.
    """
    path = Path(path)
    manifest_path = path / "manifest.json"
    if expected_kind not in KINDS:
        raise KindMismatchError(f"unknown stats kind {expected_kind!r}; expected one of {KINDS}")
    if not manifest_path.is_file():
        raise StatsError(f"stats bundle {path} has no manifest.json")
    try:
        doc = json.loads(manifest_path.read_text("utf-8"))
        kind = str(doc["kind"])
        task_names = [str(t) for t in doc["task_names"]]
        sample_count = int(doc["sample_count"])
        fingerprint = str(doc["base_model_fingerprint"])
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise StatsError(f"{manifest_path}: malformed stats manifest: {exc}") from exc
    if kind != expected_kind:
        raise KindMismatchError(f"bundle {path} holds {kind!r} stats, expected {expected_kind!r}")
    if sample_count < 1:
        raise StatsError(f"sample_count must be >= 1, got {sample_count}")
    if len(set(task_names)) != len(task_names):
        raise StatsError(f"duplicate task names in {manifest_path}")
    if checkpoints is not None:
        expected_fp = checkpoints.fingerprint()
        if fingerprint != expected_fp:
            raise StatsError(
                f"stats bundle was built against a different base model "
                f"(fingerprint {fingerprint}, checkpoint {expected_fp})"
            )
    token_counts = doc.get("token_counts")
    if token_counts is not None:
        try:
            token_counts = {str(k): int(v) for k, v in token_counts.items()}
        except (AttributeError, TypeError, ValueError) as exc:
            raise StatsError(f"{manifest_path}: bad token_counts: {exc}") from exc
    files: dict[str, _StatsFile] = {}
    for task in task_names:
        tensor_path = path / task / f"{kind}.safetensors"
        if not tensor_path.is_file():
            raise StatsError(f"stats bundle is missing {tensor_path}")
        try:
            sf = _StatsFile(tensor_path, _ALLOWED[kind])
        except CheckpointError as exc:
            raise StatsError(f"bad stats file for task {task!r}: {exc}") from exc
        _VALIDATORS[kind](task, sf, checkpoints)
        files[task] = sf
    return StatsBundle(
        kind=kind,
        path=path,
        task_names=task_names,
        sample_count=sample_count,
        base_model_fingerprint=fingerprint,
        fisher_mode=doc.get("fisher_mode"),
        token_counts=token_counts,
        files=files,
    )
