"""Sharded safetensors checkpoints: lazy manifests, aligned streaming, writing.

File format: 8-byte little-endian header length, UTF-8 JSON header mapping
tensor names to {dtype, shape, data_offsets}, then the raw little-endian
data section. Sharded checkpoints add an index JSON
{"weight_map": {key: shardfile}, "metadata": {"total_size": bytes}}.

Reads are positional (pread on cached descriptors) so worker threads can
pull tensors concurrently; no tensor data is touched until requested.
"""

from __future__ import annotations

import json
import os
import shutil
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

from .dtypes import CHECKPOINT_DTYPES, DType, decode_to_f32
from .errors import (
    CheckpointError,
    DtypeMismatchError,
    DuplicateKeyError,
    KeyMismatchError,
    MalformedHeaderError,
    MissingShardError,
    OverlappingRangesError,
    ShapeMismatchError,
    UnsupportedDtypeError,
    ValidationError,
)
from .hashing import manifest_fingerprint
from .tensor import Tensor

INDEX_SUFFIX = ".safetensors.index.json"
_COPY_CHUNK = 8 * 1024 * 1024


@dataclass(frozen=True)
class ManifestEntry:
    key: str
    shape: tuple[int, ...]
    dtype: DType
    shard: Path
    data_start: int  # absolute offset within the shard file
    nbytes: int

    @property
    def numel(self) -> int:
        n = 1
        for d in self.shape:
            n *= d
        return n


class CheckpointManifest:
    def __init__(self, root: Path, entries: dict[str, ManifestEntry]):
        self.root = Path(root)
        self.entries = dict(sorted(entries.items()))
        self.total_params = sum(e.numel for e in self.entries.values())
        self._fds: dict[Path, int] = {}
        self._lock = threading.Lock()

    def keys(self) -> list[str]:
        return list(self.entries)

    def fingerprint(self) -> str:
        return manifest_fingerprint((e.key, e.shape) for e in self.entries.values())

    def max_tensor_numel(self) -> int:
        return max(e.numel for e in self.entries.values())

    def _fd(self, shard: Path) -> int:
        with self._lock:
            fd = self._fds.get(shard)
            if fd is None:
                fd = os.open(shard, os.O_RDONLY)
                self._fds[shard] = fd
            return fd

    def read_tensor(self, key: str) -> Tensor:
        entry = self.entries[key]
        raw = os.pread(self._fd(entry.shard), entry.nbytes, entry.data_start)
        if len(raw) != entry.nbytes:
            raise CheckpointError(
                f"short read for {key!r} from {entry.shard.name}: "
                f"wanted {entry.nbytes} bytes, got {len(raw)}"
            )
        return Tensor(decode_to_f32(raw, entry.dtype, entry.shape), entry.dtype)

    def close(self) -> None:
        with self._lock:
            for fd in self._fds.values():
                os.close(fd)
            self._fds.clear()

    def __del__(self):
        try:
            self.close()
        except Exception:
            pass


def _parse_header(path: Path) -> tuple[dict, int]:
    size = path.stat().st_size
    with open(path, "rb") as fh:
        prefix = fh.read(8)
        if len(prefix) < 8:
            raise MalformedHeaderError(f"{path.name}: file shorter than the 8-byte length prefix")
        header_len = int.from_bytes(prefix, "little")
        if header_len > size - 8:
            raise MalformedHeaderError(
                f"{path.name}: header length {header_len} exceeds file size {size}"
            )
        header_bytes = fh.read(header_len)
    try:
        header = json.loads(header_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path.name}: header is not valid JSON ({exc})") from exc
    if not isinstance(header, dict):
        raise MalformedHeaderError(f"{path.name}: header must be a JSON object")
    return header, 8 + header_len


def _entries_from_file(path: Path, allowed_dtypes=CHECKPOINT_DTYPES) -> dict[str, ManifestEntry]:
    header, data_start = _parse_header(path)
    data_len = path.stat().st_size - data_start
    entries: dict[str, ManifestEntry] = {}
    ranges: list[tuple[int, int, str]] = []
    for key, spec in header.items():
        if key == "__metadata__":
            continue
        if not isinstance(spec, dict):
            raise MalformedHeaderError(f"{path.name}: entry {key!r} is not an object")
        try:
            dtype = DType.from_code(spec["dtype"])
            shape = tuple(int(d) for d in spec["shape"])
            begin, end = (int(v) for v in spec["data_offsets"])
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedHeaderError(f"{path.name}: entry {key!r} is malformed: {exc}") from exc
        if dtype not in allowed_dtypes:
            raise UnsupportedDtypeError(
                f"{path.name}: entry {key!r} has dtype {dtype.code}, "
                f"allowed here: {sorted(d.code for d in allowed_dtypes)}"
            )
        if any(d <= 0 for d in shape):
            raise MalformedHeaderError(
                f"{path.name}: entry {key!r} has non-positive dimension in {shape}"
            )
        numel = 1
        for d in shape:
            numel *= d
        if not (0 <= begin <= end <= data_len):
            raise MalformedHeaderError(
                f"{path.name}: entry {key!r} byte range [{begin}, {end}) outside data section"
            )
        if end - begin != numel * dtype.byte_width:
            raise MalformedHeaderError(
                f"{path.name}: entry {key!r} byte range does not match shape {shape} "
                f"and dtype {dtype.code}"
            )
        ranges.append((begin, end, key))
        entries[key] = ManifestEntry(key, shape, dtype, path, data_start + begin, end - begin)
    ranges.sort()
    for (b0, e0, k0), (b1, e1, k1) in zip(ranges, ranges[1:]):
        if b1 < e0:
            raise OverlappingRangesError(
                f"{path.name}: tensors {k0!r} and {k1!r} have overlapping byte ranges"
            )
    return entries


def _find_index_file(root: Path) -> Optional[Path]:
    candidates = sorted(p for p in root.iterdir() if p.name.endswith(INDEX_SUFFIX))
    if len(candidates) > 1:
        raise CheckpointError(f"{root}: multiple shard index files: {[p.name for p in candidates]}")
    return candidates[0] if candidates else None


def open_checkpoint(path: str | Path) -> CheckpointManifest:
    """Build a manifest locating every tensor; reads no tensor data."""
    path = Path(path)
    if path.is_file():
        return CheckpointManifest(path.parent, _entries_from_file(path))
    if not path.is_dir():
        raise MissingShardError(f"checkpoint path does not exist: {path}")
    index = _find_index_file(path)
    if index is None:
        files = sorted(p for p in path.iterdir() if p.suffix == ".safetensors")
        if not files:
            raise CheckpointError(f"{path}: no .safetensors file or shard index found")
        if len(files) > 1:
            raise CheckpointError(
                f"{path}: multiple shard files but no index: {[p.name for p in files]}"
            )
        return CheckpointManifest(path, _entries_from_file(files[0]))
    try:
        index_doc = json.loads(index.read_text("utf-8"))
        weight_map = index_doc["weight_map"]
    except (json.JSONDecodeError, KeyError, UnicodeDecodeError) as exc:
        raise MalformedHeaderError(f"{index.name}: bad shard index: {exc}") from exc
    entries: dict[str, ManifestEntry] = {}
    per_shard: dict[str, dict[str, ManifestEntry]] = {}
    for key, shard_name in weight_map.items():
        shard_path = path / shard_name
        if shard_name not in per_shard:
            if not shard_path.is_file():
                raise MissingShardError(f"shard {shard_name!r} listed in index is missing")
            per_shard[shard_name] = _entries_from_file(shard_path)
        shard_entries = per_shard[shard_name]
        if key not in shard_entries:
            raise MalformedHeaderError(f"key {key!r} mapped to {shard_name!r} but absent there")
        entries[key] = shard_entries[key]
    return CheckpointManifest(path, entries)


@dataclass
class Mismatch:
    kind: str  # "key" | "shape" | "dtype"
    key: str
    detail: str


class CheckpointSet:
    """One pretrained manifest plus n finetuned manifests with identical
    key sets, shapes, and dtypes."""

    def __init__(self, pretrained: CheckpointManifest, finetuned: Sequence[CheckpointManifest],
                 task_names: Optional[Sequence[str]] = None):
        self.pretrained = pretrained
        self.finetuned = list(finetuned)
        self.n = len(self.finetuned)
        if task_names is None:
            task_names = [f"task{i}" for i in range(self.n)]
        if len(task_names) != self.n:
            raise ValidationError(
                f"got {len(task_names)} task names for {self.n} finetuned models"
            )
        self.task_names = list(task_names)

    def max_tensor_numel(self) -> int:
        return self.pretrained.max_tensor_numel()

    def close(self) -> None:
        self.pretrained.close()
        for m in self.finetuned:
            m.close()


def compatibility_report(pretrained: CheckpointManifest,
                         finetuned: Sequence[CheckpointManifest],
                         limit: int = 10) -> list[Mismatch]:
    """First `limit` incompatibilities between the pretrained manifest and
    each finetuned manifest, in deterministic key order."""
    report: list[Mismatch] = []
    base_keys = set(pretrained.entries)
    for i, manifest in enumerate(finetuned):
        who = f"model {i}"
        keys = set(manifest.entries)
        for key in sorted(base_keys - keys):
            report.append(Mismatch("key", key, f"{who} is missing {key!r}"))
        for key in sorted(keys - base_keys):
            report.append(Mismatch("key", key, f"{who} has extra key {key!r}"))
        for key in sorted(base_keys & keys):
            a, b = pretrained.entries[key], manifest.entries[key]
            if a.shape != b.shape:
                report.append(
                    Mismatch("shape", key, f"{who}: {key!r} is {b.shape}, expected {a.shape}")
                )
            elif a.dtype != b.dtype:
                report.append(
                    Mismatch("dtype", key,
                             f"{who}: {key!r} is {b.dtype.code}, expected {a.dtype.code}")
                )
        if len(report) >= limit:
            return report[:limit]
    return report


def validate_set(pretrained: CheckpointManifest, finetuned: Sequence[CheckpointManifest],
                 task_names: Optional[Sequence[str]] = None) -> CheckpointSet:
    if not finetuned:
        raise ValidationError("a checkpoint set needs at least one finetuned model")
    report = compatibility_report(pretrained, finetuned)
    if report:
        first = report[0]
        if first.kind == "key":
            exc: ValidationError = KeyMismatchError(first.key, first.detail)
        elif first.kind == "shape":
            m = next(m for m in finetuned if first.key not in m.entries
                     or m.entries[first.key].shape != pretrained.entries[first.key].shape)
            exc = ShapeMismatchError(first.key, pretrained.entries[first.key].shape,
                                     m.entries[first.key].shape)
        else:
            m = next(m for m in finetuned if m.entries[first.key].dtype
                     != pretrained.entries[first.key].dtype)
            exc = DtypeMismatchError(first.key, pretrained.entries[first.key].dtype.code,
                                     m.entries[first.key].dtype.code)
        exc.report = report
        raise exc
    return CheckpointSet(pretrained, finetuned, task_names)


def stream_groups(ckpt_set: CheckpointSet, keys: Optional[Sequence[str]] = None
                  ) -> Iterator[tuple[str, Tensor, list[Tensor]]]:
    """Yield (key, pretrained tensor, [finetuned tensors]) for every key in
    lexicographic order; only one group's tensors are read per step."""
    for key in (keys if keys is not None else ckpt_set.pretrained.keys()):
        try:
            pre = ckpt_set.pretrained.read_tensor(key)
            fts = [m.read_tensor(key) for m in ckpt_set.finetuned]
        except OSError as exc:
            raise CheckpointError(f"I/O failure while reading {key!r}: {exc}") from exc
        yield key, pre, fts
        # drop this frame's references before reading the next group, or the
        # generator itself would pin two groups at once
        del pre, fts


class CheckpointWriter:
    """Streaming writer: spools tensor data per shard to a temp file, then
    assembles header + data; splits shards at the byte limit and emits an
    index when more than one shard results. Output bytes depend only on the
    (key, tensor) sequence and metadata."""

    def __init__(self, out_dir: str | Path, shard_bytes_limit: int = 5 * 1024 ** 3,
                 metadata: Optional[dict[str, str]] = None):
        self.out_dir = Path(out_dir)
        self.out_dir.mkdir(parents=True, exist_ok=True)
        self.limit = int(shard_bytes_limit)
        if self.limit <= 0:
            raise ValidationError(f"shard byte limit must be positive, got {shard_bytes_limit}")
        self.metadata = dict(metadata) if metadata else None
        self._seen: set[str] = set()
        self._shards: list[tuple[Path, list[tuple[str, DType, tuple[int, ...], int]]]] = []
        self._cur_entries: list[tuple[str, DType, tuple[int, ...], int]] = []
        self._cur_bytes = 0
        self._cur_tmp: Optional[Path] = None
        self._cur_fh = None
        self._weight_map: dict[str, int] = {}  # key -> shard ordinal
        self._total_size = 0
        self._finalized = False

    def _open_shard(self) -> None:
        ordinal = len(self._shards)
        self._cur_tmp = self.out_dir / f".shard-{ordinal:05d}.tmp"
        self._cur_fh = open(self._cur_tmp, "wb")
        self._cur_entries = []
        self._cur_bytes = 0

    def _close_shard(self) -> None:
        if self._cur_fh is None:
            return
        self._cur_fh.close()
        self._cur_fh = None
        self._shards.append((self._cur_tmp, self._cur_entries))
        self._cur_tmp = None

    def add(self, key: str, tensor: Tensor) -> None:
        if self._finalized:
            raise CheckpointError("writer already finalized")
        if key in self._seen:
            raise DuplicateKeyError(key)
        self._seen.add(key)
        data = tensor.storage_bytes()
        if self._cur_fh is not None and self._cur_bytes and self._cur_bytes + len(data) > self.limit:
            self._close_shard()
        if self._cur_fh is None:
            self._open_shard()
        self._cur_fh.write(data)
        self._cur_entries.append((key, tensor.dtype, tensor.shape, len(data)))
        self._cur_bytes += len(data)
        self._weight_map[key] = len(self._shards)
        self._total_size += len(data)

    def _assemble(self, tmp: Path, entries, final: Path) -> None:
        header: dict = {}
        if self.metadata:
            header["__metadata__"] = {str(k): str(v) for k, v in sorted(self.metadata.items())}
        offset = 0
        for key, dtype, shape, nbytes in entries:
            header[key] = {
                "dtype": dtype.code,
                "shape": list(shape),
                "data_offsets": [offset, offset + nbytes],
            }
            offset += nbytes
        blob = json.dumps(header, separators=(",", ":"), sort_keys=True).encode("utf-8")
        pad = (8 - (len(blob) % 8)) % 8
        blob += b" " * pad
        with open(final, "wb") as out:
            out.write(len(blob).to_bytes(8, "little"))
            out.write(blob)
            with open(tmp, "rb") as src:
                shutil.copyfileobj(src, out, _COPY_CHUNK)
        tmp.unlink()

    def finalize(self) -> CheckpointManifest:
        if self._finalized:
            raise CheckpointError("writer already finalized")
        if self._cur_fh is not None:
            self._close_shard()
        self._finalized = True
        if not self._shards:
            raise CheckpointError("nothing was written")
        count = len(self._shards)
        if count == 1:
            tmp, entries = self._shards[0]
            self._assemble(tmp, entries, self.out_dir / "model.safetensors")
        else:
            names = [f"model-{i + 1:05d}-of-{count:05d}.safetensors" for i in range(count)]
            for (tmp, entries), name in zip(self._shards, names):
                self._assemble(tmp, entries, self.out_dir / name)
            index = {
                "metadata": {"total_size": self._total_size},
                "weight_map": {k: names[i] for k, i in sorted(self._weight_map.items())},
            }
            (self.out_dir / ("model" + INDEX_SUFFIX)).write_text(
                json.dumps(index, indent=2, sort_keys=True) + "\n", "utf-8"
            )
        return open_checkpoint(self.out_dir)


def write_checkpoint(tensors: Iterable[tuple[str, Tensor]], path: str | Path,
                     shard_bytes_limit: int = 5 * 1024 ** 3,
                     metadata: Optional[dict[str, str]] = None) -> CheckpointManifest:
    writer = CheckpointWriter(path, shard_bytes_limit, metadata)
    for key, tensor in tensors:
        writer.add(key, tensor)
    return writer.finalize()


def copy_sidecar_files(src_dir: Path, dst_dir: Path) -> list[str]:
    """Copy non-tensor files (tokenizer, config, ...) through verbatim."""
    copied = []
    src_dir, dst_dir = Path(src_dir), Path(dst_dir)
    if not src_dir.is_dir():
        return copied
    for p in sorted(src_dir.iterdir()):
        if p.is_file() and p.suffix != ".safetensors" and not p.name.endswith(INDEX_SUFFIX):
            shutil.copyfile(p, dst_dir / p.name)
            copied.append(p.name)
    return copied
