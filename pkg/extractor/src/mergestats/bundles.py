"""Writing statistics bundles in the merge engine's on-disk layout.

Layout consumed by the engine:

    <bundle>/manifest.json
    <bundle>/<task_name>/<kind>.safetensors

kind is one of fisher_diag, gram, mask. The manifest carries the task list,
the nominal sample count, a fingerprint of the base model's parameter
manifest (FNV-1a 64 over sorted "name:dim,dim;..." lines), plus optional
fisher_mode and per-task token_counts. Repeated extract runs append tasks
to one bundle; kind and fingerprint must agree.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from safetensors import safe_open
from safetensors.numpy import save_file

KINDS = ("fisher_diag", "gram", "mask")

_MASK64 = (1 << 64) - 1
_FNV_BASIS = 0xCBF29CE484222325


def _fnv1a64_continue(h: int, data: bytes) -> int:
    for b in data:
        h ^= b
        h = (h * 0x100000001B3) & _MASK64
    return h


def _shapes_fingerprint(shapes: dict[str, tuple]) -> str:
    h = _FNV_BASIS
    for name in sorted(shapes):
        line = f"{name}:{','.join(str(d) for d in shapes[name])};".encode("utf-8")
        h = _fnv1a64_continue(h, line)
    return f"{h:016x}"


def checkpoint_fingerprint(model_path: str | Path) -> str:
    """Fingerprint of a safetensors checkpoint's (name, shape) manifest."""
    model_path = Path(model_path)
    if model_path.is_dir():
        index = model_path / "model.safetensors.index.json"
        if index.is_file():
            shards = sorted(set(json.loads(index.read_text())["weight_map"].values()))
            files = [model_path / s for s in shards]
        else:
            files = sorted(model_path.glob("*.safetensors"))
    else:
        files = [model_path]
    shapes = {}
    for file in files:
        with safe_open(file, framework="np") as fh:
            for key in fh.keys():
                shapes[key] = tuple(fh.get_slice(key).get_shape())
    return _shapes_fingerprint(shapes)


def state_dict_fingerprint(state: dict) -> str:
    """Same fingerprint computed from an in-memory {name: tensor} mapping."""
    return _shapes_fingerprint({name: tuple(t.shape) for name, t in state.items()})


def write_task(bundle_dir: str | Path, kind: str, task_name: str, tensors: dict,
               sample_count: int, fingerprint: str, fisher_mode: str | None = None,
               token_count: int | None = None, extras: dict | None = None) -> Path:
    """Write one task's tensors and fold the task into the bundle manifest."""
    if kind not in KINDS:
        raise ValueError(f"unknown bundle kind {kind!r}; expected one of {KINDS}")
    bundle_dir = Path(bundle_dir)
    bundle_dir.mkdir(parents=True, exist_ok=True)
    manifest_path = bundle_dir / "manifest.json"
    if manifest_path.is_file():
        manifest = json.loads(manifest_path.read_text())
        if manifest["kind"] != kind:
            raise ValueError(
                f"bundle at {bundle_dir} holds {manifest['kind']!r} stats, cannot add {kind!r}"
            )
        if manifest["base_model_fingerprint"] != fingerprint:
            raise ValueError(
                f"bundle at {bundle_dir} was built against a different base model"
            )
    else:
        manifest = {
            "kind": kind,
            "task_names": [],
            "sample_count": int(sample_count),
            "base_model_fingerprint": fingerprint,
        }
    if task_name not in manifest["task_names"]:
        manifest["task_names"].append(task_name)
    if fisher_mode is not None:
        manifest["fisher_mode"] = fisher_mode
    if token_count is not None:
        manifest.setdefault("token_counts", {})[task_name] = int(token_count)
    if extras:
        manifest.setdefault("extraction", {})[task_name] = extras

    arrays = {}
    for name, value in tensors.items():
        arr = value.detach().cpu().numpy() if hasattr(value, "detach") else np.asarray(value)
        if kind == "mask":
            arrays[name] = arr.astype(np.uint8)
        else:
            arrays[name] = np.ascontiguousarray(arr, dtype=np.float32)
    task_dir = bundle_dir / task_name
    task_dir.mkdir(exist_ok=True)
    save_file(arrays, task_dir / f"{kind}.safetensors")
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return bundle_dir
