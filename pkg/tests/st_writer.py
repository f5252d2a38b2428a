"""Minimal independent safetensors encoder for test fixtures.

Deliberately shares no code with the package so fixture files cross-check
the engine's reader against a second implementation.
"""

import json

import numpy as np

_CODES = {
    np.dtype(np.float32): "F32",
    np.dtype(np.float16): "F16",
    np.dtype(np.uint8): "U8",
}


def write_st(path, tensors, metadata=None):
    header = {}
    if metadata:
        header["__metadata__"] = metadata
    chunks = []
    offset = 0
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr)
        data = arr.tobytes()
        header[name] = {
            "dtype": _CODES[arr.dtype],
            "shape": list(arr.shape),
            "data_offsets": [offset, offset + len(data)],
        }
        chunks.append(data)
        offset += len(data)
    blob = json.dumps(header).encode()
    with open(path, "wb") as fh:
        fh.write(len(blob).to_bytes(8, "little"))
        fh.write(blob)
        for chunk in chunks:
            fh.write(chunk)


def make_bundle(root, kind, per_task, sample_count=1000, fingerprint="0" * 16,
                fisher_mode=None, token_counts=None):
    """per_task: {task_name: {key: ndarray}}; returns the bundle path."""
    root.mkdir(parents=True, exist_ok=True)
    manifest = {
        "kind": kind,
        "task_names": list(per_task),
        "sample_count": sample_count,
        "base_model_fingerprint": fingerprint,
    }
    if fisher_mode:
        manifest["fisher_mode"] = fisher_mode
    if token_counts:
        manifest["token_counts"] = token_counts
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2))
    for task, tensors in per_task.items():
        task_dir = root / task
        task_dir.mkdir(exist_ok=True)
        write_st(task_dir / f"{kind}.safetensors", tensors)
    return root
