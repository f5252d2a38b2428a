import numpy as np
import pytest

from mergeforge.checkpoint import open_checkpoint, validate_set, write_checkpoint
from mergeforge.dtypes import DType, decode_to_f32, encode_from_f32
from mergeforge.tensor import Tensor


def random_state_dict(rng, spec):
    """spec: list of (key, shape, DType). Values are representable in the
    storage dtype, so checkpoints round-trip exactly."""
    out = {}
    for key, shape, dtype in spec:
        raw = rng.standard_normal(shape).astype(np.float32)
        values = decode_to_f32(encode_from_f32(raw, dtype), dtype, tuple(shape))
        out[key] = Tensor(values, dtype)
    return out


def write_model(tmp_path, name, state, shard_bytes_limit=5 * 1024 ** 3):
    path = tmp_path / name
    write_checkpoint(state.items(), path, shard_bytes_limit)
    return path


DEFAULT_SPEC = [
    ("embed.weight", (16, 8), DType.float32),
    ("layers.0.attn.weight", (8, 8), DType.float32),
    ("layers.0.mlp.weight", (12, 8), DType.float16),
    ("layers.0.norm.weight", (8,), DType.bfloat16),
    ("lm_head.weight", (16, 8), DType.float32),
]


@pytest.fixture
def small_set(tmp_path):
    """A pretrained model plus three finetuned variants on disk."""
    rng = np.random.default_rng(7)
    base = random_state_dict(rng, DEFAULT_SPEC)
    pre_path = write_model(tmp_path, "base", base)
    ft_paths = []
    for i in range(3):
        ft = {}
        for key, t in base.items():
            delta = rng.standard_normal(t.shape).astype(np.float32) * 0.05
            values = decode_to_f32(
                encode_from_f32(t.values + delta, t.dtype), t.dtype, t.shape
            )
            ft[key] = Tensor(values, t.dtype)
        ft_paths.append(write_model(tmp_path, f"ft{i}", ft))
    pretrained = open_checkpoint(pre_path)
    finetuned = [open_checkpoint(p) for p in ft_paths]
    return validate_set(pretrained, finetuned, ["alpha", "beta", "gamma"])
