"""Gram matrices of linear-layer inputs, captured with forward hooks.

For every nn.Linear the hook flattens the incoming activations to
(tokens, in_features) and accumulates x^T x as a raw float64 sum; the
per-task token count is reported alongside so the merge engine can put
tasks on a common scale. Keys follow the checkpoint convention:
"<module>.weight". Modules without a 2-D weight are skipped.
"""

from __future__ import annotations

from typing import Callable, Iterable

import torch


def gram_matrices(model: torch.nn.Module, samples: Iterable,
                  forward_fn: Callable[[torch.nn.Module, object], None],
                  sample_count: int) -> tuple[dict[str, torch.Tensor], int, int]:
    """Run forward_fn over up to sample_count samples and return
    ({weight key: gram}, used sample count, tokens per layer)."""
    if sample_count < 1:
        raise ValueError(f"sample_count must be >= 1, got {sample_count}")
    grams: dict[str, torch.Tensor] = {}
    token_counts: dict[str, int] = {}

    def make_hook(key: str, in_features: int):
        def hook(module, inputs, output):
            x = inputs[0]
            if x is None:
                return
            x = x.detach().reshape(-1, x.shape[-1]).to(torch.float64)
            if x.shape[-1] != in_features:
                return
            if key not in grams:
                grams[key] = torch.zeros((in_features, in_features), dtype=torch.float64)
            grams[key] += x.T @ x
            token_counts[key] = token_counts.get(key, 0) + x.shape[0]
        return hook

    handles = []
    for name, module in model.named_modules():
        if isinstance(module, torch.nn.Linear) and module.weight.ndim == 2:
            key = f"{name}.weight" if name else "weight"
            handles.append(module.register_forward_hook(
                make_hook(key, module.in_features)))
    was_training = model.training
    model.eval()
    used = 0
    try:
        with torch.no_grad():
            for sample in samples:
                if used >= sample_count:
                    break
                forward_fn(model, sample)
                used += 1
    finally:
        for handle in handles:
            handle.remove()
        model.train(was_training)
    if used == 0:
        raise ValueError("no samples were processed")
    # every layer normally sees the same token stream; report that count
    tokens = max(token_counts.values()) if token_counts else 0
    return {k: g.to(torch.float32) for k, g in grams.items()}, used, tokens
