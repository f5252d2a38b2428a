"""Empirical Fisher diagonals: mean squared gradient of per-sample
log-likelihood, taken at the empirical labels (fisher_mode="empirical")."""

from __future__ import annotations

from typing import Callable, Iterable

import torch

FISHER_MODE = "empirical"


def fisher_diagonals(model: torch.nn.Module, samples: Iterable,
                     loglik_fn: Callable[[torch.nn.Module, object], torch.Tensor],
                     sample_count: int) -> tuple[dict[str, torch.Tensor], int, int]:
    """Accumulate grad(log p)^2 one sample at a time.

    loglik_fn returns the scalar log-likelihood of one sample. Samples whose
    gradients are non-finite are skipped and counted. Returns (diagonals,
    used, skipped); parameters that never receive a gradient keep zeros.
    """
    if sample_count < 1:
        raise ValueError(f"sample_count must be >= 1, got {sample_count}")
    params = {n: p for n, p in model.named_parameters()}
    acc = {n: torch.zeros_like(p, dtype=torch.float32) for n, p in params.items()}
    used = 0
    skipped = 0
    was_training = model.training
    model.eval()
    try:
        for sample in samples:
            if used >= sample_count:
                break
            model.zero_grad(set_to_none=True)
            try:
                loglik = loglik_fn(model, sample)
                loglik.backward()
            except torch.cuda.OutOfMemoryError:
                raise MemoryError(
                    "out of memory while computing a per-sample gradient; "
                    "reduce the batch/sequence size"
                ) from None
            grads = {n: p.grad for n, p in params.items() if p.grad is not None}
            if any(not torch.isfinite(g).all() for g in grads.values()):
                skipped += 1
                continue
            for name, grad in grads.items():
                acc[name] += grad.detach().float() ** 2
            used += 1
    finally:
        model.zero_grad(set_to_none=True)
        model.train(was_training)
    if used == 0:
        raise ValueError("no usable samples: every gradient was non-finite or the "
                         "dataset was empty")
    return {n: a / used for n, a in acc.items()}, used, skipped
