"""Train per-parameter binary localization masks.

The mask over each parameter's task delta is parameterized by sigmoid
logits, trained to minimize the task loss of (pretrained + mask * delta)
plus a quadratic penalty pulling the kept fraction toward the target.
Forward passes binarize at 0.5 with a straight-through estimator; the
returned masks are the binarized logits from the last stable step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterator

import torch


@dataclass
class MaskTrainingConfig:
    steps: int = 200
    lr: float = 0.1
    target_sparsity: float = 0.1  # fraction of parameters kept
    sparsity_weight: float = 1.0
    init_logit: float = 0.0
    exclude: tuple[str, ...] = field(default_factory=tuple)  # parameter-name substrings


@dataclass
class MaskTrainingResult:
    masks: dict[str, torch.Tensor]  # uint8, parameter-shaped
    achieved_sparsity: float
    steps_run: int
    final_loss: float
    diverged: bool


def _binarize(logits: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {n: (torch.sigmoid(l) >= 0.5).to(torch.uint8) for n, l in logits.items()}


def train_masks(model: torch.nn.Module, pretrained: dict[str, torch.Tensor],
                finetuned: dict[str, torch.Tensor],
                batches: Iterator, loss_fn: Callable[[torch.nn.Module, dict, object],
                                                     torch.Tensor],
                config: MaskTrainingConfig = MaskTrainingConfig()) -> MaskTrainingResult:
    """loss_fn(model, params, batch) evaluates the task loss with the given
    parameter mapping (e.g. via torch.func.functional_call). batches is an
    iterator cycled for config.steps optimizer steps. Divergence (non-finite
    loss) aborts and returns the masks from the last stable step."""
    deltas = {}
    for name, pre in pretrained.items():
        if any(token in name for token in config.exclude):
            continue
        deltas[name] = (finetuned[name].detach() - pre.detach()).float()
    if not deltas:
        raise ValueError("no parameters left to localize")
    pre_params = {n: p.detach().float() for n, p in pretrained.items()}
    logits = {n: torch.full_like(d, config.init_logit, requires_grad=True)
              for n, d in deltas.items()}
    optimizer = torch.optim.Adam(logits.values(), lr=config.lr)
    total = sum(d.numel() for d in deltas.values())

    stable = _binarize(logits)
    last_loss = float("inf")
    steps_run = 0
    diverged = False
    batch_list = list(batches)
    if not batch_list:
        raise ValueError("mask training needs at least one batch")
    for step in range(config.steps):
        batch = batch_list[step % len(batch_list)]
        optimizer.zero_grad(set_to_none=True)
        soft = {n: torch.sigmoid(l) for n, l in logits.items()}
        # straight-through: hard 0/1 forward, sigmoid gradient backward
        hard = {n: (s >= 0.5).float() + s - s.detach() for n, s in soft.items()}
        params = dict(pre_params)
        for name, mask in hard.items():
            params[name] = pre_params[name] + mask * deltas[name]
        task_loss = loss_fn(model, params, batch)
        density = sum(s.sum() for s in soft.values()) / total
        loss = task_loss + config.sparsity_weight * (density - config.target_sparsity) ** 2
        if not torch.isfinite(loss):
            diverged = True
            break
        loss.backward()
        optimizer.step()
        stable = _binarize(logits)
        last_loss = float(loss.detach())
        steps_run = step + 1
    kept = sum(int(m.sum()) for m in stable.values())
    return MaskTrainingResult(
        masks=stable,
        achieved_sparsity=kept / total,
        steps_run=steps_run,
        final_loss=last_loss,
        diverged=diverged,
    )
