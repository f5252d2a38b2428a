"""Streaming merge: read aligned groups, transform, write, bounded memory.

A producer thread walks keys in lexicographic order, reads one group at a
time under a byte budget of (n+1) max-size tensors plus the group being
produced, and hands compute to a worker pool. Outputs are committed in key
order by the producer itself, so results and output bytes are independent
of scheduling; all method randomness is counter-keyed per parameter.
"""

from __future__ import annotations

import json
import os
import time
from collections import deque
from concurrent.futures import Future, ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

from . import methods
from .alloc import ByteBudget
from .checkpoint import CheckpointManifest, CheckpointSet, CheckpointWriter, copy_sidecar_files
from .errors import ValidationError
from .kernels import backend_name
from .recipes import MergeRecipe
from .stats import StatsBundle, load_stats
from .tensor import Tensor

THREADS_ENV = "MERGEFORGE_THREADS"

#: conventions baked into the kernels, recorded so runs are comparable
CONVENTIONS = {
    "sparsity_scope": "per_tensor",
    "sparsity_semantics": "fraction_kept",
    "topk_tie_rule": "lower_flat_index",
    "sign_tie_rule": "elect_positive",
    "ties_merge_rule": "mean_over_aligned_survivors",
    "dare_rng": "counter_hash(seed,task,param,index)",
}

_STATS_KIND = {"fisher": "fisher_diag", "regmean": "gram", "ls_trained": "mask"}


def resolve_threads(requested: Optional[int] = None) -> int:
    """Pool size: MERGEFORGE_THREADS overrides --threads, default logical cores."""
    env = os.environ.get(THREADS_ENV, "").strip()
    if env:
        try:
            requested = int(env)
        except ValueError:
            raise ValidationError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
    if requested is None:
        requested = os.cpu_count() or 1
    if requested < 1:
        raise ValidationError(f"thread count must be >= 1, got {requested}")
    return requested


def _to_deltas(pre: Tensor, fts: list[Tensor]) -> list[Tensor]:
    """Convert finetuned tensors to deltas, dropping each source tensor as
    soon as its delta exists so at most one extra tensor is transient."""
    deltas = []
    while fts:
        ft = fts.pop(0)
        deltas.append(Tensor(ft.values - pre.values, ft.dtype))
        del ft
    return deltas


def merge_group(recipe: MergeRecipe, key: str, pre: Tensor, fts: list[Tensor],
                stats: Optional[StatsBundle], task_names: list[str]) -> Tensor:
    """Merge one aligned parameter group. Consumes the fts list."""
    method = recipe.method
    if method == "model_soup":
        out = methods.model_soup([t.values for t in fts])
    elif method == "fisher":
        fishers = [stats.tensor(task, key) for task in task_names]
        out = methods.fisher_merge([t.values for t in fts], fishers)
    elif method == "regmean":
        if pre.values.ndim == 2 and stats.covers(key, task_names):
            grams = [stats.gram(task, key) for task in task_names]
            out = methods.regmean_merge([t.values for t in fts], grams, recipe.alpha, key=key)
        else:
            out = methods.model_soup([t.values for t in fts])
    else:
        deltas = _to_deltas(pre, fts)
        taus = [d.values for d in deltas]
        if method == "task_arithmetic":
            out = methods.task_arithmetic(pre.values, taus, recipe.lam)
        elif method == "ties":
            out = methods.ties_merge(pre.values, taus, recipe.sparsity, recipe.lam)
        elif method == "dare":
            out = methods.dare_merge(pre.values, taus, recipe.drop_rate, recipe.lam,
                                     recipe.seed, key)
        elif method == "consensus_ta":
            if len(recipe.per_task_lambda) != len(taus):
                raise ValidationError(
                    f"recipe has {len(recipe.per_task_lambda)} per-task thresholds "
                    f"for {len(taus)} tasks"
                )
            out = methods.consensus_ta(pre.values, taus, recipe.lam, recipe.per_task_lambda)
        elif method == "ls_dataless":
            out = methods.ls_dataless(pre.values, taus, recipe.sparsity)
        elif method == "ls_trained":
            masks = [stats.tensor(task, key) for task in task_names]
            out = methods.ls_trained(pre.values, taus, masks)
        else:
            raise ValidationError(f"unknown merge method {method!r}")
    fts.clear()
    return Tensor(out, pre.dtype)


@dataclass
class MergeResult:
    output_dir: Path
    manifest: CheckpointManifest
    seconds: float
    metadata: dict


def open_recipe_stats(recipe: MergeRecipe, ckpt_set: CheckpointSet) -> Optional[StatsBundle]:
    if not recipe.needs_stats():
        return None
    if not recipe.stats_path:
        raise ValidationError(f"method {recipe.method!r} needs a stats bundle path")
    bundle = load_stats(recipe.stats_path, _STATS_KIND[recipe.method], ckpt_set.pretrained)
    missing = [t for t in ckpt_set.task_names if t not in bundle.task_names]
    if missing:
        raise ValidationError(
            f"stats bundle at {recipe.stats_path} has no entries for tasks {missing}; "
            f"it provides {bundle.task_names}"
        )
    return bundle


def run_metadata(recipe: MergeRecipe, ckpt_set: CheckpointSet) -> dict:
    return {
        "engine": "mergeforge",
        "backend": backend_name,
        "method": recipe.method,
        "hyperparameters": recipe.hyperparameters(),
        "conventions": dict(CONVENTIONS),
        "n_tasks": ckpt_set.n,
        "task_names": list(ckpt_set.task_names),
        "total_params": ckpt_set.pretrained.total_params,
    }


def merge_checkpoints(ckpt_set: CheckpointSet, recipe: MergeRecipe, out_dir: str | Path,
                      shard_bytes_limit: int = 5 * 1024 ** 3,
                      threads: Optional[int] = None,
                      stats: Optional[StatsBundle] = None) -> MergeResult:
    """Merge the set per the recipe into out_dir (safetensors, sharded at
    shard_bytes_limit, non-tensor files copied from the pretrained model)."""
    started = time.perf_counter()
    threads = resolve_threads(threads)
    if stats is None:
        stats = open_recipe_stats(recipe, ckpt_set)
    out_dir = Path(out_dir)

    metadata = run_metadata(recipe, ckpt_set)
    header_meta = {
        "mergeforge.method": recipe.method,
        "mergeforge.hyperparameters": json.dumps(metadata["hyperparameters"], sort_keys=True),
        "mergeforge.conventions": json.dumps(CONVENTIONS, sort_keys=True),
    }
    writer = CheckpointWriter(out_dir, shard_bytes_limit, metadata=header_meta)

    n = ckpt_set.n
    keys = ckpt_set.pretrained.keys()
    entries = ckpt_set.pretrained.entries
    # inputs (n+1 tensors) plus the produced tensor, all held as float32
    budget = ByteBudget((n + 1) * ckpt_set.max_tensor_numel() * 4)
    task_names = list(ckpt_set.task_names)

    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    pending: deque[tuple[str, Future, int]] = deque()

    def drain_one() -> None:
        key, fut, cost = pending.popleft()
        try:
            writer.add(key, fut.result())
        finally:
            budget.release(cost)

    try:
        for key in keys:
            cost = (n + 2) * entries[key].numel * 4
            while not budget.try_acquire(cost):
                if pending:
                    drain_one()
                else:
                    budget.force_acquire(cost)
                    break
            pre = ckpt_set.pretrained.read_tensor(key)
            fts = [m.read_tensor(key) for m in ckpt_set.finetuned]
            if pool is None:
                result = merge_group(recipe, key, pre, fts, stats, task_names)
                del pre, fts
                writer.add(key, result)
                del result
                budget.release(cost)
            else:
                fut = pool.submit(merge_group, recipe, key, pre, fts, stats, task_names)
                del pre, fts
                pending.append((key, fut, cost))
                while pending and pending[0][1].done():
                    drain_one()
        while pending:
            drain_one()
    finally:
        if pool is not None:
            pool.shutdown(wait=True)

    manifest = writer.finalize()
    pre_root = ckpt_set.pretrained.root
    copied = copy_sidecar_files(pre_root, out_dir)
    elapsed = time.perf_counter() - started
    metadata["copied_files"] = copied
    metadata["wall_clock_seconds"] = round(elapsed, 6)
    (out_dir / "merge_metadata.json").write_text(
        json.dumps(metadata, indent=2, sort_keys=True) + "\n", "utf-8"
    )
    return MergeResult(output_dir=out_dir, manifest=manifest, seconds=elapsed,
                       metadata=metadata)
