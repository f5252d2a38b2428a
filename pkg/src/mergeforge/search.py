"""Hyperparameter grid search against a pluggable evaluation hook.

Default grids (counts in parentheses): task arithmetic lambda 0.1..1.0
(10); regmean alpha {0.1,0.3,0.5,0.7,0.9} (5); ties and dare sparsity
{0.1,0.2,0.3} x lambda 0.1..1.0 (30 each); consensus sequential schedule,
per-task mask threshold {0.2..0.6} tuned one task at a time with untuned
tasks held at 0.4, then lambda 0.1..1.0 (5n+10 = 35 for five tasks);
dataless localize-and-stitch sparsity {0.1..0.5} (5); model soup, fisher,
and trained-mask stitching have nothing to tune (0).

The hook contract: the command receives the merged checkpoint path and must
print score-table JSON on stdout and exit 0. A failing candidate (nonzero
exit, unparsable output) is excluded; the search errors out only if every
candidate failed.
"""

from __future__ import annotations

import json
import shlex
import shutil
import subprocess
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from .checkpoint import CheckpointSet
from .errors import HookError, SearchError, ValidationError
from .metrics import ScoreTable, TimingRecord, normalized_performance
from .pipeline import merge_checkpoints, open_recipe_stats
from .recipes import MergeRecipe

SCHEDULE_JOINT = "joint"
SCHEDULE_SEQUENTIAL = "sequential_consensus"

#: sparsity in the grids is the kept fraction; dare drops the complement
_SPARSITY_GRID = (0.1, 0.2, 0.3)
_LS_SPARSITY_GRID = (0.1, 0.2, 0.3, 0.4, 0.5)
_ALPHA_GRID = (0.1, 0.3, 0.5, 0.7, 0.9)
_MASK_LAMBDA_GRID = (0.2, 0.3, 0.4, 0.5, 0.6)
_MASK_LAMBDA_HOLD = 0.4
_LAMBDA_HOLD = 1.0


def _lambda_grid() -> tuple[float, ...]:
    return tuple(round(0.1 * i, 10) for i in range(1, 11))


@dataclass
class SearchPlan:
    method: str
    grid: list[MergeRecipe]
    schedule: str
    n_tasks: int
    base_recipe: MergeRecipe
    eval_hook: Optional[str] = None
    score_files: Optional[str] = None
    mask_lambda_grid: tuple[float, ...] = _MASK_LAMBDA_GRID
    mask_lambda_hold: float = _MASK_LAMBDA_HOLD
    lambda_grid: tuple[float, ...] = field(default_factory=_lambda_grid)
    lambda_hold: float = _LAMBDA_HOLD


def build_plan(method: str, n_tasks: int = 5, overrides: Optional[dict] = None,
               stats_path: Optional[str] = None, seed: Optional[int] = None) -> SearchPlan:
    """Build the default search grid for a method.

    n_tasks matters only for the consensus schedule (5n+10 candidates).
    overrides may replace lambda_grid, sparsity_grid, alpha_grid,
    mask_lambda_grid, mask_lambda_hold, or lambda_hold.
    """
    overrides = dict(overrides or {})
    lam_grid = tuple(overrides.pop("lambda_grid", _lambda_grid()))
    sparsity_grid = tuple(overrides.pop("sparsity_grid", _SPARSITY_GRID))
    ls_grid = tuple(overrides.pop("ls_sparsity_grid", _LS_SPARSITY_GRID))
    alpha_grid = tuple(overrides.pop("alpha_grid", _ALPHA_GRID))
    mask_grid = tuple(overrides.pop("mask_lambda_grid", _MASK_LAMBDA_GRID))
    mask_hold = float(overrides.pop("mask_lambda_hold", _MASK_LAMBDA_HOLD))
    lam_hold = float(overrides.pop("lambda_hold", _LAMBDA_HOLD))
    if overrides:
        raise ValidationError(f"unknown search overrides: {sorted(overrides)}")

    schedule = SCHEDULE_JOINT
    if method == "model_soup":
        base = MergeRecipe(method="model_soup")
        grid: list[MergeRecipe] = []
    elif method == "task_arithmetic":
        base = MergeRecipe(method="task_arithmetic", lam=lam_grid[0])
        grid = [MergeRecipe(method="task_arithmetic", lam=l) for l in lam_grid]
    elif method == "fisher":
        base = MergeRecipe(method="fisher", stats_path=stats_path or "")
        grid = []
    elif method == "regmean":
        base = MergeRecipe(method="regmean", alpha=alpha_grid[0], stats_path=stats_path or "")
        grid = [MergeRecipe(method="regmean", alpha=a, stats_path=stats_path or "")
                for a in alpha_grid]
    elif method == "ties":
        base = MergeRecipe(method="ties", sparsity=sparsity_grid[0], lam=lam_grid[0])
        grid = [MergeRecipe(method="ties", sparsity=s, lam=l)
                for s in sparsity_grid for l in lam_grid]
    elif method == "dare":
        base = MergeRecipe(method="dare", drop_rate=round(1.0 - sparsity_grid[0], 10),
                           lam=lam_grid[0], seed=seed)
        grid = [MergeRecipe(method="dare", drop_rate=round(1.0 - s, 10), lam=l, seed=seed)
                for s in sparsity_grid for l in lam_grid]
    elif method == "consensus_ta":
        if n_tasks < 2:
            raise ValidationError(f"consensus search needs at least 2 tasks, got {n_tasks}")
        schedule = SCHEDULE_SEQUENTIAL
        hold = (mask_hold,) * n_tasks
        base = MergeRecipe(method="consensus_ta", lam=lam_hold, per_task_lambda=hold)
        grid = []
        for task_idx in range(n_tasks):
            for value in mask_grid:
                thresholds = list(hold)
                thresholds[task_idx] = value
                grid.append(MergeRecipe(method="consensus_ta", lam=lam_hold,
                                        per_task_lambda=tuple(thresholds)))
        for l in lam_grid:
            grid.append(MergeRecipe(method="consensus_ta", lam=l, per_task_lambda=hold))
    elif method == "ls_dataless":
        base = MergeRecipe(method="ls_dataless", sparsity=ls_grid[0])
        grid = [MergeRecipe(method="ls_dataless", sparsity=s) for s in ls_grid]
    elif method == "ls_trained":
        base = MergeRecipe(method="ls_trained", stats_path=stats_path or "")
        grid = []
    else:
        raise ValidationError(f"unknown merge method {method!r}")
    return SearchPlan(method=method, grid=grid, schedule=schedule, n_tasks=n_tasks,
                      base_recipe=base, mask_lambda_grid=mask_grid, mask_lambda_hold=mask_hold,
                      lambda_grid=lam_grid, lambda_hold=lam_hold)


@dataclass
class CandidateRecord:
    index: int
    phase: str
    recipe: MergeRecipe
    status: str = "pending"  # ok | failed
    score: Optional[float] = None
    merge_seconds: float = 0.0
    eval_seconds: float = 0.0
    error: Optional[str] = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "phase": self.phase,
            "recipe": {"method": self.recipe.method, **self.recipe.hyperparameters()},
            "status": self.status,
            "score": self.score,
            "merge_seconds": round(self.merge_seconds, 6),
            "eval_seconds": round(self.eval_seconds, 6),
            "error": self.error,
        }


@dataclass
class SearchResult:
    method: str
    schedule: str
    best: Optional[CandidateRecord]
    candidates: list[CandidateRecord]
    timings: list[TimingRecord]
    output_dir: Optional[Path]

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "schedule": self.schedule,
            "best_index": self.best.index if self.best else None,
            "best_score": self.best.score if self.best else None,
            "candidates": [c.to_dict() for c in self.candidates],
        }


def run_hook(template: str, checkpoint_path: Path, index: int) -> ScoreTable:
    """Run the evaluation command and parse its stdout as a score table."""
    argv = [a.format(checkpoint=str(checkpoint_path), index=index)
            for a in shlex.split(template)]
    proc = subprocess.run(argv, capture_output=True, text=True)
    if proc.returncode != 0:
        raise HookError(
            f"evaluation hook exited with {proc.returncode}: {proc.stderr.strip()[:500]}"
        )
    try:
        return ScoreTable.from_dict(json.loads(proc.stdout))
    except (json.JSONDecodeError, ValidationError) as exc:
        raise HookError(f"evaluation hook printed an unparsable score table: {exc}") from exc


class _Evaluator:
    def __init__(self, plan: SearchPlan):
        if plan.eval_hook and plan.score_files:
            raise ValidationError("give either an evaluation hook or score files, not both")
        self.plan = plan

    def __call__(self, checkpoint_path: Path, index: int) -> float:
        if self.plan.eval_hook:
            table = run_hook(self.plan.eval_hook, checkpoint_path, index)
        elif self.plan.score_files:
            path = self.plan.score_files.format(index=index)
            table = ScoreTable.from_json_file(path)
        else:
            raise ValidationError("search plan has no evaluation hook or score files")
        return normalized_performance(table)


def run_search(plan: SearchPlan, ckpt_set: CheckpointSet, out_dir: str | Path,
               shard_bytes_limit: int = 5 * 1024 ** 3, threads: Optional[int] = None,
               work_dir: Optional[Path] = None, keep_all: bool = False,
               merge_fn: Optional[Callable] = None,
               eval_fn: Optional[Callable[[Path, int], float]] = None) -> SearchResult:
    """Run the plan's grid, pick the argmax-normalized-performance candidate
    (ties break toward the earlier grid position), and leave its checkpoint
    at out_dir. Candidates are merged one at a time; only the best-so-far
    checkpoint is retained unless keep_all is set.

    merge_fn and eval_fn are injection points for tests; the defaults run
    the real pipeline and the plan's hook.
    """
    out_dir = Path(out_dir)
    if out_dir.exists():
        raise ValidationError(f"search output directory already exists: {out_dir}")
    merge_fn = merge_fn or merge_checkpoints
    eval_fn = eval_fn or _Evaluator(plan)
    work_dir = Path(work_dir) if work_dir else out_dir.parent / (out_dir.name + ".search")
    work_dir.mkdir(parents=True, exist_ok=True)
    stats = open_recipe_stats(plan.base_recipe, ckpt_set)

    candidates: list[CandidateRecord] = []
    timings: list[TimingRecord] = []
    best: Optional[CandidateRecord] = None
    best_dir = work_dir / "best"

    def run_candidate(record: CandidateRecord, final_phase: bool) -> None:
        nonlocal best
        cand_dir = work_dir / (f"candidate-{record.index:03d}" if keep_all else "candidate")
        if cand_dir.exists():
            shutil.rmtree(cand_dir)
        t0 = time.perf_counter()
        merge_fn(ckpt_set, record.recipe, cand_dir, shard_bytes_limit=shard_bytes_limit,
                 threads=threads, stats=stats)
        record.merge_seconds = time.perf_counter() - t0
        timings.append(TimingRecord(plan.method, "algorithm", f"candidate-{record.index}",
                                    record.merge_seconds))
        t1 = time.perf_counter()
        try:
            record.score = float(eval_fn(cand_dir, record.index))
            record.status = "ok"
        except (HookError, ValidationError, OSError) as exc:
            record.status = "failed"
            record.error = str(exc)
        record.eval_seconds = time.perf_counter() - t1
        timings.append(TimingRecord(plan.method, "validation", f"candidate-{record.index}",
                                    record.eval_seconds))
        is_best = (
            final_phase and record.status == "ok"
            and (best is None or record.score > best.score)
        )
        if is_best:
            best = record
            if best_dir.exists():
                shutil.rmtree(best_dir)
            if keep_all:
                shutil.copytree(cand_dir, best_dir)
            else:
                cand_dir.rename(best_dir)
        elif not keep_all and cand_dir.exists():
            shutil.rmtree(cand_dir)

    if not plan.grid:
        # nothing to tune: a single merge, no validation entries
        record = CandidateRecord(index=0, phase="merge", recipe=plan.base_recipe, status="ok",
                                 score=None)
        cand_dir = work_dir / "best"
        t0 = time.perf_counter()
        merge_fn(ckpt_set, plan.base_recipe, cand_dir, shard_bytes_limit=shard_bytes_limit,
                 threads=threads, stats=stats)
        record.merge_seconds = time.perf_counter() - t0
        timings.append(TimingRecord(plan.method, "algorithm", "merge", record.merge_seconds))
        candidates.append(record)
        best = record
    elif plan.schedule == SCHEDULE_JOINT:
        for idx, recipe in enumerate(plan.grid):
            record = CandidateRecord(index=idx, phase="grid", recipe=recipe)
            candidates.append(record)
            run_candidate(record, final_phase=True)
    else:
        n = plan.n_tasks
        tuned = [plan.mask_lambda_hold] * n
        idx = 0
        for task_idx in range(n):
            phase_best: Optional[tuple[float, float]] = None  # (score, value)
            for value in plan.mask_lambda_grid:
                thresholds = list(tuned)
                thresholds[task_idx] = value
                recipe = plan.grid[idx].replace(per_task_lambda=tuple(thresholds),
                                                lam=plan.lambda_hold)
                record = CandidateRecord(index=idx, phase=f"mask-task-{task_idx}", recipe=recipe)
                candidates.append(record)
                run_candidate(record, final_phase=False)
                if record.status == "ok" and (phase_best is None or record.score > phase_best[0]):
                    phase_best = (record.score, value)
                idx += 1
            if phase_best is not None:
                tuned[task_idx] = phase_best[1]
        for l in plan.lambda_grid:
            recipe = plan.grid[idx].replace(per_task_lambda=tuple(tuned), lam=l)
            record = CandidateRecord(index=idx, phase="scale", recipe=recipe)
            candidates.append(record)
            run_candidate(record, final_phase=True)
            idx += 1

    if best is None:
        raise SearchError("every candidate failed evaluation; no merged model to select")
    if plan.grid:
        failed = [c for c in candidates if c.status == "failed"]
        if len(failed) == len(candidates):
            raise SearchError("every candidate failed evaluation")
    best_dir_final = work_dir / "best"
    best_dir_final.rename(out_dir)
    if not keep_all:
        shutil.rmtree(work_dir, ignore_errors=True)
    return SearchResult(method=plan.method, schedule=plan.schedule, best=best,
                        candidates=candidates, timings=timings, output_dir=out_dir)
