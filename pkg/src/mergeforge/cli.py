"""Command-line front end.

Subcommands: merge, search, report, validate. Recipes are TOML; machine
outputs are JSON. Exit codes: 1 validation, 2 checkpoint I/O, 3 stats.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .checkpoint import compatibility_report, open_checkpoint, validate_set
from .errors import (
    CheckpointError,
    MergeForgeError,
    StatsError,
    ValidationError,
)
from .metrics import (
    ScoreTable,
    TimingRecord,
    forgetting_score,
    normalized_performance,
    runtime_report,
)
from .pipeline import merge_checkpoints, resolve_threads
from .recipes import MergeRecipe
from .search import build_plan, run_search

DEFAULT_SHARD_BYTES = 5 * 1024 ** 3

_RECIPE_SECTIONS = {"models", "method", "stats", "output", "search"}
_MODELS_KEYS = {"pretrained", "finetuned", "task_names"}
_OUTPUT_KEYS = {"path", "shard_bytes_limit"}
_STATS_KEYS = {"path"}
_SEARCH_KEYS = {
    "hook", "score_files", "keep_all",
    "lambda_grid", "sparsity_grid", "ls_sparsity_grid", "alpha_grid",
    "mask_lambda_grid", "mask_lambda_hold", "lambda_hold",
}


class RecipeFile:
    def __init__(self, doc: dict, path: Path):
        extra = set(doc) - _RECIPE_SECTIONS
        if extra:
            raise ValidationError(f"{path}: unknown recipe sections: {sorted(extra)}")
        models = doc.get("models")
        if not models:
            raise ValidationError(f"{path}: recipe needs a [models] section")
        extra = set(models) - _MODELS_KEYS
        if extra:
            raise ValidationError(f"{path}: unknown [models] keys: {sorted(extra)}")
        try:
            self.pretrained = str(models["pretrained"])
            self.finetuned = [str(p) for p in models["finetuned"]]
        except KeyError as exc:
            raise ValidationError(f"{path}: [models] needs {exc} set") from exc
        if not self.finetuned:
            raise ValidationError(f"{path}: [models].finetuned must list at least one model")
        names = models.get("task_names")
        if names is not None:
            self.task_names = [str(n) for n in names]
            if len(self.task_names) != len(self.finetuned):
                raise ValidationError(
                    f"{path}: {len(self.task_names)} task names for "
                    f"{len(self.finetuned)} finetuned models"
                )
        else:
            self.task_names = [Path(p).name or f"task{i}" for i, p in enumerate(self.finetuned)]
        if len(set(self.task_names)) != len(self.task_names):
            raise ValidationError(f"{path}: task names must be unique, got {self.task_names}")

        method = doc.get("method")
        if not method or "name" not in method:
            raise ValidationError(f"{path}: recipe needs a [method] section with a name")
        self.method_table = dict(method)

        stats = doc.get("stats") or {}
        extra = set(stats) - _STATS_KEYS
        if extra:
            raise ValidationError(f"{path}: unknown [stats] keys: {sorted(extra)}")
        self.stats_path: Optional[str] = stats.get("path")

        output = doc.get("output") or {}
        extra = set(output) - _OUTPUT_KEYS
        if extra:
            raise ValidationError(f"{path}: unknown [output] keys: {sorted(extra)}")
        self.output_path: Optional[str] = output.get("path")
        self.shard_bytes_limit = int(output.get("shard_bytes_limit", DEFAULT_SHARD_BYTES))

        search = doc.get("search")
        self.search_table: Optional[dict] = dict(search) if search is not None else None
        if self.search_table is not None:
            extra = set(self.search_table) - _SEARCH_KEYS
            if extra:
                raise ValidationError(f"{path}: unknown [search] keys: {sorted(extra)}")

    def merge_recipe(self) -> MergeRecipe:
        table = dict(self.method_table)
        if self.stats_path is not None:
            table.setdefault("stats_path", self.stats_path)
        return MergeRecipe.from_dict(table)


def load_recipe_file(path: str | Path) -> RecipeFile:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"recipe file not found: {path}")
    try:
        doc = tomllib.loads(path.read_text("utf-8"))
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ValidationError(f"{path}: invalid TOML: {exc}") from exc
    return RecipeFile(doc, path)


def _open_set(recipe_file: RecipeFile):
    pre_path = Path(recipe_file.pretrained)
    if not pre_path.exists():
        raise ValidationError(f"pretrained model path does not exist: {pre_path}")
    for p in recipe_file.finetuned:
        if not Path(p).exists():
            raise ValidationError(f"finetuned model path does not exist: {p}")
    pretrained = open_checkpoint(pre_path)
    finetuned = [open_checkpoint(p) for p in recipe_file.finetuned]
    return validate_set(pretrained, finetuned, recipe_file.task_names)


def cmd_merge(args) -> int:
    recipe_file = load_recipe_file(args.recipe)
    recipe = recipe_file.merge_recipe()
    out = args.out or recipe_file.output_path
    if not out:
        raise ValidationError("no output path: set [output].path or pass --out")
    ckpt_set = _open_set(recipe_file)
    result = merge_checkpoints(
        ckpt_set, recipe, out,
        shard_bytes_limit=recipe_file.shard_bytes_limit,
        threads=resolve_threads(args.threads),
    )
    print(f"merged {ckpt_set.n} models ({result.manifest.total_params} params) "
          f"with {recipe.method} -> {result.output_dir} "
          f"in {result.seconds:.2f}s")
    return 0


def cmd_search(args) -> int:
    recipe_file = load_recipe_file(args.recipe)
    if recipe_file.search_table is None:
        raise ValidationError("recipe has no [search] section")
    table = dict(recipe_file.search_table)
    hook = table.pop("hook", None)
    score_files = table.pop("score_files", None)
    keep_all = bool(table.pop("keep_all", False)) or args.keep_all
    method_table = dict(recipe_file.method_table)
    method = str(method_table.pop("name")).strip().lower().replace("-", "_")
    seed = method_table.pop("seed", None)
    if method_table:
        raise ValidationError(
            f"[method] must hold only the name (and seed for dare) when searching; "
            f"grids belong in [search]: {sorted(method_table)}"
        )
    out = args.out or recipe_file.output_path
    if not out:
        raise ValidationError("no output path: set [output].path or pass --out")
    ckpt_set = _open_set(recipe_file)
    plan = build_plan(method, n_tasks=ckpt_set.n, overrides=table,
                      stats_path=recipe_file.stats_path, seed=seed)
    plan.eval_hook = hook
    plan.score_files = score_files
    result = run_search(plan, ckpt_set, out,
                        shard_bytes_limit=recipe_file.shard_bytes_limit,
                        threads=resolve_threads(args.threads), keep_all=keep_all)
    log = result.to_dict()
    log["timings"] = [
        {"method": t.method, "phase": t.phase, "label": t.label, "seconds": round(t.seconds, 6)}
        for t in result.timings
    ]
    log_path = Path(out) / "search_log.json"
    log_path.write_text(json.dumps(log, indent=2, sort_keys=True) + "\n", "utf-8")
    best = result.best
    score = "n/a" if best.score is None else f"{best.score:.3f}"
    print(f"search over {len(result.candidates)} candidates done; "
          f"best #{best.index} (normalized performance {score}) -> {out}")
    print(f"log: {log_path}")
    return 0


def cmd_report(args) -> int:
    for path in args.scores:
        table = ScoreTable.from_json_file(path)
        print(f"table: {path}")
        print(f"  tasks: {len(table.tasks)}")
        print(f"  Avg. Acc: {table.average_merged():.2f}")
        print(f"  Avg. Norm: {normalized_performance(table):.2f}")
        if args.forgetting:
            print(f"  Forgetting: {forgetting_score(table):.2f}")
    if args.runtime_log:
        doc = json.loads(Path(args.runtime_log).read_text("utf-8"))
        records = [
            TimingRecord(method=str(t["method"]), phase=str(t["phase"]),
                         label=str(t.get("label", "")), seconds=float(t["seconds"]))
            for t in doc.get("timings", [])
        ]
        print(runtime_report(records).format_table())
    return 0


def cmd_validate(args) -> int:
    if args.recipe:
        recipe_file = load_recipe_file(args.recipe)
        pre_path, ft_paths = recipe_file.pretrained, recipe_file.finetuned
    else:
        if not args.pretrained or not args.finetuned:
            raise ValidationError("validate needs a recipe file or --pretrained/--finetuned")
        pre_path, ft_paths = args.pretrained, args.finetuned
    pretrained = open_checkpoint(pre_path)
    finetuned = [open_checkpoint(p) for p in ft_paths]
    report = compatibility_report(pretrained, finetuned)
    if not report:
        print(f"compatible: {len(finetuned)} finetuned models aligned with the base "
              f"({pretrained.total_params} params, {len(pretrained.entries)} tensors)")
        return 0
    print(f"incompatible: first {len(report)} mismatches", file=sys.stderr)
    for m in report:
        print(f"  [{m.kind}] {m.detail}", file=sys.stderr)
    return 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mergeforge",
        description="Merge task-specialized checkpoints into one multi-task model.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("merge", help="run one merge from a TOML recipe")
    p.add_argument("recipe")
    p.add_argument("--out", help="override [output].path")
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: MERGEFORGE_THREADS or logical cores)")
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("search", help="grid-search hyperparameters, keep the best merge")
    p.add_argument("recipe")
    p.add_argument("--out", help="override [output].path")
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--keep-all", action="store_true",
                   help="keep every candidate checkpoint instead of only the best")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("report", help="summarize score tables and runtimes")
    p.add_argument("scores", nargs="*", help="score table JSON files")
    p.add_argument("--forgetting", action="store_true",
                   help="also print the generalization retention score")
    p.add_argument("--runtime-log", help="search log JSON with timing records")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("validate", help="check that models share one parameter manifest")
    p.add_argument("recipe", nargs="?")
    p.add_argument("--pretrained")
    p.add_argument("--finetuned", nargs="+")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except StatsError as exc:
        print(f"stats error: {exc}", file=sys.stderr)
        return 3
    except (CheckpointError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 2
    except MergeForgeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
