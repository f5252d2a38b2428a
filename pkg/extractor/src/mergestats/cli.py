"""Command line: extract one task's statistics into a bundle directory.

    mergestats extract --kind fisher_diag --model models/math \\
        --data math_train.jsonl --out stats/fisher --task-name math

Running the command once per task grows the same bundle; the manifest keeps
the task list and the base-model fingerprint consistent. Mask extraction
additionally needs --pretrained (the shared base checkpoint).
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import torch

from .bundles import checkpoint_fingerprint, write_task
from .fisher import FISHER_MODE, fisher_diagonals
from .gram import gram_matrices
from .masks import MaskTrainingConfig, train_masks
from .models import (
    causal_forward,
    causal_loglik,
    causal_masked_loss,
    iter_samples,
    load_causal_lm,
)


def _state_dict_from(model_path: str) -> dict[str, torch.Tensor]:
    model = load_causal_lm(model_path)
    return {n: p.detach().clone() for n, p in model.named_parameters()}


def cmd_extract(args) -> int:
    out = Path(args.out)
    task = args.task_name or Path(args.model).name
    model = load_causal_lm(args.model)
    samples = iter_samples(args.data, args.model, max_tokens=args.max_tokens)
    extras = {}
    token_count = None
    fisher_mode = None

    if args.kind == "fisher_diag":
        fingerprint = args.fingerprint or checkpoint_fingerprint(args.model)
        stats, used, skipped = fisher_diagonals(
            model, samples, lambda m, s: causal_loglik(m, s), args.sample_count
        )
        extras = {"samples_used": used, "samples_skipped": skipped}
        fisher_mode = FISHER_MODE
    elif args.kind == "gram":
        fingerprint = args.fingerprint or checkpoint_fingerprint(args.model)
        stats, used, token_count = gram_matrices(
            model, samples, lambda m, s: causal_forward(m, s), args.sample_count
        )
        extras = {"samples_used": used}
    else:  # mask
        if not args.pretrained:
            print("error: --kind mask needs --pretrained", file=sys.stderr)
            return 1
        fingerprint = args.fingerprint or checkpoint_fingerprint(args.pretrained)
        pretrained = _state_dict_from(args.pretrained)
        finetuned = {n: p.detach().clone() for n, p in model.named_parameters()}
        batches = []
        for i, sample in enumerate(samples):
            if i >= args.sample_count:
                break
            batches.append(sample)
        config = MaskTrainingConfig(
            steps=args.steps, lr=args.lr, target_sparsity=args.target_sparsity,
            sparsity_weight=args.sparsity_weight,
        )
        result = train_masks(model, pretrained, finetuned, batches,
                             causal_masked_loss, config)
        if result.diverged:
            print(f"warning: training diverged at step {result.steps_run}; "
                  f"keeping the last stable masks", file=sys.stderr)
        stats = result.masks
        extras = {
            "achieved_sparsity": round(result.achieved_sparsity, 6),
            "target_sparsity": args.target_sparsity,
            "steps_run": result.steps_run,
        }

    write_task(out, args.kind, task, stats, sample_count=args.sample_count,
               fingerprint=fingerprint, fisher_mode=fisher_mode,
               token_count=token_count, extras=extras)
    print(f"wrote {args.kind} stats for task {task!r} -> {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mergestats", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("extract", help="extract one task's statistics")
    p.add_argument("--kind", required=True, choices=["fisher_diag", "gram", "mask"])
    p.add_argument("--model", required=True, help="finetuned model directory")
    p.add_argument("--data", required=True, help="JSONL (input_ids or text) or plain text")
    p.add_argument("--out", required=True, help="bundle directory")
    p.add_argument("--task-name", default=None, help="default: model directory name")
    p.add_argument("--sample-count", type=int, default=1000)
    p.add_argument("--batch-size", type=int, default=1,
                   help="reserved; gradient statistics run per sample")
    p.add_argument("--max-tokens", type=int, default=1024)
    p.add_argument("--fingerprint", default=None,
                   help="override the base-model fingerprint recorded in the manifest")
    p.add_argument("--pretrained", default=None, help="base checkpoint (mask training)")
    p.add_argument("--steps", type=int, default=200, help="mask training steps")
    p.add_argument("--lr", type=float, default=0.1, help="mask training learning rate")
    p.add_argument("--target-sparsity", type=float, default=0.1,
                   help="fraction of parameters the masks should keep")
    p.add_argument("--sparsity-weight", type=float, default=1.0)
    p.set_defaults(func=cmd_extract)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, MemoryError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
