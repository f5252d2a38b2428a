"""Loading real models and sample data for extraction runs.

Models are Hugging Face causal-LM directories (config.json + safetensors).
Data is JSONL: either pre-tokenized {"input_ids": [...]} rows, which need
no tokenizer, or {"text": "..."} rows / plain-text lines tokenized with
the model's own tokenizer.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Iterator, Optional

import torch


def load_causal_lm(model_path: str | Path):
    model_path = Path(model_path)
    if not (model_path / "config.json").is_file():
        raise ValueError(
            f"{model_path} is not a loadable model directory (no config.json); "
            f"expected a Hugging Face causal-LM checkpoint"
        )
    try:
        from transformers import AutoModelForCausalLM
    except ImportError as exc:
        raise ImportError(
            "loading model directories requires the 'transformers' extra "
            "(pip install mergestats[hf])"
        ) from exc
    model = AutoModelForCausalLM.from_pretrained(model_path, dtype=torch.float32)
    model.eval()
    return model


def _tokenizer_for(model_path) -> "object":
    from transformers import AutoTokenizer
    return AutoTokenizer.from_pretrained(model_path)


def iter_samples(data_path: str | Path, model_path: Optional[str | Path] = None,
                 max_tokens: int = 1024) -> Iterator[torch.Tensor]:
    """Yield 1-D input_ids tensors, one per sample line."""
    data_path = Path(data_path)
    tokenizer = None
    with open(data_path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            if line.startswith("{"):
                row = json.loads(line)
                if "input_ids" in row:
                    ids = row["input_ids"]
                    yield torch.tensor(ids[:max_tokens], dtype=torch.long)
                    continue
                text = row.get("text", "")
            else:
                text = line
            if tokenizer is None:
                if model_path is None:
                    raise ValueError("text samples need a model path for tokenization")
                tokenizer = _tokenizer_for(model_path)
            ids = tokenizer(text, truncation=True, max_length=max_tokens)["input_ids"]
            yield torch.tensor(ids, dtype=torch.long)


def causal_loglik(model, input_ids: torch.Tensor) -> torch.Tensor:
    """Summed log-likelihood of one sample under the model (scalar)."""
    ids = input_ids.unsqueeze(0)
    out = model(input_ids=ids, labels=ids)
    n_predicted = max(int(input_ids.numel()) - 1, 1)
    return -out.loss * n_predicted


def causal_forward(model, input_ids: torch.Tensor) -> None:
    model(input_ids=input_ids.unsqueeze(0))


def causal_masked_loss(model, params: dict, input_ids: torch.Tensor) -> torch.Tensor:
    ids = input_ids.unsqueeze(0)
    out = torch.func.functional_call(model, params, (), {"input_ids": ids, "labels": ids})
    return out.loss
