"""CLI runs against a tiny randomly initialized causal LM saved locally."""

import json

import numpy as np
import pytest
import torch

from mergestats.cli import main

transformers = pytest.importorskip("transformers")
mergeforge_stats = pytest.importorskip("mergeforge.stats")


@pytest.fixture(scope="module")
def tiny_lm(tmp_path_factory):
    torch.manual_seed(0)
    config = transformers.GPT2Config(
        vocab_size=64, n_positions=32, n_embd=16, n_layer=1, n_head=2,
    )
    root = tmp_path_factory.mktemp("models")
    base = transformers.GPT2LMHeadModel(config)
    base.save_pretrained(root / "base", safe_serialization=True)
    ft = transformers.GPT2LMHeadModel(config)
    ft.load_state_dict(base.state_dict())
    with torch.no_grad():
        for p in ft.parameters():
            p.add_(torch.randn_like(p) * 0.01)
    ft.save_pretrained(root / "ft", safe_serialization=True)
    return root


@pytest.fixture(scope="module")
def token_data(tmp_path_factory, tiny_lm):
    rng = np.random.default_rng(0)
    path = tmp_path_factory.mktemp("data") / "samples.jsonl"
    with open(path, "w") as fh:
        for _ in range(6):
            ids = rng.integers(0, 64, size=int(rng.integers(4, 12))).tolist()
            fh.write(json.dumps({"input_ids": ids}) + "\n")
    return path


def test_fisher_extraction_end_to_end(tiny_lm, token_data, tmp_path):
    out = tmp_path / "fisher"
    code = main(["extract", "--kind", "fisher_diag", "--model", str(tiny_lm / "ft"),
                 "--data", str(token_data), "--out", str(out),
                 "--task-name", "toy", "--sample-count", "4"])
    assert code == 0
    bundle = mergeforge_stats.load_stats(out, "fisher_diag")
    assert bundle.task_names == ["toy"]
    assert bundle.fisher_mode == "empirical"
    values = bundle.tensor("toy", "transformer.h.0.mlp.c_fc.weight")
    assert (values >= 0).all() and values.max() > 0


def test_gram_extraction_end_to_end(tiny_lm, token_data, tmp_path):
    out = tmp_path / "gram"
    code = main(["extract", "--kind", "gram", "--model", str(tiny_lm / "ft"),
                 "--data", str(token_data), "--out", str(out),
                 "--task-name", "toy", "--sample-count", "4"])
    assert code == 0
    bundle = mergeforge_stats.load_stats(out, "gram")
    assert bundle.token_counts["toy"] > 0
    # gpt2 uses Conv1D for attention blocks; only the true nn.Linear (lm_head)
    # is hooked, and it is square-gram by construction
    g = bundle.tensor("toy", "lm_head.weight")
    assert g.shape == (16, 16)


def test_mask_extraction_end_to_end(tiny_lm, token_data, tmp_path):
    out = tmp_path / "mask"
    code = main(["extract", "--kind", "mask", "--model", str(tiny_lm / "ft"),
                 "--pretrained", str(tiny_lm / "base"),
                 "--data", str(token_data), "--out", str(out),
                 "--task-name", "toy", "--sample-count", "2",
                 "--steps", "5", "--lr", "0.05", "--target-sparsity", "0.2"])
    assert code == 0
    bundle = mergeforge_stats.load_stats(out, "mask")
    manifest = json.loads((out / "manifest.json").read_text())
    assert "achieved_sparsity" in manifest["extraction"]["toy"]
    mask = bundle.tensor("toy", "transformer.wte.weight")
    assert mask.dtype == np.uint8
    assert set(np.unique(mask)) <= {0, 1}


def test_mask_without_pretrained_fails(tiny_lm, token_data, tmp_path):
    code = main(["extract", "--kind", "mask", "--model", str(tiny_lm / "ft"),
                 "--data", str(token_data), "--out", str(tmp_path / "m"),
                 "--task-name", "toy"])
    assert code == 1


def test_bad_model_dir_fails_cleanly(tmp_path, token_data):
    code = main(["extract", "--kind", "fisher_diag", "--model", str(tmp_path / "absent"),
                 "--data", str(token_data), "--out", str(tmp_path / "o"),
                 "--task-name", "t"])
    assert code == 1
