"""Extractor acceptance gate: one test per criterion, one line each.

Run with: pytest tests/test_acceptance.py -v -s
"""

import itertools
import math
import time

import numpy as np
import pytest
import torch

from mergestats.bundles import write_task
from mergestats.fisher import fisher_diagonals
from mergestats.gram import gram_matrices
from mergestats.masks import MaskTrainingConfig, train_masks

mergeforge_stats = pytest.importorskip("mergeforge.stats")


def _report(name, started):
    print(f"\n[ACCEPTANCE] {name}: PASS ({time.perf_counter() - started:.1f}s)")


def test_fisher_analytic_check():
    """Logistic regression, 3 points: autograd empirical Fisher matches the
    hand formula mean(((y - sigmoid(w.x)) x)^2) to 1e-5 relative."""
    started = time.perf_counter()
    w = [0.8, -0.3, 0.1]
    points = [([1.0, 2.0, -1.0], 1.0), ([-0.5, 0.4, 2.0], 0.0), ([2.0, -1.0, 0.5], 1.0)]

    model = torch.nn.Linear(3, 1, bias=False)
    with torch.no_grad():
        model.weight.copy_(torch.tensor([w]))

    def loglik(m, sample):
        x, y = sample
        return -torch.nn.functional.binary_cross_entropy_with_logits(
            m(x).squeeze(-1), y)

    samples = [(torch.tensor(x), torch.tensor(y)) for x, y in points]
    diag, used, skipped = fisher_diagonals(model, samples, loglik, 3)
    assert used == 3 and skipped == 0

    expected = [0.0, 0.0, 0.0]
    for x, y in points:
        z = sum(wi * xi for wi, xi in zip(w, x))
        p = 1.0 / (1.0 + math.exp(-z))
        for j in range(3):
            expected[j] += ((y - p) * x[j]) ** 2
    expected = [e / 3 for e in expected]
    got = diag["weight"].reshape(-1).tolist()
    for g, e in zip(got, expected):
        assert abs(g - e) <= 1e-5 * max(abs(e), 1e-12)
    _report("fisher analytic check (logistic regression, 1e-5 relative)", started)


def test_gram_psd_outer_product_and_engine_round_trip(tmp_path):
    """Outer-product oracle, PSD bound, and unmodified loading through the
    merge engine's stats reader."""
    started = time.perf_counter()

    model = torch.nn.Linear(2, 3, bias=False)
    grams, _, tokens = gram_matrices(model, [torch.tensor([[1.0, 2.0]])],
                                     lambda m, x: m(x), 1)
    assert tokens == 1
    assert torch.allclose(grams["weight"], torch.tensor([[1.0, 2.0], [2.0, 4.0]]))

    torch.manual_seed(0)
    deep = torch.nn.Sequential(torch.nn.Linear(6, 10), torch.nn.Tanh(),
                               torch.nn.Linear(10, 4))
    samples = [torch.randn(5, 6) for _ in range(10)]
    grams, used, tokens = gram_matrices(deep, samples, lambda m, x: m(x), 10)
    assert used == 10 and tokens == 50
    for key, g in grams.items():
        g64 = g.numpy().astype(np.float64)
        assert np.linalg.eigvalsh(g64).min() >= -1e-6 * np.trace(g64), key

    write_task(tmp_path / "bundle", "gram", "t0", grams, sample_count=10,
               fingerprint="ab" * 8, token_count=tokens)
    bundle = mergeforge_stats.load_stats(tmp_path / "bundle", "gram")
    for key, g in grams.items():
        assert np.array_equal(bundle.tensor("t0", key), g.numpy()), key
    _report("gram psd + outer-product oracle + engine round trip", started)


def test_mask_training_toy_matches_exhaustive_optimum():
    """On an enumerable 3-parameter toy, the trained mask's support equals
    the exhaustive-search optimum: signal weight in, noise weights out."""
    started = time.perf_counter()
    torch.manual_seed(0)
    model = torch.nn.Linear(3, 1, bias=False)
    w_pre = torch.tensor([[1.0, -0.5, 0.25]])
    tau = torch.tensor([[2.0, 0.8, -1.1]])
    x = torch.randn(64, 3)
    y = x @ (w_pre + torch.tensor([[2.0, 0.0, 0.0]])).T

    def loss_fn(m, params, batch):
        bx, by = batch
        pred = torch.func.functional_call(m, params, (bx,))
        return ((pred - by) ** 2).mean()

    config = MaskTrainingConfig(steps=300, lr=0.1, target_sparsity=1 / 3,
                                sparsity_weight=0.5)
    result = train_masks(model, {"weight": w_pre}, {"weight": w_pre + tau},
                         [(x, y)], loss_fn, config)

    best, best_val = None, float("inf")
    for bits in itertools.product([0.0, 1.0], repeat=3):
        m = torch.tensor([list(bits)])
        val = float(loss_fn(model, {"weight": w_pre + m * tau}, (x, y)))
        val += config.sparsity_weight * (float(m.mean()) - config.target_sparsity) ** 2
        if val < best_val:
            best, best_val = bits, val

    got = tuple(result.masks["weight"].reshape(-1).float().tolist())
    assert got == best == (1.0, 0.0, 0.0)
    assert abs(result.achieved_sparsity - config.target_sparsity) <= 0.05
    _report("mask-training toy (support matches exhaustive optimum)", started)
