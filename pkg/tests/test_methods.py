import numpy as np
import pytest

from mergeforge import methods
from mergeforge.errors import (
    ConsensusRequiresTwoTasksError,
    GramShapeMismatchError,
    NegativeFisherError,
    ValidationError,
)

from oracles import consensus_oracle, ties_oracle

F = np.float32


def arr(values):
    return np.asarray(values, dtype=np.float32)


def random_group(rng, n_tasks, shape, scale=1.0):
    pre = rng.standard_normal(shape).astype(np.float32)
    taus = [(rng.standard_normal(shape) * scale).astype(np.float32) for _ in range(n_tasks)]
    fts = [pre + t for t in taus]
    return pre, taus, fts


class TestModelSoup:
    def test_mean(self):
        assert np.array_equal(methods.model_soup([arr([2.0]), arr([4.0])]), [3.0])

    def test_single_model_identity(self):
        x = arr([1.5, -2.0])
        assert np.array_equal(methods.model_soup([x]), x)

    def test_mean_oracle(self):
        pre = arr([0.0])
        fts = [pre + arr([1.0]), pre + arr([2.0]), pre + arr([3.0])]
        assert np.allclose(methods.model_soup(fts), [2.0], atol=1e-7)


class TestTaskArithmetic:
    def test_cancelling_vectors(self):
        out = methods.task_arithmetic(arr([1.0]), [arr([1.0]), arr([-1.0])], 0.7)
        assert np.array_equal(out, [1.0])

    def test_scaling(self):
        assert np.array_equal(methods.task_arithmetic(arr([0.0]), [arr([2.0])], 0.5), [1.0])

    def test_equals_soup_at_reciprocal_n(self):
        rng = np.random.default_rng(0)
        pre, taus, fts = random_group(rng, 3, (17,))
        ta = methods.task_arithmetic(pre, taus, 1.0 / 3.0)
        assert np.abs(ta - methods.model_soup(fts)).max() <= 1e-5

    def test_rejects_nonpositive_lambda(self):
        with pytest.raises(ValidationError):
            methods.task_arithmetic(arr([0.0]), [arr([1.0])], 0.0)


class TestFisher:
    def test_uniform_weights_reduce_to_soup(self):
        rng = np.random.default_rng(1)
        pre, taus, fts = random_group(rng, 3, (11,))
        fishers = [np.full((11,), 2.5, dtype=np.float32)] * 3
        out = methods.fisher_merge(fts, fishers)
        assert np.abs(out - methods.model_soup(fts)).max() <= 1e-5

    def test_weighted_mean_oracle(self):
        out = methods.fisher_merge([arr([0.0]), arr([10.0])], [arr([3.0]), arr([1.0])])
        assert np.allclose(out, [2.5], atol=1e-5)  # (3*0 + 1*10) / 4

    def test_all_zero_fisher_falls_back_to_mean(self):
        fts = [arr([2.0, 4.0]), arr([6.0, 8.0])]
        fishers = [np.zeros(2, np.float32), np.zeros(2, np.float32)]
        out = methods.fisher_merge(fts, fishers)
        assert np.allclose(out, [4.0, 6.0], atol=1e-5)

    def test_rejects_negative_fisher(self):
        with pytest.raises(NegativeFisherError):
            methods.fisher_merge([arr([1.0])], [arr([-0.5])])


class TestRegMean:
    def test_single_model_is_exact(self):
        rng = np.random.default_rng(2)
        w = rng.standard_normal((4, 4)).astype(np.float32)
        x = rng.standard_normal((16, 4)).astype(np.float32)
        g = (x.T @ x).astype(np.float32)
        out = methods.regmean_merge([w], [g], alpha=1.0)
        assert np.allclose(out, w, atol=1e-5)

    def test_identity_grams_reduce_to_soup(self):
        rng = np.random.default_rng(3)
        ws = [rng.standard_normal((5, 4)).astype(np.float32) for _ in range(3)]
        gs = [np.eye(4, dtype=np.float32)] * 3
        out = methods.regmean_merge(ws, gs, alpha=1.0)
        assert np.abs(out - methods.model_soup(ws)).max() <= 1e-5

    def test_closed_form_minimizes_objective(self):
        rng = np.random.default_rng(4)

        def objective(w_merged, xs, ws):
            total = 0.0
            for x, w in zip(xs, ws):
                r = x @ w_merged.T - x @ w.T
                total += float((r * r).sum())
            return total

        for trial in range(50):
            xs = [rng.standard_normal((8, 4)).astype(np.float32) for _ in range(3)]
            ws = [rng.standard_normal((4, 4)).astype(np.float32) for _ in range(3)]
            gs = [(x.T @ x).astype(np.float32) for x in xs]
            merged = methods.regmean_merge(ws, gs, alpha=1.0)
            best = objective(merged, xs, ws)
            for _ in range(100):
                delta = rng.standard_normal((4, 4)).astype(np.float32) * 0.1
                assert best <= objective(merged + delta, xs, ws) + 1e-6

    def test_alpha_shrinks_off_diagonal(self):
        rng = np.random.default_rng(5)
        x = rng.standard_normal((12, 3)).astype(np.float32)
        g = (x.T @ x).astype(np.float32)
        w = rng.standard_normal((2, 3)).astype(np.float32)
        # alpha=1 keeps the full gram; tiny alpha approaches the diagonal-only
        # weighted mean, which for n=1 is still exactly w
        for alpha in (1.0, 0.5, 1e-6):
            out = methods.regmean_merge([w], [g], alpha=alpha)
            assert np.allclose(out, w, atol=1e-4)

    def test_gram_shape_mismatch(self):
        w = np.zeros((4, 3), np.float32)
        with pytest.raises(GramShapeMismatchError):
            methods.regmean_merge([w], [np.eye(4, dtype=np.float32)], alpha=1.0)

    def test_singular_gram_recovers_with_jitter(self):
        w = arr([[1.0, 2.0], [3.0, 4.0]])
        g = np.ones((2, 2), np.float32)  # rank 1: exactly singular, nonzero trace
        out = methods.regmean_merge([w], [g], alpha=1.0)
        assert out.shape == (2, 2)
        assert np.all(np.isfinite(out))

    def test_zero_gram_fails_even_with_jitter(self):
        # trace is zero so the documented jitter cannot regularize anything
        w = arr([[1.0, 2.0], [3.0, 4.0]])
        with pytest.raises(methods.RegMeanSolveError):
            methods.regmean_merge([w], [np.zeros((2, 2), np.float32)], alpha=1.0)


class TestTies:
    def test_opposing_signs(self):
        # positive total 2 > negative total 1 -> elect +, survivor mean 2
        out = methods.ties_merge(arr([0.0]), [arr([2.0]), arr([-1.0])], 1.0, 1.0)
        assert np.array_equal(out, [2.0])

    def test_aligned_mean_and_scale(self):
        out = methods.ties_merge(arr([0.0]), [arr([2.0]), arr([4.0])], 1.0, 0.5)
        assert np.allclose(out, [1.5], atol=1e-7)  # mean(2,4)=3, x0.5

    def test_zero_deltas_keep_base(self):
        pre = arr([1.0, -2.0, 3.0])
        out = methods.ties_merge(pre, [np.zeros(3, np.float32)] * 2, 0.5, 1.0)
        assert np.array_equal(out, pre)

    def test_matches_scalar_oracle_exactly(self):
        rng = np.random.default_rng(6)
        for trial in range(1000):
            n_el = int(rng.integers(1, 9))
            n_tasks = int(rng.integers(1, 4))
            pre = rng.standard_normal(n_el).astype(np.float32)
            taus = [rng.standard_normal(n_el).astype(np.float32) for _ in range(n_tasks)]
            sparsity = float(rng.uniform(0.1, 1.0))
            lam = float(rng.uniform(0.1, 1.5))
            got = methods.ties_merge(pre, taus, sparsity, lam)
            expected = ties_oracle(pre.tolist(), [t.tolist() for t in taus], sparsity, lam)
            assert got.tolist() == [float(v) for v in expected], f"trial {trial}"


class TestDare:
    def test_p_zero_equals_task_arithmetic(self):
        rng = np.random.default_rng(7)
        pre, taus, _ = random_group(rng, 3, (33,))
        dare = methods.dare_merge(pre, taus, 0.0, 0.4, seed=9, key="k")
        ta = methods.task_arithmetic(pre, taus, 0.4)
        assert np.abs(dare - ta).max() <= 1e-5

    def test_fixed_seed_bit_identical(self):
        rng = np.random.default_rng(8)
        pre, taus, _ = random_group(rng, 2, (64,))
        a = methods.dare_merge(pre, taus, 0.5, 1.0, seed=123, key="layer.w")
        b = methods.dare_merge(pre, taus, 0.5, 1.0, seed=123, key="layer.w")
        assert np.array_equal(a, b)

    def test_different_seed_differs(self):
        rng = np.random.default_rng(9)
        pre, taus, _ = random_group(rng, 2, (256,))
        a = methods.dare_merge(pre, taus, 0.5, 1.0, seed=1, key="k")
        b = methods.dare_merge(pre, taus, 0.5, 1.0, seed=2, key="k")
        assert not np.array_equal(a, b)

    @pytest.mark.parametrize("p", [0.1, 0.5, 0.9])
    def test_monte_carlo_unbiasedness(self, p):
        rng = np.random.default_rng(10)
        pre, taus, _ = random_group(rng, 2, (64,))
        lam = 0.8
        ta = methods.task_arithmetic(pre, taus, lam).astype(np.float64)
        runs = 1000
        acc = np.zeros(64, dtype=np.float64)
        for seed in range(runs):
            acc += methods.dare_merge(pre, taus, p, lam, seed=seed, key="k")
        mc_mean = acc / runs
        # element variance of inverted dropout: lam^2 * sum_i tau_i^2 * p/(1-p)
        var = (lam ** 2) * sum(t.astype(np.float64) ** 2 for t in taus) * (p / (1.0 - p))
        bound = 4.0 * np.sqrt(var) / np.sqrt(runs)
        assert np.all(np.abs(mc_mean - ta) <= bound + 1e-9)


class TestConsensus:
    def test_zero_thresholds_equal_task_arithmetic(self):
        rng = np.random.default_rng(11)
        pre, taus, _ = random_group(rng, 3, (21,))
        out = methods.consensus_ta(pre, taus, 0.9, [0.0, 0.0, 0.0])
        ta = methods.task_arithmetic(pre, taus, 0.9)
        assert np.abs(out - ta).max() <= 1e-5

    def test_single_vote_keeps_base(self):
        # tau1=[1], tau2=[0]: m1 = 1{1>=0}=1, m2 = 1{0>=1}=0 -> no consensus
        pre = arr([5.0])
        out = methods.consensus_ta(pre, [arr([1.0]), arr([0.0])], 1.0, [1.0, 1.0])
        assert np.array_equal(out, pre)

    def test_three_equal_vectors_pass(self):
        pre = arr([1.0])
        tau = arr([0.6])
        out = methods.consensus_ta(pre, [tau, tau, tau], 1.0 / 3.0, [1.0, 1.0, 1.0])
        assert np.allclose(out, [1.6], atol=1e-6)

    def test_requires_two_tasks(self):
        with pytest.raises(ConsensusRequiresTwoTasksError):
            methods.consensus_ta(arr([0.0]), [arr([1.0])], 1.0, [1.0])

    def test_matches_scalar_oracle_exactly(self):
        rng = np.random.default_rng(12)
        for trial in range(1000):
            n_el = int(rng.integers(1, 9))
            n_tasks = int(rng.integers(2, 4))
            pre = rng.standard_normal(n_el).astype(np.float32)
            taus = [rng.standard_normal(n_el).astype(np.float32) for _ in range(n_tasks)]
            lam = float(rng.uniform(0.1, 1.2))
            lam_list = [float(rng.uniform(0.0, 1.5)) for _ in range(n_tasks)]
            got = methods.consensus_ta(pre, taus, lam, lam_list)
            expected = consensus_oracle(pre.tolist(), [t.tolist() for t in taus], lam, lam_list)
            assert got.tolist() == [float(v) for v in expected], f"trial {trial}"


class TestLocalizeStitch:
    def test_disjoint_regions_carry_their_deltas(self):
        pre = arr([0.0, 0.0])
        taus = [arr([5.0, 0.1]), arr([0.1, -7.0])]
        out = methods.ls_dataless(pre, taus, 0.5)  # each keeps its largest element
        assert np.allclose(out, [5.0, -7.0], atol=1e-6)

    def test_overlap_takes_normalized_average(self):
        pre = arr([1.0])
        out = methods.ls_dataless(pre, [arr([2.0]), arr([4.0])], 1.0)
        assert np.allclose(out, [4.0], atol=1e-6)  # 1 + mean(2, 4)

    def test_full_sparsity_equals_task_arithmetic_mean(self):
        rng = np.random.default_rng(13)
        pre, taus, _ = random_group(rng, 3, (29,))
        out = methods.ls_dataless(pre, taus, 1.0)
        ta = methods.task_arithmetic(pre, taus, 1.0 / 3.0)
        assert np.abs(out - ta).max() <= 1e-5

    def test_trained_all_zero_masks_keep_base(self):
        pre = arr([3.0, -1.0])
        taus = [arr([1.0, 1.0])]
        out = methods.ls_trained(pre, taus, [np.zeros(2, np.uint8)])
        assert np.array_equal(out, pre)

    def test_trained_topk_masks_equal_dataless(self):
        rng = np.random.default_rng(14)
        pre, taus, _ = random_group(rng, 2, (31,))
        from mergeforge.ops import topk_mask_array
        masks = [topk_mask_array(t, 0.3) for t in taus]
        assert np.array_equal(
            methods.ls_trained(pre, taus, masks), methods.ls_dataless(pre, taus, 0.3)
        )

    def test_overlapping_masks_match_hand_stitch(self):
        pre = arr([1.0, 2.0, 3.0])
        taus = [arr([2.0, 4.0, 8.0]), arr([6.0, 0.5, -1.0])]
        masks = [np.array([1, 1, 0], np.uint8), np.array([1, 0, 1], np.uint8)]
        # position 0: mean(2,6)=4; position 1: only task 0 -> 4; position 2: only task 1 -> -1
        out = methods.ls_trained(pre, taus, masks)
        assert np.allclose(out, [5.0, 6.0, 2.0], atol=1e-6)


class TestCrossMethodProperties:
    @pytest.mark.parametrize("method", ["soup", "ta", "fisher", "ties", "dare",
                                        "consensus", "ls"])
    def test_locality_zero_deltas_keep_base(self, method):
        rng = np.random.default_rng(15)
        pre = rng.standard_normal(41).astype(np.float32)
        zero = [np.zeros(41, np.float32) for _ in range(3)]
        fts = [pre.copy() for _ in range(3)]
        if method == "soup":
            out = methods.model_soup(fts)
            assert np.abs(out - pre).max() <= 1e-6 * np.abs(pre).max()
            return
        if method == "fisher":
            fishers = [np.abs(rng.standard_normal(41)).astype(np.float32) for _ in range(3)]
            out = methods.fisher_merge(fts, fishers)
            assert np.abs(out - pre).max() <= 1e-6 * np.abs(pre).max()
            return
        if method == "ta":
            out = methods.task_arithmetic(pre, zero, 0.7)
        elif method == "ties":
            out = methods.ties_merge(pre, zero, 0.3, 0.7)
        elif method == "dare":
            out = methods.dare_merge(pre, zero, 0.5, 0.7, seed=3, key="k")
        elif method == "consensus":
            out = methods.consensus_ta(pre, zero, 0.7, [0.5, 0.5, 0.5])
        else:
            out = methods.ls_dataless(pre, zero, 0.3)
        assert np.array_equal(out, pre)

    def test_permutation_symmetry(self):
        rng = np.random.default_rng(16)
        pre, taus, fts = random_group(rng, 3, (23,))
        perm = [2, 0, 1]
        cases = {
            "soup": (lambda f, t: methods.model_soup(f)),
            "ta": (lambda f, t: methods.task_arithmetic(pre, t, 0.6)),
            "ties": (lambda f, t: methods.ties_merge(pre, t, 0.4, 0.6)),
            "consensus": (lambda f, t: methods.consensus_ta(pre, t, 0.6, [0.4] * 3)),
            "ls": (lambda f, t: methods.ls_dataless(pre, t, 0.4)),
        }
        for name, fn in cases.items():
            base = fn(fts, taus)
            permuted = fn([fts[i] for i in perm], [taus[i] for i in perm])
            assert np.abs(base - permuted).max() <= 1e-5, name

    def test_dare_is_sensitive_to_task_order(self):
        rng = np.random.default_rng(17)
        pre, taus, _ = random_group(rng, 2, (128,))
        a = methods.dare_merge(pre, taus, 0.5, 1.0, seed=0, key="k")
        b = methods.dare_merge(pre, list(reversed(taus)), 0.5, 1.0, seed=0, key="k")
        assert not np.array_equal(a, b)
