"""The eight merging algorithms, as pure per-parameter-group transforms.

Every function takes float32 arrays for one parameter and returns the merged
float32 array. Delta-based methods accept the per-task deltas (finetuned
minus pretrained); weight-based methods (soup, fisher, regmean) accept the
finetuned weights directly. Conventions fixed here and recorded in output
metadata: sparsity is applied per tensor, trim keeps the top `sparsity`
fraction by magnitude, sign-election ties elect +1, and the TIES merge step
averages over sign-aligned survivors (not over all n tasks).
"""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .errors import (
    ConsensusRequiresTwoTasksError,
    GramShapeMismatchError,
    NegativeFisherError,
    RegMeanSolveError,
    ValidationError,
)
from .hashing import dare_key
from .kernels import backend
from .ops import topk_mask_array

FISHER_EPS_REL = 1e-10


def model_soup(fts: Sequence[np.ndarray]) -> np.ndarray:
    """Elementwise mean of the finetuned weights."""
    n = len(fts)
    acc = np.zeros(fts[0].size, dtype=np.float32)
    for ft in fts:
        backend.add_accumulate(acc, ft.reshape(-1))
    backend.scale(acc, np.float32(1.0 / n))
    return acc.reshape(fts[0].shape)


def _sum_deltas(taus: Sequence[np.ndarray]) -> np.ndarray:
    acc = np.zeros(taus[0].size, dtype=np.float32)
    for tau in taus:
        backend.add_accumulate(acc, tau.reshape(-1))
    return acc


def task_arithmetic(pre: np.ndarray, taus: Sequence[np.ndarray], lam: float) -> np.ndarray:
    """pre + lam * sum(taus)."""
    if lam <= 0:
        raise ValidationError(f"scaling coefficient must be positive, got {lam}")
    s = _sum_deltas(taus)
    out = np.array(pre.reshape(-1), dtype=np.float32)
    backend.axpy(out, s, np.float32(lam))
    return out.reshape(pre.shape)


def fisher_merge(fts: Sequence[np.ndarray], fishers: Sequence[np.ndarray]) -> np.ndarray:
    """Fisher-weighted mean: (sum F_i * w_i) / (sum F_i), with a small
    relative epsilon pulling zero-Fisher positions toward the plain mean."""
    n = fts[0].size
    numer = np.zeros(n, dtype=np.float32)
    denom = np.zeros(n, dtype=np.float32)
    for ft, f in zip(fts, fishers):
        fmin = float(f.min())
        if fmin < 0:
            raise NegativeFisherError("<merge>", "<group>", int(np.argmin(f.reshape(-1))), fmin)
        backend.mul_accumulate(numer, f.reshape(-1), ft.reshape(-1))
        backend.add_accumulate(denom, f.reshape(-1))
    fallback = model_soup(fts).reshape(-1)
    eps = FISHER_EPS_REL * max(1.0, float(denom.max()))
    out = np.empty(n, dtype=np.float32)
    backend.fisher_combine(numer, denom, fallback, np.float32(eps), out)
    return out.reshape(fts[0].shape)


def regmean_merge(weights: Sequence[np.ndarray], grams: Sequence[np.ndarray], alpha: float,
                  key: str = "<weight>") -> np.ndarray:
    """Activation-matching closed form for a linear weight.

    weights are (out_features, in_features); each gram is the (in, in) inner
    product matrix of that task's layer inputs. Off-diagonal gram entries are
    scaled by alpha, the diagonal is kept. Solved in float64.
    """
    if not (0.0 < alpha <= 1.0):
        raise ValidationError(f"regmean alpha must be in (0, 1], got {alpha}")
    w0 = weights[0]
    if w0.ndim != 2:
        raise GramShapeMismatchError(key, f"regmean needs a 2-D weight, got shape {w0.shape}")
    in_dim = w0.shape[1]
    a = np.zeros((in_dim, in_dim), dtype=np.float64)
    b = np.zeros((in_dim, w0.shape[0]), dtype=np.float64)
    for w, g in zip(weights, grams):
        if g.shape != (in_dim, in_dim):
            raise GramShapeMismatchError(
                key, f"gram is {g.shape}, weight input dimension is {in_dim}"
            )
        g64 = np.asarray(g, dtype=np.float64)
        gt = alpha * g64
        np.fill_diagonal(gt, np.diagonal(g64))
        a += gt
        b += gt @ np.asarray(w, dtype=np.float64).T
    try:
        x = np.linalg.solve(a, b)
    except np.linalg.LinAlgError:
        jitter = 1e-6 * np.trace(a) / in_dim
        a[np.diag_indices_from(a)] += jitter
        try:
            x = np.linalg.solve(a, b)
        except np.linalg.LinAlgError as exc:
            raise RegMeanSolveError(key) from exc
    return np.ascontiguousarray(x.T, dtype=np.float32)


def ties_merge(pre: np.ndarray, taus: Sequence[np.ndarray], sparsity: float,
               lam: float) -> np.ndarray:
    """Trim each delta to its top-`sparsity` fraction by magnitude, elect a
    per-position sign by total magnitude, then average the sign-aligned
    survivors and add `lam` times the result to the base."""
    if lam <= 0:
        raise ValidationError(f"scaling coefficient must be positive, got {lam}")
    n = taus[0].size
    trimmed = []
    for tau in taus:
        flat = tau.reshape(-1)
        mask = topk_mask_array(flat, sparsity)
        t = np.empty(n, dtype=np.float32)
        backend.apply_mask(flat, mask, t)
        trimmed.append(t)
    pos = np.zeros(n, dtype=np.float32)
    neg = np.zeros(n, dtype=np.float32)
    for t in trimmed:
        backend.accumulate_pos_neg(t, pos, neg)
    sign = np.empty(n, dtype=np.float32)
    backend.sign_from_totals(pos, neg, sign)
    ssum = np.zeros(n, dtype=np.float32)
    cnt = np.zeros(n, dtype=np.float32)
    for t in trimmed:
        backend.aligned_sum_count(t, sign, ssum, cnt)
    merged_tau = np.empty(n, dtype=np.float32)
    backend.divide_where_positive(ssum, cnt, merged_tau)
    out = np.array(pre.reshape(-1), dtype=np.float32)
    backend.axpy(out, merged_tau, np.float32(lam))
    return out.reshape(pre.shape)


def dare_merge(pre: np.ndarray, taus: Sequence[np.ndarray], drop_rate: float, lam: float,
               seed: int, key: str) -> np.ndarray:
    """Random-drop the deltas at rate p with inverted-dropout rescale by
    1/(1-p), then proceed as task arithmetic.

    The drop decisions come from a counter hash of (seed, task index,
    parameter name, flat element index), so results are independent of
    thread scheduling and shard order; reordering the task list changes the
    draws (documented).
    """
    if not (0.0 <= drop_rate < 1.0):
        raise ValidationError(f"drop rate must be in [0, 1), got {drop_rate}")
    if lam <= 0:
        raise ValidationError(f"scaling coefficient must be positive, got {lam}")
    inv_keep = np.float32(1.0 / (1.0 - drop_rate))
    out = np.array(pre.reshape(-1), dtype=np.float32)
    for i, tau in enumerate(taus):
        backend.dare_accumulate(
            tau.reshape(-1), out, dare_key(seed, i, key), float(drop_rate), inv_keep,
            np.float32(lam),
        )
    return out.reshape(pre.shape)


def consensus_ta(pre: np.ndarray, taus: Sequence[np.ndarray], lam: float,
                 per_task_lambda: Sequence[float]) -> np.ndarray:
    """Task arithmetic filtered to positions where at least two task masks
    agree; task i's mask keeps positions with |tau_i| >= |tau_mtl - tau_i| *
    lambda_i."""
    n_tasks = len(taus)
    if n_tasks < 2:
        raise ConsensusRequiresTwoTasksError(n_tasks)
    if len(per_task_lambda) != n_tasks:
        raise ValidationError(
            f"need one mask threshold per task: got {len(per_task_lambda)} for {n_tasks} tasks"
        )
    if any(l < 0 for l in per_task_lambda):
        raise ValidationError("per-task mask thresholds must be nonnegative")
    if lam <= 0:
        raise ValidationError(f"scaling coefficient must be positive, got {lam}")
    tau_mtl = _sum_deltas(taus)
    backend.scale(tau_mtl, np.float32(lam))
    counts = np.zeros(taus[0].size, dtype=np.uint8)
    for tau, lam_i in zip(taus, per_task_lambda):
        backend.consensus_count(tau.reshape(-1), tau_mtl, np.float32(lam_i), counts)
    out = np.empty(taus[0].size, dtype=np.float32)
    backend.add_where_count_ge(pre.reshape(-1), tau_mtl, counts, 2, out)
    return out.reshape(pre.shape)


def _stitch(pre: np.ndarray, taus: Sequence[np.ndarray],
            masks: Sequence[np.ndarray]) -> np.ndarray:
    n = taus[0].size
    ssum = np.zeros(n, dtype=np.float32)
    cnt = np.zeros(n, dtype=np.float32)
    for tau, mask in zip(taus, masks):
        backend.masked_sum_count(tau.reshape(-1), mask.reshape(-1), ssum, cnt)
    stitched = np.empty(n, dtype=np.float32)
    backend.divide_where_positive(ssum, cnt, stitched)
    out = np.array(pre.reshape(-1), dtype=np.float32)
    backend.add_accumulate(out, stitched)
    return out.reshape(pre.shape)


def ls_dataless(pre: np.ndarray, taus: Sequence[np.ndarray], sparsity: float) -> np.ndarray:
    """Localize each task to its top-`sparsity` delta positions by magnitude,
    then stitch: selected positions get the mean of the selecting tasks'
    deltas, unselected positions stay at the base value."""
    masks = [topk_mask_array(tau.reshape(-1), sparsity) for tau in taus]
    return _stitch(pre, taus, masks)


def ls_trained(pre: np.ndarray, taus: Sequence[np.ndarray],
               masks: Sequence[np.ndarray]) -> np.ndarray:
    """Stitch with externally trained binary masks (uint8, 0/1)."""
    for tau, mask in zip(taus, masks):
        if tuple(mask.shape) != tuple(tau.shape) and mask.size != tau.size:
            raise ValidationError(
                f"mask shape {tuple(mask.shape)} does not match delta shape {tuple(tau.shape)}"
            )
    return _stitch(pre, taus, masks)
