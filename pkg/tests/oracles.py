"""Independent scalar reference implementations.

These mirror the documented per-element semantics step by step in float32
scalar arithmetic (same operation order as the kernels) so the engine can
be checked for exact equality. They share no code with the engine.
"""

import math

import numpy as np

f32 = np.float32


def topk_sort_oracle(values, keep_fraction):
    """Indices of the k largest |values|, ties to the lower index."""
    values = [f32(v) for v in values]
    n = len(values)
    k = min(n, math.ceil(keep_fraction * n))
    order = sorted(range(n), key=lambda j: (-abs(values[j]), j))
    keep = set(order[:k])
    return [1 if j in keep else 0 for j in range(n)]


def ties_oracle(pre, taus, sparsity, lam):
    """Trim / elect-sign / aligned-mean, one element at a time."""
    n_el = len(pre)
    lam = f32(lam)
    trimmed = []
    for tau in taus:
        mask = topk_sort_oracle(tau, sparsity)
        trimmed.append([f32(v) if m else f32(0.0) for v, m in zip(tau, mask)])
    out = []
    for j in range(n_el):
        pos = f32(0.0)
        neg = f32(0.0)
        for t in trimmed:
            v = t[j]
            pos = f32(pos + (v if v > 0 else f32(0.0)))
            neg = f32(neg + (-v if -v > 0 else f32(0.0)))
        sign = 1 if pos >= neg else -1
        total = f32(0.0)
        count = 0
        for t in trimmed:
            v = t[j]
            if (v > 0 and sign > 0) or (v < 0 and sign < 0):
                total = f32(total + v)
                count += 1
        merged = f32(total / f32(count)) if count > 0 else f32(0.0)
        out.append(f32(f32(pre[j]) + f32(lam * merged)))
    return out


def consensus_oracle(pre, taus, lam, lam_list):
    """Multi-task vector, per-task masks, >= 2 consensus, one element at a
    time."""
    n_el = len(pre)
    lam = f32(lam)
    out = []
    for j in range(n_el):
        total = f32(0.0)
        for tau in taus:
            total = f32(total + f32(tau[j]))
        tau_mtl = f32(lam * total)
        votes = 0
        for tau, lam_i in zip(taus, lam_list):
            lhs = abs(f32(tau[j]))
            rhs = f32(abs(f32(tau_mtl - f32(tau[j]))) * f32(lam_i))
            if lhs >= rhs:
                votes += 1
        if votes >= 2:
            out.append(f32(f32(pre[j]) + tau_mtl))
        else:
            out.append(f32(pre[j]))
    return out


def soup_oracle(fts):
    n = len(fts)
    n_el = len(fts[0])
    out = []
    for j in range(n_el):
        total = f32(0.0)
        for ft in fts:
            total = f32(total + f32(ft[j]))
        out.append(f32(total * f32(1.0 / n)))
    return out
