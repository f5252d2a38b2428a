#!/usr/bin/env python3
"""Benchmark the compiled kernels against the numpy fallback.

Times each hot kernel on large float32 buffers, checks the two backends
produce bit-identical outputs, and prints a throughput table.

    python benchmarks/bench_kernels.py --numel 16777216 --repeats 5
"""

import argparse
import time

import numpy as np

from mergeforge.kernels import get_backend


def timeit(fn, repeats):
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench(numel, repeats):
    backends = {"numpy": get_backend("numpy")}
    try:
        backends["cython"] = get_backend("cython")
    except ImportError:
        print("compiled kernels unavailable; benchmarking numpy only")

    rng = np.random.default_rng(0)
    x = rng.standard_normal(numel).astype(np.float32)
    y = rng.standard_normal(numel).astype(np.float32)
    sign = np.where(rng.random(numel) < 0.5, np.float32(1), np.float32(-1))
    mask = (rng.random(numel) < 0.3).astype(np.uint8)
    out = np.empty(numel, np.float32)
    cnt = np.zeros(numel, np.float32)
    votes = np.zeros(numel, np.uint8)

    cases = {
        "axpy": lambda b: b.axpy(out, x, np.float32(0.3)),
        "mul_accumulate": lambda b: b.mul_accumulate(out, x, y),
        "accumulate_pos_neg": lambda b: b.accumulate_pos_neg(x, out, cnt),
        "aligned_sum_count": lambda b: b.aligned_sum_count(x, sign, out, cnt),
        "masked_sum_count": lambda b: b.masked_sum_count(x, mask, out, cnt),
        "consensus_count": lambda b: b.consensus_count(x, y, np.float32(0.5), votes),
        "dare_accumulate": lambda b: b.dare_accumulate(
            x, out, 0xC0FFEE, 0.9, np.float32(10.0), np.float32(0.5)),
        "fisher_combine": lambda b: b.fisher_combine(
            np.abs(x), np.abs(y), x, np.float32(1e-10), out),
    }

    gib = numel * 4 / 1024 ** 3
    print(f"numel={numel} ({gib * 1024:.0f} MiB per buffer), best of {repeats}\n")
    header = f"{'kernel':<20}" + "".join(f"{name + ' (ms)':>14}" for name in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}{'identical':>11}"
    print(header)
    for name, call in cases.items():
        times = {}
        results = {}
        for bname, backend in backends.items():
            out[:] = 0
            cnt[:] = 0
            votes[:] = 0
            times[bname] = timeit(lambda: call(backend), repeats)
            results[bname] = (out.copy(), cnt.copy(), votes.copy())
        row = f"{name:<20}" + "".join(f"{times[b] * 1e3:>14.2f}" for b in backends)
        if len(backends) == 2:
            same = all(np.array_equal(results["numpy"][i], results["cython"][i])
                       for i in range(3))
            row += f"{times['numpy'] / times['cython']:>10.2f}{str(same):>11}"
        print(row)


def main():
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--numel", type=int, default=16 * 1024 * 1024)
    parser.add_argument("--repeats", type=int, default=5)
    args = parser.parse_args()
    bench(args.numel, args.repeats)


if __name__ == "__main__":
    main()
