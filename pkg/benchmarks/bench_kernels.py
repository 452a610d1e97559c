"""Compare the compiled and pure-Python kernel backends on the training hot loop.

Usage: python benchmarks/bench_kernels.py [--groups N] [--repeat R]
"""

import argparse
import time

import numpy as np

from acpo import _pykernels, kernels
from acpo.policy import SamplerConfig, accumulate_log_gradient, base_policy, generate_tasks, rollout_group, score_tokens


def workload(policy, tasks, impl, groups, G=8):
    grad = np.zeros_like(policy.theta)
    for i in range(groups):
        group = rollout_group(policy, tasks[i % len(tasks)], G, SamplerConfig(1.0, 0.95, 24, i), impl=impl)
        for t in group.members:
            ctx = list(t.question) + t.output_ids
            start = len(t.question)
            score_tokens(policy, ctx, start, 1.0, 0.95, impl=impl)
            accumulate_log_gradient(policy, ctx, start, grad, coef_nucleus=np.full(len(t.output), 0.01),
                                    temperature=1.0, top_p=0.95, impl=impl)
    return grad


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--groups", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    policy = base_policy()
    tasks = generate_tasks(64, 3, 0)
    if kernels.BACKEND != "cython":
        print("compiled backend unavailable; only the fallback can be timed")
    backends = [("python", _pykernels)]
    if kernels.BACKEND == "cython":
        backends.insert(0, ("cython", kernels.backend("cython")))
    results = {}
    for name, impl in backends:
        secs, grad = best_of(lambda: workload(policy, tasks, impl, args.groups), args.repeat)
        results[name] = (secs, grad)
        print(f"{name:>7}: {secs * 1e3:9.1f} ms for {args.groups} groups of 8 (sample + score + gradient)")
    if len(results) == 2:
        (c, gc), (p, gp) = results["cython"], results["python"]
        print(f"speedup: {p / c:.1f}x; outputs identical: {np.array_equal(gc, gp)}")


if __name__ == "__main__":
    main()
