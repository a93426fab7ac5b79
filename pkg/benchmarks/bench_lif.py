"""Time the LIF scan on both backends and confirm they agree bit for bit.

    python benchmarks/bench_lif.py [--repeat N]
"""
import argparse
import timeit

import numpy as np

from spikealign.kernels import BACKENDS

SHAPES = [(4, 1_000), (4, 100_000), (8, 100_000), (4, 1_000_000)]


def bench(backend, current, grad, repeat):
    fwd = min(timeit.repeat(lambda: backend.lif_forward(current, 0.9, 1.0, 1.0, False), number=1, repeat=repeat))
    u, _ = backend.lif_forward(current, 0.9, 1.0, 1.0, False)
    bwd = min(timeit.repeat(lambda: backend.lif_backward(grad, u, 0.9, 1.0, 1.0), number=1, repeat=repeat))
    return fwd, bwd


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if "compiled" not in BACKENDS:
        print("compiled backend not built; timing the numpy fallback only")
    rng = np.random.default_rng(0)
    print(f"{'T x N':>14} {'backend':>9} {'forward ms':>11} {'backward ms':>12} {'speedup':>8}")
    for t, n in SHAPES:
        current = rng.normal(0.5, 0.5, (t, n)).astype(np.float32)
        grad = rng.normal(size=(t, n)).astype(np.float32)
        times = {name: bench(b, current, grad, args.repeat) for name, b in sorted(BACKENDS.items())}
        if len(BACKENDS) == 2:
            a = BACKENDS["compiled"].lif_forward(current, 0.9, 1.0, 1.0, False)
            b = BACKENDS["python"].lif_forward(current, 0.9, 1.0, 1.0, False)
            assert all(np.array_equal(x, y) for x, y in zip(a, b)), "backends disagree"
        ref = sum(times["python"])
        for name, (f, b) in times.items():
            print(f"{t:>5} x {n:<7} {name:>9} {1e3 * f:11.3f} {1e3 * b:12.3f} {ref / (f + b):7.2f}x")


if __name__ == "__main__":
    main()
