"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5]

Prints one row per kernel with the best time of each backend and the speedup.
"""
import argparse
import timeit

import numpy as np

from rdlab import Mesh1D, default_family, kernels
from rdlab.reduction import reduce


def _cases(rng):
    n = 1024
    h = np.full(n, 1.0 / n)
    pq = rng.uniform(0.5, 2.0, (n, 3))
    cq = rng.uniform(-1.0, 1.0, (n, 3))

    # two nearby curves, as in attractor comparisons
    t = np.linspace(0, 1, 4000)[:, None]
    A = np.hstack([np.cos(3 * t), np.sin(3 * t), t**2, 0.1 * t]) + 0.01 * rng.normal(size=(4000, 4))
    B = A[::2] + 1e-3

    rs = reduce(default_family(), Mesh1D.uniform(64), 0.03, 4)
    V0 = rng.uniform(-1.0, 1.0, (16, 4)) * np.r_[1.5, 0.3, 0.3, 0.3]

    return {
        "assemble_bands (n=1024)": lambda: kernels.assemble_bands(h, pq, cq),
        "directed_hausdorff (4000x2000, unordered)": lambda: kernels.directed_hausdorff(A, B),
        "directed_hausdorff (4000x2000, ordered)": lambda: kernels.directed_hausdorff(A, B, ordered=True),
        "reduced_flow (16 states, 50 RK4 steps)": lambda: kernels.reduced_flow(rs.data, V0, 50, 0.02, False),
        "reduced_flow + Jacobian": lambda: kernels.reduced_flow(rs.data, V0, 50, 0.02, True),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backends = kernels.available_backends()
    prev = kernels.backend_name()
    cases = _cases(np.random.default_rng(0))
    print(f"{'kernel':<44}" + "".join(f"{b:>12}" for b in backends) + ("     speedup" if len(backends) > 1 else ""))
    for label, fn in cases.items():
        best = {}
        for b in backends:
            kernels.set_backend(b)
            fn()  # warm up
            best[b] = min(timeit.repeat(fn, number=1, repeat=args.repeat))
        row = f"{label:<44}" + "".join(f"{best[b] * 1e3:>10.2f}ms" for b in backends)
        if "cython" in best:
            row += f"{best['python'] / best['cython']:>11.1f}x"
        print(row)
    kernels.set_backend(prev)


if __name__ == "__main__":
    main()
