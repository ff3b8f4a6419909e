"""Time the compiled reductions against the NumPy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints one line per kernel with the best wall time of each backend and the
speedup, after checking that both backends return the same numbers.
"""
import argparse
import timeit

import numpy as np

from sllab import _fallback, kernels
from sllab.rng import generator


def cases():
    gen = generator(0)
    X = np.ascontiguousarray(gen.standard_exponential((100_000, 3)) - 1.0)
    theta = np.array([0.3, -0.2, 0.1])
    thetas = np.ascontiguousarray(gen.normal(size=(64, 3)))
    vals = np.ascontiguousarray(gen.normal(size=(20_000, 64)))
    return {
        "tilt_reduce (1e5 x 3, third moments)": lambda k: k.tilt_reduce(X, theta, 0.5, 20, True),
        "tilt_reduce (1e5 x 3, mean/cov)": lambda k: k.tilt_reduce(X, theta, 0.5, 20, False),
        "tilt_mean_cov_batch (1e5 x 3, 64 tilts)": lambda k: k.tilt_mean_cov_batch(X, thetas, 0.5),
        "neumaier_sum (2e4 x 64)": lambda k: k.neumaier_sum(vals),
    }


def _flat(out):
    if isinstance(out, tuple):
        return [np.asarray(o, dtype=float).ravel() for o in out if o is not None]
    return [np.asarray(out, dtype=float).ravel()]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)
    backs = kernels.backends()
    if "cython" not in backs:
        print("compiled extension not built; only the fallback is available")
    print(f"{'kernel':<42} {'python s':>10} {'cython s':>10} {'speedup':>8}")
    for name, call in cases().items():
        if "cython" in backs:
            for a, b in zip(_flat(call(backs["cython"])), _flat(call(_fallback))):
                if not np.allclose(a, b, rtol=1e-10, atol=1e-12):
                    raise SystemExit(f"backends disagree on {name}")
        times = {}
        for label, mod in backs.items():
            times[label] = min(timeit.repeat(lambda: call(mod), number=1, repeat=args.repeat))
        py = times["python"]
        cy = times.get("cython", float("nan"))
        print(f"{name:<42} {py:>10.4f} {cy:>10.4f} {py / cy:>7.1f}x")


if __name__ == "__main__":
    main()
