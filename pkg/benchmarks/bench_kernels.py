"""Time the compiled kernels against the numpy fallback.

Usage: python3 benchmarks/bench_kernels.py [--repeat N]
"""

import argparse
import timeit

import numpy as np

from staclab import kernels

CASES = {
    "linear_recurrence 20x32": lambda rng: ((rng.standard_normal((20, 32)), rng.uniform(0, 1, (20, 32)), True), "linear_recurrence"),
    "linear_recurrence 1000x256": lambda rng: ((rng.standard_normal((1000, 256)), rng.uniform(0, 1, (1000, 256)), True), "linear_recurrence"),
    "leaky_weights 20x32": lambda rng: ((rng.uniform(0, 3, (20, 32)), 0.7, 1.0), "leaky_weights"),
    "leaky_weights 1e6": lambda rng: ((rng.uniform(0, 3, 1_000_000), 0.7, 1.0), "leaky_weights"),
    "categorical_sample 32x4": lambda rng: ((rng.dirichlet(np.ones(4), 32), rng.random(32)), "categorical_sample"),
    "categorical_sample 10000x18": lambda rng: ((rng.dirichlet(np.ones(18), 10_000), rng.random(10_000)), "categorical_sample"),
}


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args(argv)
    impls = kernels.backends()
    if "cython" not in impls:
        print("compiled backend not built; only the numpy fallback is timed")
    rng = np.random.default_rng(0)
    print(f"{'case':32s}" + "".join(f"{name:>14s}" for name in impls) + ("   speedup" if len(impls) > 1 else ""))
    for label, make in CASES.items():
        inputs, fn = make(rng)
        times = {}
        for name, mod in impls.items():
            f = getattr(mod, fn)
            number = max(1, int(0.2 / max(timeit.timeit(lambda: f(*inputs), number=1), 1e-7)))
            times[name] = min(timeit.repeat(lambda: f(*inputs), number=number, repeat=args.repeat)) / number
        line = f"{label:32s}" + "".join(f"{t * 1e6:12.1f}us" for t in times.values())
        if len(times) > 1:
            line += f"   {times['python'] / times['cython']:7.1f}x"
        print(line)
        if len(impls) > 1:
            a = impls["python"].__dict__[fn](*inputs)
            b = impls["cython"].__dict__[fn](*inputs)
            assert np.array_equal(a, b), f"backends disagree on {label}"


if __name__ == "__main__":
    main()
