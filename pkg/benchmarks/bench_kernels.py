"""Time the compiled kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Each kernel runs on the same inputs under both backends; outputs are
checked for bit equality before timings are printed.
"""
import argparse
import timeit

import numpy as np

from aif.kernels import available_backends, get_backend
from aif.lsh import POPCOUNT_LUT


def cases(rng):
    a = rng.standard_normal((1024, 224)).astype(np.float32)
    w = rng.standard_normal((64, 224)).astype(np.float32)
    items = rng.integers(0, 256, (1024, 4), dtype=np.uint8)
    seq = rng.integers(0, 256, (512, 4), dtype=np.uint8)
    sims = rng.random((1024, 512)).astype(np.float32)
    return {
        "matmul_nt 1024x224 @ 224x64": lambda k: k.matmul_nt(a, w),
        "similarity 1024x512 (32 bits)": lambda k: k.similarity_matrix(items, seq, POPCOUNT_LUT, 32),
        "simtier 1024x512, 16 tiers": lambda k: k.simtier_counts(sims, 16),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = {name: get_backend(name) for name in available_backends()}
    print(f"backends: {', '.join(backends)}")
    print(f"{'kernel':<32}" + "".join(f"{name + ' ms':>14}" for name in backends) + f"{'speedup':>10}")
    for label, fn in cases(np.random.default_rng(0)).items():
        outs = [fn(k) for k in backends.values()]
        assert all(np.array_equal(outs[0], o) for o in outs[1:]), f"{label}: backends disagree"
        times = {
            name: 1000 * min(timeit.repeat(lambda k=k: fn(k), number=1, repeat=args.repeat))
            for name, k in backends.items()
        }
        speedup = times["python"] / times["compiled"] if "compiled" in times else float("nan")
        print(f"{label:<32}" + "".join(f"{t:>14.3f}" for t in times.values()) + f"{speedup:>9.1f}x")


if __name__ == "__main__":
    main()
