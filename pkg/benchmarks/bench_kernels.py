"""Time every numeric kernel under the numba and pure-numpy backends.

    python3 benchmarks/bench_kernels.py [--repeat 5] [--scale 1.0]

The first numba call of each kernel is a warm-up (JIT or cache load) and is
not timed.  Outputs of both backends are compared before timing.
"""

import argparse
import timeit

import numpy as np

from silotrace import _accel, kernels


def cases(scale: float, rng: np.random.Generator) -> dict:
    n = max(1, int(1_000_000 * scale))
    users = max(3, int(100 * scale))
    bits = (rng.random((max(1, int(2000 * scale)), 500)) < 0.1).astype(np.uint8)
    starts = rng.integers(0, 60 * 24 * 14, n)
    return {
        "column_sum_u64 (users x 10k)": (kernels.column_sum_u64,
                                         (rng.integers(0, 2**64, (users, 10_000), dtype=np.uint64),)),
        "add_u64": (kernels.add_u64, (rng.integers(0, 2**64, n, dtype=np.uint64),
                                      rng.integers(0, 2**64, n, dtype=np.uint64))),
        "rr_perturb": (kernels.rr_perturb, (bits, rng.random(bits.shape), 0.75)),
        "column_count": (kernels.column_count, (bits,)),
        "segment_bounds": (kernels.segment_bounds, (starts, starts + rng.integers(0, 300, n), 15)),
        "grid_indices": (kernels.grid_indices, (np.round(rng.uniform(-90, 90, n), 5), -90.0, 0.001)),
    }


def run(fn, args, backend: str, repeat: int):
    _accel.set_backend(backend)
    out = fn(*args)
    best = min(timeit.repeat(lambda: fn(*args), number=1, repeat=repeat))
    return best, out


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--scale", type=float, default=1.0)
    args = ap.parse_args()
    if not _accel.HAVE_NUMBA:
        raise SystemExit("numba is not installed; nothing to compare")
    prev = _accel.backend()
    print(f"{'kernel':32} {'numpy ms':>10} {'numba ms':>10} {'speedup':>8}")
    try:
        for name, (fn, fargs) in cases(args.scale, np.random.default_rng(0)).items():
            t_np, a = run(fn, fargs, "numpy", args.repeat)
            t_nb, b = run(fn, fargs, "numba", args.repeat)
            pairs = zip(a, b) if isinstance(a, tuple) else [(a, b)]
            if not all(np.array_equal(x, y) for x, y in pairs):
                raise SystemExit(f"{name}: backends disagree")
            print(f"{name:32} {t_np * 1e3:10.2f} {t_nb * 1e3:10.2f} {t_np / t_nb:7.1f}x")
    finally:
        _accel.set_backend(prev)


if __name__ == "__main__":
    main()
