"""Time the numba kernels against their numpy fallbacks.

    python3 benchmarks/bench_kernels.py [--repeat N]

Shapes match a base-8 network on 160x120 inputs with batch 4. Each pair is
also checked for bit-identical output.
"""

import argparse
import timeit

import numpy as np

from itofuse import kernels
from itofuse._accel import NUMBA_AVAILABLE


def cases(rng):
    xp = rng.standard_normal((4, 8, 122, 162))
    cols1 = kernels.im2col3x3_numpy(xp, 1, 120, 160)
    cols2 = kernels.im2col3x3_numpy(xp, 2, 60, 80)
    target = rng.integers(0, 160 * 120, 160 * 120).astype(np.int64)
    z = rng.uniform(0.5, 7.0, target.size)
    box = rng.standard_normal((4, 1, 120, 160))
    vec = rng.standard_normal(160 * 120 * 4)
    return {
        "splat_min_depth": ((target, z, 160 * 120), {}),
        "im2col3x3 s1": ((xp, 1, 120, 160), {}),
        "im2col3x3 s2": ((xp, 2, 60, 80), {}),
        "col2im3x3 s1": ((cols1, xp.shape, 1), {}),
        "col2im3x3 s2": ((cols2, xp.shape, 2), {}),
        "box_sum k7": ((box, 7), {}),
        "ordered_sum": ((vec,), {}),
    }


def identical(a, b):
    a = a if isinstance(a, tuple) else (a,)
    b = b if isinstance(b, tuple) else (b,)
    return all(np.array_equal(x, y, equal_nan=True) for x, y in zip(a, b))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    if not NUMBA_AVAILABLE:
        raise SystemExit("numba is not importable; nothing to compare")
    rng = np.random.default_rng(0)
    print(f"{'kernel':<18}{'numpy ms':>10}{'numba ms':>10}{'speedup':>9}  identical")
    for name, (a, kw) in cases(rng).items():
        base = name.split()[0]
        f_np = getattr(kernels, f"{base}_numpy")
        f_nb = getattr(kernels, f"{base}_numba")
        same = identical(f_np(*a, **kw), f_nb(*a, **kw))  # also warms the JIT
        t_np = min(timeit.repeat(lambda: f_np(*a, **kw), number=1, repeat=args.repeat)) * 1e3
        t_nb = min(timeit.repeat(lambda: f_nb(*a, **kw), number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<18}{t_np:>10.2f}{t_nb:>10.2f}{t_np / t_nb:>8.1f}x  {same}")


if __name__ == "__main__":
    main()
