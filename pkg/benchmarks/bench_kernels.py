"""Time the compiled kernels against the pure-numpy fallback.

Usage: python benchmarks/bench_kernels.py [--n 1000] [--d 5] [--repeat 5]
"""

import argparse
import timeit

import numpy as np

from mcem_ssm.kernels import get_backend


def problem(n, d, seed=0):
    rng = np.random.default_rng(seed)
    X = np.column_stack([np.ones(n), rng.standard_normal((n, d - 1))])
    y = rng.standard_normal(n)
    obs = (rng.random(n) > 0.3).astype(np.uint8)
    Q = np.diag(np.r_[0.05, np.zeros(d - 1)])
    return dict(X=X, y=y, obs=obs, mu0=np.zeros(d), sigma0=10.0 * np.eye(d), Q=Q, R=0.1,
                z=rng.standard_normal((n + 1, d)))


def cases(mod, p):
    m, P, _ = mod.kalman_filter(p["X"], p["y"], p["obs"], p["mu0"], p["sigma0"], p["Q"], p["R"])
    return {
        "kalman_filter": lambda: mod.kalman_filter(p["X"], p["y"], p["obs"], p["mu0"], p["sigma0"], p["Q"], p["R"]),
        "rts_smoother": lambda: mod.rts_smoother(m, P, p["Q"]),
        "ffbs_backward": lambda: mod.ffbs_backward(m, P, p["Q"], p["z"]),
    }


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--n", type=int, default=1000)
    ap.add_argument("--d", type=int, default=5)
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    p = problem(args.n, args.d)
    py = cases(get_backend("python"), p)
    try:
        cy = cases(get_backend("cython"), p)
    except ImportError:
        cy = None
        print("compiled backend not built; timing the fallback only")
    print(f"n={args.n} d={args.d} best of {args.repeat}")
    print(f"{'kernel':<16}{'python ms':>12}{'cython ms':>12}{'speedup':>10}")
    for name, fn in py.items():
        tp = min(timeit.repeat(fn, number=1, repeat=args.repeat)) * 1e3
        if cy is None:
            print(f"{name:<16}{tp:>12.2f}{'-':>12}{'-':>10}")
            continue
        tc = min(timeit.repeat(cy[name], number=1, repeat=args.repeat)) * 1e3
        print(f"{name:<16}{tp:>12.2f}{tc:>12.2f}{tp / tc:>9.1f}x")


if __name__ == "__main__":
    main()
