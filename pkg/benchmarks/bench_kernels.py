"""Time the compiled kernels against the numpy fallback.

Usage: python benchmarks/bench_kernels.py [--paths 10000] [--repeat 3]

Both implementations run on identical inputs; the script also reports
whether their outputs agree bit for bit.
"""
import argparse
import time

import numpy as np

from infdelay import _kernels_py

try:
    from infdelay import _kernels
except ImportError:  # extension not built
    _kernels = None


def euler_inputs(P, N=256, d=2, m=1, n_lags=3, seed=0):
    rng = np.random.default_rng(seed)
    i0 = 64
    X = np.zeros((P, i0 + N + 1, d))
    X[:, : i0 + 1] = 1.0
    offA = np.array([0, 16, 64][:n_lags], dtype=np.int64)
    WA = 0.1 * rng.standard_normal((n_lags, N, d, d))
    offC = np.array([0], dtype=np.int64)
    WC = 0.1 * rng.standard_normal((1, N, d * m, d))
    drift_add = np.zeros((1, N, d))
    diff_add = np.full((1, N, d, m), 0.2)
    dW = rng.standard_normal((P, N, m)) / 16.0
    return X, i0, N, 1 / N, offA, WA, offC, WC, drift_add, diff_add, dW, 1e12


def lag_inputs(P, n=321, d=2, J=40, seed=1):
    rng = np.random.default_rng(seed)
    values = rng.standard_normal((P, n, d))
    src = np.stack([np.arange(n) - j for j in range(J)]).astype(np.int64)
    src[src < 0] = -1
    weights = rng.standard_normal((J, n, d, d))
    return values, src, weights


def best_of(fn, repeat):
    times = []
    out = None
    for _ in range(repeat):
        t0 = time.perf_counter()
        out = fn()
        times.append(time.perf_counter() - t0)
    return min(times), out


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--paths", type=int, default=10_000)
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    impls = [("python", _kernels_py)] + ([("compiled", _kernels)] if _kernels is not None else [])
    print(f"{'kernel':<14}{'backend':<10}{'seconds':>10}")
    for name, make in (("euler_linear", euler_inputs), ("lag_sum", lag_inputs)):
        results = {}
        for label, mod in impls:
            inputs = make(args.paths)
            fn = getattr(mod, name)
            if name == "euler_linear":
                def call(inputs=inputs, fn=fn):
                    X = inputs[0].copy()
                    fn(X, *inputs[1:])
                    return X
            else:
                def call(inputs=inputs, fn=fn):
                    return fn(*inputs)
            secs, out = best_of(call, args.repeat)
            results[label] = (secs, out)
            print(f"{name:<14}{label:<10}{secs:>10.4f}")
        if len(results) == 2:
            (tp, op), (tc, oc) = results["python"], results["compiled"]
            print(f"{name:<14}speedup {tp / tc:6.2f}x   identical={np.array_equal(op, oc)}")


if __name__ == "__main__":
    main()
