"""Compare the compiled and numpy scan backends.

    python benchmarks/bench_scan.py [--batch 32] [--seq 34] [--d-model 64] [--n-state 16] [--repeat 20]

Times one layer's forward scan and its reverse sweep with each importable
backend and checks that the backends agree.
"""

import argparse
import time

import numpy as np

from ssm_memlab import kernels


def make_inputs(rng, B, T, D, N):
    delta = np.log1p(np.exp(rng.normal(size=(B, T, D))))
    A = -np.tile(np.arange(1, N + 1, dtype=float), (D, 1))
    a_bar = np.exp(delta[..., None] * A)
    bp = rng.normal(size=(B, T, N))
    cp = rng.normal(size=(B, T, N))
    u = rng.normal(size=(B, T, D))
    h0 = np.zeros((B, D, N))
    grad_y = rng.normal(size=(B, T, D))
    return delta, A, a_bar, bp, cp, u, h0, grad_y


def best_of(fn, repeat):
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--batch", type=int, default=32)
    ap.add_argument("--seq", type=int, default=34)
    ap.add_argument("--d-model", type=int, default=64)
    ap.add_argument("--n-state", type=int, default=16)
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)

    rng = np.random.default_rng(0)
    delta, A, a_bar, bp, cp, u, h0, grad_y = make_inputs(rng, args.batch, args.seq, args.d_model, args.n_state)
    results = {}
    print(f"B={args.batch} T={args.seq} D={args.d_model} N={args.n_state}, best of {args.repeat}")
    for name, impl in kernels.backends().items():
        h, y = impl.layer_forward(a_bar, delta, bp, cp, u, h0)
        grads = impl.layer_backward(delta, A, bp, cp, u, a_bar, h, h0, grad_y)
        fwd = best_of(lambda: impl.layer_forward(a_bar, delta, bp, cp, u, h0), args.repeat)
        bwd = best_of(lambda: impl.layer_backward(delta, A, bp, cp, u, a_bar, h, h0, grad_y), args.repeat)
        results[name] = (h, y, grads)
        print(f"{name:>7}: forward {fwd * 1e3:8.2f} ms   backward {bwd * 1e3:8.2f} ms")
    if len(results) == 2:
        (h1, y1, g1), (h2, y2, g2) = results.values()
        diff = max(float(np.abs(a - b).max()) for a, b in zip((h1, y1, *g1), (h2, y2, *g2)))
        print(f"max backend difference: {diff:.2e}")
    else:
        print("compiled backend not built; only the numpy fallback was timed")


if __name__ == "__main__":
    main()
