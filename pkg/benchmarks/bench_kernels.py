"""Compiled vs numpy kernels: per-kernel timings and one end-to-end training step.

    python3 benchmarks/bench_kernels.py [--repeat 50]
"""
import argparse
import timeit

import numpy as np

from sanpeft import kernels
from sanpeft import tensor as T
from sanpeft.adapters import make_adapter
from sanpeft.methods import Method
from sanpeft.models import build_reference_model


def kernel_cases(rng):
    x = rng.standard_normal((512, 64))
    g = rng.standard_normal((512, 64))
    flat = rng.standard_normal(512 * 64)
    labels = rng.integers(0, 64, size=512)
    y = kernels.softmax_rows(x)
    xhat, inv, act = kernels.normalize_rows(x, 1e-5)
    return {
        "softmax_rows": lambda: kernels.softmax_rows(x),
        "softmax_rows_backward": lambda: kernels.softmax_rows_backward(y, g),
        "normalize_rows": lambda: kernels.normalize_rows(x, 1e-5),
        "normalize_rows_backward": lambda: kernels.normalize_rows_backward(xhat, inv, act, g),
        "gelu": lambda: kernels.gelu(flat),
        "gelu_backward": lambda: kernels.gelu_backward(flat, flat),
        "cross_entropy_rows": lambda: kernels.cross_entropy_rows(x, labels),
    }


def train_step_case(rng):
    state = build_reference_model("vit_toy", [8, 32, 64, 3], seed=0, grid=4)
    adapter = make_adapter(state, Method("san"))
    x = rng.standard_normal((64, state.spec.in_dim))
    y = rng.integers(0, 3, size=64)
    params = [t for _, t in adapter.parameters()]

    def step():
        T.zero_grads(params)
        T.backward(T.cross_entropy(adapter(state, x), y))

    return step


def best_of(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    args = ap.parse_args()
    backends = kernels.available()
    if "cython" not in backends:
        print("compiled kernels not built; only the numpy fallback is available")
    results = {}
    for name in backends:
        kernels.use_backend(name)
        rng = np.random.default_rng(0)
        cases = kernel_cases(rng)
        cases["train_step(vit_toy+san)"] = train_step_case(rng)
        results[name] = {k: best_of(fn, args.repeat) for k, fn in cases.items()}
    print(f"{'case':<28}" + "".join(f"{b + ' (us)':>16}" for b in backends) + ("   speedup" if len(backends) > 1 else ""))
    for case in results[backends[0]]:
        row = f"{case:<28}" + "".join(f"{1e6 * results[b][case]:>16.1f}" for b in backends)
        if len(backends) > 1:
            row += f"{results['python'][case] / results['cython'][case]:>9.2f}x"
        print(row)


if __name__ == "__main__":
    main()
