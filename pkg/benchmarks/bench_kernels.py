"""Compare the compiled kernels with the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 20] [--train-steps 10]

Prints per-kernel timings for attention-shaped inputs, then the wall time of
a few teacher-sized training steps under each backend.
"""
import argparse
import time
import timeit

import numpy as np

from lvt import data as D
from lvt.model import Model, teacher_config
from lvt.tensor import backend
from lvt.training import train_ntp


def kernel_inputs(rng, rows=16 * 4 * 48, cols=48, width=128):
    x = rng.standard_normal((rows, cols))
    bias = np.where(rng.random((48, cols)) < 0.1, -np.inf, 0.0)
    bias[:, 0] = 0.0
    y = backend.active.softmax_bias_fwd(x, bias)
    h = rng.standard_normal((16 * 48, width))
    gamma, beta = rng.standard_normal(width), rng.standard_normal(width)
    _, xhat, rstd = backend.active.layernorm_fwd(h, gamma, beta, 1e-5)
    return {
        "softmax_bias_fwd": lambda k: k.softmax_bias_fwd(x, bias),
        "softmax_bwd": lambda k: k.softmax_bwd(y, x),
        "layernorm_fwd": lambda k: k.layernorm_fwd(h, gamma, beta, 1e-5),
        "layernorm_bwd": lambda k: k.layernorm_bwd(h, xhat, rstd, gamma),
        "gelu_fwd": lambda k: k.gelu_fwd(h),
        "gelu_bwd": lambda k: k.gelu_bwd(h, h),
    }


def bench_kernels(repeat):
    cases = kernel_inputs(np.random.default_rng(0))
    names = backend.available()
    print(f"{'kernel':<18}" + "".join(f"{n + ' ms':>14}" for n in names))
    for case, fn in cases.items():
        times = []
        for n in names:
            mod = backend._BACKENDS[n]
            times.append(min(timeit.repeat(lambda: fn(mod), number=1, repeat=repeat)) * 1e3)
        print(f"{case:<18}" + "".join(f"{t:>14.3f}" for t in times))


def bench_training(steps):
    samples = D.generate_corpus(0, 64)
    cfg = teacher_config(vocab_size=len(D.VOCAB), eoa_id=D.EOA)
    for n in backend.available():
        prev = backend.use_backend(n)
        model = Model(cfg)
        t0 = time.perf_counter()
        train_ntp(model, samples, steps=steps, lr=1e-3, batch_size=16, seed=0)
        dt = (time.perf_counter() - t0) / steps
        backend.use_backend(prev)
        print(f"teacher step ({n}): {dt * 1e3:.1f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--train-steps", type=int, default=10)
    args = ap.parse_args()
    bench_kernels(args.repeat)
    if args.train_steps:
        bench_training(args.train_steps)


if __name__ == "__main__":
    main()
