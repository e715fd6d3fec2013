#!/usr/bin/env python3
"""Benchmark the compiled kernel core against the numpy reference backend.

Times the convolution kernels on shapes representative of desk-scale
training plus one larger configuration, then times a full end-to-end
training step with whichever backend is active.

Usage:
    python3 benchmarks/bench_kernels.py [--repeats N]
    CBODD_BACKEND=reference python3 benchmarks/bench_kernels.py   # force fallback
"""

from __future__ import annotations

import argparse
import time

import numpy as np

from cbodd.backend import ACTIVE_BACKEND, reference

try:
    from cbodd.backend import _fastkern
except ImportError:
    _fastkern = None

SHAPES = [
    # (label, batch, c_in, size, c_out, kernel, stride)
    ("frame 32x32 stem", 8, 3, 34, 8, 3, 2),
    ("frame 32x32 deep", 8, 8, 18, 16, 3, 2),
    ("batch32 stem", 32, 3, 34, 8, 3, 2),
    ("large 64x64", 8, 16, 66, 32, 3, 1),
]


def time_fn(fn, repeats: int) -> float:
    fn()  # warmup
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def bench_conv(repeats: int) -> None:
    backends = [("reference", reference)]
    if _fastkern is not None:
        backends.append(("compiled", _fastkern))
    print(f"{'shape':20s} {'op':12s}" + "".join(f"{name:>12s}" for name, _ in backends) + f"{'speedup':>10s}")
    rng = np.random.default_rng(0)
    for label, batch, c_in, size, c_out, kernel, stride in SHAPES:
        x = np.ascontiguousarray(rng.standard_normal((batch, c_in, size, size)))
        w = np.ascontiguousarray(rng.standard_normal((c_out, c_in, kernel, kernel)))
        h_out = (size - kernel) // stride + 1
        gy = np.ascontiguousarray(rng.standard_normal((batch, c_out, h_out, h_out)))
        ops = {
            "forward": lambda impl: impl.conv2d_forward(x, w, stride),
            "grad_input": lambda impl: impl.conv2d_grad_input(gy, w, stride, size, size),
            "grad_weight": lambda impl: impl.conv2d_grad_weight(gy, x, kernel, kernel, stride),
        }
        for op_name, op in ops.items():
            times = [time_fn(lambda impl=impl: op(impl), repeats) for _, impl in backends]
            row = f"{label:20s} {op_name:12s}" + "".join(f"{t * 1e3:10.3f}ms" for t in times)
            if len(times) == 2:
                row += f"{times[0] / times[1]:9.2f}x"
            print(row)


def bench_training_step(repeats: int) -> None:
    from cbodd.config import RunConfig
    from cbodd.datagen import Corpus, generate_corpus
    from cbodd.train import train_model

    clips = generate_corpus(seed=0, n_clips=8, n_frames=8, size=32, domain_mix="A")
    corpus = Corpus.from_clips(clips)
    cfg = RunConfig(seed=0, epochs=1, batch_size=8)

    def run():
        train_model(cfg, corpus)

    elapsed = time_fn(run, max(1, repeats // 4))
    steps = 64 // cfg.batch_size
    print(
        f"\nend-to-end ({ACTIVE_BACKEND} backend): {elapsed * 1e3:.1f} ms per epoch "
        f"of 64 frames ({elapsed / steps * 1e3:.1f} ms per step)"
    )


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--repeats", type=int, default=30)
    args = parser.parse_args()
    print(f"active backend: {ACTIVE_BACKEND}")
    if _fastkern is None:
        print("compiled extension unavailable; timing reference only")
    bench_conv(args.repeats)
    bench_training_step(args.repeats)


if __name__ == "__main__":
    main()
