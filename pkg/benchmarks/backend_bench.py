"""Compare the numba and numpy compute backends on the hot paths.

Times three workloads on each backend:

  gemm     one matrix product at the size of the widest conv im2col GEMM
  conv     a conv3x3 forward at a mid-network stage
  forward  one full-model single-image inference

Usage:
    python3 benchmarks/backend_bench.py [--iters N] [--json]

The numba path also reports its thread count; DCDM_THREADS or
backend.set_num_threads control it. Expect the numpy gemm to be
competitive (it calls into BLAS); the numba kernels earn their keep on
im2col/pooling loops and by keeping summation order fixed regardless of
the BLAS build.
"""

import argparse
import json
import time

import numpy as np

from dcdm import backend, tensor
from dcdm.layers import LayerParams, LayerSpec, forward_layer
from dcdm.model import build_dcdm


def time_call(fn, iters, warmup=1):
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(iters):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return min(samples), sum(samples) / len(samples)


def bench_gemm(iters):
    rng = np.random.default_rng(0)
    # conv stage 5 shape: (34*45 rows) x (512*9 cols) @ (512*9, 512)
    a = rng.standard_normal((1530, 4608)).astype(np.float32)
    b = rng.standard_normal((4608, 512)).astype(np.float32)
    return time_call(lambda: tensor.gemm(a, b), iters)


def bench_conv(iters):
    rng = np.random.default_rng(1)
    spec = LayerSpec("conv3x3", out_channels=256)
    params = LayerParams(
        w=rng.standard_normal((256, 128, 3, 3)).astype(np.float32),
        b=np.zeros(256, dtype=np.float32),
    )
    x = rng.standard_normal((1, 128, 68, 90)).astype(np.float32)
    return time_call(lambda: forward_layer(spec, params, x), iters)


def bench_forward(model, x, iters):
    return time_call(lambda: model.predict(x), iters)


def main(argv=None):
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--iters", type=int, default=3)
    parser.add_argument("--json", action="store_true",
                        help="emit machine-readable results")
    args = parser.parse_args(argv)

    model = build_dcdm()
    x = np.random.default_rng(2).random(
        (3, 272, 363), dtype=np.float32)

    names = [backend.NUMPY]
    if backend.HAS_NUMBA:
        names.append(backend.NUMBA)
    results = {}
    for name in names:
        with backend.use_backend(name):
            gemm_best, gemm_mean = bench_gemm(args.iters)
            conv_best, conv_mean = bench_conv(args.iters)
            fwd_best, fwd_mean = bench_forward(model, x, max(1, args.iters // 2))
        results[name] = {
            "gemm_ms": {"best": gemm_best * 1e3, "mean": gemm_mean * 1e3},
            "conv_ms": {"best": conv_best * 1e3, "mean": conv_mean * 1e3},
            "forward_ms": {"best": fwd_best * 1e3, "mean": fwd_mean * 1e3},
        }
    results["threads"] = backend.get_num_threads()

    with backend.use_backend(backend.NUMPY):
        probs_np = model.predict(x)[1]
    if backend.HAS_NUMBA:
        with backend.use_backend(backend.NUMBA):
            probs_nb = model.predict(x)[1]
        results["max_prob_diff"] = float(np.abs(probs_np - probs_nb).max())

    if args.json:
        print(json.dumps(results, indent=2, sort_keys=True))
        return 0

    print(f"threads: {results['threads']}")
    header = f"{'workload':<10}" + "".join(f"{n + ' best':>14}{n + ' mean':>14}"
                                           for n in names)
    print(header)
    for key, label in (("gemm_ms", "gemm"), ("conv_ms", "conv"),
                       ("forward_ms", "forward")):
        row = f"{label:<10}"
        for n in names:
            cell = results[n][key]
            row += f"{cell['best']:>12.1f}ms{cell['mean']:>12.1f}ms"
        print(row)
    if "max_prob_diff" in results:
        print(f"max |prob difference| between backends: "
              f"{results['max_prob_diff']:.2e}")
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
