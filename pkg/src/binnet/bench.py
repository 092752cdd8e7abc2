"""Single-threaded micro-benchmark of the float convolution against the
bit-packed XNOR/popcount path, plus the exact weight-storage ratio."""

import time
from dataclasses import dataclass

import numpy as np
from threadpoolctl import threadpool_limits

from binnet.binary import (
    ScaleDiag,
    binary_conv_forward,
    pack_bits,
    packed_weight_rows,
    sign_forward,
)
from binnet.tensor_ops import conv2d

# 32-bit float weights vs 1 bit per weight.
WEIGHT_STORAGE_RATIO = 32.0


def median_seconds(fn, repeats=30, warmup=2):
    for _ in range(warmup):
        fn()
    times = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return float(np.median(times))


@dataclass
class BenchResult:
    c_out: int
    c_in: int
    kernel: int
    image: int
    float_s: float
    packed_incl_s: float   # packing included
    packed_kernel_s: float  # pre-packed operands
    speedup_incl: float
    speedup_kernel: float
    storage_ratio: float


def bench_geometry(c_out, c_in, kernel, image, stride=1, padding=1,
                   repeats=30, seed=0):
    """Time real-valued conv2d vs the packed binary path on one geometry,
    single-threaded."""
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((c_in, image, image)).astype(np.float32)
    w = rng.standard_normal((c_out, c_in, kernel, kernel)).astype(np.float32)
    xs = sign_forward(x)
    ws = sign_forward(w)
    scale = ScaleDiag(np.ones(c_out))
    x_packed = pack_bits(xs)
    w_packed = pack_bits(ws)
    w_rows = packed_weight_rows(w_packed)

    with threadpool_limits(limits=1):
        t_float = median_seconds(lambda: conv2d(x, w, stride, padding), repeats)
        t_incl = median_seconds(
            lambda: binary_conv_forward(pack_bits(xs), pack_bits(ws), scale,
                                        stride, padding),
            repeats,
        )
        t_kernel = median_seconds(
            lambda: binary_conv_forward(x_packed, w_packed, scale, stride,
                                        padding, w_rows=w_rows),
            repeats,
        )
    return BenchResult(
        c_out, c_in, kernel, image,
        t_float, t_incl, t_kernel,
        t_float / t_incl, t_float / t_kernel,
        WEIGHT_STORAGE_RATIO,
    )
