"""Integer vs float matmul throughput probe.

Whether the int32-accumulating kernel beats float BLAS is a hardware
and library property, so the result is reported with an explicit
inversion flag rather than asserted.
"""

from __future__ import annotations

import time

import numpy as np


def matmul_throughput_report(size: int = 256, repeats: int = 5, seed: int = 0) -> dict:
    if size < 2:
        raise ValueError("benchmark needs a non-trivial matrix")
    rng = np.random.default_rng(seed)
    a = rng.standard_normal((size, size)).astype(np.float32)
    b = rng.standard_normal((size, size)).astype(np.float32)
    ai = np.clip(np.rint(a * 40.0), -127, 127).astype(np.int8)
    bi = np.clip(np.rint(b * 40.0), -127, 127).astype(np.int8)

    def best_seconds(fn) -> float:
        fn()  # warm-up
        return min(_timed(fn) for _ in range(repeats))

    def _timed(fn) -> float:
        t0 = time.perf_counter()
        fn()
        return time.perf_counter() - t0

    t_float = best_seconds(lambda: a @ b)
    t_int = best_seconds(lambda: ai.astype(np.int32) @ bi.astype(np.int32))
    ops = 2.0 * size**3
    float_gops = ops / t_float / 1e9
    int_gops = ops / t_int / 1e9
    return {
        "size": size,
        "float_gops": float_gops,
        "int_gops": int_gops,
        "int_over_float": int_gops / float_gops,
        "inverted": bool(int_gops < float_gops),
    }
