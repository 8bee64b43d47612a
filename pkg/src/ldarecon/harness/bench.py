"""Timing of the convolution kernels for every available backend."""
import time

import numpy as np

from ldarecon import _backend, numerics

DEFAULT_CASES = ((1, 16, 16, 1, 8), (16, 16, 16, 8, 8), (64, 16, 16, 8, 8), (4, 64, 64, 8, 8))


def _best_of(fn, repeat):
    best = np.inf
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def run(cases=DEFAULT_CASES, repeat=5, seed=0):
    """Return rows ``(backend, op, shape, seconds, max_abs_diff_vs_python)``."""
    rng = numerics.make_rng(seed)
    rows = []
    for n, h, w, ci, co in cases:
        x = rng.standard_normal((n, h, w, ci))
        g = rng.standard_normal((n, h, w, co))
        k = rng.standard_normal((3, 3, ci, co))
        ops = {
            "conv2d": lambda mod: mod.conv2d(x, k),
            "conv2d_transpose": lambda mod: mod.conv2d_transpose(g, k),
            "conv2d_kernel_grad": lambda mod: mod.conv2d_kernel_grad(x, g),
        }
        for name, op in ops.items():
            ref = op(_backend.BACKENDS["python"])
            for backend, mod in sorted(_backend.BACKENDS.items()):
                diff = float(np.abs(op(mod) - ref).max())
                secs = _best_of(lambda: op(mod), repeat)
                rows.append((backend, name, (n, h, w, ci, co), secs, diff))
    return rows


def format_rows(rows):
    lines = [f"{'backend':8s} {'op':20s} {'n,h,w,ci,co':18s} {'ms':>9s} {'max|diff|':>10s}"]
    for backend, name, shape, secs, diff in rows:
        lines.append(f"{backend:8s} {name:20s} {','.join(map(str, shape)):18s} "
                     f"{secs * 1e3:9.3f} {diff:10.2e}")
    return "\n".join(lines)
