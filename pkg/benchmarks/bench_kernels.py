"""Compare the compiled and NumPy im2col/col2im kernels.

    python3 benchmarks/bench_kernels.py [--repeat 20] [--step]

Kernel timings call both backends directly in one process. ``--step`` also
times one LEFormer-tiny training iteration per backend, each in a fresh
interpreter so the import-time backend selection applies.
"""
import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from leformer._kernels import _fallback

try:
    from leformer._kernels import _im2col as compiled
except ImportError:
    compiled = None

# (label, input shape, kh, kw, stride, pad, dilation)
CASES = [
    ("stem 7x7/4 @256", (1, 3, 256, 256), 7, 7, 4, 3, 1),
    ("patch 3x3/2 @64", (4, 4, 64, 64), 3, 3, 2, 1, 1),
    ("msca 3x3 d3 @64", (4, 8, 64, 64), 3, 3, 1, 3, 3),
    ("cbam 7x7 @16", (4, 2, 16, 16), 7, 7, 1, 3, 1),
]

STEP_SNIPPET = """
import time, numpy as np
from leformer._kernels import BACKEND
from leformer.model import LEFormer, ModelConfig
from leformer.tensor import Tensor, backward
from leformer.train import cross_entropy_loss
m = LEFormer(ModelConfig.tiny())
rng = np.random.default_rng(0)
x = Tensor(rng.normal(size=(4, 3, 64, 64)).astype(np.float32))
t = rng.integers(0, 2, size=(4, 64, 64))
best = 1e9
for _ in range({repeat}):
    s = time.perf_counter()
    backward(cross_entropy_loss(m(x), t))
    m.params.zero_grad()
    best = min(best, time.perf_counter() - s)
print(BACKEND, best)
"""


def time_call(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def bench_kernels(repeat):
    rng = np.random.default_rng(0)
    print(f"{'case':<18} {'kernel':<7} {'python ms':>10} {'cython ms':>10} {'speedup':>8}")
    for label, shape, kh, kw, s, p, d in CASES:
        x = rng.normal(size=shape).astype(np.float32)
        args = (kh, kw, s, s, p, p, d, d)
        cols = _fallback.im2col(x, *args)
        for kernel, call in (("im2col", lambda mod: mod.im2col(x, *args)),
                             ("col2im", lambda mod: mod.col2im(cols, shape, *args))):
            t_py = time_call(lambda: call(_fallback), repeat) * 1e3
            if compiled is None:
                print(f"{label:<18} {kernel:<7} {t_py:>10.3f} {'n/a':>10} {'':>8}")
                continue
            np.testing.assert_allclose(call(compiled), call(_fallback), rtol=1e-5, atol=1e-5)
            t_c = time_call(lambda: call(compiled), repeat) * 1e3
            print(f"{label:<18} {kernel:<7} {t_py:>10.3f} {t_c:>10.3f} {t_py / t_c:>7.2f}x")


def bench_step(repeat):
    for pure in ("1", "0"):
        env = dict(os.environ, LEFORMER_PURE_PYTHON=pure)
        out = subprocess.run([sys.executable, "-c", STEP_SNIPPET.format(repeat=repeat)], env=env,
                             capture_output=True, text=True, check=True).stdout.split()
        print(f"training step (tiny, 4x3x64x64) backend {out[0]:<7} {float(out[1]) * 1e3:8.1f} ms")


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--repeat", type=int, default=20, help="timing repetitions (best is reported)")
    ap.add_argument("--step", action="store_true", help="also time a full training step per backend")
    args = ap.parse_args()
    if compiled is None:
        print("compiled extension not built; only the NumPy fallback is timed")
    bench_kernels(args.repeat)
    if args.step:
        bench_step(max(3, args.repeat // 4))


if __name__ == "__main__":
    main()
