"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeat N]

Times the fused selection kernel on toy-sized and SD-sized head shapes
for each backend and for the size-based dispatch in ``hrvkit.kernels``,
then a full toy HRV build under each backend (in a subprocess, since the
backend is fixed at import).
"""

import argparse
import os
import subprocess
import sys
import timeit

import numpy as np

from hrvkit import kernels

SHAPES = {
    "toy (16x16 q, 5 concepts)": (16, 16, 5),
    "sd 64x64 (4096x40 q, 34 concepts)": (4096, 40, 34),
    "sd 16x16 (256x160 q, 34 concepts)": (256, 160, 34),
}

BUILD = """
import time
from hrvkit import kernels
from hrvkit.adapter import build_raw_online
from hrvkit.toy import ToyConfig, ToyEngine, toy_prompts
from hrvkit.vocab import default_vocabulary
v = default_vocabulary()
eng = ToyEngine(ToyConfig(), v)
ps = toy_prompts(v, 50, 1)
t = time.perf_counter()
build_raw_online(eng, v, ps, 7)
print(kernels.BACKEND, time.perf_counter() - t)
"""


def bench_kernel(repeat):
    rng = np.random.default_rng(0)
    back = kernels.backends()
    names = [*back, "dispatch"]
    print(f"{'shape':38s}" + "".join(f"{n:>12s}" for n in names) + "  compiled speedup")
    for label, (P, d, N) in SHAPES.items():
        Q = rng.standard_normal((P, d))
        K = rng.standard_normal((N + N // 3, d))
        bounds = np.unique(np.concatenate([[0], rng.choice(np.arange(1, len(K)), N - 1, replace=False),
                                           [len(K)]])).astype(np.int64)
        times = {}
        for name, mod in [*back.items(), ("dispatch", kernels)]:
            t = timeit.Timer(lambda: mod.fused_select(Q, K, bounds, 1 / np.sqrt(d)))
            n, _ = t.autorange()
            times[name] = min(t.repeat(repeat, n)) / n
        cells = "".join(f"{times[n] * 1e6:10.1f}us" for n in names)
        speed = f"{times['python'] / times['cython']:10.1f}x" if "cython" in times else ""
        print(f"{label:38s}{cells}  {speed}")


def bench_build():
    for env in ({}, {"HRV_PURE_PYTHON": "1"}):
        out = subprocess.run([sys.executable, "-c", BUILD], env={**os.environ, **env},
                             capture_output=True, text=True, check=True)
        name, secs = out.stdout.split()
        print(f"toy build, 50 prompts x 34 concepts, {name:6s}: {float(secs):.3f}s")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args()
    bench_kernel(args.repeat)
    bench_build()


if __name__ == "__main__":
    main()
