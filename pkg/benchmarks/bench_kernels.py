"""Compare the compiled and NumPy kernel backends.

Usage: python3 benchmarks/bench_kernels.py [--repeat N] [--json out.json]

Times im2col, col2im and the nearest-2x upsample pair on shapes taken from the
default 64x64 U-Net, then one full training step of that network under each
backend (the backend is chosen at import, so the step runs in a subprocess).
"""

import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from bayes_seg import _pykernels

try:
    from bayes_seg import _ckernels
except ImportError:
    _ckernels = None

# (N, C, H, W) feature maps seen by the default network with batch size 8
SHAPES = [(8, 3, 64, 64), (8, 8, 64, 64), (8, 16, 32, 32), (8, 32, 16, 16)]

STEP_SCRIPT = """
import timeit, numpy as np
from bayes_seg import kernels, tensor as T
from bayes_seg.segnet import ArchitectureConfig, build_model, forward_stochastic
from bayes_seg.losses import nll_loss
m = build_model(ArchitectureConfig(stochastic_kind="reparam"), np.random.default_rng(0))
x = np.random.default_rng(1).uniform(size=(8, 3, 64, 64))
y = (x[:, :1] > 0.5).astype(float)
def step():
    p, kl = forward_stochastic(m, x, np.random.default_rng(2))
    T.backward(nll_loss(p, y) + kl)
step()
print(kernels.BACKEND, min(timeit.repeat(step, number=1, repeat={repeat})))
"""


def bench_kernels(mod, repeat):
    rng = np.random.default_rng(0)
    out = {}
    for shape in SHAPES:
        x = rng.standard_normal(shape)
        cols = mod.im2col(x, 3, 3, 1, 1)
        up = rng.standard_normal(shape[:2] + (shape[2] * 2, shape[3] * 2))
        cases = {
            "im2col": lambda: mod.im2col(x, 3, 3, 1, 1),
            "col2im": lambda: mod.col2im(cols, shape, 3, 3, 1, 1),
            "upsample2x": lambda: mod.upsample2x(x),
            "upsample2x_backward": lambda: mod.upsample2x_backward(up),
        }
        for name, fn in cases.items():
            out[f"{name} {shape}"] = min(timeit.repeat(fn, number=3, repeat=repeat)) / 3
    return out


def bench_step(backend, repeat):
    env = dict(os.environ, BAYES_SEG_KERNELS=backend)
    res = subprocess.run([sys.executable, "-c", STEP_SCRIPT.format(repeat=repeat)], env=env,
                         capture_output=True, text=True, check=True)
    name, seconds = res.stdout.split()
    return name, float(seconds)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", default=None, help="also write results as JSON")
    args = ap.parse_args()

    results = {"python": bench_kernels(_pykernels, args.repeat)}
    if _ckernels is None:
        print("compiled extension not built; timing the NumPy backend only")
    else:
        results["cython"] = bench_kernels(_ckernels, args.repeat)

    print(f"{'kernel':44s} {'numpy ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for key, t_py in results["python"].items():
        t_c = results.get("cython", {}).get(key)
        extra = f"{t_c * 1e3:10.2f} {t_py / t_c:8.2f}" if t_c else ""
        print(f"{key:44s} {t_py * 1e3:10.2f} {extra}")

    steps = {}
    for backend in (["python", "cython"] if _ckernels else ["python"]):
        name, seconds = bench_step(backend, max(1, args.repeat // 2))
        steps[name] = seconds
        print(f"training step (batch 8, 64x64, {name}): {seconds * 1e3:.1f} ms")
    results["train_step"] = steps
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(results, fh, indent=2)


if __name__ == "__main__":
    main()
