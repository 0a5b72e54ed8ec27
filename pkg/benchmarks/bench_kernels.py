"""Timing comparison of the compiled kernels against the numpy fallback.

Runs each hot kernel on segmentation-sized inputs and reports per-call
milliseconds for both backends plus the speedup, then times one full
segmenter training step (forward + backward) under each backend.

Usage: python benchmarks/bench_kernels.py [--repeats N]
"""

from __future__ import annotations

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from archseg.kernels import pyref

try:
    from archseg.kernels import _fast
except ImportError:
    _fast = None


def _time(fn, repeats: int) -> float:
    fn()  # warm-up
    t0 = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - t0) / repeats * 1e3


def bench_kernels(repeats: int) -> None:
    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, 32, 32, 32)).astype(np.float32)
    cols = pyref.im2col3d(x, 3, 1, 1)
    coords = rng.uniform(0, 31, size=(3, 32**3)).astype(np.float32)
    gout = rng.standard_normal((16, 32**3)).astype(np.float32)
    vol64 = rng.standard_normal((1, 48, 48, 48))

    cases = [
        ("im2col3d 16ch 32^3 k3", lambda m: m.im2col3d(x, 3, 1, 1)),
        ("col2im3d 16ch 32^3 k3", lambda m: m.col2im3d(cols, (16, 32, 32, 32), 3, 1, 1)),
        ("trilinear_gather 16ch", lambda m: m.trilinear_gather(x, coords)),
        (
            "trilinear_gather_grad",
            lambda m: m.trilinear_gather_grad(x, coords, gout),
        ),
        ("box_sum3d 48^3 r4", lambda m: m.box_sum3d(vol64, 4)),
    ]
    print(f"{'kernel':<24}{'python ms':>12}{'native ms':>12}{'speedup':>10}")
    for name, call in cases:
        py = _time(lambda: call(pyref), repeats)
        if _fast is None:
            print(f"{name:<24}{py:>12.2f}{'missing':>12}{'':>10}")
            continue
        nat = _time(lambda: call(_fast), repeats)
        print(f"{name:<24}{py:>12.2f}{nat:>12.2f}{py / nat:>9.1f}x")


_STEP_SNIPPET = """
import time
import numpy as np
from archseg import segmentation as sg
from archseg.grid import one_hot
import archseg.kernels as K

net = sg.AttentionUNet(sg.SegNetConfig())
x = np.random.default_rng(0).standard_normal((2, 1, 32, 32, 32)).astype(np.float32)
tgt = np.random.default_rng(1).integers(0, 12, (2, 32, 32, 32)).astype(np.uint8)
oh = np.stack([one_hot(t, 12) for t in tgt])
rng = np.random.default_rng(7)

def step():
    net.ps.zero_grad()
    loss = sg.dice_ce_loss(net.forward(x, training=True, rng=rng), oh)
    loss.backward()

step(); step()
t0 = time.perf_counter()
for _ in range(4):
    step()
print(f"{K.BACKEND} training step: {(time.perf_counter() - t0) / 4:.3f}s")
"""


def bench_training_step() -> None:
    backends = ["python"] + (["native"] if _fast is not None else [])
    for backend in backends:
        out = subprocess.run(
            [sys.executable, "-c", _STEP_SNIPPET],
            env={**os.environ, "ARCHSEG_KERNELS": backend},
            capture_output=True,
            text=True,
        )
        sys.stdout.write(out.stdout or out.stderr)


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--repeats", type=int, default=5)
    args = ap.parse_args()
    if _fast is None:
        print("compiled backend not built; timing the fallback only", file=sys.stderr)
    bench_kernels(args.repeats)
    print()
    bench_training_step()


if __name__ == "__main__":
    main()
