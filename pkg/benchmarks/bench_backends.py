"""Benchmark the numba-jitted kernels against the pure-numpy fallbacks.

Runs each hot kernel on training-shaped inputs under both backends and then
times a full toy training epoch per backend in a subprocess (the backend is
fixed at import time, so the end-to-end comparison needs fresh interpreters).

Usage: python benchmarks/bench_backends.py [--repeats 50]
"""

import argparse
import os
import subprocess
import sys
import time

import numpy as np

from attnconv import _kernels_numpy as knp

try:
    from attnconv import _kernels_numba as knb
except ImportError:
    knb = None


def _time(fn, repeats):
    fn()  # warm (jit compile / cache load)
    start = time.perf_counter()
    for _ in range(repeats):
        fn()
    return (time.perf_counter() - start) / repeats


def bench_kernels(repeats: int):
    rng = np.random.default_rng(0)
    logits = np.ascontiguousarray(rng.standard_normal((4096, 49)))
    grad = np.ascontiguousarray(rng.standard_normal((4096, 49)))
    wide = np.ascontiguousarray(rng.standard_normal((1088, 256)))
    wgrad = np.ascontiguousarray(rng.standard_normal((1088, 256)))
    p = rng.standard_normal(262144)
    g = rng.standard_normal(262144)

    cases = [
        ("softmax fwd  [4096,49]", lambda k: k.softmax_fwd(logits, 1.0)),
        ("softmax bwd  [4096,49]",
         lambda k: k.softmax_bwd(k.softmax_fwd(logits, 1.0), grad, 1.0)),
        ("layernorm fwd [4096,49]", lambda k: k.layernorm_fwd(logits, 1e-5)),
        ("gelu fwd     [1088,256]", lambda k: k.gelu_fwd(wide)),
        ("gelu bwd     [1088,256]", lambda k: k.gelu_bwd(wide, wgrad)),
        ("adamw step    [262144]",
         lambda k: k.adamw_step(p.copy(), g, np.zeros_like(p), np.zeros_like(p),
                                1e-3, 0.9, 0.999, 1e-8, 0.05, 0.1, 0.001)),
    ]
    print(f"{'kernel':<26}{'numpy (ms)':>12}{'numba (ms)':>12}{'speedup':>9}")
    for name, call in cases:
        t_np = _time(lambda: call(knp), repeats) * 1e3
        if knb is None:
            print(f"{name:<26}{t_np:>12.3f}{'n/a':>12}{'':>9}")
            continue
        t_nb = _time(lambda: call(knb), repeats) * 1e3
        print(f"{name:<26}{t_np:>12.3f}{t_nb:>12.3f}{t_np / t_nb:>8.1f}x")


_EPOCH_SNIPPET = r"""
import time
import numpy as np
from attnconv.backend import backend_name
from attnconv.data import generate_dataset
from attnconv.models import build_model, preset_config
from attnconv.train import TrainConfig, train

data = generate_dataset(256, 32, 10, seed=0)
model = build_model(preset_config("toy-vit"), seed=0)
cfg = TrainConfig(epochs=1, batch_size=64, seed=0)
train(model, data, cfg)  # warm
start = time.perf_counter()
train(model, data, cfg)
print(f"{backend_name()}: {time.perf_counter() - start:.2f} s/epoch (256 images)")
"""


def bench_epoch():
    print("\ntoy-vit training epoch, backend fixed per process:")
    for backend in ("numpy", "numba"):
        env = dict(os.environ, ATTNCONV_BACKEND=backend)
        proc = subprocess.run([sys.executable, "-c", _EPOCH_SNIPPET], env=env,
                              capture_output=True, text=True)
        out = proc.stdout.strip() or proc.stderr.strip().splitlines()[-1]
        print(f"  {out}")


if __name__ == "__main__":
    parser = argparse.ArgumentParser()
    parser.add_argument("--repeats", type=int, default=50)
    parser.add_argument("--skip-epoch", action="store_true")
    args = parser.parse_args()
    bench_kernels(args.repeats)
    if not args.skip_epoch:
        bench_epoch()
