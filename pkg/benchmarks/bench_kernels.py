"""Time the compiled kernels against the numpy fallback.

Run after building the extension (``pip install -e . --no-build-isolation``):

    python3 benchmarks/bench_kernels.py [--repeat 20]

Prints the median time per call for each kernel and backend, the speedup,
and one end-to-end number: a toy UNet training step.
"""

import argparse
import statistics
import time

import numpy as np

from cracknet import _kernels, data, models, training


def median_time(fn, repeat):
    fn()
    times = []
    for _ in range(repeat):
        start = time.perf_counter()
        fn()
        times.append(time.perf_counter() - start)
    return statistics.median(times)


def cases(rng):
    xp = rng.random((4, 66, 66, 32)).astype(np.float32)
    cols = _kernels.python_backend.im2col(xp, 3, 3, 1, 64, 64)
    labels = (rng.random(64 * 64) > 0.95).astype(np.float64)
    samples = data.synth_cracks(8, 64, seed=0)
    model = models.build_model(models.ModelConfig.toy("unet"))
    config = training.TrainConfig(batch_size=8)
    state = training.AdamState()
    return {
        "im2col 4x66x66x32 k3": lambda: _kernels.im2col(xp, 3, 3, 1, 64, 64),
        "col2im 4x66x66x32 k3": lambda: _kernels.col2im(cols, 4, 66, 66, 32, 3, 3, 1, 64, 64),
        "lovasz_grad 4096 px": lambda: _kernels.lovasz_grad(labels),
        "toy unet train step (8 x 64x64)": lambda: training.train_epoch(model, samples, config, state, 1),
    }


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=20)
    args = parser.parse_args()
    backends = ["python"] + (["cython"] if _kernels.compiled_backend is not None else [])
    if len(backends) == 1:
        print("compiled kernels are not built; timing the numpy fallback only")
    results = {}
    for backend in backends:
        _kernels.use_backend(backend)
        for name, fn in cases(np.random.default_rng(0)).items():
            results[name, backend] = median_time(fn, args.repeat)
    print(f"{'kernel':34s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name in cases(np.random.default_rng(0)):
        py = results[name, "python"] * 1e3
        if "cython" in backends:
            cy = results[name, "cython"] * 1e3
            print(f"{name:34s} {py:10.3f} {cy:10.3f} {py / cy:7.2f}x")
        else:
            print(f"{name:34s} {py:10.3f} {'-':>10s} {'-':>8s}")


if __name__ == "__main__":
    main()
