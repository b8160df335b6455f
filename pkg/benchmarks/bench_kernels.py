"""Time the compiled kernels against the numpy fallback.

    python benchmarks/bench_kernels.py [--repeat 5] [--json out.json]

Both backends are imported directly, so one process measures both. Inputs
follow pipeline shapes (16x16 images, layer-3 maps, 2000 samples).
"""

from __future__ import annotations

import argparse
import json
import sys
import timeit

import numpy as np

from gramclust import _pykernels

try:
    from gramclust import _ckernels
except ImportError:
    _ckernels = None


def cases(rng):
    phi = rng.standard_normal((64, 256, 32)).astype(np.float32)
    x = rng.standard_normal((2000, 548))
    cent = rng.standard_normal((8, 548))
    labels = rng.integers(0, 8, 2000)
    cost = rng.standard_normal((64, 64))
    img = rng.standard_normal((64, 16, 16, 16)).astype(np.float32)
    dcols = rng.standard_normal((64, 16, 16, 144)).astype(np.float32)
    return {
        "sign_rows 548x1024": lambda k: k.sign_rows(7, 0, 548, 1024),
        "batch_gram 64x256x32": lambda k: k.batch_gram(phi),
        "assign_nearest 2000x548 k=8": lambda k: k.assign_nearest(x, cent),
        "cluster_sums 2000x548 k=8": lambda k: k.cluster_sums(x, labels, 8),
        "hungarian 64x64": lambda k: k.hungarian(cost),
        "im2col3x3 64x16x16x16": lambda k: k.im2col3x3(img),
        "col2im3x3 64x16x16x144": lambda k: k.col2im3x3(dcols, 16),
    }


def best_of(fn, repeat):
    number = 1
    while timeit.timeit(fn, number=number) < 0.05 and number < 10_000:
        number *= 4
    return min(timeit.repeat(fn, number=number, repeat=repeat)) / number


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--json", help="also write results here")
    args = ap.parse_args(argv)
    if _ckernels is None:
        print("compiled extension not built; run `pip install -e . --no-build-isolation`", file=sys.stderr)
        return 1
    rows = []
    print(f"{'kernel':32s} {'python ms':>10s} {'cython ms':>10s} {'speedup':>8s}")
    for name, call in cases(np.random.default_rng(0)).items():
        py = best_of(lambda: call(_pykernels), args.repeat)
        cy = best_of(lambda: call(_ckernels), args.repeat)
        rows.append({"kernel": name, "python_s": py, "cython_s": cy, "speedup": py / cy})
        print(f"{name:32s} {py * 1e3:10.3f} {cy * 1e3:10.3f} {py / cy:8.2f}")
    if args.json:
        with open(args.json, "w") as fh:
            json.dump({"rows": rows}, fh, indent=2)
    return 0


if __name__ == "__main__":
    sys.exit(main())
