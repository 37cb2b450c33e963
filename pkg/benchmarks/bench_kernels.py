"""Time the compiled im2col/col2im kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 20]
"""
import argparse
import timeit

import numpy as np

from advrestore.autodiff import _pykernels

try:
    from advrestore.autodiff import _ckernels
except ImportError:
    _ckernels = None

# (N, C, H, W, k, stride, pad): shapes seen in the autoencoder, the denoiser and the face models
CASES = [
    (32, 1, 32, 32, 3, 1, 1),
    (32, 16, 32, 32, 3, 2, 1),
    (64, 24, 8, 8, 3, 1, 1),
    (64, 16, 32, 32, 5, 1, 2),
]


def bench(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat)) * 1e3


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args()
    backends = [("numpy", _pykernels)] + ([("cython", _ckernels)] if _ckernels else [])
    if _ckernels is None:
        print("compiled kernels not built; timing the numpy fallback only")
    print(f"{'shape (N,C,H,W) k/s/p':<28}{'kernel':<8}" + "".join(f"{n + ' ms':>12}" for n, _ in backends) + f"{'speedup':>10}")
    rng = np.random.default_rng(0)
    for n, c, h, w, k, s, p in CASES:
        x = rng.normal(size=(n, c, h, w))
        cols = _pykernels.im2col(x, k, k, s, p)
        if _ckernels is not None:
            assert np.array_equal(cols, _ckernels.im2col(x, k, k, s, p))
            assert np.array_equal(_pykernels.col2im(cols, x.shape, k, k, s, p), _ckernels.col2im(cols, x.shape, k, k, s, p))
        label = f"({n},{c},{h},{w}) {k}/{s}/{p}"
        for kernel in ("im2col", "col2im"):
            times = []
            for _, mod in backends:
                if kernel == "im2col":
                    times.append(bench(lambda: mod.im2col(x, k, k, s, p), args.repeat))
                else:
                    times.append(bench(lambda: mod.col2im(cols, x.shape, k, k, s, p), args.repeat))
            speed = f"{times[0] / times[1]:>9.2f}x" if len(times) == 2 else ""
            print(f"{label:<28}{kernel:<8}" + "".join(f"{t:>12.2f}" for t in times) + speed)


if __name__ == "__main__":
    main()
