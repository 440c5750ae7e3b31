"""Benchmark the compiled kernel core against the NumPy fallback.

Times the two shared primitives on realistic shapes: the bicubic
tap-table reduction (``apply_weights_axis0``) as used by scale-4
downsampling, and the separable 11-tap Gaussian window correlation
(``gauss_valid``) as used by SSIM. Also reports the max absolute
difference between backends on identical inputs.

Run:  python benchmarks/bench_kernels.py [--repeats N] [--sizes 256,512,...]
"""

import argparse
import time

import numpy as np

from activated_sr.imaging import SSIM_SIGMA, SSIM_WINDOW, bicubic_axis_taps, gaussian_window
from activated_sr.kernels import available_backends, get_impl


def _time(fn, repeats: int) -> float:
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        best = min(best, time.perf_counter() - t0)
    return best


def bench_resample(impl, size: int, scale: int, rng) -> tuple[float, np.ndarray]:
    arr = rng.random((size, size))
    idx, w = bicubic_axis_taps(size, scale)
    idx, w = np.ascontiguousarray(idx), np.ascontiguousarray(w)
    out = impl.apply_weights_axis0(arr, idx, w)
    return _time(lambda: impl.apply_weights_axis0(arr, idx, w), 1), out


def bench_gauss(impl, size: int, rng) -> tuple[float, np.ndarray]:
    arr = rng.random((size, size))
    k = gaussian_window(SSIM_WINDOW, SSIM_SIGMA)
    out = impl.gauss_valid(arr, k)
    return _time(lambda: impl.gauss_valid(arr, k), 1), out


def main() -> None:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeats", type=int, default=5, help="best-of-N timing")
    parser.add_argument(
        "--sizes", default="128,256,512,1024", help="comma-separated square sizes"
    )
    parser.add_argument("--scale", type=int, default=4, help="downsampling factor")
    args = parser.parse_args()
    sizes = [int(s) for s in args.sizes.split(",")]

    backends = available_backends()
    print(f"available backends: {', '.join(backends)}")
    if "native" not in backends:
        print("compiled extension not built -- timing the NumPy fallback only")

    rng = np.random.default_rng(0)
    header = f"{'kernel':<22}{'size':>6}" + "".join(f"{b:>12}" for b in backends)
    if len(backends) == 2:
        header += f"{'speedup':>10}{'max |diff|':>12}"
    print(header)
    for name, bench in (("apply_weights_axis0", bench_resample), ("gauss_valid", bench_gauss)):
        for size in sizes:
            times, outs = {}, {}
            for b in backends:
                impl = get_impl(b)
                if name == "apply_weights_axis0":
                    run = lambda: bench_resample(impl, size, args.scale, np.random.default_rng(0))
                else:
                    run = lambda: bench_gauss(impl, size, np.random.default_rng(0))
                best, out = min((run() for _ in range(args.repeats)), key=lambda r: r[0]), None
                times[b], outs[b] = best[0], best[1]
            row = f"{name:<22}{size:>6}" + "".join(f"{times[b]*1e3:>10.3f}ms" for b in backends)
            if len(backends) == 2:
                diff = float(np.max(np.abs(outs["native"] - outs["numpy"])))
                row += f"{times['numpy']/times['native']:>9.2f}x{diff:>12.2e}"
            print(row)


if __name__ == "__main__":
    main()
