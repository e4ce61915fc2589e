"""Time the compiled kernels against their numpy twins.

    python3 benchmarks/bench_kernels.py [--repeat 20]

Reports the best-of-N wall time per call and checks both variants agree.
"""
import argparse
import time

import numpy as np

from dscodec import kernels


def best_of(fn, args, repeat):
    fn(*args)  # warm-up (triggers compilation for the loop variant)
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn(*args)
        times.append(time.perf_counter() - t0)
    return min(times)


def cases(rng):
    sizes = np.array([256, 16, 4, 4], dtype=np.int64)
    subs = np.stack([rng.integers(0, s, 100_000) for s in sizes], axis=1)
    codes = rng.integers(0, int(np.prod(sizes)), 100_000)
    audio = rng.standard_normal(16000 * 5)
    x_tob = np.abs(rng.standard_normal((15, 400)))
    y_tob = x_tob + 0.3 * np.abs(rng.standard_normal((15, 400)))
    return {
        "pq_compose (100k x 4)": ("pq_compose", (subs, sizes)),
        "pq_decompose (100k)": ("pq_decompose", (codes, sizes)),
        "autocorr_peaks (5 s)": ("autocorr_peaks", (audio, 400, 160, 40, 266, 1e-8)),
        "stoi_correlation (15x400)": ("stoi_correlation", (x_tob, y_tob, 30, 1 + 10 ** 0.75)),
    }


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    args = ap.parse_args(argv)
    rng = np.random.default_rng(0)
    print(f"{'kernel':28s} {'numba ms':>10s} {'numpy ms':>10s} {'speedup':>8s}  agree")
    for label, (name, call_args) in cases(rng).items():
        loop, vec = getattr(kernels, name + "_loop"), getattr(kernels, name + "_numpy")
        agree = np.allclose(loop(*call_args), vec(*call_args), atol=1e-9)
        t_loop, t_vec = best_of(loop, call_args, args.repeat), best_of(vec, call_args, args.repeat)
        print(f"{label:28s} {t_loop * 1e3:10.3f} {t_vec * 1e3:10.3f} {t_vec / t_loop:8.2f}x  {agree}")


if __name__ == "__main__":
    main()
