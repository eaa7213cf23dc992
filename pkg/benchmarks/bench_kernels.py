"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat 20] [--size 64]

Each kernel runs on identical inputs under every available backend; outputs
are checked for agreement before timing.
"""

import argparse
import math
import timeit

import numpy as np

from affordheat import kernels


def _inputs(size, rng):
    yy, xx = np.mgrid[0:size, 0:size]
    r = size / 4
    blob = (xx - size / 2) ** 2 + ((yy - size / 2) * 1.3) ** 2 <= r * r
    speckle = rng.random((size, size)) < 0.3
    poly = [(size * (0.5 + 0.4 * math.cos(a)), size * (0.5 + 0.35 * math.sin(a)))
            for a in np.linspace(0, 2 * math.pi, 7)[:-1]]
    ys, xs = np.nonzero(blob)
    pts_a = np.stack([xs, ys], 1).astype(np.float64)
    pts_b = pts_a + rng.normal(0, 2.0, pts_a.shape)
    return {
        "boundary": (blob,),
        "directed_distances": (pts_a, pts_b),
        "points_in_polygon": (poly, size, size),
        "label4": (speckle,),
    }


def _same(a, b):
    if isinstance(a, tuple):
        return all(_same(x, y) for x, y in zip(a, b))
    return np.allclose(np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64), atol=1e-9)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--size", type=int, default=64)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    backends = kernels.available_backends()
    if "cython" not in backends:
        print("compiled extension not built; only the python backend is timed")
    inputs = _inputs(args.size, np.random.default_rng(args.seed))

    names = sorted(backends)
    print(f"{'kernel':<20}" + "".join(f"{n + ' (ms)':>15}" for n in names) + f"{'speedup':>10}")
    for kernel, kargs in inputs.items():
        outs = {n: getattr(backends[n], kernel)(*kargs) for n in names}
        if len(names) > 1 and not _same(outs["cython"], outs["python"]):
            raise SystemExit(f"{kernel}: backends disagree")
        times = {}
        for n in names:
            fn = getattr(backends[n], kernel)
            times[n] = min(timeit.repeat(lambda: fn(*kargs), number=5, repeat=args.repeat)) / 5 * 1e3
        speed = times["python"] / times["cython"] if "cython" in times else float("nan")
        print(f"{kernel:<20}" + "".join(f"{times[n]:>15.4f}" for n in names) + f"{speed:>9.1f}x")


if __name__ == "__main__":
    main()
