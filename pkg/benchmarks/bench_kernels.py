"""Compare the compiled and numpy kernel backends.

Usage: python benchmarks/bench_kernels.py [--repeat N] [--json out.json]
"""
import argparse
import json
import sys
import timeit

import numpy as np

from madiff import kernels

CASES = [
    # (label, N, C_in, C_out, H)
    ("masknet enc1, batch 1", 1, 7, 8, 16),
    ("masknet enc1, batch 16", 16, 7, 8, 16),
    ("masknet dec1, batch 16", 16, 24, 8, 16),
    ("masknet dec2, batch 16", 16, 32, 16, 8),
]


def bench(fn, repeat):
    fn()
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def run(repeat=20):
    rng = np.random.default_rng(0)
    backends = ["python"] + (["cython"] if kernels.BACKEND == "cython" else [])
    conv_backends = backends + [None]
    rows = []
    for label, n, ci, co, h in CASES:
        x = rng.standard_normal((n, ci, h, h))
        w = rng.standard_normal((co, ci, 3, 3))
        b = rng.standard_normal(co)
        g = rng.standard_normal((n, co, h, h))
        row = {"case": label}
        for be in conv_backends:
            name = be or "auto"
            row[f"forward_{name}"] = bench(lambda: kernels.conv2d_forward(x, w, b, backend=be), repeat)
            row[f"backward_{name}"] = bench(lambda: kernels.conv2d_backward(x, w, g, backend=be), repeat)
        rows.append(row)

    src = rng.standard_normal((3, 16, 16))
    dst = np.argwhere(np.ones((16, 16)))[:128]
    idx = dst[::-1].copy()
    row = {"case": "substitute 128 pixels"}
    for be in backends:
        out = np.zeros((3, 16, 16))
        row[f"forward_{be}"] = bench(lambda: kernels.substitute_pixels(out, src, dst, idx, backend=be), repeat)
    rows.append(row)
    return backends, rows


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--json")
    args = p.parse_args(argv)
    backends, rows = run(args.repeat)
    print(f"compiled backend available: {kernels.BACKEND == 'cython'}")
    for row in rows:
        parts = [f"{k}={v * 1e6:9.1f}us" for k, v in row.items() if k != "case"]
        if "forward_cython" in row:
            parts.append(f"speedup={row['forward_python'] / row['forward_cython']:.2f}x")
        print(f"{row['case']:<26} " + "  ".join(parts))
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(rows, fh, indent=1)
    return 0


if __name__ == "__main__":
    sys.exit(main())
