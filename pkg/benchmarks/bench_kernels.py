"""Time the compiled convolution kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat N] [--check]

Each case is a (batch, in_ch, side, out_ch, kernel, stride, pad) layer
drawn from the generator and discriminator shapes used at 64 px.  The
table reports the median wall time per call for both backends and the
speedup.  ``--check`` also verifies that the two backends agree.
"""

import argparse
import statistics
import time

import numpy as np

from thermalgan import kernels

CASES = [
    # batch, in_ch, side, out_ch, k, stride, pad
    (1, 3, 64, 32, 4, 2, 1),
    (1, 32, 32, 64, 4, 2, 1),
    (1, 64, 16, 128, 4, 2, 1),
    (4, 4, 64, 32, 4, 2, 1),
    (1, 128, 8, 1, 4, 1, 1),
    (1, 16, 32, 16, 3, 1, 1),
]


def timed(fn, repeat):
    fn()  # warm up
    times = []
    for _ in range(repeat):
        t = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t)
    return statistics.median(times)


def bench_case(case, repeat, check):
    n, c, side, o, k, stride, pad = case
    rng = np.random.default_rng(0)
    x = rng.standard_normal((n, c, side, side)).astype(np.float32)
    w = rng.standard_normal((o, c, k, k)).astype(np.float32) * 0.05
    b = rng.standard_normal(o).astype(np.float32)
    out_side = (side + 2 * pad - k) // stride + 1
    gy = rng.standard_normal((n, o, out_side, out_side)).astype(np.float32)
    rows = []
    for op in ("forward", "grad_input", "grad_weight"):
        calls = {}
        for name in ("compiled", "numpy"):
            mod = kernels.backend(name)
            if op == "forward":
                calls[name] = lambda m=mod: m.conv2d_forward(x, w, b, stride, pad)
            elif op == "grad_input":
                calls[name] = lambda m=mod: m.conv2d_grad_input(gy, w, x.shape, stride, pad)
            else:
                calls[name] = lambda m=mod: m.conv2d_grad_weight(x, gy, w.shape, stride, pad)
        if check:
            a, ref = calls["compiled"](), calls["numpy"]()
            if not np.allclose(a, ref, rtol=1e-4, atol=1e-4):
                raise SystemExit(f"backends disagree on {op} for {case}")
        tc = timed(calls["compiled"], repeat)
        tn = timed(calls["numpy"], repeat)
        rows.append((op, tc, tn))
    return rows


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=5)
    ap.add_argument("--check", action="store_true")
    args = ap.parse_args()
    try:
        kernels.backend("compiled")
    except ImportError:
        raise SystemExit("compiled extension not built; run `pip install -e . --no-build-isolation` first")
    print(f"{'layer':<28}{'op':<13}{'compiled ms':>12}{'numpy ms':>10}{'speedup':>9}")
    for case in CASES:
        label = "n{}c{}s{}o{}k{}s{}p{}".format(*case)
        for op, tc, tn in bench_case(case, args.repeat, args.check):
            print(f"{label:<28}{op:<13}{tc * 1e3:>12.3f}{tn * 1e3:>10.3f}{tn / tc:>8.2f}x")


if __name__ == "__main__":
    main()
