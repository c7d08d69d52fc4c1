"""Compare the compiled and NumPy kernel backends on synthetic blocks.

    python benchmarks/bench_kernels.py --nnz 200000 --width 16

Each kernel is timed with ``timeit`` (best of ``--repeat``) and checked for
bitwise agreement between backends before timing.
"""

import argparse
import timeit

import numpy as np

from sparse3d.kernels import BACKENDS


def make_case(nrows, ncols, nnz, width, seed):
    rng = np.random.default_rng(seed)
    keys = np.sort(rng.choice(nrows * ncols, size=nnz, replace=False))
    rows, cols = keys // ncols, keys % ncols
    vals = rng.uniform(0.5, 1.5, nnz)
    a = rng.standard_normal((nrows, width))
    b = rng.standard_normal((ncols, width))
    a_slots = rng.permutation(nrows).astype(np.int64)
    b_slots = rng.permutation(ncols).astype(np.int64)
    # Coalesced regions covering half of a flat store.
    flat = rng.standard_normal(nrows * width)
    starts = np.arange(0, flat.size, 2 * width, dtype=np.int64)
    desc = np.stack([starts, np.full_like(starts, width)], axis=1)
    return dict(rows=rows, cols=cols, vals=vals, a=a, b=b, a_slots=a_slots, b_slots=b_slots,
                flat=flat, desc=desc)


def kernels_for(impl, c):
    out = np.zeros_like(c["a"])
    payload = impl.gather_regions(c["flat"], c["desc"])
    return {
        "sddmm": lambda: impl.sddmm(c["rows"], c["cols"], c["vals"], c["a"], c["a_slots"], c["b"], c["b_slots"]),
        "spmm": lambda: impl.spmm(c["rows"], c["cols"], c["vals"], c["b"], c["b_slots"], out, c["a_slots"]),
        "gather": lambda: impl.gather_regions(c["flat"], c["desc"]),
        "scatter": lambda: impl.scatter_regions(c["flat"].copy(), c["desc"], payload),
        "pack": lambda: impl.pack_rows(c["b"], c["b_slots"]),
    }


def check_agreement(c):
    ref = BACKENDS["python"]
    for name, impl in BACKENDS.items():
        got = impl.sddmm(c["rows"], c["cols"], c["vals"], c["a"], c["a_slots"], c["b"], c["b_slots"])
        want = ref.sddmm(c["rows"], c["cols"], c["vals"], c["a"], c["a_slots"], c["b"], c["b_slots"])
        assert np.array_equal(got, want), f"{name} sddmm differs"
        o1, o2 = np.zeros_like(c["a"]), np.zeros_like(c["a"])
        impl.spmm(c["rows"], c["cols"], c["vals"], c["b"], c["b_slots"], o1, c["a_slots"])
        ref.spmm(c["rows"], c["cols"], c["vals"], c["b"], c["b_slots"], o2, c["a_slots"])
        assert np.array_equal(o1, o2), f"{name} spmm differs"


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--rows", type=int, default=4096)
    p.add_argument("--cols", type=int, default=4096)
    p.add_argument("--nnz", type=int, default=200_000)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--repeat", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args(argv)

    c = make_case(args.rows, args.cols, args.nnz, args.width, args.seed)
    check_agreement(c)
    times = {}
    for name, impl in BACKENDS.items():
        for kernel, fn in kernels_for(impl, c).items():
            times[kernel, name] = min(timeit.repeat(fn, number=1, repeat=args.repeat))

    names = list(BACKENDS)
    print(f"nnz={args.nnz} width={args.width} backends={names}")
    print(f"{'kernel':>8} " + " ".join(f"{n + ' ms':>12}" for n in names) + f" {'speedup':>8}")
    for kernel in kernels_for(BACKENDS["python"], c):
        row = [times[kernel, n] for n in names]
        speed = row[0] / row[-1] if len(row) > 1 else 1.0
        print(f"{kernel:>8} " + " ".join(f"{t * 1e3:12.3f}" for t in row) + f" {speed:8.2f}")
    return times


if __name__ == "__main__":
    main()
