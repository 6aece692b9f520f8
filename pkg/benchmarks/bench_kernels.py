"""Compare the compiled and numpy kernel backends.

    python3 benchmarks/bench_kernels.py [--repeats 5] [--csv out.csv]
"""
import argparse

from threadpoolctl import threadpool_limits

from lt3d import bench


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeats", type=int, default=5)
    ap.add_argument("--csv")
    args = ap.parse_args()
    with threadpool_limits(1):
        rows = bench.bench_kernels(args.repeats)
    by = {(r["kernel"], r["backend"]): r["median_s"] for r in rows}
    print(f"{'kernel':<18}{'numpy ms':>10}{'cython ms':>11}{'speedup':>9}")
    for kernel in dict.fromkeys(r["kernel"] for r in rows):
        a, b = by[(kernel, "numpy")], by.get((kernel, "cython"))
        if b is None:
            print(f"{kernel:<18}{a * 1e3:>10.2f}{'n/a':>11}")
        else:
            print(f"{kernel:<18}{a * 1e3:>10.2f}{b * 1e3:>11.2f}{a / b:>8.1f}x")
    if args.csv:
        bench.write_csv(rows, args.csv, bench.KERNEL_FIELDS)


if __name__ == "__main__":
    main()
