"""Timing and memory harness for attention, the ROI sampler and the compiled kernels.

Every mode returns rows (dicts) and can write them as a CSV whose first
column is the schema version.
"""
from __future__ import annotations

import csv
import statistics
import time
import tracemalloc
from pathlib import Path

import numpy as np

from . import _kernels
from . import tensor as T
from .attention import DEFAULT_QUADRATIC_BUDGET, AttentionParams, linear_attention, quadratic_attention
from .sampler import RoiBox, SamplerConfig, build_sampling_plan

SCHEMA = "lt3d-bench/1"
ATTENTION_FIELDS = ["schema", "mode", "variant", "n", "d", "repeats", "median_s", "min_s", "peak_bytes", "status"]
SAMPLER_FIELDS = ["schema", "mode", "h", "w", "depth", "alpha", "beta", "roi_h", "roi_w", "tokens",
                  "full_tokens", "fraction", "expected_fraction", "abs_error"]
KERNEL_FIELDS = ["schema", "mode", "kernel", "backend", "size", "repeats", "median_s", "min_s"]


def time_call(fn, repeats, warmup=1):
    """Wall-clock seconds of ``repeats`` calls (after ``warmup`` untimed calls)."""
    for _ in range(warmup):
        fn()
    out = []
    for _ in range(repeats):
        t0 = time.perf_counter()
        fn()
        out.append(time.perf_counter() - t0)
    return out


def peak_bytes(fn):
    """Peak traced allocation of one call; allocator counters, not OS RSS."""
    tracemalloc.start()
    try:
        tracemalloc.reset_peak()
        fn()
        return tracemalloc.get_traced_memory()[1]
    finally:
        tracemalloc.stop()


def _attention_case(n, d, seed, dtype=np.float32):
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.normal(size=(n, d)), dtype=dtype)
    return x, AttentionParams.init(d, rng, dtype=dtype)


def bench_attention(sizes, d=32, repeats=9, variants=("linear", "quadratic"),
                    budget=DEFAULT_QUADRATIC_BUDGET, memory=True, seed=0, warmup=3):
    """Median wall time per (size, variant).

    Repeats are interleaved round-robin across cases, so slow drift in machine
    load lands on every size alike instead of skewing the ratios.
    """
    fns = {"linear": linear_attention,
           "quadratic": lambda x, p: quadratic_attention(x, p, budget=budget)}
    rows, jobs = [], []
    for n in sizes:
        x, p = _attention_case(n, d, seed)
        for variant in variants:
            row = {"schema": SCHEMA, "mode": "attention", "variant": variant, "n": n, "d": d, "repeats": repeats}
            if variant == "quadratic" and n * n * p.heads > budget:
                rows.append({**row, "median_s": "", "min_s": "", "peak_bytes": "", "status": "skipped_budget"})
                continue
            rows.append(row)
            jobs.append((row, lambda x=x, p=p, f=fns[variant]: f(x, p), []))
    with T.no_grad():
        for _, fn, _ in jobs:
            time_call(fn, 0, warmup)
        for _ in range(repeats):
            for _, fn, times in jobs:
                times.extend(time_call(fn, 1, 0))
        for row, fn, times in jobs:
            row.update(median_s=statistics.median(times), min_s=min(times),
                       peak_bytes=peak_bytes(fn) if memory else "", status="ok")
    return rows


def scaling_ratios(rows, variant):
    """``t(2n)/t(n)`` for every measured pair of sizes in ``rows``."""
    t = {r["n"]: r["median_s"] for r in rows if r["variant"] == variant and r["status"] == "ok"}
    return {n: t[2 * n] / t[n] for n in sorted(t) if 2 * n in t}


def bench_sampler(cases=200, seed=0, alpha=None, beta=None, max_extent=96, depth=4):
    """Resampled-token fraction against ``(1 + beta)^2 alpha^2`` over random ROIs and extents."""
    rng = np.random.default_rng(seed)
    rows = []
    for _ in range(cases):
        h, w = (int(v) for v in rng.integers(8, max_extent + 1, size=2))
        a = alpha if alpha is not None else float(rng.uniform(0.1, 0.9))
        b = beta if beta is not None else float(rng.uniform(0.0, min(0.99, 1 / a - 1)))
        h0 = int(rng.integers(0, h))
        w0 = int(rng.integers(0, w))
        roi = RoiBox((h0, int(rng.integers(h0 + 1, h + 1))), (w0, int(rng.integers(w0 + 1, w + 1))))
        plan = build_sampling_plan(roi, (h, w), SamplerConfig(a, b))
        oh, ow = plan.out_extents
        frac = oh * ow / (h * w)
        expect = (1 + b) ** 2 * a ** 2
        rows.append({"schema": SCHEMA, "mode": "sampler", "h": h, "w": w, "depth": depth, "alpha": a, "beta": b,
                     "roi_h": roi.h[1] - roi.h[0], "roi_w": roi.w[1] - roi.w[0], "tokens": depth * oh * ow,
                     "full_tokens": depth * h * w, "fraction": frac, "expected_fraction": expect,
                     "abs_error": abs(frac - expect)})
    return rows


def fraction_slack(row):
    """Largest fraction error allowed by at most 2 voxels of rounding per axis."""
    h, w, a, b = row["h"], row["w"], row["alpha"], row["beta"]
    eh, ew = (1 + b) * a * h, (1 + b) * a * w
    return max((eh + 2) * (ew + 2) - eh * ew, eh * ew - max(eh - 2, 0) * max(ew - 2, 0)) / (h * w)


def bench_kernels(repeats=5, seed=0):
    """Compiled vs pure-numpy kernels at the desk network's hottest shapes."""
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(18, 34, 34, 16)).astype(np.float32)  # padded level-0 features, channel-last
    kd = kh = kw = 3
    cols = _kernels.im2col(x, kd, kh, kw, 1, 1, 1)
    a = rng.uniform(0, 64, size=(3000, 3))
    b = rng.uniform(0, 64, size=(3000, 3))
    jobs = {
        "im2col": (lambda: _kernels.im2col(x, kd, kh, kw, 1, 1, 1), "18x34x34x16 k3"),
        "col2im": (lambda: _kernels.col2im(cols, 18, 34, 34, 16, kd, kh, kw, 1, 1, 1), "18x34x34x16 k3"),
        "nearest_sq_dists": (lambda: _kernels.nearest_sq_dists(a, b), "3000x3000"),
    }
    rows = []
    prev = _kernels.backend_name()
    try:
        for backend in _kernels.available_backends():
            _kernels.use_backend(backend)
            for name, (fn, size) in jobs.items():
                times = time_call(fn, repeats)
                rows.append({"schema": SCHEMA, "mode": "kernels", "kernel": name, "backend": backend, "size": size,
                             "repeats": repeats, "median_s": statistics.median(times), "min_s": min(times)})
    finally:
        _kernels.use_backend(prev)
    return rows


def write_csv(rows, path, fieldnames):
    """Write a fresh CSV (never appends) with a header row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fieldnames)
        w.writeheader()
        for r in rows:
            w.writerow(r)
    return path
