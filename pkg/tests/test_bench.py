import numpy as np
import pytest

from lt3d import bench


def test_attention_rows_and_budget_skip():
    rows = bench.bench_attention([32, 64], d=8, repeats=2, budget=40 * 40)
    status = {(r["variant"], r["n"]): r["status"] for r in rows}
    assert status == {("linear", 32): "ok", ("quadratic", 32): "ok",
                      ("linear", 64): "ok", ("quadratic", 64): "skipped_budget"}
    ok = [r for r in rows if r["status"] == "ok"]
    assert all(r["median_s"] > 0 and r["peak_bytes"] > 0 for r in ok)


def test_quadratic_peak_memory_grows_faster():
    rows = bench.bench_attention([256, 512], d=16, repeats=1)
    peak = {(r["variant"], r["n"]): r["peak_bytes"] for r in rows}
    assert peak[("quadratic", 512)] / peak[("quadratic", 256)] > 3
    assert peak[("linear", 512)] / peak[("linear", 256)] < 2.5


def test_scaling_ratio_helper():
    rows = [{"variant": "linear", "n": n, "median_s": t, "status": "ok"} for n, t in ((10, 1.0), (20, 2.0), (40, 4.4))]
    assert bench.scaling_ratios(rows, "linear") == {10: 2.0, 20: pytest.approx(2.2)}


def test_sampler_fraction_default_rates():
    rows = bench.bench_sampler(50, seed=1, alpha=0.5, beta=0.2)
    for r in rows:
        assert r["expected_fraction"] == pytest.approx(0.36)
        assert r["abs_error"] <= bench.fraction_slack(r) + 1e-12


def test_sampler_random_configs_within_slack():
    rows = bench.bench_sampler(100, seed=2)
    assert all(r["abs_error"] <= bench.fraction_slack(r) + 1e-12 for r in rows)
    assert len({round(r["alpha"], 6) for r in rows}) > 50


def test_kernels_rows():
    rows = bench.bench_kernels(repeats=1)
    assert {r["kernel"] for r in rows} == {"im2col", "col2im", "nearest_sq_dists"}


def test_csv_is_fresh(tmp_path):
    p = tmp_path / "x.csv"
    rows = bench.bench_sampler(3)
    bench.write_csv(rows, p, bench.SAMPLER_FIELDS)
    bench.write_csv(rows, p, bench.SAMPLER_FIELDS)
    lines = p.read_text().splitlines()
    assert lines[0].startswith("schema,") and len(lines) == 4
