"""Acceptance criteria, each at its stated tolerance.

Run ``pytest tests/test_acceptance.py -v``; the terminal summary ends with a
``criterion N PASS/FAIL`` line per criterion.
"""
import time

import numpy as np
import pytest
from scipy import ndimage
from threadpoolctl import threadpool_limits

from lt3d import bench
from lt3d import tensor as T
from lt3d.attention import (
    AttentionParams,
    linear_attention,
    linear_similarity,
    materialized_linear_attention,
    quadratic_attention,
    quadratic_similarity,
)
from lt3d.config import desk_preset
from lt3d.data import PhantomSpec, generate_phantom, write_phantom_dataset
from lt3d.gradcheck import check_gradients, random_tensor
from lt3d.losses import dice_ce_terms, total_deep_supervision_loss
from lt3d.sampler import RoiBox, SamplerConfig, build_sampling_plan, resample_forward, resample_inverse
from lt3d.segnet import NetworkConfig, forward, init_params
from lt3d.train import evaluate, load_split, model_predictor, train
from lt3d.uncertainty import uncertainty_map

GRID_N = (1, 2, 7, 64, 257)
GRID_D = (1, 8, 32)
SEEDS = range(20)


def attention_case(n, d, seed):
    rng = np.random.default_rng(seed)
    x = T.Tensor(rng.normal(size=(n, d)), dtype=np.float64)
    return x, AttentionParams.init(d, rng, dtype=np.float64)


def rel_err(a, b):
    return float(np.abs(a - b).max() / max(np.abs(b).max(), 1e-30))


# -- 1 ---------------------------------------------------------------------------

@pytest.mark.criterion(1, "factorization equivalence")
def test_c1_factorization_equivalence(record_property):
    t0 = time.perf_counter()
    worst = 0.0
    with T.no_grad():
        for n in GRID_N:
            for d in GRID_D:
                for seed in SEEDS:
                    x, p = attention_case(n, d, seed)
                    worst = max(worst, rel_err(linear_attention(x, p).data, materialized_linear_attention(x, p).data))
    elapsed = time.perf_counter() - t0
    record_property("measured", f"max rel err {worst:.2e}, {elapsed:.1f}s")
    assert worst < 1e-5
    assert elapsed < 10


# -- 2 ---------------------------------------------------------------------------

@pytest.mark.criterion(2, "normalization law")
def test_c2_weights_sum_to_one(record_property):
    worst = 0.0
    with T.no_grad():
        for n in GRID_N:
            for d in GRID_D:
                for seed in SEEDS:
                    x, p = attention_case(n, d, seed)
                    for sim in (linear_similarity(x, p), quadratic_similarity(x, p)):
                        worst = max(worst, float(np.abs(sim.data.sum(axis=-1) - 1).max()))
    record_property("measured", f"max |row sum - 1| {worst:.2e}")
    assert worst <= 1e-5


# -- 3 ---------------------------------------------------------------------------

@pytest.mark.criterion(3, "complexity scaling")
def test_c3_scaling(record_property):
    t0 = time.perf_counter()
    with threadpool_limits(1):
        rows = bench.bench_attention([4096, 8192, 16384], d=32, repeats=9, memory=False)
    lin = bench.scaling_ratios(rows, "linear")
    quad = bench.scaling_ratios(rows, "quadratic")
    elapsed = time.perf_counter() - t0
    record_property("measured", "linear " + ", ".join(f"{n}:{r:.2f}" for n, r in lin.items())
                    + "; quadratic " + ", ".join(f"{n}:{r:.2f}" for n, r in quad.items()) + f"; {elapsed:.0f}s")
    for n in (4096, 8192):
        assert 1.5 <= lin[n] <= 2.6
        assert 3.2 <= quad[n] <= 5.0
    assert elapsed < 120


# -- 4 ---------------------------------------------------------------------------

@pytest.mark.criterion(4, "token-fraction law")
def test_c4_token_fraction(record_property):
    rows = bench.bench_sampler(200, seed=2024)
    bad = [r for r in rows if r["abs_error"] > bench.fraction_slack(r) + 1e-12]
    # per axis: at most 2 voxels away from (1 + beta) alpha w
    for r in rows:
        cfg = SamplerConfig(r["alpha"], r["beta"])
        plan = build_sampling_plan(RoiBox((0, r["roi_h"]), (0, r["roi_w"])), (r["h"], r["w"]), cfg)
        for m, w in zip(plan.out_extents, (r["h"], r["w"])):
            assert abs(m - (1 + r["beta"]) * r["alpha"] * w) <= 2
    plan = build_sampling_plan(RoiBox((128, 384), (128, 384)), (512, 512), SamplerConfig(0.5, 0.2))
    frac = plan.token_fraction
    record_property("measured", f"{len(rows) - len(bad)}/200 within slack; fraction at 0.5/0.2 = {frac:.4f}")
    assert not bad
    assert abs(frac - 0.36) <= ((0.6 * 512 + 2) ** 2 - (0.6 * 512) ** 2) / 512 ** 2


# -- 5 ---------------------------------------------------------------------------

ELEMENTWISE = {
    "add": (lambda a, b: T.add(a, b), 2),
    "sub": (lambda a, b: T.sub(a, b), 2),
    "mul": (lambda a, b: T.mul(a, b), 2),
    "div": (lambda a, b: T.div(a, T.add(T.mul(b, b), 0.5)), 2),
    "neg": (T.neg, 1),
    "power": (lambda a: T.power(T.add(T.mul(a, a), 0.1), 1.5), 1),
    "exp": (T.exp, 1),
    "log": (lambda a: T.log(T.add(T.mul(a, a), 0.1)), 1),
    "sqrt": (lambda a: T.sqrt(T.add(T.mul(a, a), 0.1)), 1),
    "relu": (T.relu, 1),
    "sigmoid": (T.sigmoid, 1),
    "tanh": (T.tanh, 1),
    "gelu": (T.gelu, 1),
    "clamp": (lambda a: T.clamp(a, -1.0, 1.0), 1),
}


def _structured_ops(rng):
    x = random_tensor(rng, (3, 4))
    y = random_tensor(rng, (4, 5))
    v = random_tensor(rng, (2, 3, 4, 5))
    w = random_tensor(rng, (2, 2, 3, 2, 2), -0.5, 0.5)
    b = random_tensor(rng, (2,))
    tok = random_tensor(rng, (9, 4))
    p = AttentionParams.init(4, rng, heads=2, dtype=np.float64)
    plan = build_sampling_plan(RoiBox((1, 3), (2, 4)), (4, 5), SamplerConfig(0.6, 0.3))
    small = random_tensor(rng, (2, 3) + plan.out_extents)
    m = random_tensor(rng, (3, 5))
    return {
        "sum": (lambda: T.tsum(x, axis=1), [x]),
        "mean": (lambda: T.mean(v, axis=(1, 3)), [v]),
        "softmax": (lambda: T.softmax(x, axis=0), [x]),
        "matmul": (lambda: T.matmul(x, y), [x, y]),
        "transpose": (lambda: T.transpose(v, (2, 0, 3, 1)), [v]),
        "reshape": (lambda: T.reshape(v, (6, 20)), [v]),
        "concat": (lambda: T.concat([x, x * 2.0], axis=1), [x]),
        "axis_linear_map": (lambda: T.axis_linear_map(v, {3: m.data}), [v]),
        "conv3d": (lambda: T.conv3d(v, w, b, stride=(1, 2, 1), padding=1), [v, w, b]),
        "trilinear_resize": (lambda: T.trilinear_resize(v, (4, 7, 3)), [v]),
        "linear_attention": (lambda: linear_attention(tok, p), [tok, p.w_q, p.w_k, p.w_v]),
        "quadratic_attention": (lambda: quadratic_attention(tok, p), [tok, p.w_q, p.w_k, p.w_v]),
        "resample_forward": (lambda: resample_forward(v, plan), [v]),
        "resample_inverse": (lambda: resample_inverse(small, plan, (4, 5)), [small]),
    }


def _weighted(fn, rng):
    """Scalarize an op's output with fixed random weights."""
    cache = {}

    def f():
        out = fn()
        if "c" not in cache:
            cache["c"] = T.Tensor(rng.normal(size=out.shape), dtype=np.float64)
        return T.tsum(out * cache["c"])
    return f


@pytest.mark.criterion(5, "gradient correctness")
def test_c5_elementwise_gradients(record_property):
    rng = np.random.default_rng(5)
    worst = {}
    for name, (fn, arity) in ELEMENTWISE.items():
        args = [random_tensor(rng, (10,)) for _ in range(arity)]
        worst[name] = check_gradients(_weighted(lambda: fn(*args), rng), args)
    top = max(worst, key=worst.get)
    record_property("measured", f"elementwise max {worst[top]:.1e} ({top})")
    assert max(worst.values()) < 1e-4, worst


@pytest.mark.criterion(5, "gradient correctness")
def test_c5_structured_gradients(record_property):
    rng = np.random.default_rng(6)
    worst = {}
    for name, (fn, inputs) in _structured_ops(rng).items():
        worst[name] = check_gradients(_weighted(fn, rng), inputs, n_coords=40, rng=rng)
    top = max(worst, key=worst.get)
    record_property("measured", f"structured max {worst[top]:.1e} ({top})")
    assert max(worst.values()) < 1e-3, worst


@pytest.mark.criterion(5, "gradient correctness")
def test_c5_full_network_loss(record_property):
    t0 = time.perf_counter()
    cfg = NetworkConfig(dtype="float64")
    rng = np.random.default_rng(7)
    params = init_params(cfg, 11)
    vol = rng.normal(size=(8, 16, 16))
    label = np.zeros((8, 16, 16))
    label[2:6, 4:11, 5:13] = 1
    f = lambda: total_deep_supervision_loss(forward(vol, params, cfg), label).total
    # the loss is O(10), so differencing noise is ~1e-9; smaller components are compared absolutely
    err = check_gradients(f, list(params.values()), n_coords=20, rng=rng, floor=1e-6)
    elapsed = time.perf_counter() - t0
    record_property("measured", f"network max {err:.1e} over {len(params)} tensors x 20 coords, {elapsed:.0f}s")
    assert err < 1e-3
    assert elapsed < 300


# -- 6 ---------------------------------------------------------------------------

@pytest.mark.criterion(6, "dice term fidelity")
def test_c6_dice_term(record_property):
    label = generate_phantom(PhantomSpec(seed=3)).label[None].astype(np.float32)
    q = T.Tensor(label)
    verbatim = dice_ce_terms(q, label)[0].item()
    conventional = dice_ce_terms(q, label, conventional=True)[0].item()
    record_property("measured", f"verbatim {verbatim:.7f}, conventional {conventional:.1e}")
    assert abs(verbatim - 0.5) <= 1e-6
    assert abs(conventional) <= 1e-6


# -- 7 ---------------------------------------------------------------------------

def _oracle_uncertainty(stages, out):
    """Per-voxel RMS after align-corners trilinear upsampling done by scipy."""
    ups = []
    for s in stages:
        grids = np.meshgrid(*[np.arange(n) * ((m - 1) / (n - 1) if n > 1 else 0.0)
                              for m, n in zip(s.shape, out.shape)], indexing="ij")
        ups.append(ndimage.map_coordinates(s, grids, order=1, mode="nearest"))
    res = np.empty(out.shape)
    for idx in np.ndindex(out.shape):
        res[idx] = np.sqrt(sum((u[idx] - out[idx]) ** 2 for u in ups) / len(ups))
    return res


@pytest.mark.criterion(7, "uncertainty fidelity")
def test_c7_uncertainty(record_property):
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(10):
        full = (4, 16, 16)
        stages = [rng.uniform(size=(4, 8, 8)), rng.uniform(size=(4, 4, 4)), rng.uniform(size=(2, 2, 2)),
                  rng.uniform(size=full)]
        out = (rng.uniform(size=full) > 0.5).astype(np.uint8)
        worst = max(worst, float(np.abs(uncertainty_map(stages, out).values - _oracle_uncertainty(stages, out)).max()))
    lo, hi = np.inf, -np.inf
    for _ in range(1000):
        k = int(rng.integers(1, 5))
        stages = [rng.uniform(size=(2, 2 ** j, 2 ** j)) for j in range(1, k + 1)]
        out = rng.uniform(size=(2, 2 ** k, 2 ** k)) > 0.5
        v = uncertainty_map(stages, out).values
        lo, hi = min(lo, v.min()), max(hi, v.max())
    record_property("measured", f"max oracle diff {worst:.1e}; range [{lo:.3f}, {hi:.3f}] over 1000")
    assert worst < 1e-6
    assert lo >= 0 and hi <= 1


# -- 8, 9 --------------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    cfg = desk_preset().replace(out_dir=str(out), n_phantoms=32, epochs=60, threads=1)
    train_set, test_set = load_split(cfg)
    t0 = time.perf_counter()
    res = train(cfg, train_set)
    elapsed = time.perf_counter() - t0
    report = evaluate(test_set, model_predictor(res.params, cfg))
    return {"cfg": cfg, "n_train": len(train_set), "n_test": len(test_set), "seconds": elapsed, "report": report}


@pytest.mark.criterion(8, "desk-scale training")
def test_c8_desk_training(trained, record_property):
    s = trained["report"].summary
    record_property("measured", f"dice {s['dice']['mean']:.3f}+-{s['dice']['std']:.3f}, "
                                f"msd {s['msd_mm']['mean']:.3f} mm, train {trained['seconds']:.0f}s")
    assert (trained["n_train"], trained["n_test"]) == (24, 8)
    assert s["dice"]["mean"] >= 0.85
    # two voxels at the finest phantom spacing
    assert s["msd_mm"]["mean"] <= 2 * min(PhantomSpec().spacing_mm)
    assert trained["seconds"] <= 20 * 60


@pytest.mark.criterion(9, "uncertainty ordering")
def test_c9_uncertainty_ordering(trained, record_property):
    cases = trained["report"].cases
    wins = sum(1 for c in cases if c["u_wrong"] is not None and c["u_wrong"] > c["u_correct"])
    record_property("measured", f"{wins}/{len(cases)} cases")
    assert wins >= 7


# -- 10 -----------------------------------------------------------------------------

@pytest.mark.criterion(10, "determinism")
def test_c10_determinism(tmp_path, record_property):
    manifest = write_phantom_dataset(tmp_path / "data", 6, 1, PhantomSpec(shape=(8, 32, 32)))
    outputs = []
    for run in ("a", "b"):
        cfg = desk_preset().replace(out_dir=str(tmp_path / run), manifest=str(manifest), volume_shape=(8, 32, 32),
                                    epochs=2, network={"base_channels": 4}, threads=1)
        train_set, test_set = load_split(cfg)
        res = train(cfg, train_set)
        rep = evaluate(test_set, model_predictor(res.params, cfg))
        outputs.append((res.checkpoint.read_bytes(), rep.to_json(), rep.to_text()))
    record_property("measured", f"checkpoint {len(outputs[0][0])} bytes compared")
    assert outputs[0] == outputs[1]
