"""Acceptance checks, one printed PASS/FAIL line per criterion.

Run alone with ``pytest tests/test_acceptance.py -v -s`` (the lines are printed
with capture disabled, so ``-s`` is optional).
"""
import dataclasses
import math

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from omniepi import budget, cli, dihedral, synthetic
from omniepi import geometry as geo
from omniepi.autodiff import Tensor, backward, precision
from omniepi.imaging import bicubic_resize, rgb_to_ycbcr
from omniepi.inference import TileSpec, epsw_infer, super_resolve_y
from omniepi.metrics import psnr_y
from omniepi.model import PRESETS, build_model, preset, zero_residual_paths
from omniepi.training import (TRAIN_PRESETS, PairSet, charbonnier_ohem, evaluate, l1_loss, selected_count,
                              train_loop)


@pytest.fixture
def report(capsys):
    def emit(tag, ok, detail):
        with capsys.disabled():
            print(f"\nACCEPTANCE {tag:<4} {'PASS' if ok else 'FAIL'}  {detail}")
        return ok
    return emit


def luma(lf):
    return rgb_to_ycbcr(lf, axis=1)[:, :1]


def scenes(seed, n, size):
    rng = np.random.default_rng(seed)
    lrs, hrs = [], []
    for _ in range(n):
        hr, lr = synthetic.gen_synthetic_lf(synthetic.random_scene(rng, 3, 3, size, size), 2)
        lrs.append(luma(lr))
        hrs.append(luma(hr))
    return PairSet(lrs, hrs, 3, 3, 2)


def bicubic_psnr(data):
    return float(np.mean([psnr_y(np.clip(bicubic_resize(lo, 2.0), 0, 1), hi)[1]
                          for lo, hi in zip(data.lr, data.hr)]))


@pytest.fixture(scope="module")
def train_set():
    return scenes(100, 4, 32)


@pytest.fixture(scope="module")
def val_set():
    return scenes(300, 2, 64)


@pytest.fixture(scope="module")
def ablation(train_set, val_set):
    """Validation PSNR (EMA weights) with and without the diagonal branch and fusion, 5 seeds."""
    results, models = [], {}
    for seed in range(5):
        tcfg = dataclasses.replace(TRAIN_PRESETS["nano"], seed=seed)
        row = []
        for full in (True, False):
            mcfg = preset("nano", seed=seed, use_diagonal=full, use_fusion=full)
            res = train_loop(mcfg, tcfg, train_set, val_set)
            row.append(res.history[-1]["val_psnr"])
            if full and seed == 0:
                res.model.load_state_dict(res.ema)
                models["full"] = res.model
        results.append(row)
    return np.array(results), models


# -- 1 --------------------------------------------------------------------------------------------

def test_c1_budget_gate(report):
    r = budget.budget_report(PRESETS["gtf_tiny"], 32, 32)
    ok = r["params"] < 1.0e6 and r["flops"] < 20e9
    report("C1", ok, f"gtf_tiny params {r['params']:,} (<1.0M), FLOPs {r['flops'] / 1e9:.2f}G (<20G) "
                     f"at 5x5x32x32")
    assert ok


def test_c1_gap_to_published_size(report):
    r = budget.budget_report(PRESETS["gtf_tiny"], 32, 32)
    ok = abs(r["params_gap"]) <= 0.15 and abs(r["flops_gap"]) <= 0.15
    report("C1b", ok, f"gap to 0.915M / 19.8G: params {100 * r['params_gap']:+.1f}%, "
                      f"FLOPs {100 * r['flops_gap']:+.1f}% (expected within +-15%)")
    assert ok


# -- 2 --------------------------------------------------------------------------------------------

def test_c2_geometry_oracle(report):
    rng = np.random.default_rng(2)
    failures = 0
    for _ in range(200):
        B, C, U, V, H, W = (int(rng.integers(1, k)) for k in (3, 4, 6, 6, 7, 7))
        x = rng.standard_normal((B, C, U * V, H, W))
        lf = geo.LightField(Tensor(x), U, V)
        for fwd, back in ((geo.to_horizontal_epi, geo.from_epi), (geo.to_vertical_epi, geo.from_epi),
                          (geo.to_macpi, geo.from_macpi)):
            failures += not np.array_equal(back(fwd(lf)).tensor.data, x)
        mac = geo.to_macpi(lf).tensor.data
        u, v, h, w = (rng.integers(0, n) for n in (U, V, H, W))
        failures += mac[0, 0, h * U + u, w * V + v] != x[0, 0, u * V + v, h, w]
    for U in (1, 2, 3, 5):
        H, W = 3, 4
        x = rng.standard_normal((2, 2, U * U, H, W))
        lf = geo.LightField(Tensor(x), U, U)
        e45, e135 = geo.extract_diagonals(lf)
        d45, d135 = np.empty((2, 2, W, U, H)), np.empty((2, 2, W, U, H))
        scat = np.zeros_like(x)
        for b, c, i, hh, ww in np.ndindex(2, 2, U, H, W):
            d45[b, c, ww, i, hh] = x[b, c, i * U + i, hh, ww]
            d135[b, c, ww, i, hh] = x[b, c, i * U + (U - 1 - i), hh, ww]
        failures += not (np.array_equal(e45.tensor.data, d45) and np.array_equal(e135.tensor.data, d135))
        for b, c, i, hh, ww in np.ndindex(2, 2, U, H, W):
            scat[b, c, i * U + i, hh, ww] += d45[b, c, ww, i, hh]
            scat[b, c, i * U + (U - 1 - i), hh, ww] += d135[b, c, ww, i, hh]
        got = geo.scatter_diagonals(Tensor(d45), Tensor(d135), lf).tensor.data
        off = [a for a in range(U * U) if a // U != a % U and a // U != U - 1 - a % U]
        failures += not np.array_equal(got, scat) or bool(np.any(got[:, :, off] != 0))
    report("C2", failures == 0, f"200 random shapes round-trip bit-exactly, diagonal extract/scatter "
                                f"match the index oracle for U in (1,2,3,5): {failures} mismatches")
    assert failures == 0


# -- 3 --------------------------------------------------------------------------------------------

def test_c3_gradient_suite(report):
    worst: dict[str, float] = {}
    for seed in range(5):
        for name, err in cli.gradcheck_suite(preset("nano", seed=seed), seed):
            worst[name] = max(worst.get(name, 0.0), err)
    ok = all(e < 1e-4 for e in worst.values())
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    report("C3", ok, f"max rel err over 5 seeds (< 1e-4): {detail}")
    assert ok


# -- 4 --------------------------------------------------------------------------------------------

def test_c4_identity_at_zero(report):
    rng = np.random.default_rng(4)
    worst = 0.0
    configs = [preset("nano"), preset("nano", variant="gtf", mla_taps=(), use_macpi_prior=True,
                                      use_angular_embed=False, share_hv=True, local_window=3)]
    with precision("f64"):
        for cfg in configs:
            model = build_model(cfg, np.float64)
            for p in model.parameters():
                p.data[...] = rng.standard_normal(p.shape)
            zero_residual_paths(model)
            y = rng.random((1, 1, cfg.views, 6, 7))
            worst = max(worst, float(np.max(np.abs(model.predict_y(y) - bicubic_resize(y, float(cfg.scale))))))
    report("C4", worst == 0.0, f"zeroed LayerScale and head: max |forward - bicubic| = {worst:.1e} (64-bit)")
    assert worst == 0.0


# -- 5 --------------------------------------------------------------------------------------------

def test_c5_slope_equals_disparity(report):
    bad = []
    for d in (0, 1, 2):
        for seed in range(3):
            lf = synthetic.render(synthetic.single_layer_scene(np.random.default_rng(seed), float(d), 5, 5, 32, 32))
            m = synthetic.verify_epi_slope(lf, 5, 5)
            if m != {"horizontal": (d,), "vertical": (d,), "diag45": (d, d), "diag135": (d, d)}:
                bad.append((d, seed, m))
    report("C5", not bad, f"per-axis EPI shift == d for d in (0,1,2), 4 directions, 3 scenes each: "
                          f"{len(bad)} mismatches")
    assert not bad


# -- 6 --------------------------------------------------------------------------------------------

def test_c6_nano_overfits(report):
    hr, lr = synthetic.gen_synthetic_lf(synthetic.random_scene(np.random.default_rng(0), 3, 3, 32, 32), 2)
    data = PairSet([luma(lr)], [luma(hr)], 3, 3, 2)
    tcfg = TRAIN_PRESETS["nano"]
    res = train_loop(preset("nano"), tcfg, data, data)
    steps = len(res.history)
    first, last = res.history[0]["loss"], res.history[-1]["loss"]
    gain = res.history[-1]["val_psnr"] - bicubic_psnr(data)
    raw_gain = evaluate(res.model, res.model.state_dict(), data) - bicubic_psnr(data)
    ok = steps <= 200 and last < 0.5 * first and gain >= 3.0
    report("C6", ok, f"{steps} steps: loss {first:.4f} -> {last:.4f} (ratio {last / first:.3f} < 0.5), "
                     f"EMA PSNR {gain:+.2f} dB over bicubic (>= +3), raw weights {raw_gain:+.2f} dB")
    assert ok


# -- 7 --------------------------------------------------------------------------------------------

def test_c7_ablation_direction(report, ablation):
    results, _ = ablation
    deltas = results[:, 0] - results[:, 1]
    wins = int(np.sum(deltas >= 0))
    report("C7", wins >= 3, f"with - without diagonal+fusion (dB, 5 seeds): "
                            f"{', '.join(f'{d:+.3f}' for d in deltas)}; {wins}/5 >= 0")
    assert wins >= 3


# -- 8 --------------------------------------------------------------------------------------------

def test_c8_inference_stack(report, ablation, val_set):
    rng = np.random.default_rng(8)
    lr = rng.random((1, 1, 9, 40, 37))
    bic = lambda y: bicubic_resize(y, 2.0)
    out, weights = epsw_infer(bic, lr, 2, TileSpec(16, 8), return_weights=True)
    pou = float(np.max(np.abs(weights - 1.0)))
    linear = float(np.max(np.abs(out - bic(lr))))
    x = rng.random((1, 1, 9, 4, 5))
    table = all(np.array_equal(dihedral.apply(h, dihedral.apply(g, x, 3, 3), 3, 3),
                               dihedral.apply(g.then(h), x, 3, 3))
                for g in dihedral.ELEMENTS for h in dihedral.ELEMENTS)
    inverse = all(np.array_equal(dihedral.apply(g.inverse(), dihedral.apply(g, x, 3, 3), 3, 3), x)
                  for g in dihedral.ELEMENTS)

    model = ablation[1]["full"]
    spec = TileSpec(16, 8)
    with precision("f32"):
        plain = np.mean([psnr_y(np.clip(super_resolve_y(model, lo), 0, 1), hi)[1]
                         for lo, hi in zip(val_set.lr, val_set.hr)])
        stacked = np.mean([psnr_y(np.clip(super_resolve_y(model, lo, spec, tta=True), 0, 1), hi)[1]
                           for lo, hi in zip(val_set.lr, val_set.hr)])
    delta = stacked - plain
    ok = pou <= 1e-6 and linear <= 1e-6 and table and inverse and delta >= -0.05
    report("C8", ok, f"partition of unity {pou:.1e}, linear model {linear:.1e}, D4 table {table}, "
                     f"inverses {inverse}; EPSW(16/8)+TTA on trained nano {plain:.3f} -> {stacked:.3f} dB "
                     f"({delta:+.3f}, {'gain' if delta > 0 else 'loss'})")
    assert ok


# -- 9 --------------------------------------------------------------------------------------------

def test_c9_loss_semantics(report):
    rng = np.random.default_rng(9)
    a, b = rng.random((2, 1, 9, 8, 8)), rng.random((2, 1, 9, 8, 8))
    gap = abs(charbonnier_ohem(Tensor(a), Tensor(b), 1.0, 1e-8).item() - l1_loss(Tensor(a), Tensor(b)).item())
    support = {}
    for k in (0.5, 0.8, 1.0):
        for P in (10, 37, 1152):
            pred = Tensor(rng.random((1, 1, 1, 1, P)), requires_grad=True)
            backward(charbonnier_ohem(pred, Tensor(rng.random((1, 1, 1, 1, P))), k, 1e-3))
            expected = math.ceil(round(k * P, 9))
            support[(k, P)] = (int(np.count_nonzero(pred.grad)), expected)
    exact = all(got == exp == selected_count(k, P) for (k, P), (got, exp) in support.items())
    ok = gap < 1e-6 and exact
    report("C9", ok, f"|OHEM(k=1, eps=1e-8) - L1| = {gap:.1e} (< 1e-6); gradient support == ceil(kP) "
                     f"for k in (0.5, 0.8, 1.0), P in (10, 37, 1152): {exact}")
    assert ok


# -- 10 -------------------------------------------------------------------------------------------

def test_c10_determinism(report, train_set, val_set, tmp_path):
    tcfg = dataclasses.replace(TRAIN_PRESETS["nano"], epochs=1, steps_per_epoch=20)
    runs = []
    with threadpool_limits(limits=1):
        for i in range(2):
            res = train_loop(preset("nano"), tcfg, train_set, val_set, out_dir=tmp_path / str(i))
            with precision("f32"):
                sr = super_resolve_y(res.model, val_set.lr[0], TileSpec(16, 8), tta=True)
            runs.append((res, sr, (tmp_path / str(i) / "last.ckpt").read_bytes(),
                         (tmp_path / str(i) / "metrics.log").read_bytes()))
    (r0, s0, c0, m0), (r1, s1, c1, m1) = runs
    same_params = all(np.array_equal(v, r1.model.state_dict()[k]) for k, v in r0.model.state_dict().items())
    ok = same_params and c0 == c1 and m0 == m1 and np.array_equal(s0, s1)
    report("C10", ok, f"two fixed-seed single-thread runs: params {same_params}, checkpoint bytes {c0 == c1}, "
                      f"metrics log {m0 == m1}, EPSW+TTA output {np.array_equal(s0, s1)}")
    assert ok
