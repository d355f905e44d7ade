"""Acceptance suite: one test per criterion.

Each test records a one-line ``detail`` property; ``conftest.py`` prints a
PASS/FAIL/SKIP line per criterion at the end of the run.
"""

import dataclasses
import math
import os
import time
from fractions import Fraction

import numpy as np
import pytest

from csrcnn import layers as L
from csrcnn.checkpoint import checkpoint_bytes, model_from_bytes
from csrcnn.cli import gradcheck_suite
from csrcnn.data import DatasetSpec, ImageY, bicubic_resample, make_samples, prepare_dataset, rgb_to_y
from csrcnn.evaluate import benchmark, make_lr, psnr, route_and_superresolve, ssim
from csrcnn.model import (
    StageConfig, ablation_upscales, build_cascade, cascade_forward, prelu_input_margin,
    toy_gradcheck_problem)
from csrcnn.training import TrainConfig, format_history, lr_at, train

from oracles import (
    conv_backward_direct, conv_direct, deconv_backward_direct, deconv_scatter, psnr_loop, ssim_loop)

GRAD_TOL = 1e-4
KINK_MARGIN = 1e-2
ORACLE_ATOL = 1e-6
OVERFIT_RATIO = 0.2
SET5_BICUBIC = {2: (33.66, 0.9299), 3: (30.39, 0.8682), 4: (28.42, 0.8104), 8: (24.39, 0.657)}
SET5_PSNR_TOL, SET5_SSIM_TOL = 0.3, 0.015


def test_criterion_1_gradient_oracles(record_property):
    start = time.perf_counter()
    model, x, _ = toy_gradcheck_problem(seed=0)
    margin = prelu_input_margin(model, x)
    errs = gradcheck_suite(seed=0)
    elapsed = time.perf_counter() - start
    record_property("detail", ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
                    + f"; kink margin {margin:.3f}; {elapsed:.1f}s")
    assert [c.d for c in model.configs] == [4, 4, 4] and model.stage_count == 3
    assert x.shape == (1, 1, 6, 6)
    assert margin >= KINK_MARGIN
    assert all(v < GRAD_TOL for v in errs.values()), errs
    assert elapsed < 120


def test_criterion_2_kernel_oracles(record_property):
    rng = np.random.default_rng(2024)
    worst = 0.0
    seen = set()
    for i in range(50):
        k = (1, 3, 5, 9)[i % 4]
        stride = (1, 2, 4)[i % 3]
        seen.add((k, stride))
        n, ci, co = int(rng.integers(1, 3)), int(rng.integers(1, 4)), int(rng.integers(1, 4))
        h, w = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        pad = int(rng.integers(0, k // 2 + 1))
        p = L.LayerParams.conv(ci, co, k, np.float64)
        p.weight[...] = rng.standard_normal(p.weight.shape)
        p.bias[...] = rng.standard_normal(co)
        x = rng.standard_normal((n, ci, h + k, w + k))
        out = L.conv2d_forward(x, p, pad)
        worst = max(worst, np.abs(out - conv_direct(x, p.weight, p.bias, pad)).max())
        g = rng.standard_normal(out.shape)
        gx = L.conv2d_backward(x, p, g, pad)
        rx, rw, rb = conv_backward_direct(x, p.weight, g, pad)
        worst = max(worst, np.abs(gx - rx).max(), np.abs(p.grads["weight"] - rw).max(),
                    np.abs(p.grads["bias"] - rb).max())

        dpad = int(rng.integers(0, (k - 1) // 2 + 1))
        out_pad = int(rng.integers(0, stride))
        q = L.LayerParams.deconv(ci, co, k, stride, dpad, out_pad, dtype=np.float64)
        q.weight[...] = rng.standard_normal(q.weight.shape)
        q.bias[...] = rng.standard_normal(co)
        x = rng.standard_normal((n, ci, h, w))
        out = L.deconv2d_forward(x, q)
        worst = max(worst, np.abs(out - deconv_scatter(x, q.weight, q.bias, stride, dpad, out_pad)).max())
        g = rng.standard_normal(out.shape)
        gx = L.deconv2d_backward(x, q, g)
        rx, rw, rb = deconv_backward_direct(x, q.weight, g, stride, dpad)
        worst = max(worst, np.abs(gx - rx).max(), np.abs(q.grads["weight"] - rw).max(),
                    np.abs(q.grads["bias"] - rb).max())
    record_property("detail", f"50 instances, {len(seen)} (k, stride) pairs, max abs diff {worst:.1e}")
    assert len(seen) == 12
    assert worst < ORACLE_ATOL


def test_criterion_3_geometry(record_property):
    model = build_cascade(seed=0)
    sizes = range(8, 65, 8)
    rng = np.random.default_rng(3)
    checked = 0
    for H in sizes:
        for W in sizes:
            x = rng.random((1, 1, H // 8, W // 8)).astype(np.float32)
            outs = cascade_forward(model, x)
            assert [o.shape[2:] for o in outs] == [(H // 4, W // 4), (H // 2, W // 2), (H, W)]
            hr = rng.random((H, W))
            for factor in (2, 3, 4, 8):
                lr = make_lr(hr, factor)
                out = route_and_superresolve(model, lr, factor, (H, W))
                assert out.shape == (H, W)
                if factor == 3:
                    assert "enter-stage2" in out.provenance
                    assert f"pre-resize{H // 2}x{W // 2}" in out.provenance
                checked += 1
    record_property("detail", f"{len(sizes) ** 2} HR shapes, {checked} routed outputs")


@pytest.mark.parametrize("n", [10, 1000, 12345])
def test_criterion_4_lr_schedule(n, record_property):
    a0 = 1e-3
    switch = math.ceil(Fraction(4, 5) * n)
    table = {0: a0, switch - 1: a0, switch: a0 / 10, n: a0 / 10}
    got = {m: lr_at(a0, m, n) for m in table}
    record_property("detail", f"n={n}: switch at m={switch}")
    assert got == table


def _overfit_crops():
    import skimage.data as sd
    return [ImageY(sd.camera()[200:296, 200:296] / 255.0),
            ImageY(rgb_to_y(sd.astronaut()[100:196, 180:276] / 255.0))]


def test_criterion_5_overfit(record_property):
    samples = [s for img in _overfit_crops() for s in make_samples(img, 96, 96)]
    model = build_cascade(seed=0)
    assert [c.d for c in model.configs] == [56] * 3 and model.configs[0] == StageConfig()
    cfg = TrainConfig(total_iters=2500, lr_conv=5e-3, lr_deconv=5e-4, batch_size=2, seed=0)
    start = time.perf_counter()
    hist = train(model, samples, cfg)
    elapsed = time.perf_counter() - start
    ratio = hist[-1].total_loss / hist[0].total_loss
    margins = []
    for s in samples:
        outs = cascade_forward(model, s.input[None])
        for out, target in zip(outs, s.targets):
            bic = bicubic_resample(s.input[0].astype(np.float64), *target.shape[1:])
            margins.append(psnr(np.clip(out[0, 0], 0, 1), target[0]) - psnr(bic, target[0]))
    record_property("detail", f"loss ratio {ratio:.3f}, min PSNR gain over bicubic {min(margins):.2f} dB "
                              f"(x2/x4/x8, 2 crops), {cfg.total_iters} iters, {elapsed:.0f}s")
    assert ratio < OVERFIT_RATIO
    assert min(margins) > 0


def _set5_root():
    root = os.environ.get("CSRCNN_DATA_ROOT", "data")
    return os.path.join(root, "Set5")


@pytest.mark.skipif(not os.path.isdir(_set5_root()),
                    reason="Set5 not found under $CSRCNN_DATA_ROOT (default ./data)")
def test_criterion_6_set5_bicubic(record_property):
    prep = prepare_dataset(DatasetSpec("Set5", _set5_root(), "test"))
    runs = [benchmark(None, {"Set5": prep.images}, (2, 3, 4, 8), ("bicubic",)).rows for _ in range(2)]
    assert runs[0] == runs[1]
    parts = []
    for f, (ref_p, ref_s) in SET5_BICUBIC.items():
        p, s = runs[0][("Set5", f, "bicubic")]
        parts.append(f"x{f} {p:.2f}/{s:.4f}")
    record_property("detail", "; ".join(parts))
    assert len(prep.images) == 5
    for f, (ref_p, ref_s) in SET5_BICUBIC.items():
        p, s = runs[0][("Set5", f, "bicubic")]
        assert abs(p - ref_p) <= SET5_PSNR_TOL, (f, p)
        assert abs(s - ref_s) <= SET5_SSIM_TOL, (f, s)


def test_criterion_7_depth_trend_reported(record_property):
    """Net1/Net2/Net3 at x4 after an equal small budget; reported, not enforced.

    Set ``CSRCNN_TREND_ITERS`` for a longer budget.
    """
    record_property("reported_only", True)
    import skimage.data as sd
    train_imgs = [ImageY(sd.camera()[64:256, 64:256] / 255.0),
                  ImageY(rgb_to_y(sd.astronaut()[0:192, 128:320] / 255.0))]
    held = ImageY(rgb_to_y(sd.chelsea()[60:156, 120:216] / 255.0))
    lr = make_lr(held.values, 4)
    iters = int(os.environ.get("CSRCNN_TREND_ITERS", "300"))
    cfg = TrainConfig(total_iters=iters, lr_conv=5e-3, lr_deconv=5e-4, batch_size=4)
    ordered, table = 0, []
    for seed in range(3):
        scores = []
        for k in (1, 2, 3):
            configs = [StageConfig(upscale=u) for u in ablation_upscales(k, 4)]
            model = build_cascade(configs, seed=seed)
            ladder = tuple(int(1 / r) for r in model.scale_ratios[:-1])
            data = [s for img in train_imgs for s in make_samples(img, 48, 48, ladder=ladder)]
            train(model, data, dataclasses.replace(cfg, seed=seed))
            sr = route_and_superresolve(model, lr, 4, held.shape)
            scores.append(psnr(sr.values, held.values, 4))
        ordered += scores[2] >= scores[1] >= scores[0]
        table.append("/".join(f"{v:.2f}" for v in scores))
    bic = psnr(bicubic_resample(lr, *held.shape), held.values, 4)
    record_property("detail", f"x4 PSNR Net1/Net2/Net3 per seed {'; '.join(table)} (bicubic {bic:.2f}); "
                              f"ordered in {ordered}/3 seeds (reported only, {cfg.total_iters} iters)")
    assert len(table) == 3


def test_criterion_8_determinism_and_resume(record_property):
    img = ImageY(np.random.default_rng(8).random((48, 48)))
    samples = make_samples(img, 24, 12)
    cfg = TrainConfig(total_iters=30, batch_size=3, seed=11)

    def run():
        model = build_cascade(seed=4)
        hist = train(model, samples, cfg, iters=20)
        return model, hist

    (m1, h1), (m2, h2) = run(), run()
    assert checkpoint_bytes(m1) == checkpoint_bytes(m2)
    assert format_history(h1) == format_history(h2)
    restored = model_from_bytes(checkpoint_bytes(m1))
    cont_a = train(m1, samples, cfg, iters=10)
    cont_b = train(restored, samples, cfg, iters=10)
    assert len(cont_a) == 10
    assert format_history(cont_a) == format_history(cont_b)
    assert checkpoint_bytes(m1) == checkpoint_bytes(restored)
    record_property("detail", f"checkpoint {len(checkpoint_bytes(m1))} bytes identical; "
                              "10 resumed iterations identical")


def test_criterion_9_metric_identities(record_property):
    rng = np.random.default_rng(9)
    a = rng.random((16, 16))
    b = np.clip(a + 0.05 * rng.standard_normal((16, 16)), 0, 1)
    step = psnr(np.full((16, 16), 0.5), np.full((16, 16), 0.5 + 1 / 255))
    ssim_diff = abs(ssim(a, b) - ssim_loop(a, b))
    record_property("detail", f"uniform 1/255 step {step:.4f} dB; SSIM oracle diff {ssim_diff:.1e}")
    assert psnr(a, a.copy()) == math.inf
    assert abs(step - 48.1308) <= 1e-3
    assert abs(psnr(a, b) - psnr_loop(a, b, 0)) < 1e-9
    assert ssim(a, a.copy()) == 1.0
    assert ssim_diff < 1e-8
