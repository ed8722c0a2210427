"""Acceptance suite.

Each test prints one PASS/FAIL line (run with -s to watch them live):

  A1  cosine schedule endpoint and midpoint exactness
  A2  forward-diffusion moments, iterative and closed form
  A3  autograd vs finite differences for every loss term
  A4  Dice/IoU against brute-force set counting
  A5  dual-stream overfit on toy scenes
  A6  gradient isolation of disabled loss branches
  A7  rerun and resume determinism
  A8  loss anchor values
  A9  domain-shift comparison table (observational)
"""
import math
import time

import numpy as np
import pytest
import torch

from duostream.core import ImageBuffer, MaskBuffer, RngState
from duostream.experiments import (VARIANT_DUAL, VARIANT_SEG_ONLY,
                                   AdaptationConfig, run_adaptation_smoke)
from duostream.losses import LossWeights, bce_loss, ssim_loss
from duostream.metrics import dice_score, iou_score
from duostream.model import ModelConfig, build_model
from duostream.schedule import (diffuse_closed, diffuse_step,
                                make_cosine_schedule)
from duostream.synthgen import AugmentPolicy, generate_toy_dataset
from duostream.trainer import (GRAD_CHECK_LOSSES, DiffusionConfig,
                               TrainConfig, fine_tune, grad_check, train)

from conftest import TINY_MODEL, tiny_train_config


def _verdict(name: str, ok: bool, elapsed: float, detail: str) -> None:
    print(f"{name}: {'PASS' if ok else 'FAIL'} in {elapsed:.2f}s ({detail})")
    assert ok, f"{name}: {detail}"


def test_a1_schedule_exactness():
    t0 = time.perf_counter()
    s = make_cosine_schedule(1000)
    err_end = abs(s.beta(1000) - 0.02)
    err_mid = abs(s.beta(500) - 0.01005)
    decreasing = bool((np.diff(s.alpha_bars) < 0.0).all())
    elapsed = time.perf_counter() - t0
    ok = err_end < 1e-12 and err_mid < 1e-12 and decreasing and elapsed < 1.0
    _verdict("A1", ok, elapsed,
             f"beta(T) err {err_end:.1e}, beta(T/2) err {err_mid:.1e}, "
             f"alpha_bar strictly decreasing: {decreasing}")


def test_a2_diffusion_moments():
    t0 = time.perf_counter()
    n = 20_000
    schedule = make_cosine_schedule(50)
    x0 = ImageBuffer(np.ones((n, 1, 1)))
    rng = RngState(20)
    failures = []
    for t in (10, 25, 50):
        ab = schedule.alpha_bar(t)
        want_mean, want_var = math.sqrt(ab), 1.0 - ab
        se = math.sqrt(want_var / n)

        closed = diffuse_closed(x0, t, schedule, rng.child("closed", t)).data
        walked = x0
        for step in range(1, t + 1):
            walked = diffuse_step(walked, step, schedule,
                                  rng.child("walk", t, step))
        for label, sample in (("closed", closed), ("iterative", walked.data)):
            mean_err = abs(float(np.mean(sample)) - want_mean)
            var_rel = abs(float(np.var(sample)) - want_var) / want_var
            if mean_err >= 4.0 * se:
                failures.append(f"{label} t={t} mean off by {mean_err:.2e} "
                                f"(4 SE = {4 * se:.2e})")
            if var_rel >= 0.05:
                failures.append(f"{label} t={t} variance off by {var_rel:.1%}")
    elapsed = time.perf_counter() - t0
    ok = not failures and elapsed < 60.0
    _verdict("A2", ok, elapsed,
             "; ".join(failures) if failures
             else f"{n} samples per path, t in (10, 25, 50), "
                  f"means within 4 SE, variances within 5%")


def test_a3_gradients_match_finite_differences():
    t0 = time.perf_counter()
    worst = {loss: grad_check(loss, n_params=500, seed=0)
             for loss in GRAD_CHECK_LOSSES}
    elapsed = time.perf_counter() - t0
    bad = {k: v for k, v in worst.items() if v >= 1e-3}
    ok = not bad and elapsed < 300.0
    top = max(worst, key=worst.get)
    _verdict("A3", ok, elapsed,
             f"500 params per loss, worst rel err {worst[top]:.2e} ({top})"
             + (f"; over tolerance: {bad}" if bad else ""))


def test_a4_overlap_metrics_vs_set_counting():
    t0 = time.perf_counter()
    gen = np.random.default_rng(44)
    mismatches = 0
    worst_identity = 0.0
    for _ in range(1000):
        pred = gen.uniform(size=(8, 8))
        gt = (gen.uniform(size=(8, 8)) < gen.uniform(0.1, 0.9))
        pred_m = MaskBuffer(pred)
        gt_m = MaskBuffer(gt.astype(np.float64))
        p = {(i, j) for i in range(8) for j in range(8) if pred[i, j] > 0.5}
        g = {(i, j) for i in range(8) for j in range(8) if gt[i, j]}
        if p or g:
            want_d = 2.0 * len(p & g) / (len(p) + len(g))
            want_j = len(p & g) / len(p | g)
        else:
            want_d = want_j = 1.0
        d = dice_score(pred_m, gt_m)
        j = iou_score(pred_m, gt_m)
        if d != want_d or j != want_j:
            mismatches += 1
        worst_identity = max(worst_identity, abs(d - 2.0 * j / (1.0 + j)))
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and worst_identity < 1e-12 and elapsed < 10.0
    _verdict("A4", ok, elapsed,
             f"1000 pairs, {mismatches} mismatches vs set counting, "
             f"D=2J/(1+J) worst err {worst_identity:.1e}")


def test_a5_dual_stream_overfits_toy_scenes(tmp_path):
    t0 = time.perf_counter()
    data = generate_toy_dataset(tmp_path / "data", count=16, canvas_size=64,
                                objects_range=(1, 3),
                                rng=RngState(11).child("d"))
    model_cfg = ModelConfig(in_channels=3, base_width=8, num_levels=4,
                            blocks_per_level=2, norm_groups=4, image_size=64)
    train_cfg = TrainConfig(seg_batch=8, rec_batch=8, learning_rate=1e-3,
                            epochs=200, seed=0, validation_interval=1,
                            checkpoint_dir=str(tmp_path / "ckpt"),
                            stop_at_val_dice=0.90,
                            augment=AugmentPolicy.identity())
    result = train(model_cfg, train_cfg, data, data, data)
    elapsed = time.perf_counter() - t0
    finite = all(math.isfinite(r.total) for r in result.step_log)
    best = result.state.best_val_dice
    ok = (best >= 0.90 and result.state.epoch <= 200 and finite
          and elapsed < 900.0)
    _verdict("A5", ok, elapsed,
             f"training-set mean dice {best:.4f} at epoch "
             f"{result.state.best_epoch}, all losses finite: {finite}")


def _exclusivity_run(tmp_path, toy_dataset, weights, frozen_prefix):
    cfg = tiny_train_config(tmp_path, epochs=5, loss_weights=weights)
    result = train(TINY_MODEL, cfg, toy_dataset, toy_dataset, toy_dataset)
    init = build_model(TINY_MODEL, RngState(cfg.seed).child("init"))
    init_params = dict(init.named_parameters())
    frozen_ok, others_changed, steps = True, True, result.state.global_step
    for name, p in result.model.named_parameters():
        same = torch.equal(p, init_params[name])
        if name.startswith(frozen_prefix):
            frozen_ok = frozen_ok and same
        else:
            others_changed = others_changed and not same
    return frozen_ok, others_changed, steps


def test_a6_disabled_branches_leave_weights_untouched(tmp_path, toy_dataset):
    t0 = time.perf_counter()
    rec_off = LossWeights(mse=0.0, ssim=0.0, perceptual=0.0)
    img_frozen, img_rest, steps_a = _exclusivity_run(
        tmp_path / "a", toy_dataset, rec_off, "image_decoder")
    seg_off = LossWeights(bce=0.0, dice=0.0)
    mask_frozen, mask_rest, steps_b = _exclusivity_run(
        tmp_path / "b", toy_dataset, seg_off, "mask_decoder")
    elapsed = time.perf_counter() - t0
    ok = (img_frozen and img_rest and mask_frozen and mask_rest
          and steps_a >= 10 and steps_b >= 10 and elapsed < 120.0)
    _verdict("A6", ok, elapsed,
             f"after {steps_a} steps rec-off: image decoder bit-identical "
             f"{img_frozen}, rest moved {img_rest}; after {steps_b} steps "
             f"seg-off: mask decoder bit-identical {mask_frozen}, "
             f"rest moved {mask_rest}")


def test_a7_rerun_and_resume_determinism(tmp_path, toy_dataset):
    t0 = time.perf_counter()

    def run(d, epochs):
        cfg = tiny_train_config(tmp_path / d, epochs=epochs)
        return cfg, train(TINY_MODEL, cfg, toy_dataset, toy_dataset, toy_dataset)

    _, first = run("r1", 10)
    _, second = run("r2", 10)
    rerun_err = max(abs(a.total - b.total)
                    for a, b in zip(first.step_log, second.step_log))

    _, full = run("full", 12)
    _, head = run("split", 2)
    cfg_rest = tiny_train_config(tmp_path / "split", epochs=12)
    resumed = fine_tune(head.last_checkpoint, TINY_MODEL, cfg_rest,
                        toy_dataset, toy_dataset, toy_dataset)
    tail_steps = len(resumed.step_log)
    resume_err = max(abs(a.total - b.total)
                     for a, b in zip(full.step_log[-tail_steps:],
                                     resumed.step_log))
    weight_err = max((a - b).abs().max().item()
                     for a, b in zip(full.model.parameters(),
                                     resumed.model.parameters()))
    elapsed = time.perf_counter() - t0
    ok = (rerun_err <= 1e-6 and resume_err <= 1e-6 and weight_err <= 1e-6
          and tail_steps >= 20 and elapsed < 300.0)
    _verdict("A7", ok, elapsed,
             f"rerun per-step err {rerun_err:.1e}; resume per-step err "
             f"{resume_err:.1e} over {tail_steps} steps, weight err "
             f"{weight_err:.1e}")


def test_a8_loss_anchor_values():
    t0 = time.perf_counter()
    gen = np.random.default_rng(88)
    x = torch.tensor(gen.uniform(size=(2, 3, 32, 32)), dtype=torch.float64)
    ssim_self = abs(ssim_loss(x, x).item())
    pred = torch.full((1, 1, 16, 16), 0.5, dtype=torch.float64)
    target = torch.tensor((gen.uniform(size=(1, 1, 16, 16)) < 0.5)
                          .astype(np.float64))
    bce_err = abs(bce_loss(pred, target).item() - math.log(2.0))
    elapsed = time.perf_counter() - t0
    ok = ssim_self < 1e-6 and bce_err < 1e-9
    _verdict("A8", ok, elapsed,
             f"ssim(x,x) = {ssim_self:.1e}, bce(0.5) - ln2 = {bce_err:.1e}")


def test_a9_domain_shift_comparison(tmp_path):
    t0 = time.perf_counter()
    result = run_adaptation_smoke(tmp_path, AdaptationConfig(epochs=30))
    elapsed = time.perf_counter() - t0
    variants = [r.variant for r in result.rows]
    scores = {r.variant: r.mean_dice for r in result.rows}
    sane = all(0.0 <= r.mean_dice <= 1.0 and 0.0 <= r.mean_iou <= 1.0
               and r.n == 10 for r in result.rows)
    files = result.csv_path.is_file() and (tmp_path / "adaptation.txt").is_file()
    ok = (variants == [VARIANT_DUAL, VARIANT_SEG_ONLY] and sane and files)
    direction = ("reconstruction helped" if scores[VARIANT_DUAL]
                 > scores[VARIANT_SEG_ONLY] else "reconstruction did not help")
    print()
    print(result.table)
    _verdict("A9", ok, elapsed,
             f"shifted-domain dice {scores[VARIANT_DUAL]:.3f} (dual) vs "
             f"{scores[VARIANT_SEG_ONLY]:.3f} (seg-only); {direction}; "
             f"observational, not gated")
