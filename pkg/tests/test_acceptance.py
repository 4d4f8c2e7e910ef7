"""Acceptance gate.

Each test prints one PASS/FAIL line for its criterion. The training
criteria fit real models: the whole module takes roughly half an hour on
a desktop CPU (`pytest tests/test_acceptance.py -s`).
"""
import dataclasses
import itertools
import json
import time

import numpy as np
import pytest

from patchseg.data import DatasetSpec, generate
from patchseg.encoder import EncoderConfig
from patchseg.equivariance import (
    GridTransform,
    apply_inverse_on_grid,
    apply_inverse_transform,
    apply_on_grid,
    apply_transform,
    et_loss,
)
from patchseg.model import SegModel
from patchseg.pcm_core import (
    PatchClassDistribution,
    gmp,
    patch_distribution,
    softmax_rows,
)
from patchseg.train_eval import (
    TrainConfig,
    ablation,
    cam_baseline_train_eval,
    confusion_matrix,
    evaluate,
    evaluate_model,
    gradcheck,
    load_checkpoint,
    report_from_confusion,
    save_checkpoint,
    toggle_configs,
    train,
)

D = 8  # patch side of the default encoder


def criterion(name: str, ok: bool, detail: str) -> bool:
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}", flush=True)
    return ok


# ---------------------------------------------------------------------------
# shared fixtures
# ---------------------------------------------------------------------------

@pytest.fixture(scope="module")
def full_split():
    return (
        generate(DatasetSpec(num_images=800, seed=0)),
        generate(DatasetSpec(num_images=200, seed=1)),
    )


@pytest.fixture(scope="module")
def trend_split():
    return (
        generate(DatasetSpec(num_images=400, seed=0)),
        generate(DatasetSpec(num_images=100, seed=1)),
    )


TREND_CONFIG = TrainConfig(
    phase1_epochs=10, phase2_epochs=20, batch_size=16, patience=8
)


@pytest.fixture(scope="module")
def trend_ablation(trend_split):
    train_s, val_s = trend_split
    return ablation(
        toggle_configs(TREND_CONFIG), EncoderConfig(), train_s, val_s, seeds=(0, 1, 2)
    )


# ---------------------------------------------------------------------------
# criteria
# ---------------------------------------------------------------------------

def test_gradient_oracle():
    t0 = time.time()
    report = gradcheck(
        trials=100, tolerance=1e-5, num_patches=16, feature_dim=8, num_classes=5, seed=7
    )
    runtime = time.time() - t0
    ok = report.passed and runtime < 10.0
    assert criterion(
        "gradient oracle",
        ok,
        f"analytic vs central differences on {report.trials} tie-free instances "
        f"(s=16, e=8, K=5): max rel error {report.max_rel_error:.2e} <= 1e-05, "
        f"{report.redraws} redraws, {runtime:.1f}s < 10s",
    )


def test_stochasticity_and_pooling():
    rng = np.random.default_rng(11)
    worst_row_gap = 0.0
    for _ in range(1000):
        s = int(rng.integers(2, 24))
        k = int(rng.integers(2, 8))
        logits = rng.normal(scale=rng.uniform(0.1, 6.0), size=(s, k))
        dist = patch_distribution(logits)
        worst_row_gap = max(worst_row_gap, float(np.abs(dist.values.sum(1) - 1).max()))
        pred = gmp(dist)
        assert np.all(pred.y > 0.0) and np.all(pred.y < 1.0)
        perm = rng.permutation(s)
        permuted = PatchClassDistribution(
            values=dist.values[perm], logits=dist.logits[perm]
        )
        assert np.array_equal(gmp(permuted).y, pred.y)
    ok = worst_row_gap <= 1e-6
    assert criterion(
        "stochasticity",
        ok,
        f"1000 random logit matrices: max |row sum - 1| = {worst_row_gap:.2e} <= 1e-06, "
        "pooled y in (0,1), patch-permutation invariance exact",
    )


def test_equivariance_mechanics():
    rng = np.random.default_rng(13)
    image = rng.random((64, 64, 3))
    grid = softmax_rows(rng.normal(size=(8, 8, 5)))
    elements = [
        GridTransform(rotation=rot, hflip=hf, vflip=vf, shift=shift)
        for rot, hf, vf, shift in itertools.product(
            (0, 90, 180, 270), (False, True), (False, True), ((0, 0), (D, 2 * D))
        )
    ]
    assert len(elements) == 32
    exact = True
    for t in elements:
        img_rt = apply_inverse_transform(apply_transform(image, t, D), t, D)
        grid_rt = apply_inverse_on_grid(apply_on_grid(grid, t, D), t, D)
        exact = exact and np.array_equal(img_rt, image) and np.array_equal(grid_rt, grid)
    gibbs_ok = True
    for _ in range(100):
        mu = softmax_rows(rng.normal(size=(6, 6, 4)))
        nu = softmax_rows(rng.normal(size=(6, 6, 4)))
        gibbs_ok = gibbs_ok and et_loss(mu, nu) >= et_loss(nu, nu) - 1e-9
    ok = exact and gibbs_ok
    assert criterion(
        "equivariance mechanics",
        ok,
        "transform-then-inverse bit-exact on images and grids for all 32 group "
        "elements; cross-entropy >= self-entropy on 100 random grid pairs",
    )


def test_miou_oracle_equivalence():
    rng = np.random.default_rng(17)
    exact = True
    for _ in range(50):
        gt = rng.integers(0, 5, size=(8, 8))
        pred = rng.integers(0, 5, size=(8, 8))
        report = report_from_confusion(confusion_matrix(gt, pred, 5))
        for k in range(5):
            tp = int(np.sum((gt == k) & (pred == k)))
            fp = int(np.sum((gt != k) & (pred == k)))
            fn = int(np.sum((gt == k) & (pred != k)))
            if tp + fp + fn == 0:
                exact = exact and np.isnan(report.per_class_iou[k])
            else:
                exact = exact and report.per_class_iou[k] == tp / (tp + fp + fn)
    assert criterion(
        "mIoU oracle equivalence",
        exact,
        "per-class IoU equals brute-force per-pixel counting on 50 random "
        "8x8 mask pairs (K=5), exactly",
    )


def test_toy_training_target(full_split):
    train_s, val_s = full_split
    enc = EncoderConfig()
    config = TrainConfig(seed=0)
    untrained = SegModel(
        enc, 5, use_conditioning=config.use_conditioning, seed=config.seed
    )
    base_miou = evaluate_model(untrained, val_s, upscale_factor=2).miou
    t0 = time.time()
    result = train(config, enc, train_s, val_s)
    elapsed = time.time() - t0
    report = evaluate(result.checkpoint, val_s, upscale_factor=2)
    ok = report.miou >= 0.50 and report.miou - base_miou >= 0.25 and elapsed < 1800
    assert criterion(
        "toy training target",
        ok,
        f"full model val mIoU {report.miou:.4f} >= 0.50, untrained {base_miou:.4f} "
        f"(gap {report.miou - base_miou:.4f} >= 0.25), {elapsed / 60:.1f} min < 30 min",
    )


def test_ablation_trend(trend_ablation):
    rows = {r.name: r.mean_miou for r in trend_ablation.rows}
    tol = 0.01  # one mIoU point
    gap_et = rows["MCE+ET"] - rows["MCE"]
    gap_hv = rows["MCE+ET+HV"] - rows["MCE+ET"]
    ok = gap_et >= -tol and gap_hv >= -tol
    assert criterion(
        "ablation trend",
        ok,
        "3-seed mean val mIoU "
        f"MCE {rows['MCE']:.4f} -> +ET {rows['MCE+ET']:.4f} (gap {gap_et:+.4f}) "
        f"-> +ET+HV {rows['MCE+ET+HV']:.4f} (gap {gap_hv:+.4f}); "
        "each gap >= -0.01",
    )


def test_pcm_beats_cam(trend_split, trend_ablation):
    train_s, val_s = trend_split
    cam_mious = []
    for seed in (0, 1, 2):
        res = cam_baseline_train_eval(
            dataclasses.replace(TREND_CONFIG, seed=seed), EncoderConfig(), train_s, val_s
        )
        cam_mious.append(res.report.miou)
    cam_mean = float(np.mean(cam_mious))
    pcm_mean = next(r.mean_miou for r in trend_ablation.rows if r.name == "MCE+ET+HV")
    ok = pcm_mean >= cam_mean
    assert criterion(
        "max-pool head vs averaged-pool baseline",
        ok,
        f"identical encoder, 3-seed means: PCM {pcm_mean:.4f} >= CAM {cam_mean:.4f}",
    )


def test_determinism_and_persistence(tmp_path):
    train_s = generate(DatasetSpec(num_images=32, seed=4))
    val_s = generate(DatasetSpec(num_images=16, seed=5))
    enc = EncoderConfig(image_side=32, patch_side=8, embed_dim=16, num_heads=2,
                        depth=2, seed=0)
    config = TrainConfig(phase1_epochs=2, phase2_epochs=2, batch_size=8, seed=0,
                         eval_upscale=1, patience=99)
    logs = []
    for run in range(2):
        out = tmp_path / f"run{run}"
        train(config, enc, train_s, val_s, out_dir=out)
        logs.append((out / "metrics.jsonl").read_bytes())
    identical = logs[0] == logs[1]

    result = train(config, enc, train_s, val_s)
    before = evaluate(result.checkpoint, val_s, upscale_factor=2)
    save_checkpoint(result.checkpoint, tmp_path / "ckpt")
    after = evaluate(load_checkpoint(tmp_path / "ckpt"), val_s, upscale_factor=2)
    round_trip = (
        before.to_dict() == after.to_dict()
        and np.array_equal(before.confusion, after.confusion)
    )
    ok = identical and round_trip
    assert criterion(
        "determinism & persistence",
        ok,
        f"fixed-seed metric logs byte-identical: {identical}; checkpoint round "
        f"trip reproduces the evaluation report exactly: {round_trip}",
    )
