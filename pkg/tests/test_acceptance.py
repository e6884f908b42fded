"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

The end-to-end protocol (criteria 5-8) runs once in a session fixture:
700 synthetic images (140 per grade, seed 42) split 100/40 per grade into
train/validation, preprocessed at the fast-mode branch sizes 112/150, and
trained for 10 epochs with the default configuration.
"""

import math
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pytest

from retgrade.coral import coral_loss, coral_loss_grad, encode_targets
from retgrade.data import sample_weights, stratified_split, weighted_sample
from retgrade.data import Manifest, ManifestRecord
from retgrade.imgproc import AugmentConfig, CircleROI, ben_graham, circular_crop, histogram_match
from retgrade.metrics import qwk
from retgrade.model import DualBranchModel, ModelConfig, gradient_check
from retgrade.nn import BackboneConfig
from retgrade.pipeline import (PreprocessParams, choose_reference, prepare_reference,
                               preprocess_to_dataset)
from retgrade.synth import SynthConfig, apply_domain_shift, generate_corpus
from retgrade.train import (TrainConfig, evaluate_model, fit, load_checkpoint,
                            model_from_checkpoint, save_checkpoint, write_history_csv,
                            _batch_tensors)

pytestmark = pytest.mark.acceptance

SEED = 42
FAST_PARAMS = PreprocessParams(size0=112, size3=150)
FAST_MODEL = ModelConfig(b0=BackboneConfig(112, (16, 32, 64, 128), 128),
                         b3=BackboneConfig(150, (24, 48, 96, 160), 160))


def report(criterion: int, ok: bool, detail: str) -> None:
    print(f"[ACCEPTANCE {criterion}] {'PASS' if ok else 'FAIL'}: {detail}")
    assert ok, f"criterion {criterion}: {detail}"


def run_protocol(root: Path):
    """Synthesize, split, preprocess, and train with every default pinned."""
    corpus = generate_corpus(SynthConfig(n_per_grade=140, seed=SEED), root / "corpusA")
    train_m, val_m = stratified_split(corpus, 40 / 140, seed=SEED)
    train_ds = preprocess_to_dataset(train_m, FAST_PARAMS)
    val_ds = preprocess_to_dataset(val_m, FAST_PARAMS)
    model = DualBranchModel(FAST_MODEL, seed=SEED)
    best, history = fit(model, train_ds, val_ds, TrainConfig(seed=SEED),
                        aug_cfg=AugmentConfig())
    return corpus, train_m, val_m, train_ds, val_ds, best, history


@dataclass
class ProtocolRun:
    root: Path
    train_m: object
    val_m: object
    train_ds: object
    val_ds: object
    best: object
    history: list
    runtime: float


@pytest.fixture(scope="session")
def protocol(tmp_path_factory) -> ProtocolRun:
    root = tmp_path_factory.mktemp("acceptance")
    t0 = time.time()
    _, train_m, val_m, train_ds, val_ds, best, history = run_protocol(root)
    return ProtocolRun(root, train_m, val_m, train_ds, val_ds, best, history,
                       time.time() - t0)


# ---------------------------------------------------------------------------
# 1. gradient correctness through the full model
# ---------------------------------------------------------------------------

def test_criterion_1_gradient_correctness(tmp_path):
    t0 = time.time()
    corpus = generate_corpus(SynthConfig(n_per_grade=1, image_size=64, seed=11), tmp_path)
    ds = preprocess_to_dataset(corpus, PreprocessParams(size0=16, size3=16), threads=1)
    x0, x3 = _batch_tensors(ds, [2, 4], None)
    cfg = ModelConfig(b0=BackboneConfig(16, (16, 32, 64, 128), 128),
                      b3=BackboneConfig(16, (24, 48, 96, 160), 160))
    model = DualBranchModel(cfg, seed=7)
    results = gradient_check(model, x0, x3, [2, 4], n_coords=400, eps=1e-3, seed=2)
    elapsed = time.time() - t0
    rels = np.array([r[4] for r in results])
    frac_ok = float(np.mean(rels < 1e-3))
    groups = {r[0] for r in results}
    ok = (len(results) >= 200 and frac_ok >= 0.99
          and groups == set(model.store.names()) and elapsed < 60)
    report(1, ok, f"{len(results)} coords across {len(groups)} groups, "
                  f"{frac_ok * 100:.2f}% within 1e-3 (need >= 99%), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 2. CORAL loss oracle equivalence
# ---------------------------------------------------------------------------

def test_criterion_2_coral_oracle():
    t0 = time.time()
    rng = np.random.default_rng(0)
    worst_loss = 0.0
    for _ in range(10000):
        z = rng.uniform(-15, 15, 4)
        t = (rng.random(4) < 0.5).astype(float)
        p = 1.0 / (1.0 + np.exp(-z))
        naive = float(-(t * np.log(p) + (1 - t) * np.log(1 - p)).sum())
        worst_loss = max(worst_loss, abs(coral_loss(z, t) - naive))
    worst_grad = 0.0
    eps = 1e-6
    for _ in range(500):
        z = rng.uniform(-8, 8, 4)
        t = encode_targets(int(rng.integers(0, 5)))
        g = coral_loss_grad(z, t)
        for k in range(4):
            zp, zm = z.copy(), z.copy()
            zp[k] += eps
            zm[k] -= eps
            fd = (coral_loss(zp, t) - coral_loss(zm, t)) / (2 * eps)
            worst_grad = max(worst_grad, abs(g[k] - fd))
    elapsed = time.time() - t0
    ok = worst_loss < 1e-6 and worst_grad < 1e-4 and elapsed < 5
    report(2, ok, f"loss vs naive BCE max |diff| {worst_loss:.2e} (< 1e-6), "
                  f"grad vs FD max |diff| {worst_grad:.2e} (< 1e-4), {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 3. QWK oracle equivalence
# ---------------------------------------------------------------------------

def qwk_oracle(preds, labels):
    n = len(labels)
    observed = np.zeros((5, 5))
    for t, p in zip(labels, preds):
        observed[t][p] += 1
    row = observed.sum(axis=1)
    col = observed.sum(axis=0)
    num = 0.0
    den = 0.0
    for i in range(5):
        for j in range(5):
            w = (i - j) ** 2 / 16.0
            num += w * observed[i][j]
            den += w * row[i] * col[j] / n
    return 1.0 if den == 0 else 1.0 - num / den


def test_criterion_3_qwk_oracle():
    t0 = time.time()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 501))
        labels = rng.integers(0, 5, n)
        preds = rng.integers(0, 5, n)
        worst = max(worst, abs(qwk(preds, labels) - qwk_oracle(preds, labels)))
    labels = rng.integers(0, 5, 200)
    self_one = qwk(labels, labels) == 1.0
    balanced = np.repeat(np.arange(5), 40)
    const_ok = all(qwk(np.full(200, c), balanced) <= 1e-12 for c in range(5))
    elapsed = time.time() - t0
    ok = worst < 1e-12 and self_one and const_ok and elapsed < 10
    report(3, ok, f"oracle max |diff| {worst:.2e} (< 1e-12), qwk(x,x)=1 {self_one}, "
                  f"constant-vs-balanced <= 0 {const_ok}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 4. preprocessing golden properties
# ---------------------------------------------------------------------------

def test_criterion_4_preprocessing_golden():
    t0 = time.time()
    rng = np.random.default_rng(2)

    cdf_ok = True
    for _ in range(10):
        img = rng.integers(0, 256, (48, 48, 3)).astype(np.uint8)
        out = histogram_match(img, img)
        for c in range(3):
            a = np.cumsum(np.bincount(img[..., c].ravel(), minlength=256)) / img[..., c].size
            b = np.cumsum(np.bincount(out[..., c].ravel(), minlength=256)) / out[..., c].size
            cdf_ok &= bool(np.max(np.abs(a - b)) < 1 / 256)

    bg_ok = all(
        np.all(ben_graham(np.full((36, 36, 3), v, np.uint8)) == 128)
        for v in (0, 55, 128, 201, 255))

    crop_ok = True
    for _ in range(50):
        h = int(rng.integers(12, 48))
        w = int(rng.integers(12, 48))
        img = rng.integers(1, 256, (h, w, 3)).astype(np.uint8)  # strictly nonzero
        cx = float(rng.uniform(2, w - 2))
        cy = float(rng.uniform(2, h - 2))
        r = float(rng.uniform(2, max(h, w)))
        out = circular_crop(img, CircleROI(cx, cy, r))
        x0 = max(0, math.floor(cx - r))
        y0 = max(0, math.floor(cy - r))
        oh, ow = out.shape[:2]
        yy, xx = np.mgrid[0:oh, 0:ow]
        inside = ((xx + x0 + 0.5 - cx) ** 2 + (yy + y0 + 0.5 - cy) ** 2) <= r ** 2
        src = img[y0:y0 + oh, x0:x0 + ow]
        crop_ok &= bool(np.all(out[~inside] == 0))
        crop_ok &= bool(np.array_equal(out[inside], src[inside]))

    elapsed = time.time() - t0
    ok = cdf_ok and bg_ok and crop_ok and elapsed < 10
    report(4, ok, f"self-match CDF drift < 1/256: {cdf_ok}, uniform -> 128: {bg_ok}, "
                  f"crop zeroing exact on 50 ROIs: {crop_ok}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# 5. synthetic end-to-end protocol
# ---------------------------------------------------------------------------

def test_criterion_5_synthetic_end_to_end(protocol):
    first, last = protocol.history[0], protocol.history[-1]
    best_qwk = protocol.best.best_val_qwk
    model = model_from_checkpoint(protocol.best)
    _, cm = evaluate_model(model, protocol.val_ds)
    errors = int(cm.sum() - np.trace(cm))
    adjacent = sum(int(cm[i][j]) for i in range(5) for j in range(5) if abs(i - j) == 1)
    adj_frac = 1.0 if errors == 0 else adjacent / errors
    ok = (last.train_loss < first.train_loss and best_qwk >= 0.80
          and adj_frac >= 0.80 and protocol.runtime < 15 * 60)
    report(5, ok, f"loss {first.train_loss:.3f} -> {last.train_loss:.3f} (must drop), "
                  f"best val QWK {best_qwk:.4f} (>= 0.80), adjacent errors "
                  f"{adj_frac * 100:.0f}% (>= 80%), runtime {protocol.runtime / 60:.1f} min (< 15)")


# ---------------------------------------------------------------------------
# 6. domain-shift replication
# ---------------------------------------------------------------------------

def test_criterion_6_domain_shift(protocol):
    t0 = time.time()
    model = model_from_checkpoint(protocol.best)
    q_in, _ = evaluate_model(model, protocol.val_ds)

    shift_cfg = SynthConfig(seed=SEED)
    shifted = apply_domain_shift(protocol.val_m, shift_cfg, protocol.root / "valB")

    unmatched_ds = preprocess_to_dataset(shifted, FAST_PARAMS, reference=None, match=False)
    q_unmatched, _ = evaluate_model(model, unmatched_ds)

    ref_path = choose_reference(protocol.train_m, None, "synthA")
    reference = prepare_reference(ref_path, FAST_PARAMS)
    matched_ds = preprocess_to_dataset(shifted, FAST_PARAMS, reference=reference,
                                       ref_domain="synthA", match=True)
    q_matched, _ = evaluate_model(model, matched_ds)

    elapsed = time.time() - t0
    ok = q_unmatched < q_in and q_matched >= q_unmatched and elapsed < 3 * 60
    report(6, ok, f"QWK in-domain {q_in:.4f} > unmatched {q_unmatched:.4f}; "
                  f"matched {q_matched:.4f} >= unmatched; {elapsed:.0f}s (< 180)")


# ---------------------------------------------------------------------------
# 7. determinism of the full protocol
# ---------------------------------------------------------------------------

def test_criterion_7_determinism(protocol, tmp_path):
    _, _, _, _, _, best2, history2 = run_protocol(tmp_path)

    hist_a = tmp_path / "history_a.csv"
    hist_b = tmp_path / "history_b.csv"
    write_history_csv(protocol.history, hist_a)
    write_history_csv(history2, hist_b)
    same_history = hist_a.read_bytes() == hist_b.read_bytes()

    ck_a = tmp_path / "a.rgck"
    ck_b = tmp_path / "b.rgck"
    save_checkpoint(protocol.best, ck_a)
    save_checkpoint(best2, ck_b)
    same_checkpoint = ck_a.read_bytes() == ck_b.read_bytes()

    report(7, same_history and same_checkpoint,
           f"identical history CSV: {same_history}, bit-identical checkpoint: {same_checkpoint}")


# ---------------------------------------------------------------------------
# 8. checkpoint round-trip
# ---------------------------------------------------------------------------

def test_criterion_8_checkpoint_round_trip(protocol, tmp_path):
    model = model_from_checkpoint(protocol.best)
    q_before, cm_before = evaluate_model(model, protocol.val_ds)
    path = tmp_path / "rt.rgck"
    save_checkpoint(protocol.best, path)
    reloaded = model_from_checkpoint(load_checkpoint(path))
    q_after, cm_after = evaluate_model(reloaded, protocol.val_ds)
    ok = (q_before == q_after) and np.array_equal(cm_before, cm_after)
    report(8, ok, f"QWK before {q_before!r} == after {q_after!r} to the last bit")


# ---------------------------------------------------------------------------
# 9. weighted-sampler balance
# ---------------------------------------------------------------------------

def test_criterion_9_weighted_sampler_balance():
    counts = (400, 100, 50, 30, 20)
    records = [ManifestRecord(f"r{g}_{i}", g, "synthA")
               for g, c in enumerate(counts) for i in range(c)]
    manifest = Manifest(records)
    weights = sample_weights(manifest)
    idx = weighted_sample(weights, 60000, np.random.default_rng(SEED))
    grades = manifest.grades()[idx]
    freq = np.bincount(grades, minlength=5) / 60000
    worst = float(np.max(np.abs(freq - 0.2)))
    ok = worst < 0.02
    report(9, ok, f"per-grade frequencies {np.round(freq, 4).tolist()}, "
                  f"max |freq - 0.2| = {worst:.4f} (< 0.02)")
