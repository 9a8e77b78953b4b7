"""The eight acceptance criteria at their stated tolerances and time limits.

Each test records one PASS/FAIL line, printed again in the pytest terminal
summary under "acceptance criteria".
"""
import math
import time

import numpy as np
import pytest
from scipy import ndimage

from openess.distill import FeatureMap, ProjectionHead, f2e_loss, t2e_loss
from openess.embedding import random_text_embeddings
from openess.encoder import encoder_backward, encoder_forward, init_encoder
from openess.events import EventWindow, build_voxel_grid, normalized_times, temporal_weights
from openess.labelmap import IGNORE
from openess.metrics import ConfusionMatrix, iou_scores
from openess.openvocab import cross_entropy
from openess.pipeline import ExperimentConfig, run_experiment
from openess.superpixel import UNASSIGNED, segment_boundaries, slic

from oracles import brute_iou, brute_voxel, central_diff, random_stream
from test_superpixel import two_region

BUDGETS = (0.01, 0.05, 0.10, 0.20)


def vec_rel_err(a, b):
    a, b = np.asarray(a, float).ravel(), np.asarray(b, float).ravel()
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), 1e-12))


def test_criterion_1_voxel_oracle(acceptance_record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst_grid = worst_sum = 0.0
    for _ in range(100):
        s = random_stream(rng, int(rng.integers(1, 1001)))
        win = EventWindow(s, 0, len(s))
        for bins in (1, 2, 5, 8):
            fast = build_voxel_grid(win, bins).values
            slow = brute_voxel(s.events, bins, 8, 8, win.t0, win.dt)
            worst_grid = max(worst_grid, float(np.max(np.abs(fast - slow))))
            w = temporal_weights(normalized_times(win, bins), bins)
            worst_sum = max(worst_sum, float(np.max(np.abs(w.sum(axis=1) - 1.0))))
    elapsed = time.perf_counter() - t0
    ok = worst_grid < 1e-9 and worst_sum <= 1e-12 and elapsed < 5
    acceptance_record(1, ok, f"max|grid-oracle|={worst_grid:.2e} max|sum w-1|={worst_sum:.2e} "
                             f"time={elapsed:.2f}s")
    assert ok


def _f2e_instances(rng, mode):
    errs = []
    for _ in range(20):
        n, d = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        tau = float(rng.uniform(0.1, 1.0))
        a = rng.standard_normal((n, d))
        b = rng.standard_normal((n, d))
        a /= np.linalg.norm(a, axis=1, keepdims=True)
        b /= np.linalg.norm(b, axis=1, keepdims=True)
        rep = f2e_loss(a, b, tau, mode)
        for arr, key in ((a, "evt"), (b, "img")):
            fd = np.array([central_diff(lambda: f2e_loss(a, b, tau, mode).loss, arr, i)
                           for i in np.ndindex(arr.shape)]).reshape(arr.shape)
            errs.append(vec_rel_err(rep.grads[key], fd))
    return errs


def _t2e_instances(rng):
    errs = []
    for _ in range(20):
        d, z = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        h, w = 4, 5
        feats = FeatureMap(rng.standard_normal((d, h, w)))
        texts = random_text_embeddings([str(i) for i in range(z)], z + 1, seed=int(rng.integers(1e6)))
        plabels = rng.integers(0, z, (h, w)).astype(np.uint8)
        plabels[0, 0], plabels[0, 1] = 0, 1  # at least two classes
        head = ProjectionHead(rng.standard_normal((d, z + 1)), rng.normal(0, 0.1, z + 1))
        tau = float(rng.uniform(0.1, 1.0))

        def loss():
            return t2e_loss(feats, plabels, texts, head, tau).loss

        rep = t2e_loss(feats, plabels, texts, head, tau)
        for arr, key in ((head.weight, "head_q.weight"), (head.bias, "head_q.bias"),
                         (feats.values, "features")):
            fd = np.array([central_diff(loss, arr, i) for i in np.ndindex(arr.shape)])
            errs.append(vec_rel_err(rep.grads[key], fd))
    return errs


def _ce_instances(rng):
    errs = []
    for _ in range(20):
        z, d, n = int(rng.integers(2, 5)), int(rng.integers(2, 6)), int(rng.integers(3, 12))
        w, b = rng.standard_normal((z, d)), rng.standard_normal(z)
        x, y = rng.standard_normal((n, d)), rng.integers(0, z, n)
        _, dw, db = cross_entropy(w, b, x, y)
        for arr, g in ((w, dw), (b, db)):
            fd = np.array([central_diff(lambda: cross_entropy(w, b, x, y)[0], arr, i)
                           for i in np.ndindex(arr.shape)])
            errs.append(vec_rel_err(g, fd))
    return errs


def _encoder_instances(rng):
    errs = []
    for k in range(20):
        c_in = int(rng.integers(1, 4))
        p = init_encoder(c_in, widths=(3, 4), d_out=3, seed=k, final_relu=bool(k % 2))
        for layer in p.layers:
            layer.bias[:] = rng.normal(0, 0.2, layer.bias.shape)
        x = rng.standard_normal((c_in, 5, 6))
        g_out = rng.standard_normal((3, 5, 6))

        def loss():
            return float((encoder_forward(p, x)[0] * g_out).sum())

        _, acts = encoder_forward(p, x)
        grads, dx = encoder_backward(p, acts, g_out)
        for (dw, db), layer in zip(grads, p.layers):
            for arr, g in ((layer.weight, dw), (layer.bias, db)):
                fd = np.array([central_diff(loss, arr, i) for i in np.ndindex(arr.shape)])
                errs.append(vec_rel_err(g, fd))
        fd = np.array([central_diff(loss, x, i) for i in np.ndindex(x.shape)])
        errs.append(vec_rel_err(dx, fd))
    return errs


def test_criterion_2_gradient_suite(acceptance_record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    worst = {
        "f2e_standard": max(_f2e_instances(rng, "standard")),
        "f2e_paper_literal": max(_f2e_instances(rng, "paper-literal")),
        "t2e": max(_t2e_instances(rng)),
        "probe_ce": max(_ce_instances(rng)),
        "encoder": max(_encoder_instances(rng)),
    }
    elapsed = time.perf_counter() - t0
    ok = all(v < 1e-4 for v in worst.values()) and elapsed < 60
    detail = " ".join(f"{k}={v:.1e}" for k, v in worst.items())
    acceptance_record(2, ok, f"max rel err {detail} (20 instances each) time={elapsed:.1f}s")
    assert ok


def test_criterion_3_loss_oracles(acceptance_record):
    worst = 0.0
    for tau in (0.07, 0.5, 1.0):
        for n in (2, 4, 8):
            e = np.eye(n)
            expected = -math.log(math.exp(1 / tau) / (math.exp(1 / tau) + n - 1))
            worst = max(worst, abs(f2e_loss(e, e, tau).loss - expected))
            same = np.tile(np.eye(n)[:1], (n, 1))
            worst = max(worst, abs(f2e_loss(same, same, tau).loss - math.log(n)))
    ok = worst <= 1e-9
    acceptance_record(3, ok, f"max |loss - closed form| = {worst:.2e}")
    assert ok


def test_criterion_4_slic_properties(acceptance_record):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    partition_ok = True
    for i in range(200):
        h, w = int(rng.integers(2, 33)), int(rng.integers(2, 33))
        m = int(rng.integers(1, min(h * w, 64) + 1))
        img = rng.uniform(0, 255, (h, w)) if i % 2 else rng.uniform(0, 255, (h, w, 3))
        sp = slic(img, m, float(rng.uniform(1, 40)), seed=i, jitter=float(rng.uniform(0, 0.5)))
        sizes = sp.sizes()
        partition_ok &= bool(not np.any(sp.labels == UNASSIGNED) and sizes.sum() == h * w
                             and np.all(sizes > 0))
    hit = total = 0
    for i in range(50):
        img, gt = two_region(rng)
        sp = slic(img, int(rng.integers(8, 40)), seed=i)
        truth = segment_boundaries(gt)
        near = ndimage.binary_dilation(segment_boundaries(sp.labels), np.ones((3, 3), bool))
        hit += int((truth & near).sum())
        total += int(truth.sum())
    recall = hit / total
    img = rng.uniform(0, 255, (40, 40))
    deterministic = np.array_equal(slic(img, 30, seed=9, jitter=0.4).labels,
                                   slic(img, 30, seed=9, jitter=0.4).labels)
    elapsed = time.perf_counter() - t0
    ok = partition_ok and recall >= 0.95 and deterministic and elapsed < 30
    acceptance_record(4, ok, f"partition={partition_ok} boundary recall={recall:.4f} "
                             f"deterministic={deterministic} time={elapsed:.1f}s")
    assert ok


def test_criterion_5_metrics_oracle(acceptance_record):
    rng = np.random.default_rng(5)
    mismatches = 0
    for trial in range(1000):
        z = int(rng.integers(1, 6))
        shape = tuple(rng.integers(1, 8, 2))
        gt = rng.integers(0, z, shape)
        pred = rng.integers(0, z, shape)
        gt[rng.random(shape) < 0.1] = IGNORE
        ious, miou, acc = brute_iou(pred, gt, z)
        if acc is None:
            continue
        rep = iou_scores(ConfusionMatrix(z).accumulate(pred, gt))
        if rep.exact_iou != ious or rep.miou != float(miou) or rep.acc != float(acc):
            mismatches += 1
    gt = rng.integers(0, 4, (16, 16))
    perfect = iou_scores(ConfusionMatrix(4).accumulate(gt, gt)).miou
    ok = mismatches == 0 and perfect == 1.0
    acceptance_record(5, ok, f"mismatches={mismatches}/1000 perfect mIoU={perfect}")
    assert ok


@pytest.fixture(scope="module")
def experiment():
    cfg = ExperimentConfig()
    t0 = time.perf_counter()
    report = run_experiment(cfg)
    return cfg, report, time.perf_counter() - t0


def test_criterion_6_end_to_end_zero_shot(experiment, acceptance_record):
    cfg, report, _ = experiment
    t = report.timings
    elapsed = t["data"] + t["train"] + t["zeroshot"]
    trained = report.zero_shot_trained.miou
    untrained = report.zero_shot_untrained.miou
    ok = (cfg.train.steps <= 500 and trained >= 0.90 and trained - untrained >= 0.30
          and elapsed < 300)
    acceptance_record(6, ok, f"zero-shot mIoU trained={trained:.4f} untrained={untrained:.4f} "
                             f"steps={cfg.train.steps} time={elapsed:.1f}s")
    assert ok


def test_criterion_7_annotation_efficiency(experiment, acceptance_record):
    _, report, total = experiment
    rows = []
    ok = total < 600
    for b in BUDGETS:
        d, r = report.probe_distilled[b].miou, report.probe_random[b].miou
        ok &= d > r
        rows.append(f"{100 * b:g}%: {d:.3f}>{r:.3f}")
    acceptance_record(7, ok, f"probe mIoU distilled>random {'; '.join(rows)} time={total:.1f}s")
    assert ok


def test_criterion_8_determinism(experiment, acceptance_record):
    cfg, first, _ = experiment
    second = run_experiment(ExperimentConfig())
    a, b = first.metric_values(), second.metric_values()
    same_metrics = a.keys() == b.keys() and all(
        np.float64(a[k]).tobytes() == np.float64(b[k]).tobytes() for k in a)
    same_trace = first.trace == second.trace
    pa, pb = first.model.parameters(), second.model.parameters()
    same_params = all(np.array_equal(pa[k], pb[k]) for k in pa)
    ok = same_metrics and same_trace and same_params
    acceptance_record(8, ok, f"metrics bitwise equal={same_metrics} trace={same_trace} "
                             f"params={same_params} ({len(a)} metric values)")
    assert ok
