"""Glue between the modules: aligned samples from a scene, and the synthetic experiment."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .distill import (DistillModel, TrainConfig, TrainResult, TrainSample, encode_features,
                      init_model, prepare_sample, train)
from .embedding import (FeatureMap, TextEmbeddingSet, load_feature_map, random_text_embeddings,
                        synth_features, write_feature_map)
from .events import (EventStream, EventWindow, build_voxel_grid, event_count_frame, rate_code,
                     read_event_file, window_events, write_event_file)
from .labelmap import read_labels, read_pgm, write_labels, write_pgm
from .manifest import ManifestSample, split_sequences
from .metrics import ConfusionMatrix, IoUReport, iou_scores
from .openvocab import ProbeConfig, linear_probe, predict_zero_shot
from .superpixel import SuperpixelMap, group_superevents, load_mask_file, slic
from .synth import SynthResult, default_scene, generate

log = logging.getLogger(__name__)

CLASS_NAMES = ("background", "box", "disk")
REPRESENTATIONS = ("voxel", "spike")


@dataclass
class Sample:
    seq_id: str
    window: EventWindow
    inputs: np.ndarray  # encoder input (C, H, W)
    frame: np.ndarray  # (H, W) intensities
    labels: np.ndarray  # (H, W) ground truth
    frame_features: FeatureMap | None
    superpixels: SuperpixelMap | None
    t_us: int = 0


def encode_window(window: EventWindow, representation: str = "voxel", bins: int = 5,
                  spike_steps: int = 16, seed: int = 0, inverted: bool = False) -> np.ndarray:
    """Encoder input for one window: a voxel grid or accumulated rate-coded spikes."""
    if representation == "voxel":
        return build_voxel_grid(window, bins).values
    if representation == "spike":
        counts = event_count_frame(window).astype(np.float64)
        peak = counts.max()
        image = counts / peak if peak > 0 else counts
        spikes = rate_code(image, spike_steps, seed, 0.0, 1.0, inverted=inverted)
        return spikes.counts[None].astype(np.float64) / spike_steps
    raise ValueError(f"unknown representation {representation!r}")


def nearest_frame(frame_times: np.ndarray, t_us: int) -> int:
    return int(np.argmin(np.abs(frame_times.astype(np.int64) - int(t_us))))


def build_samples(result: SynthResult, texts: TextEmbeddingSet, config: TrainConfig, *,
                  seq_id: str, feature_sigma: float = 0.05, seed: int = 0,
                  representation: str = "voxel") -> list[Sample]:
    """Window the stream and pair each window with the frame closest to its last event."""
    samples = []
    for k, win in enumerate(window_events(result.stream, config.window_events)):
        t_end = int(win.events["t"][-1])
        f = nearest_frame(result.frame_times, t_end)
        labels = result.labels[f]
        feats = synth_features(labels, texts.dim, feature_sigma, seed=seed * 100003 + k,
                               anchors=texts)
        sp = slic(result.frames[f], config.M, config.compactness, seed=seed,
                  sigma=config.slic_sigma)
        inputs = encode_window(win, representation, config.bins, seed=seed * 100003 + k)
        samples.append(Sample(seq_id, win, inputs, result.frames[f], labels, feats, sp, t_end))
    return samples


def frame_image_path(frame_path: Path) -> Path:
    """Grayscale frame stored next to a frame feature file (same stem, ``.pgm``)."""
    return Path(frame_path).with_suffix(".pgm")


def export_samples(samples: Sequence[Sample], out_dir) -> list[ManifestSample]:
    """Write each window as EVT1 + FMAP1 + PGM + LBL1 files named ``<seq>_<k>``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for k, s in enumerate(samples):
        stem = out / f"{s.seq_id}_{k:04d}"
        ev = s.window.events
        stream = EventStream(s.window.width, s.window.height, ev.copy())
        write_event_file(stem.with_suffix(".evt"), stream)
        write_feature_map(stem.with_suffix(".fmap"), s.frame_features)
        write_pgm(stem.with_suffix(".pgm"), s.frame)
        write_labels(stem.with_suffix(".lbl"), s.labels)
        rows.append(ManifestSample(s.seq_id, stem.with_suffix(".evt"), stem.with_suffix(".fmap"),
                                   None, stem.with_suffix(".lbl")))
    return rows


def load_sample(ms: ManifestSample, config: TrainConfig, *, representation: str = "voxel",
                spike_inverted: bool = False, seed: int = 0, need_superpixels: bool = True,
                source: str = "slic") -> Sample:
    """Rebuild a :class:`Sample` from manifest files.

    Superpixels come from the mask file when ``source`` is ``mask``, otherwise
    from SLIC on the PGM frame stored beside the frame feature file.
    """
    stream = read_event_file(ms.events)
    if len(stream) == 0:
        raise ValueError(f"{ms.events}: no events")
    win = EventWindow(stream, 0, len(stream))
    inputs = encode_window(win, representation, config.bins, seed=seed, inverted=spike_inverted)
    feats = load_feature_map(ms.frame) if ms.frame is not None else None
    frame = None
    if ms.frame is not None and frame_image_path(ms.frame).exists():
        frame = read_pgm(frame_image_path(ms.frame)).astype(np.float64)
    sp = None
    if need_superpixels:
        if source == "mask":
            if ms.mask is None:
                raise ValueError(f"{ms.events}: superpixel_source=mask but no mask file")
            sp = load_mask_file(ms.mask)
        else:
            if frame is None:
                raise ValueError(f"{ms.events}: SLIC needs a frame image beside the feature file")
            sp = slic(frame, config.M, config.compactness, seed=seed, sigma=config.slic_sigma)
        if sp.labels.shape != (stream.height, stream.width):
            raise ValueError(f"{ms.events}: superpixel map and events differ in size")
    labels = read_labels(ms.label) if ms.label is not None else None
    return Sample(ms.seq_id, win, inputs, frame, labels, feats, sp, int(stream.t[-1]))


def to_train_samples(samples: Sequence[Sample], texts: TextEmbeddingSet,
                     config: TrainConfig) -> list[TrainSample]:
    out = []
    for s in samples:
        sev = group_superevents(s.superpixels, s.window, config.min_events)
        out.append(prepare_sample(s.inputs, s.superpixels, sev, s.frame_features, texts,
                                  config.pseudo_threshold, s.seq_id))
    return out


def zero_shot_report(model: DistillModel, samples: Sequence[Sample],
                     texts: TextEmbeddingSet, strict: bool = False) -> IoUReport:
    cm = ConfusionMatrix(texts.num_classes)
    for s in samples:
        pred = predict_zero_shot(encode_features(model, s.inputs), model.head_q, texts)
        cm.accumulate(pred, s.labels)
    return iou_scores(cm, strict)


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=lambda: TrainConfig(
        steps=500, lr=0.007, optimizer="adamw", schedule="cosine", batch_samples=2, M=25,
        window_events=8000, widths=(32, 32), final_relu=False, feature_dim=32, proj_dim=32,
        pseudo_threshold=0.5, slic_sigma=1.0))
    train_seeds: tuple = (1, 2, 3)
    test_seed: int = 1000
    feature_sigma: float = 0.05
    text_dim: int = 64
    text_seed: int = 7
    budgets: tuple = (0.01, 0.05, 0.10, 0.20)
    probe: ProbeConfig = field(default_factory=ProbeConfig)
    representation: str = "voxel"


@dataclass
class ExperimentReport:
    zero_shot_trained: IoUReport
    zero_shot_untrained: IoUReport
    probe_distilled: dict[float, IoUReport]
    probe_random: dict[float, IoUReport]
    trace: list[dict]
    timings: dict[str, float]
    model: DistillModel

    def metric_values(self) -> dict[str, float]:
        out = {
            "zeroshot_miou_trained": self.zero_shot_trained.miou,
            "zeroshot_miou_untrained": self.zero_shot_untrained.miou,
            "final_loss": self.trace[-1]["loss_total"] if self.trace else float("nan"),
        }
        for b, r in self.probe_distilled.items():
            out[f"probe_miou_distilled_{b:g}"] = r.miou
        for b, r in self.probe_random.items():
            out[f"probe_miou_random_{b:g}"] = r.miou
        return out


def build_experiment_data(cfg: ExperimentConfig):
    texts = random_text_embeddings(CLASS_NAMES, cfg.text_dim, cfg.text_seed)
    train_samples: list[Sample] = []
    for seed in cfg.train_seeds:
        res = generate(default_scene(seed))
        train_samples += build_samples(res, texts, cfg.train, seq_id=f"train{seed}",
                                       feature_sigma=cfg.feature_sigma, seed=seed,
                                       representation=cfg.representation)
    res = generate(default_scene(cfg.test_seed))
    test_samples = build_samples(res, texts, cfg.train, seq_id=f"test{cfg.test_seed}",
                                 feature_sigma=cfg.feature_sigma, seed=cfg.test_seed,
                                 representation=cfg.representation)
    return texts, train_samples, test_samples


def run_distillation(cfg: ExperimentConfig, texts, train_samples) -> tuple[DistillModel, TrainResult]:
    tc = cfg.train
    c_in = train_samples[0].inputs.shape[0]
    initial = init_model(c_in, texts.dim, texts.dim, widths=tc.widths,
                         feature_dim=tc.feature_dim, proj_dim=tc.proj_dim, seed=tc.seed,
                         final_relu=tc.final_relu)
    result = train(tc, to_train_samples(train_samples, texts, tc), texts, initial.copy())
    return initial, result


def probe_budgets(model: DistillModel, train_samples: Sequence[Sample],
                  test_samples: Sequence[Sample], budgets, num_classes: int,
                  config: ProbeConfig) -> dict[float, IoUReport]:
    train_feats = [encode_features(model, s.inputs) for s in train_samples]
    test_feats = [encode_features(model, s.inputs) for s in test_samples]
    test_labels = [s.labels for s in test_samples]
    out = {}
    for b in budgets:
        split = split_sequences([s.seq_id for s in train_samples], b)
        res = linear_probe([train_feats[i] for i in split.labeled],
                           [train_samples[i].labels for i in split.labeled],
                           num_classes, config, test_feats, test_labels)
        out[b] = res.eval_report
    return out


def run_experiment(cfg: ExperimentConfig | None = None) -> ExperimentReport:
    """Synthetic end-to-end run: distill, then zero-shot and linear-probe evaluation."""
    cfg = cfg or ExperimentConfig()
    timings = {}
    t = time.perf_counter()
    texts, train_samples, test_samples = build_experiment_data(cfg)
    timings["data"] = time.perf_counter() - t

    t = time.perf_counter()
    initial, result = run_distillation(cfg, texts, train_samples)
    timings["train"] = time.perf_counter() - t

    t = time.perf_counter()
    zs_trained = zero_shot_report(result.model, test_samples, texts)
    zs_untrained = zero_shot_report(initial, test_samples, texts)
    timings["zeroshot"] = time.perf_counter() - t

    t = time.perf_counter()
    probe_d = probe_budgets(result.model, train_samples, test_samples, cfg.budgets,
                            texts.num_classes, cfg.probe)
    probe_r = probe_budgets(initial, train_samples, test_samples, cfg.budgets,
                            texts.num_classes, cfg.probe)
    timings["probe"] = time.perf_counter() - t
    return ExperimentReport(zs_trained, zs_untrained, probe_d, probe_r, result.trace,
                            timings, result.model)
