"""Command-line entry point: ``openess <subcommand> [options]``.

Every subcommand writes its artifacts under ``--out`` and prints a
``key=value`` summary on stdout. Per-sample work runs on a thread pool
bounded by ``OPENESS_THREADS``; results are merged in manifest order.
"""
from __future__ import annotations

import argparse
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import __version__, plots
from .distill import (LOSS_MODES, NotEnoughClasses, TrainConfig, TrainingError, encode_features, init_model,
                      load_model, save_model, train)
from .embedding import (EmbeddingFormatError, FeatureMap, load_text_embeddings,
                        random_text_embeddings, write_feature_map, write_text_embeddings)
from .encoder import CheckpointError
from .events import EventFormatError
from .labelmap import (IGNORE, LabelFormatError, labels_to_gray, read_labels, read_pgm,
                       similarity_to_gray, write_labels, write_pgm)
from .manifest import (DatasetManifest, ManifestSample, format_manifest, read_manifest,
                       split_sequences)
from .metrics import ConfusionMatrix, format_report, iou_scores, key_values
from .openvocab import ProbeConfig, attention_map, linear_probe, predict_zero_shot
from .pipeline import (CLASS_NAMES, REPRESENTATIONS, build_samples, export_samples,
                       frame_image_path, load_sample, to_train_samples)
from .superpixel import MaskFormatError, default_segment_count, slic, write_mask_file
from .synth import default_scene, generate, write_run

log = logging.getLogger("openess")

DEFAULT_BUDGETS = "0.01,0.05,0.1,0.2"
EXPECTED_ERRORS = (ValueError, OSError, EventFormatError, MaskFormatError, EmbeddingFormatError,
                   LabelFormatError, CheckpointError, TrainingError, NotEnoughClasses)


def worker_count() -> int:
    raw = os.environ.get("OPENESS_THREADS", "")
    if not raw:
        return 1
    try:
        n = int(raw)
    except ValueError:
        raise ValueError(f"OPENESS_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise ValueError("OPENESS_THREADS must be >= 1")
    return n


def pool_map(fn, items) -> list:
    """Ordered map over ``items`` with at most ``OPENESS_THREADS`` workers."""
    items = list(items)
    n = worker_count()
    if n == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=n) as ex:
        return list(ex.map(fn, items))


def emit(pairs: dict) -> None:
    for k, v in pairs.items():
        if isinstance(v, float):
            v = repr(v)
        print(f"{k}={v}")


def out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def train_config(args) -> TrainConfig:
    overrides = {
        "seed": args.seed,
        "M": getattr(args, "segments", None),
        "loss_mode": getattr(args, "loss_mode", None),
        "normalize": False if getattr(args, "no_normalize", False) else None,
    }
    if args.config:
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig(**{k: v for k, v in overrides.items() if v is not None}).validate()


def class_names(texts, num_classes: int) -> list[str]:
    if texts is not None:
        return list(texts.names)
    return [str(i) for i in range(num_classes)]


def manifest_samples(args, config: TrainConfig, need_superpixels: bool):
    manifest = read_manifest(args.manifest)
    if not len(manifest):
        raise ValueError(f"{args.manifest}: empty manifest")

    def load(item):
        i, ms = item
        return load_sample(ms, config, representation=args.representation,
                           spike_inverted=args.spike_inverted, seed=config.seed * 100003 + i,
                           need_superpixels=need_superpixels, source=config.superpixel_source)

    return manifest, pool_map(load, enumerate(manifest.samples))


# ------------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    out = out_dir(args)
    texts = random_text_embeddings(CLASS_NAMES, args.text_dim, args.text_seed)
    write_text_embeddings(out / "texts.temb", texts)
    config = TrainConfig(window_events=args.window_events, seed=args.seed)
    rows: list[ManifestSample] = []
    n_events = 0
    for i in range(args.sequences):
        seed = args.seed + i
        seq = f"seq{seed}"
        result = generate(default_scene(seed, duration_us=args.duration_us))
        n_events += len(result.stream)
        write_run(result, out / "raw", prefix=f"{seq}_")
        samples = build_samples(result, texts, config, seq_id=seq,
                                feature_sigma=args.feature_sigma, seed=seed)
        rows += export_samples(samples, out / "samples")
    manifest = out / "dataset.txt"
    manifest.write_text(format_manifest(DatasetManifest(rows), out))
    emit({"sequences": args.sequences, "samples": len(rows), "events": n_events,
          "manifest": manifest, "texts": out / "texts.temb"})
    return 0


def cmd_encode(args) -> int:
    out = out_dir(args)
    config = train_config(args)
    manifest, samples = manifest_samples(args, config, need_superpixels=False)

    def write(item):
        ms, s = item
        path = out / (Path(ms.events).stem + ".in.fmap")
        write_feature_map(path, FeatureMap(s.inputs))
        return float(np.abs(s.inputs).sum())

    mass = pool_map(write, zip(manifest.samples, samples))
    emit({"samples": len(samples), "representation": args.representation,
          "channels": samples[0].inputs.shape[0], "mean_abs_mass": float(np.mean(mass))})
    return 0


def cmd_slic(args) -> int:
    out = out_dir(args)
    if args.image:
        frames = [(Path(args.image).stem, read_pgm(args.image), None)]
        manifest = None
    else:
        manifest = read_manifest(args.manifest)
        frames = []
        for ms in manifest.samples:
            if ms.frame is None:
                raise ValueError(f"{ms.events}: no frame file for SLIC")
            frames.append((Path(ms.events).stem, read_pgm(frame_image_path(ms.frame)), ms))

    def count(img) -> int:
        return args.segments or default_segment_count(*img.shape[:2])

    def run(item):
        stem, img, _ = item
        sp = slic(img, count(img), args.compactness, seed=args.seed, sigma=args.sigma)
        path = out / f"{stem}.mask"
        write_mask_file(path, sp)
        return path, sp

    results = pool_map(run, frames)
    if manifest is not None:
        rows = [ManifestSample(ms.seq_id, ms.events, ms.frame, path, ms.label)
                for (_, _, ms), (path, _) in zip(frames, results)]
        (out / "dataset_masks.txt").write_text(format_manifest(DatasetManifest(rows)))
    plots.superpixel_overlay(frames[0][1], results[0][1].labels, out / "superpixels.png")
    counts = [sp.num_segments for _, sp in results]
    emit({"images": len(results), "segments_requested": count(frames[0][1]),
          "segments_mean": float(np.mean(counts)), "segments_min": int(min(counts)),
          "segments_max": int(max(counts))})
    return 0


def cmd_distill(args) -> int:
    out = out_dir(args)
    config = train_config(args)
    texts = load_text_embeddings(args.texts)
    manifest, samples = manifest_samples(args, config, need_superpixels=True)
    if any(s.frame_features is None for s in samples):
        raise ValueError("distillation needs a frame feature file for every sample")
    result = train(config, to_train_samples(samples, texts, config), texts)
    save_model(out / "model", result.model)
    (out / "trace.csv").write_text(result.trace_csv())
    (out / "config.txt").write_text(config.to_text())
    plots.loss_curve(result.trace, out / "loss.png")
    last = result.trace[-1] if result.trace else {}
    emit({"samples": len(samples), "steps": config.steps, "model": out / "model",
          **{k: float(v) for k, v in last.items() if k != "step"}})
    return 0


def _metrics_outputs(out: Path, cm: ConfusionMatrix, names, strict: bool, stem: str) -> dict:
    report = iou_scores(cm, strict)
    (out / f"{stem}.csv").write_text(format_report(report, names))
    plots.iou_bars(report.iou, names, out / f"{stem}.png", title=f"mIoU {report.miou:.3f}")
    print(key_values(report), end="")
    return {"classes_scored": int(np.sum(~np.isnan(report.iou)))}


def cmd_zeroshot(args) -> int:
    out = out_dir(args)
    config = train_config(args)
    texts = load_text_embeddings(args.texts)
    model = load_model(args.model)
    manifest, samples = manifest_samples(args, config, need_superpixels=False)

    def run(item):
        ms, s = item
        pred = predict_zero_shot(encode_features(model, s.inputs), model.head_q, texts)
        stem = Path(ms.events).stem
        write_labels(out / f"{stem}.pred.lbl", pred)
        write_pgm(out / f"{stem}.pred.pgm", labels_to_gray(pred, texts.num_classes))
        return pred

    preds = pool_map(run, zip(manifest.samples, samples))
    first = samples[0]
    plots.prediction_panel(first.frame, first.labels, preds[0], texts.num_classes,
                           out / "prediction.png")
    summary = {"samples": len(samples)}
    labelled = [(p, s.labels) for p, s in zip(preds, samples) if s.labels is not None]
    if labelled:
        cm = ConfusionMatrix(texts.num_classes)
        for p, gt in labelled:
            cm.accumulate(p, gt)
        summary.update(_metrics_outputs(out, cm, texts.names, args.strict_miou, "metrics"))
    emit(summary)
    return 0


def random_like(model, c_in: int, config: TrainConfig):
    """Untrained encoder with the same architecture as ``model`` (or as ``config``)."""
    if model is None:
        return init_model(c_in, 1, 1, widths=config.widths, feature_dim=config.feature_dim,
                          proj_dim=1, seed=config.seed, final_relu=config.final_relu)
    enc = model.encoder
    return init_model(enc.c_in, 1, 1, widths=tuple(l.c_out for l in enc.layers[:-1]),
                      feature_dim=enc.c_out, proj_dim=1, seed=config.seed,
                      final_relu=enc.layers[-1].relu)


def _probe_features(model, samples):
    return [encode_features(model, s.inputs) for s in samples]


def cmd_probe(args) -> int:
    out = out_dir(args)
    config = train_config(args)
    manifest, samples = manifest_samples(args, config, need_superpixels=False)
    if args.eval_manifest:
        ev_args = argparse.Namespace(**{**vars(args), "manifest": args.eval_manifest})
        _, eval_samples = manifest_samples(ev_args, config, need_superpixels=False)
    else:
        eval_samples = samples
    for s in (*samples, *eval_samples):
        if s.labels is None:
            raise ValueError("linear probing needs a label file for every sample")
    budgets = [float(b) for b in args.budget.split(",")]
    num_classes = args.num_classes or int(max(
        int(s.labels[s.labels != IGNORE].max(initial=0)) for s in samples)) + 1
    models = {}
    if args.model:
        models["distilled"] = load_model(args.model)
    if args.baseline or not args.model:
        models["random"] = random_like(models.get("distilled"), samples[0].inputs.shape[0],
                                       config)
    probe_cfg = ProbeConfig(steps=args.probe_steps)
    seqs = [s.seq_id for s in samples]
    rows = ["budget,encoder,labeled,miou,acc"]
    series: dict[str, list[float]] = {}
    summary = {}
    for name, model in models.items():
        train_f = _probe_features(model, samples)
        eval_f = _probe_features(model, eval_samples)
        for b in budgets:
            split = split_sequences(seqs, b)
            res = linear_probe([train_f[i] for i in split.labeled],
                               [samples[i].labels for i in split.labeled], num_classes,
                               probe_cfg, eval_f, [s.labels for s in eval_samples])
            r = res.eval_report
            rows.append(f"{b!r},{name},{len(split.labeled)},{r.miou!r},{r.acc!r}")
            series.setdefault(name, []).append(r.miou)
            summary[f"miou_{name}_{b:g}"] = r.miou
    (out / "probe.csv").write_text("\n".join(rows) + "\n")
    plots.budget_curve(budgets, series, out / "budget.png")
    emit({"train_samples": len(samples), "eval_samples": len(eval_samples), **summary})
    return 0


def _load_label_pairs(pred: Path, gt: Path) -> list[tuple[Path, Path]]:
    if pred.is_dir() != gt.is_dir():
        raise ValueError("--pred and --gt must both be files or both be directories")
    if not pred.is_dir():
        return [(pred, gt)]
    pairs = []
    for p in sorted(pred.glob("*.lbl")):
        stem = p.name.removesuffix(".lbl").removesuffix(".pred")
        g = gt / f"{stem}.lbl"
        if not g.exists():
            raise ValueError(f"no ground truth for {p.name} in {gt}")
        pairs.append((p, g))
    if not pairs:
        raise ValueError(f"no .lbl files in {pred}")
    return pairs


def cmd_eval(args) -> int:
    out = out_dir(args)
    texts = load_text_embeddings(args.texts) if args.texts else None
    pairs = _load_label_pairs(Path(args.pred), Path(args.gt))
    loaded = [(read_labels(p), read_labels(g)) for p, g in pairs]
    z = args.num_classes or (texts.num_classes if texts else None)
    if z is None:
        z = 1 + max(int(a[a != IGNORE].max(initial=0)) for pair in loaded for a in pair)
    cm = ConfusionMatrix(z)
    for p, g in loaded:
        cm.accumulate(p, g)
    summary = _metrics_outputs(out, cm, class_names(texts, z), args.strict_miou, "metrics")
    emit({"pairs": len(pairs), **summary})
    return 0


def cmd_attention(args) -> int:
    out = out_dir(args)
    config = train_config(args)
    texts = load_text_embeddings(args.texts)
    model = load_model(args.model)
    manifest, samples = manifest_samples(args, config, need_superpixels=False)
    names = args.classes.split(",") if args.classes else list(texts.names)
    idx = [texts.index(n) for n in names]
    peaks = {n: [] for n in names}
    for k, (ms, s) in enumerate(zip(manifest.samples, samples)):
        feats = encode_features(model, s.inputs)
        maps = {}
        for n, i in zip(names, idx):
            sim = attention_map(feats, model.head_q, texts.vectors[i])
            write_pgm(out / f"{Path(ms.events).stem}.{n}.pgm", similarity_to_gray(sim))
            maps[n] = sim
            peaks[n].append(float(sim.max()))
        if k == 0:
            plots.attention_panel(maps, out / "attention.png", frame=s.frame)
    emit({"samples": len(samples), **{f"max_sim_{n}": float(np.mean(v)) for n, v in peaks.items()}})
    return 0


# ------------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="openess", description="Open-vocabulary event segmentation by cross-modal distillation.")
    parser.add_argument("--version", action="version", version=f"openess {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def common(p, manifest=True, config=True):
        p.add_argument("--seed", type=int, default=None if config else 0,
                       help="random seed (overrides the config file)")
        p.add_argument("--out", required=True, help="output directory")
        if manifest:
            p.add_argument("--manifest", required=True, help="dataset manifest")
            p.add_argument("--representation", choices=REPRESENTATIONS, default="voxel")
            p.add_argument("--spike-inverted", action="store_true",
                           help="rate coding fires when the draw exceeds the value")
        if config:
            p.add_argument("--config", help="key=value training config file")
            p.add_argument("--segments", type=int, help="superpixel count M")
        return p

    p = common(sub.add_parser("synth", help="generate a synthetic dataset"), manifest=False,
               config=False)
    p.add_argument("--sequences", type=int, default=1)
    p.add_argument("--duration-us", type=int, default=2_000_000)
    p.add_argument("--window-events", type=int, default=8000)
    p.add_argument("--feature-sigma", type=float, default=0.05)
    p.add_argument("--text-dim", type=int, default=64)
    p.add_argument("--text-seed", type=int, default=7,
                   help="class text embeddings; keep fixed across train and test sets")
    p.set_defaults(func=cmd_synth)

    p = common(sub.add_parser("encode", help="voxel grids or spike counts as FMAP1 files"))
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("slic", help="SLIC superpixels as MASK1 files")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--image", help="single PGM frame")
    p.add_argument("--segments", type=int,
                   help="superpixel count M (default 100 for DSEC-sized frames, else 25)")
    p.add_argument("--compactness", type=float, default=10.0)
    p.add_argument("--sigma", type=float, default=0.0, help="Gaussian pre-smoothing")
    p.set_defaults(func=cmd_slic)

    p = common(sub.add_parser("distill", help="train the event encoder"))
    p.add_argument("--texts", required=True, help="TEMB1 class embeddings")
    p.add_argument("--loss-mode", choices=LOSS_MODES)
    p.add_argument("--no-normalize", action="store_true", help="skip L2 normalization")
    p.set_defaults(func=cmd_distill)

    p = common(sub.add_parser("zeroshot", help="text-driven per-pixel prediction"))
    p.add_argument("--model", required=True)
    p.add_argument("--texts", required=True)
    p.add_argument("--strict-miou", action="store_true", help="score absent classes as 0")
    p.set_defaults(func=cmd_zeroshot)

    p = common(sub.add_parser("probe", help="linear probing under annotation budgets"))
    p.add_argument("--model", help="distilled model directory")
    p.add_argument("--baseline", action="store_true",
                   help="also probe a randomly initialized encoder")
    p.add_argument("--eval-manifest", help="held-out manifest (default: training manifest)")
    p.add_argument("--budget", default=DEFAULT_BUDGETS, help="comma-separated fractions")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--probe-steps", type=int, default=300)
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("eval", help="IoU/mIoU/Acc of predicted label maps")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pred", required=True, help="LBL1 file or directory")
    p.add_argument("--gt", required=True, help="LBL1 file or directory")
    p.add_argument("--texts", help="TEMB1 file for class names")
    p.add_argument("--num-classes", type=int)
    p.add_argument("--strict-miou", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("attention", help="language-guided similarity maps"))
    p.add_argument("--model", required=True)
    p.add_argument("--texts", required=True)
    p.add_argument("--classes", help="comma-separated class names (default: all)")
    p.set_defaults(func=cmd_attention)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except EXPECTED_ERRORS as exc:
        print(f"openess {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
