"""Frame-to-event contrastive distillation with text-to-event regularization.

All gradients are analytic. The training step chains them through the
projection heads and into ``encoder_backward``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Sequence

import numpy as np

from .embedding import FeatureMap, TextEmbeddingSet
from .encoder import (ConvLayer, EncoderParams, encoder_backward, encoder_forward,
                      init_encoder, load_encoder, parse_encoder, save_encoder)
from .labelmap import IGNORE
from .superpixel import SuperpixelMap, SupereventMap

LOSS_MODES = ("standard", "paper-literal")
TRACE_COLUMNS = ("step", "loss_total", "loss_f2e", "loss_t2e", "pos_sim", "neg_sim")


class TrainingError(RuntimeError):
    pass


class NotEnoughClasses(ValueError):
    pass


@dataclass
class ProjectionHead:
    weight: np.ndarray  # (D_in, D_out)
    bias: np.ndarray  # (D_out,)

    def __post_init__(self):
        self.weight = np.asarray(self.weight, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.bias.shape != (self.weight.shape[1],):
            raise ValueError("bias must have D_out entries")

    @property
    def d_in(self) -> int:
        return self.weight.shape[0]

    @property
    def d_out(self) -> int:
        return self.weight.shape[1]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight + self.bias

    @classmethod
    def identity(cls, dim: int) -> "ProjectionHead":
        return cls(np.eye(dim), np.zeros(dim))

    def copy(self) -> "ProjectionHead":
        return ProjectionHead(self.weight.copy(), self.bias.copy())


def init_head(d_in: int, d_out: int, seed: int) -> ProjectionHead:
    rng = np.random.default_rng(seed)
    bound = 1.0 / math.sqrt(d_in)
    return ProjectionHead(rng.uniform(-bound, bound, (d_in, d_out)), np.zeros(d_out))


@dataclass
class LossReport:
    loss: float
    grads: dict[str, np.ndarray]
    pos_sim: float = float("nan")
    neg_sim: float = float("nan")
    per_item: np.ndarray | None = None
    skipped: int = 0


def l2_normalize(z: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    norms = np.linalg.norm(z, axis=-1, keepdims=True)
    if np.any(norms == 0):
        raise ValueError("zero vector before normalization")
    return z / norms, norms


def l2_normalize_backward(y: np.ndarray, norms: np.ndarray, dy: np.ndarray) -> np.ndarray:
    return (dy - y * np.sum(y * dy, axis=-1, keepdims=True)) / norms


def segment_means(x: np.ndarray, groups: Sequence[np.ndarray]) -> np.ndarray:
    """Row means of ``x`` over each index group -> (len(groups), D)."""
    if not groups:
        return np.zeros((0, x.shape[1]))
    sizes = np.array([len(g) for g in groups])
    if np.any(sizes == 0):
        raise ValueError("cannot pool an empty segment")
    seg = np.repeat(np.arange(len(groups)), sizes)
    sums = np.zeros((len(groups), x.shape[1]))
    np.add.at(sums, seg, x[np.concatenate(groups)])
    return sums / sizes[:, None]


def segment_means_backward(d_means: np.ndarray, groups: Sequence[np.ndarray],
                           n_rows: int) -> np.ndarray:
    dx = np.zeros((n_rows, d_means.shape[1]))
    if not groups:
        return dx
    sizes = np.array([len(g) for g in groups])
    seg = np.repeat(np.arange(len(groups)), sizes)
    np.add.at(dx, np.concatenate(groups), (d_means / sizes[:, None])[seg])
    return dx


def _pool(features: FeatureMap, groups, head: ProjectionHead, normalize: bool) -> np.ndarray:
    if features.channels != head.d_in:
        raise ValueError(f"head expects {head.d_in} channels, features have {features.channels}")
    # the head is affine, so projecting the mean equals the mean of projections
    z = head(segment_means(features.pixels(), groups))
    return l2_normalize(z)[0] if normalize else z


def pool_superevent(features: FeatureMap, sev: SupereventMap, head: ProjectionHead,
                    segments: Sequence[int] | None = None, normalize: bool = True) -> np.ndarray:
    """Projected mean over event-occupied pixels of each requested superevent.

    Defaults to every active segment in id order.
    """
    active = sev.active
    if segments is None:
        segments = np.flatnonzero(active)
    for k in segments:
        if not active[k]:
            raise ValueError(f"superevent {k} is inactive")
    return _pool(features, [sev.pixels[k] for k in segments], head, normalize)


def pool_superpixel(features: FeatureMap, sp: SuperpixelMap, head: ProjectionHead,
                    segments: Sequence[int] | None = None, normalize: bool = True) -> np.ndarray:
    pixels = sp.segment_pixels()
    if segments is None:
        segments = [k for k, p in enumerate(pixels) if len(p)]
    for k in segments:
        if not len(pixels[k]):
            raise ValueError(f"superpixel {k} is empty")
    return _pool(features, [pixels[k] for k in segments], head, normalize)


def _log_softmax_rows(s: np.ndarray) -> np.ndarray:
    m = np.max(s, axis=1, keepdims=True)
    return s - m - np.log(np.sum(np.exp(s - m), axis=1, keepdims=True))


def f2e_loss(evt: np.ndarray, img: np.ndarray, tau: float = 0.07,
             mode: str = "standard") -> LossReport:
    """InfoNCE between paired superevent and superpixel embeddings.

    Row ``i`` of ``evt`` is the anchor, row ``i`` of ``img`` its positive and
    every other row of ``img`` a negative. ``paper-literal`` leaves the
    positive out of the denominator. Gradients are w.r.t. ``evt`` and ``img``.
    """
    evt = np.asarray(evt, dtype=np.float64)
    img = np.asarray(img, dtype=np.float64)
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    if mode not in LOSS_MODES:
        raise ValueError(f"unknown loss mode {mode!r}")
    n = evt.shape[0]
    if n < 2 or img.shape != evt.shape:
        raise ValueError("need at least 2 aligned pairs")
    sim = evt @ img.T
    if not np.all(np.isfinite(sim)):
        raise ValueError("non-finite similarity")
    logits = sim / tau
    eye = np.eye(n, dtype=bool)
    denom = np.where(eye, -np.inf, logits) if mode == "paper-literal" else logits
    m = np.max(denom, axis=1, keepdims=True)
    lse = m + np.log(np.sum(np.exp(denom - m), axis=1, keepdims=True))
    per_item = lse[:, 0] - np.diag(logits)
    probs = np.exp(denom - lse)
    d_sim = (probs - eye) / (n * tau)
    off = sim[~eye]
    return LossReport(
        loss=float(per_item.mean()),
        grads={"evt": d_sim @ img, "img": d_sim.T @ evt},
        pos_sim=float(np.mean(np.diag(sim))),
        neg_sim=float(off.mean()),
        per_item=per_item,
    )


def class_infonce(h: np.ndarray, classes: np.ndarray, texts: np.ndarray,
                  tau: float) -> LossReport:
    """Class-level InfoNCE of pooled embeddings ``h`` against all class texts."""
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    sim = h @ texts.T
    if not np.all(np.isfinite(sim)):
        raise ValueError("non-finite similarity")
    log_p = _log_softmax_rows(sim / tau)
    rows = np.arange(len(classes))
    per_item = -log_p[rows, classes]
    target = np.zeros_like(sim)
    target[rows, classes] = 1.0
    d_sim = (np.exp(log_p) - target) / (len(classes) * tau)
    neg = np.ones_like(sim, dtype=bool)
    neg[rows, classes] = False
    return LossReport(
        loss=float(per_item.mean()),
        grads={"h": d_sim @ texts},
        pos_sim=float(sim[rows, classes].mean()),
        neg_sim=float(sim[neg].mean()) if neg.any() else float("nan"),
        per_item=per_item,
    )


def pseudo_label(frame_features: FeatureMap, texts: TextEmbeddingSet,
                 threshold: float = 0.0) -> np.ndarray:
    """Per-pixel argmax cosine against the class texts; below ``threshold`` -> ignore."""
    if frame_features.channels != texts.dim:
        raise ValueError(f"feature dim {frame_features.channels} != text dim {texts.dim}")
    x = frame_features.pixels()
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    cos = np.divide(x, norms, out=np.zeros_like(x), where=norms > 0) @ texts.vectors.T
    best = np.argmax(cos, axis=1)
    score = cos[np.arange(len(best)), best]
    out = np.where(score >= threshold, best, IGNORE).astype(np.uint8)
    _, h, w = frame_features.shape
    return out.reshape(h, w)


def class_groups(plabels: np.ndarray, occupied: np.ndarray | None,
                 num_classes: int) -> tuple[list[int], list[np.ndarray], int]:
    """Pixel groups per pseudo-labelled class; classes without occupied pixels are skipped."""
    flat = np.asarray(plabels).ravel()
    occ = np.ones(flat.shape, bool) if occupied is None else np.asarray(occupied).ravel()
    present, groups, skipped = [], [], 0
    for z in range(num_classes):
        in_class = flat == z
        if not in_class.any():
            continue
        idx = np.flatnonzero(in_class & occ)
        if idx.size == 0:
            skipped += 1
            continue
        present.append(z)
        groups.append(idx)
    return present, groups, skipped


def t2e_loss(event_features: FeatureMap, plabels: np.ndarray, texts: TextEmbeddingSet,
             head_q: ProjectionHead, tau: float = 0.07, occupied: np.ndarray | None = None,
             normalize: bool = True) -> LossReport:
    """Class-pooled event embeddings against frozen class texts.

    Gradients: ``head_q.weight``, ``head_q.bias`` and ``features`` (D, H, W).
    """
    if tau <= 0:
        raise ValueError("temperature must be > 0")
    if head_q.d_out != texts.dim:
        raise ValueError("Q head output must match the text dimension")
    present, groups, skipped = class_groups(plabels, occupied, texts.num_classes)
    if len(present) < 2:
        raise NotEnoughClasses(f"{len(present)} class(es) present, need 2")
    x = event_features.pixels()
    pooled = segment_means(x, groups)
    z = head_q(pooled)
    h, norms = l2_normalize(z) if normalize else (z, None)
    rep = class_infonce(h, np.array(present), texts.vectors, tau)
    dz = l2_normalize_backward(h, norms, rep.grads["h"]) if normalize else rep.grads["h"]
    dx = segment_means_backward(dz @ head_q.weight.T, groups, x.shape[0])
    rep.grads = {
        "head_q.weight": pooled.T @ dz,
        "head_q.bias": dz.sum(axis=0),
        "features": dx.T.reshape(event_features.shape),
    }
    rep.skipped = skipped
    return rep


# --------------------------------------------------------------------------- model


@dataclass
class DistillModel:
    encoder: EncoderParams
    head_e: ProjectionHead
    head_f: ProjectionHead
    head_q: ProjectionHead

    def parameters(self) -> dict[str, np.ndarray]:
        out = dict(self.encoder.arrays())
        for name in ("head_e", "head_f", "head_q"):
            head = getattr(self, name)
            out[f"{name}.weight"] = head.weight
            out[f"{name}.bias"] = head.bias
        return out

    def copy(self) -> "DistillModel":
        return DistillModel(self.encoder.copy(), self.head_e.copy(),
                            self.head_f.copy(), self.head_q.copy())


def init_model(c_in: int, frame_dim: int, text_dim: int, *, widths=(32, 32),
               feature_dim: int = 64, proj_dim: int = 64, seed: int = 0,
               final_relu: bool = True) -> DistillModel:
    ss = np.random.SeedSequence(seed).spawn(4)
    s = [int(c.generate_state(1)[0]) for c in ss]
    return DistillModel(
        init_encoder(c_in, widths, feature_dim, seed=s[0], final_relu=final_relu),
        init_head(feature_dim, proj_dim, s[1]),
        init_head(frame_dim, proj_dim, s[2]),
        init_head(feature_dim, text_dim, s[3]),
    )


def _head_layer(head: ProjectionHead) -> ConvLayer:
    return ConvLayer(head.weight.T[:, :, None, None].copy(), head.bias.copy(), relu=False)


def _layer_head(layer: ConvLayer) -> ProjectionHead:
    return ProjectionHead(layer.weight[:, :, 0, 0].T.copy(), layer.bias.copy())


def save_model(directory, model: DistillModel) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_encoder(d / "encoder.enc", model.encoder)
    for name in ("head_e", "head_f", "head_q"):
        save_encoder(d / f"{name}.enc", EncoderParams([_head_layer(getattr(model, name))]))


def load_model(directory) -> DistillModel:
    d = Path(directory)
    heads = [_layer_head(parse_encoder((d / f"{n}.enc").read_bytes()).layers[0])
             for n in ("head_e", "head_f", "head_q")]
    return DistillModel(load_encoder(d / "encoder.enc"), *heads)


# ----------------------------------------------------------------------- optimizers


class SGD:
    def __init__(self, lr: float, momentum: float = 0.9, weight_decay: float = 0.0):
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
             lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        for name, p in params.items():
            g = grads[name]
            if self.weight_decay:
                g = g + self.weight_decay * p
            v = self.velocity.get(name)
            v = g.copy() if v is None else self.momentum * v + g
            self.velocity[name] = v
            p -= lr * v


class AdamW:
    def __init__(self, lr: float, betas=(0.9, 0.999), eps: float = 1e-8,
                 weight_decay: float = 0.0):
        self.lr, self.betas, self.eps, self.weight_decay = lr, betas, eps, weight_decay
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t = 0

    def step(self, params, grads, lr: float | None = None) -> None:
        lr = self.lr if lr is None else lr
        self.t += 1
        b1, b2 = self.betas
        for name, p in params.items():
            g = grads[name]
            m = b1 * self.m.get(name, np.zeros_like(p)) + (1 - b1) * g
            v = b2 * self.v.get(name, np.zeros_like(p)) + (1 - b2) * g * g
            self.m[name], self.v[name] = m, v
            m_hat = m / (1 - b1 ** self.t)
            v_hat = v / (1 - b2 ** self.t)
            if self.weight_decay:
                p *= 1 - lr * self.weight_decay
            p -= lr * m_hat / (np.sqrt(v_hat) + self.eps)


def cosine_lr(base: float, step: int, total: int, floor: float = 0.0) -> float:
    if total <= 1:
        return base
    return floor + 0.5 * (base - floor) * (1 + math.cos(math.pi * step / (total - 1)))


# --------------------------------------------------------------------------- config


@dataclass
class TrainConfig:
    tau1: float = 0.07
    tau2: float = 0.07
    alpha: float = 1.0
    lr: float = 0.01
    momentum: float = 0.9
    steps: int = 200
    batch_pairs: int = 0  # 0 = every active pair in the step's samples
    batch_samples: int = 1
    seed: int = 0
    loss_mode: str = "standard"
    normalize: bool = True
    superpixel_source: str = "slic"
    M: int = 25
    optimizer: str = "sgd"
    schedule: str = "constant"
    weight_decay: float = 0.0
    pseudo_threshold: float = 0.0
    min_events: int = 1
    feature_dim: int = 64
    proj_dim: int = 64
    widths: tuple = (32, 32)
    final_relu: bool = True
    bins: int = 5
    window_events: int = 4000
    compactness: float = 10.0
    slic_sigma: float = 0.0
    clip_grad: float = 0.0

    def validate(self) -> "TrainConfig":
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise ValueError("temperatures tau1 and tau2 must be > 0")
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.steps < 0 or self.batch_samples < 1 or self.batch_pairs < 0:
            raise ValueError("steps >= 0, batch_samples >= 1 and batch_pairs >= 0 required")
        if self.batch_pairs == 1:
            raise ValueError("batch_pairs must be 0 or >= 2")
        if self.loss_mode not in LOSS_MODES:
            raise ValueError(f"loss_mode must be one of {LOSS_MODES}")
        if self.superpixel_source not in ("slic", "mask"):
            raise ValueError("superpixel_source must be slic or mask")
        if self.optimizer not in ("sgd", "adamw"):
            raise ValueError("optimizer must be sgd or adamw")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError("schedule must be constant or cosine")
        if self.M < 1 or self.bins < 1 or self.window_events < 1:
            raise ValueError("M, bins and window_events must be >= 1")
        return self

    @classmethod
    def from_text(cls, text: str, **overrides) -> "TrainConfig":
        types = {f.name: f.type for f in fields(cls)}
        values: dict = {}
        for lineno, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"config line {lineno}: expected key=value")
            key, val = (s.strip() for s in line.split("=", 1))
            if key not in types:
                raise ValueError(f"config line {lineno}: unknown key {key!r}")
            values[key] = _coerce(types[key], val, key)
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**values).validate()

    @classmethod
    def from_file(cls, path, **overrides) -> "TrainConfig":
        return cls.from_text(Path(path).read_text(), **overrides)

    def to_text(self) -> str:
        lines = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, tuple):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{f.name}={v}")
        return "\n".join(lines) + "\n"


def _coerce(kind, raw: str, key: str):
    kind = str(kind)
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "tuple":
            return tuple(int(v) for v in raw.split(",") if v.strip())
    except ValueError as exc:
        raise ValueError(f"bad value for {key}: {raw!r}") from exc
    return raw


# ------------------------------------------------------------------------- training


@dataclass
class TrainSample:
    """One aligned (event representation, frame) pair ready for distillation."""

    inputs: np.ndarray  # (C, H, W) event representation
    occupied: np.ndarray  # (H, W) bool, pixels with at least one event
    event_groups: list[np.ndarray]  # occupied pixels of each active superevent
    frame_groups: list[np.ndarray]  # all pixels of the matching superpixel
    frame_pooled: np.ndarray  # (K, D_frame) raw frame feature means, frozen
    plabels: np.ndarray  # (H, W) pseudo labels from frame features vs texts
    seq_id: str = ""


def prepare_sample(inputs: np.ndarray, sp: SuperpixelMap, sev: SupereventMap,
                   frame_features: FeatureMap, texts: TextEmbeddingSet,
                   threshold: float = 0.0, seq_id: str = "") -> TrainSample:
    h, w = sp.height, sp.width
    occupied = np.zeros(h * w, dtype=bool)
    for px in sev.pixels:
        occupied[px] = True
    seg_pixels = sp.segment_pixels()
    keep = [k for k in np.flatnonzero(sev.active) if len(seg_pixels[k])]
    frame_groups = [seg_pixels[k] for k in keep]
    return TrainSample(
        inputs=np.asarray(inputs, dtype=np.float64),
        occupied=occupied.reshape(h, w),
        event_groups=[sev.pixels[k] for k in keep],
        frame_groups=frame_groups,
        frame_pooled=segment_means(frame_features.pixels(), frame_groups),
        plabels=pseudo_label(frame_features, texts, threshold),
        seq_id=seq_id,
    )


@dataclass
class TrainResult:
    model: DistillModel
    trace: list[dict] = field(default_factory=list)

    def trace_csv(self) -> str:
        rows = [",".join(TRACE_COLUMNS)]
        for r in self.trace:
            rows.append(",".join(
                str(r[c]) if c == "step" else repr(float(r[c])) for c in TRACE_COLUMNS))
        return "\n".join(rows) + "\n"


def loss_and_grads(model: DistillModel, samples: Sequence[TrainSample],
                   texts: TextEmbeddingSet, config: TrainConfig,
                   pair_rng: np.random.Generator | None = None) -> tuple[LossReport, dict]:
    """Combined objective on a batch of samples and its gradient for every parameter."""
    feats, acts, xs = [], [], []
    for s in samples:
        f, a = encoder_forward(model.encoder, s.inputs)
        feats.append(f)
        acts.append(a)
        xs.append(f.reshape(f.shape[0], -1).T)
    n_pix = [x.shape[0] for x in xs]
    dxs = [np.zeros_like(x) for x in xs]
    grads = {k: np.zeros_like(v) for k, v in model.parameters().items()}

    # F2E over all active pairs of the batch
    ev_raw, owner, groups = [], [], []
    for i, (s, x) in enumerate(zip(samples, xs)):
        if s.event_groups:
            ev_raw.append(segment_means(x, s.event_groups))
            owner.extend([i] * len(s.event_groups))
            groups.extend(s.event_groups)
    if not ev_raw:
        raise TrainingError("empty batch: no active superevents")
    ev_raw = np.concatenate(ev_raw)
    img_raw = np.concatenate([s.frame_pooled for s in samples if s.event_groups])
    owner = np.array(owner)
    sel = np.arange(len(ev_raw))
    if config.batch_pairs and len(sel) > config.batch_pairs:
        rng = pair_rng if pair_rng is not None else np.random.default_rng(config.seed)
        sel = np.sort(rng.choice(len(sel), config.batch_pairs, replace=False))
    if len(sel) < 2:
        raise TrainingError("empty batch: fewer than 2 superevent/superpixel pairs")
    ev_raw, img_raw = ev_raw[sel], img_raw[sel]
    groups = [groups[k] for k in sel]
    owner = owner[sel]

    z_e = model.head_e(ev_raw)
    z_f = model.head_f(img_raw)
    if config.normalize:
        f_e, n_e = l2_normalize(z_e)
        f_f, n_f = l2_normalize(z_f)
    else:
        f_e, f_f = z_e, z_f
    f2e = f2e_loss(f_e, f_f, config.tau1, config.loss_mode)
    dz_e, dz_f = f2e.grads["evt"], f2e.grads["img"]
    if config.normalize:
        dz_e = l2_normalize_backward(f_e, n_e, dz_e)
        dz_f = l2_normalize_backward(f_f, n_f, dz_f)
    grads["head_e.weight"] += ev_raw.T @ dz_e
    grads["head_e.bias"] += dz_e.sum(axis=0)
    grads["head_f.weight"] += img_raw.T @ dz_f
    grads["head_f.bias"] += dz_f.sum(axis=0)
    d_ev_raw = dz_e @ model.head_e.weight.T
    for i in range(len(samples)):
        mine = np.flatnonzero(owner == i)
        if mine.size:
            dxs[i] += segment_means_backward(d_ev_raw[mine], [groups[k] for k in mine], n_pix[i])

    # T2E per sample, averaged over samples with >= 2 usable classes
    t2e_reports = []
    for i, s in enumerate(samples):
        fm = FeatureMap(feats[i])
        try:
            rep = t2e_loss(fm, s.plabels, texts, model.head_q, config.tau2,
                           occupied=s.occupied, normalize=config.normalize)
        except NotEnoughClasses:
            continue
        t2e_reports.append((i, rep))
    t2e_value = 0.0
    if t2e_reports:
        scale = config.alpha / len(t2e_reports)
        t2e_value = float(np.mean([r.loss for _, r in t2e_reports]))
        for i, rep in t2e_reports:
            grads["head_q.weight"] += scale * rep.grads["head_q.weight"]
            grads["head_q.bias"] += scale * rep.grads["head_q.bias"]
            g = rep.grads["features"]
            dxs[i] += scale * g.reshape(g.shape[0], -1).T

    for i, (s, a) in enumerate(zip(samples, acts)):
        d = dxs[i].T.reshape(feats[i].shape)
        layer_grads, _ = encoder_backward(model.encoder, a, d)
        for j, (dw, db) in enumerate(layer_grads):
            grads[f"conv{j}.weight"] += dw
            grads[f"conv{j}.bias"] += db

    total = f2e.loss + config.alpha * t2e_value
    report = LossReport(total, grads, f2e.pos_sim, f2e.neg_sim)
    return report, {"loss_f2e": f2e.loss, "loss_t2e": t2e_value}


def train(config: TrainConfig, samples: Sequence[TrainSample], texts: TextEmbeddingSet,
          model: DistillModel | None = None) -> TrainResult:
    """SGD/AdamW on L = L_f2e + alpha * L_t2e; deterministic given seed and sample order."""
    config.validate()
    if not samples:
        raise TrainingError("empty dataset")
    if model is None:
        model = init_model(samples[0].inputs.shape[0], samples[0].frame_pooled.shape[1],
                           texts.dim, widths=config.widths, feature_dim=config.feature_dim,
                           proj_dim=config.proj_dim, seed=config.seed,
                           final_relu=config.final_relu)
    params = model.parameters()
    opt = (SGD(config.lr, config.momentum, config.weight_decay) if config.optimizer == "sgd"
           else AdamW(config.lr, weight_decay=config.weight_decay))
    rng = np.random.default_rng(config.seed)
    order: list[int] = []
    result = TrainResult(model)
    for step in range(config.steps):
        batch = []
        while len(batch) < config.batch_samples:
            if not order:
                order = list(rng.permutation(len(samples)))
            batch.append(samples[order.pop(0)])
        report, parts = loss_and_grads(model, batch, texts, config,
                                       np.random.default_rng([config.seed, step]))
        if not math.isfinite(report.loss):
            raise TrainingError(
                f"non-finite loss at step {step}: f2e={parts['loss_f2e']} "
                f"t2e={parts['loss_t2e']} pos_sim={report.pos_sim} neg_sim={report.neg_sim}")
        grads = report.grads
        if config.clip_grad > 0:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > config.clip_grad:
                grads = {k: g * (config.clip_grad / norm) for k, g in grads.items()}
        lr = cosine_lr(config.lr, step, config.steps) if config.schedule == "cosine" else config.lr
        opt.step(params, grads, lr)
        result.trace.append({"step": step, "loss_total": report.loss, **parts,
                             "pos_sim": report.pos_sim, "neg_sim": report.neg_sim})
    return result


def encode_features(model: DistillModel, inputs: np.ndarray) -> FeatureMap:
    return FeatureMap(encoder_forward(model.encoder, inputs)[0])
