"""Open-vocabulary prediction from event features, attention maps and linear probing."""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .distill import ProjectionHead
from .embedding import FeatureMap, TextEmbeddingSet
from .labelmap import IGNORE
from .metrics import ConfusionMatrix, IoUReport, iou_scores

log = logging.getLogger(__name__)


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    return np.divide(x, norms, out=np.zeros_like(x), where=norms > 0)


def text_similarity(event_features: FeatureMap, head_q: ProjectionHead,
                    text_vectors: np.ndarray) -> np.ndarray:
    """Cosine between Q-projected pixel features and each text row -> (H*W, Z)."""
    if head_q.d_in != event_features.channels:
        raise ValueError(f"Q head expects {head_q.d_in} channels, got {event_features.channels}")
    text_vectors = np.atleast_2d(text_vectors)
    if head_q.d_out != text_vectors.shape[1]:
        raise ValueError(f"Q head emits {head_q.d_out} dims, texts have {text_vectors.shape[1]}")
    q = _unit_rows(head_q(event_features.pixels()))
    return q @ _unit_rows(text_vectors).T


def predict_zero_shot(event_features: FeatureMap, head_q: ProjectionHead,
                      texts: TextEmbeddingSet) -> np.ndarray:
    """Per-pixel argmax cosine; ties go to the lowest class index."""
    cos = text_similarity(event_features, head_q, texts.vectors)
    _, h, w = event_features.shape
    return np.argmax(cos, axis=1).astype(np.uint8).reshape(h, w)


def attention_map(event_features: FeatureMap, head_q: ProjectionHead,
                  text: np.ndarray) -> np.ndarray:
    """Cosine similarity to one text vector per pixel, in [-1, 1]; zero features give 0."""
    cos = text_similarity(event_features, head_q, np.asarray(text, dtype=np.float64))[:, 0]
    _, h, w = event_features.shape
    return np.clip(cos, -1.0, 1.0).reshape(h, w)


@dataclass
class LinearHead:
    weight: np.ndarray  # (Z, D)
    bias: np.ndarray  # (Z,)
    mean: np.ndarray | None = None  # input standardization, fitted on training pixels
    scale: np.ndarray | None = None

    def logits(self, x: np.ndarray) -> np.ndarray:
        if self.mean is not None:
            x = (x - self.mean) / self.scale
        return x @ self.weight.T + self.bias

    def predict(self, features: FeatureMap) -> np.ndarray:
        _, h, w = features.shape
        return np.argmax(self.logits(features.pixels()), axis=1).astype(np.uint8).reshape(h, w)


@dataclass
class ProbeConfig:
    steps: int = 300
    lr: float = 0.5
    standardize: bool = True
    weight_decay: float = 0.0


@dataclass
class ProbeResult:
    head: LinearHead
    train_report: IoUReport | None
    eval_report: IoUReport | None = None
    losses: list[float] = field(default_factory=list)


def cross_entropy(weight: np.ndarray, bias: np.ndarray, x: np.ndarray,
                  y: np.ndarray) -> tuple[float, np.ndarray, np.ndarray]:
    """Mean softmax cross-entropy and its gradient w.r.t. weight and bias."""
    logits = x @ weight.T + bias
    m = logits.max(axis=1, keepdims=True)
    lse = m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))
    rows = np.arange(len(y))
    loss = float(np.mean(lse[:, 0] - logits[rows, y]))
    d = np.exp(logits - lse)
    d[rows, y] -= 1.0
    d /= len(y)
    return loss, d.T @ x, d.sum(axis=0)


def _stack(features: Sequence[FeatureMap], labels: Sequence[np.ndarray]):
    xs, ys = [], []
    for f, lab in zip(features, labels, strict=True):
        lab = np.asarray(lab).ravel()
        if f.pixels().shape[0] != lab.size:
            raise ValueError("labels are not aligned with features")
        keep = lab != IGNORE
        xs.append(f.pixels()[keep])
        ys.append(lab[keep].astype(np.int64))
    return np.concatenate(xs), np.concatenate(ys)


def evaluate(head: LinearHead, features: Sequence[FeatureMap], labels: Sequence[np.ndarray],
             num_classes: int) -> IoUReport:
    cm = ConfusionMatrix(num_classes)
    for f, lab in zip(features, labels, strict=True):
        cm.accumulate(head.predict(f), lab)
    return iou_scores(cm)


def linear_probe(features: Sequence[FeatureMap], labels: Sequence[np.ndarray],
                 num_classes: int, config: ProbeConfig | None = None,
                 eval_features: Sequence[FeatureMap] | None = None,
                 eval_labels: Sequence[np.ndarray] | None = None) -> ProbeResult:
    """Pixel-wise multinomial logistic regression on frozen features by full-batch descent.

    The head starts at zero, so zero steps predict class 0 everywhere.
    """
    config = config or ProbeConfig()
    x, y = _stack(features, labels)
    if y.size == 0:
        raise ValueError("no labelled pixels")
    if y.max() >= num_classes:
        raise ValueError(f"class id {int(y.max())} >= {num_classes}")
    missing = sorted(set(range(num_classes)) - set(np.unique(y).tolist()))
    if missing:
        log.warning("classes %s absent from probe training labels", missing)
    d = x.shape[1]
    mean = scale = None
    if config.standardize:
        mean = x.mean(axis=0)
        scale = x.std(axis=0)
        scale[scale < 1e-12] = 1.0
        x = (x - mean) / scale
    w = np.zeros((num_classes, d))
    b = np.zeros(num_classes)
    losses = []
    for _ in range(config.steps):
        loss, dw, db = cross_entropy(w, b, x, y)
        if config.weight_decay:
            dw = dw + config.weight_decay * w
        losses.append(loss)
        w -= config.lr * dw
        b -= config.lr * db
    head = LinearHead(w, b, mean, scale)
    train_report = evaluate(head, features, labels, num_classes)
    eval_report = None
    if eval_features is not None:
        eval_report = evaluate(head, eval_features, eval_labels, num_classes)
    return ProbeResult(head, train_report, eval_report, losses)
