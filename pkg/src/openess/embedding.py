"""Dense feature maps and class text embeddings: file formats and synthetic stand-ins."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .labelmap import IGNORE

FMAP_MAGIC = b"FMAP1"
TEMB_MAGIC = b"TEMB1"
_FMAP_HEADER = struct.Struct("<5sIII")
_TEMB_HEADER = struct.Struct("<5sII")

DEFAULT_TEXT_DIM = 64


class EmbeddingFormatError(ValueError):
    pass


@dataclass
class FeatureMap:
    values: np.ndarray  # (D, H, W)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 3 or self.values.shape[0] < 1:
            raise ValueError(f"feature map must be (D, H, W) with D >= 1, got {self.values.shape}")

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.values.shape

    def pixels(self) -> np.ndarray:
        """(H*W, D) view, row-major over pixels."""
        d = self.values.shape[0]
        return self.values.reshape(d, -1).T


@dataclass
class TextEmbeddingSet:
    names: list[str]
    vectors: np.ndarray  # (Z, D_t), unit rows

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or len(self.names) != self.vectors.shape[0]:
            raise ValueError("need one vector per class name")
        if len(set(self.names)) != len(self.names):
            raise ValueError("class names must be unique")
        norms = np.linalg.norm(self.vectors, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-6):
            raise ValueError("text embeddings must be unit norm")

    @property
    def num_classes(self) -> int:
        return len(self.names)

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def index(self, name: str) -> int:
        return self.names.index(name)


def parse_feature_map(data: bytes, strict: bool = True) -> FeatureMap:
    if len(data) < _FMAP_HEADER.size or data[:5] != FMAP_MAGIC:
        raise EmbeddingFormatError("malformed feature map header")
    _, d, h, w = _FMAP_HEADER.unpack_from(data)
    n = d * h * w
    payload = data[_FMAP_HEADER.size:]
    if len(payload) < 4 * n:
        raise EmbeddingFormatError("truncated feature map")
    values = np.frombuffer(payload, dtype="<f4", count=n).reshape(d, h, w)
    if strict and not np.all(np.isfinite(values)):
        raise EmbeddingFormatError("non-finite feature values")
    return FeatureMap(values.astype(np.float64))


def dump_feature_map(fmap: FeatureMap) -> bytes:
    d, h, w = fmap.shape
    return _FMAP_HEADER.pack(FMAP_MAGIC, d, h, w) + fmap.values.astype("<f4").tobytes()


def load_feature_map(path, strict: bool = True) -> FeatureMap:
    return parse_feature_map(Path(path).read_bytes(), strict)


def write_feature_map(path, fmap: FeatureMap) -> None:
    Path(path).write_bytes(dump_feature_map(fmap))


def parse_text_embeddings(data: bytes) -> TextEmbeddingSet:
    if len(data) < _TEMB_HEADER.size or data[:5] != TEMB_MAGIC:
        raise EmbeddingFormatError("malformed text embedding header")
    _, z, dim = _TEMB_HEADER.unpack_from(data)
    pos = _TEMB_HEADER.size
    names, rows = [], []
    for _ in range(z):
        if pos + 2 > len(data):
            raise EmbeddingFormatError("truncated text embeddings")
        (n,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if pos + n + 4 * dim > len(data):
            raise EmbeddingFormatError("truncated text embeddings")
        names.append(data[pos:pos + n].decode("utf-8"))
        pos += n
        rows.append(np.frombuffer(data, dtype="<f4", count=dim, offset=pos))
        pos += 4 * dim
    vecs = np.array(rows, dtype=np.float64).reshape(z, dim)
    # stored as float32; renormalize to restore unit norm in float64
    return TextEmbeddingSet(names, vecs / np.linalg.norm(vecs, axis=1, keepdims=True))


def dump_text_embeddings(texts: TextEmbeddingSet) -> bytes:
    out = [_TEMB_HEADER.pack(TEMB_MAGIC, texts.num_classes, texts.dim)]
    for name, vec in zip(texts.names, texts.vectors):
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw + vec.astype("<f4").tobytes())
    return b"".join(out)


def load_text_embeddings(path) -> TextEmbeddingSet:
    return parse_text_embeddings(Path(path).read_bytes())


def write_text_embeddings(path, texts: TextEmbeddingSet) -> None:
    Path(path).write_bytes(dump_text_embeddings(texts))


def average_prompt_embeddings(per_prompt: Sequence[tuple[str, np.ndarray]]) -> TextEmbeddingSet:
    """Mean of each class's prompt vectors, renormalized. Classes keep first-seen order."""
    groups: dict[str, list[np.ndarray]] = {}
    for name, vec in per_prompt:
        groups.setdefault(name, []).append(np.asarray(vec, dtype=np.float64))
    if not groups:
        raise ValueError("no prompts given")
    dims = {v.shape for vs in groups.values() for v in vs}
    if len(dims) != 1:
        raise ValueError("prompt vectors differ in dimension")
    names, rows = [], []
    for name, vecs in groups.items():
        mean = np.mean(vecs, axis=0)
        norm = np.linalg.norm(mean)
        if norm < 1e-12:
            raise ValueError(f"degenerate class embedding for {name!r}")
        names.append(name)
        rows.append(mean / norm)
    return TextEmbeddingSet(names, np.array(rows))


def random_text_embeddings(names: Sequence[str], dim: int = DEFAULT_TEXT_DIM,
                           seed: int = 0) -> TextEmbeddingSet:
    """Seeded orthonormal class vectors (needs len(names) <= dim)."""
    if len(names) > dim:
        raise ValueError("cannot draw more orthonormal vectors than dimensions")
    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((dim, len(names))))
    q = q * np.sign(np.diag(r))
    return TextEmbeddingSet(list(names), q.T.copy())


def synth_features(labels: np.ndarray, dim: int, noise_sigma: float, seed: int,
                   anchors: TextEmbeddingSet | None = None) -> FeatureMap:
    """Class anchor per pixel plus isotropic Gaussian noise.

    Without ``anchors`` each class gets a seeded random unit vector. Ignore
    pixels carry noise only.
    """
    labels = np.asarray(labels)
    rng = np.random.default_rng(seed)
    valid = labels != IGNORE
    ids = labels[valid].astype(np.int64)
    if anchors is not None:
        if anchors.dim != dim:
            raise ValueError(f"anchor dimension {anchors.dim} != {dim}")
        table = anchors.vectors
    else:
        n = int(ids.max()) + 1 if ids.size else 0
        raw = rng.standard_normal((n, dim))
        table = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    if ids.size and ids.max() >= len(table):
        raise ValueError(f"unknown class id {int(ids.max())} in labels")
    h, w = labels.shape
    values = np.zeros((h * w, dim))
    values[valid.ravel()] = table[ids]
    values += noise_sigma * rng.standard_normal((h * w, dim))
    return FeatureMap(values.T.reshape(dim, h, w))
