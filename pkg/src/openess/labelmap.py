"""Per-pixel class maps (uint8, 255 = ignore), LBL1 files and PGM export."""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

IGNORE = 255
LBL_MAGIC = b"LBL1"
_LBL_HEADER = struct.Struct("<4sII")


class LabelFormatError(ValueError):
    pass


def check_labels(labels: np.ndarray, num_classes: int) -> None:
    labels = np.asarray(labels)
    bad = (labels != IGNORE) & (labels >= num_classes)
    if np.any(bad):
        raise ValueError(f"class id {int(labels[bad].max())} >= {num_classes}")


def dump_labels(labels: np.ndarray) -> bytes:
    labels = np.asarray(labels, dtype=np.uint8)
    h, w = labels.shape
    return _LBL_HEADER.pack(LBL_MAGIC, h, w) + labels.tobytes()


def parse_labels(data: bytes) -> np.ndarray:
    if len(data) < _LBL_HEADER.size or data[:4] != LBL_MAGIC:
        raise LabelFormatError("malformed label header")
    _, h, w = _LBL_HEADER.unpack_from(data)
    payload = data[_LBL_HEADER.size:]
    if len(payload) < h * w:
        raise LabelFormatError("truncated label map")
    return np.frombuffer(payload, dtype=np.uint8, count=h * w).reshape(h, w).copy()


def write_labels(path, labels: np.ndarray) -> None:
    Path(path).write_bytes(dump_labels(labels))


def read_labels(path) -> np.ndarray:
    return parse_labels(Path(path).read_bytes())


def write_pgm(path, image: np.ndarray) -> None:
    """Binary P5 greyscale; values are clipped to 0-255."""
    img = np.clip(np.rint(np.asarray(image, dtype=np.float64)), 0, 255).astype(np.uint8)
    h, w = img.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n255\n".encode() + img.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end])
        pos = end
    if tokens[0] != b"P5":
        raise LabelFormatError("only binary P5 PGM is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise LabelFormatError("16-bit PGM is not supported")
    pos += 1
    return np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).astype(np.float64)


def similarity_to_gray(sim: np.ndarray) -> np.ndarray:
    """Map [-1, 1] linearly onto [0, 255]."""
    return (np.clip(sim, -1.0, 1.0) + 1.0) * 127.5


def labels_to_gray(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Spread class ids over the grey range for viewing; ignore stays 0."""
    labels = np.asarray(labels)
    out = np.zeros(labels.shape)
    valid = labels != IGNORE
    out[valid] = (labels[valid].astype(np.float64) + 1) * 255.0 / max(num_classes, 1)
    return out
