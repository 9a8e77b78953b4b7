"""Pixel partitions (SLIC or ingested masks) and their event groupings."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .events import EventWindow

UNASSIGNED = 0xFFFFFFFF
MASK_MAGIC = b"MASK1"
_MASK_HEADER = struct.Struct("<5sII")


class MaskFormatError(ValueError):
    pass


@dataclass
class SuperpixelMap:
    labels: np.ndarray  # (H, W) uint32, UNASSIGNED for uncovered pixels

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.uint32)

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def num_segments(self) -> int:
        assigned = self.labels[self.labels != UNASSIGNED]
        return int(assigned.max()) + 1 if assigned.size else 0

    def sizes(self) -> np.ndarray:
        assigned = self.labels[self.labels != UNASSIGNED].astype(np.int64)
        return np.bincount(assigned, minlength=self.num_segments)

    def segment_pixels(self) -> list[np.ndarray]:
        """Flattened pixel indices of every segment, in segment order."""
        flat = self.labels.ravel()
        order = np.argsort(flat, kind="stable")
        sizes = self.sizes()
        bounds = np.concatenate([[0], np.cumsum(sizes)])
        return [order[bounds[k]:bounds[k + 1]] for k in range(len(sizes))]


@dataclass
class SupereventMap:
    members: list[np.ndarray]  # event indices (into the window) per segment
    pixels: list[np.ndarray]  # unique flattened event-occupied pixels per segment
    unassigned: int
    min_events: int = 1

    @property
    def num_segments(self) -> int:
        return len(self.members)

    @property
    def counts(self) -> np.ndarray:
        return np.array([len(m) for m in self.members], dtype=np.int64)

    @property
    def active(self) -> np.ndarray:
        return self.counts >= self.min_events


def _grid_shape(height: int, width: int, n_segments: int) -> tuple[int, int]:
    rows = max(1, int(round(np.sqrt(n_segments * height / width))))
    rows = min(rows, height, n_segments)
    cols = max(1, min(width, int(round(n_segments / rows))))
    return rows, cols


def default_segment_count(height: int, width: int) -> int:
    """100 segments for DSEC-sized frames (640x440 and up), 25 for anything smaller."""
    return 100 if height * width >= 640 * 440 else 25


def slic(image: np.ndarray, n_segments: int, compactness: float = 10.0,
         iters: int = 10, seed: int = 0, jitter: float = 0.0,
         sigma: float = 0.0) -> SuperpixelMap:
    """Simple linear iterative clustering on a gray or multi-channel frame.

    Colour distance is Euclidean in the image's own units, so the default
    compactness suits 0-255 style intensities. ``sigma`` > 0 smooths each
    channel with a Gaussian first. ``jitter`` (fraction of the grid step)
    perturbs the initial centres using ``seed``.
    """
    img = np.asarray(image, dtype=np.float64)
    if img.size == 0:
        raise ValueError("empty image")
    if img.ndim == 2:
        img = img[:, :, None]
    if sigma > 0:
        img = ndimage.gaussian_filter(img, sigma=(sigma, sigma, 0), mode="nearest")
    height, width = img.shape[:2]
    if n_segments < 1 or n_segments > height * width:
        raise ValueError(f"n_segments must be in [1, {height * width}]")
    if iters < 1:
        raise ValueError("iters must be >= 1")
    step = np.sqrt(height * width / n_segments)

    rows, cols = _grid_shape(height, width, n_segments)
    cy = (np.arange(rows) + 0.5) * height / rows - 0.5
    cx = (np.arange(cols) + 0.5) * width / cols - 0.5
    cy, cx = (a.ravel() for a in np.meshgrid(cy, cx, indexing="ij"))
    if jitter > 0:
        rng = np.random.default_rng(seed)
        cy = np.clip(cy + rng.uniform(-jitter, jitter, cy.shape) * step, 0, height - 1)
        cx = np.clip(cx + rng.uniform(-jitter, jitter, cx.shape) * step, 0, width - 1)
    cy, cx = _perturb_to_low_gradient(img, cy, cx)
    colors = img[np.rint(cy).astype(int), np.rint(cx).astype(int)]

    yy, xx = np.mgrid[0:height, 0:width].astype(np.float64)
    ratio = compactness / step
    labels = np.full((height, width), -1, dtype=np.int64)
    for _ in range(iters):
        dist = np.full((height, width), np.inf)
        labels.fill(-1)
        for k in range(len(cy)):
            y0, y1 = max(int(np.floor(cy[k] - step)), 0), min(int(np.ceil(cy[k] + step)) + 1, height)
            x0, x1 = max(int(np.floor(cx[k] - step)), 0), min(int(np.ceil(cx[k] + step)) + 1, width)
            d = _distance(img[y0:y1, x0:x1], yy[y0:y1, x0:x1], xx[y0:y1, x0:x1],
                          colors[k], cy[k], cx[k], ratio)
            sub = dist[y0:y1, x0:x1]
            better = d < sub
            sub[better] = d[better]
            labels[y0:y1, x0:x1][better] = k
        orphan = labels < 0
        if orphan.any():
            labels[orphan] = _nearest_center(img[orphan], yy[orphan], xx[orphan],
                                             colors, cy, cx, ratio)
        cy, cx, colors = _update_centers(img, yy, xx, labels, cy, cx, colors)

    return SuperpixelMap(_enforce_connectivity(labels))


def _distance(pixels, yy, xx, color, cy, cx, ratio):
    dc2 = np.sum((pixels - color) ** 2, axis=-1)
    ds2 = (yy - cy) ** 2 + (xx - cx) ** 2
    return np.sqrt(dc2 + ds2 * ratio ** 2)


def _nearest_center(pixels, yy, xx, colors, cy, cx, ratio):
    dc2 = np.sum((pixels[:, None, :] - colors[None]) ** 2, axis=-1)
    ds2 = (yy[:, None] - cy[None]) ** 2 + (xx[:, None] - cx[None]) ** 2
    return np.argmin(dc2 + ds2 * ratio ** 2, axis=1)


def _perturb_to_low_gradient(img, cy, cx):
    """Move each centre to the lowest-gradient pixel of its 3x3 neighbourhood."""
    height, width = img.shape[:2]
    if height < 3 or width < 3:
        return cy, cx
    pad = np.pad(img, ((1, 1), (1, 1), (0, 0)), mode="edge")
    grad = (np.sum((pad[2:, 1:-1] - pad[:-2, 1:-1]) ** 2, axis=-1)
            + np.sum((pad[1:-1, 2:] - pad[1:-1, :-2]) ** 2, axis=-1))
    new_y, new_x = cy.copy(), cx.copy()
    for k in range(len(cy)):
        iy, ix = int(np.rint(cy[k])), int(np.rint(cx[k]))
        best = grad[iy, ix]
        for dy in (-1, 0, 1):
            for dx in (-1, 0, 1):
                y, x = iy + dy, ix + dx
                if 0 <= y < height and 0 <= x < width and grad[y, x] < best:
                    best = grad[y, x]
                    new_y[k], new_x[k] = y, x
    return new_y, new_x


def _update_centers(img, yy, xx, labels, cy, cx, colors):
    k = len(cy)
    flat = labels.ravel()
    counts = np.bincount(flat, minlength=k).astype(np.float64)
    has = counts > 0
    cy, cx, colors = cy.copy(), cx.copy(), colors.copy()
    cy[has] = np.bincount(flat, weights=yy.ravel(), minlength=k)[has] / counts[has]
    cx[has] = np.bincount(flat, weights=xx.ravel(), minlength=k)[has] / counts[has]
    pix = img.reshape(-1, img.shape[-1])
    for c in range(img.shape[-1]):
        colors[has, c] = np.bincount(flat, weights=pix[:, c], minlength=k)[has] / counts[has]
    return cy, cx, colors


def _components(labels: np.ndarray) -> np.ndarray:
    """4-connected components of equal-label regions, numbered from 0."""
    comp = np.zeros(labels.shape, dtype=np.int64)
    structure = ndimage.generate_binary_structure(2, 1)
    offset = 0
    for lab in np.unique(labels):
        c, n = ndimage.label(labels == lab, structure=structure)
        inside = c > 0
        comp[inside] = c[inside] - 1 + offset
        offset += n
    return comp


def _enforce_connectivity(labels: np.ndarray) -> np.ndarray:
    """Relabel every non-largest component of a label to its dominant neighbour.

    The dominant neighbour is the adjacent surviving label sharing the most
    boundary edges with the orphan; ties go to the lower label.
    """
    labels = labels.astype(np.int64).copy()
    while True:
        comp = _components(labels)
        n = int(comp.max()) + 1
        sizes = np.bincount(comp.ravel(), minlength=n)
        comp_label = np.zeros(n, dtype=np.int64)
        comp_label[comp.ravel()] = labels.ravel()
        # largest component per label survives (lowest component id on ties)
        order = np.lexsort((np.arange(n), -sizes, comp_label))
        first = np.ones(n, dtype=bool)
        first[1:] = comp_label[order[1:]] != comp_label[order[:-1]]
        orphan = np.ones(n, dtype=bool)
        orphan[order[first]] = False
        if not orphan.any():
            break
        a = np.concatenate([comp[:, :-1].ravel(), comp[:, 1:].ravel(),
                            comp[:-1, :].ravel(), comp[1:, :].ravel()])
        b = np.concatenate([comp[:, 1:].ravel(), comp[:, :-1].ravel(),
                            comp[1:, :].ravel(), comp[:-1, :].ravel()])
        # merge only into surviving components so every round makes progress
        keep = orphan[a] & ~orphan[b]
        a, nb = a[keep], comp_label[b[keep]]
        pairs, counts = np.unique(np.stack([a, nb]), axis=1, return_counts=True)
        # per orphan: highest count, then lowest neighbour label
        pick = np.lexsort((pairs[1], -counts, pairs[0]))
        pairs = pairs[:, pick]
        head = np.ones(pairs.shape[1], dtype=bool)
        head[1:] = pairs[0, 1:] != pairs[0, :-1]
        target = comp_label.copy()
        target[pairs[0, head]] = pairs[1, head]
        labels = target[comp]
    _, dense = np.unique(labels, return_inverse=True)
    return dense.reshape(labels.shape).astype(np.uint32)


def segment_boundaries(labels: np.ndarray) -> np.ndarray:
    """Pixels with a 4-neighbour carrying a different label."""
    lab = np.asarray(labels)
    edge = np.zeros(lab.shape, dtype=bool)
    dy = lab[1:, :] != lab[:-1, :]
    dx = lab[:, 1:] != lab[:, :-1]
    edge[1:, :] |= dy
    edge[:-1, :] |= dy
    edge[:, 1:] |= dx
    edge[:, :-1] |= dx
    return edge


def parse_mask(data: bytes, expected_segments: int | None = None) -> SuperpixelMap:
    """Decode MASK1 bytes. ``expected_segments`` turns on strict label checking."""
    if len(data) < _MASK_HEADER.size or data[:5] != MASK_MAGIC:
        raise MaskFormatError("malformed mask header")
    _, height, width = _MASK_HEADER.unpack_from(data)
    payload = data[_MASK_HEADER.size:]
    if len(payload) < 4 * height * width:
        raise MaskFormatError("truncated mask")
    labels = np.frombuffer(payload, dtype="<u4", count=height * width).reshape(height, width)
    sp = SuperpixelMap(labels.copy())
    if expected_segments is not None:
        assigned = sp.labels[sp.labels != UNASSIGNED]
        if assigned.size and assigned.max() >= expected_segments:
            raise MaskFormatError(
                f"label {int(assigned.max())} >= declared segment count {expected_segments}")
    return sp


def load_mask_file(path, expected_segments: int | None = None) -> SuperpixelMap:
    return parse_mask(Path(path).read_bytes(), expected_segments)


def dump_mask(sp: SuperpixelMap) -> bytes:
    return (_MASK_HEADER.pack(MASK_MAGIC, sp.height, sp.width)
            + np.ascontiguousarray(sp.labels, dtype="<u4").tobytes())


def write_mask_file(path, sp: SuperpixelMap) -> None:
    Path(path).write_bytes(dump_mask(sp))


def select_largest(sp: SuperpixelMap, m: int) -> SuperpixelMap:
    """Keep the ``m`` largest segments (ties by lower id), relabelled by rank."""
    sizes = sp.sizes()
    order = np.lexsort((np.arange(len(sizes)), -sizes))[:m]
    order = order[sizes[order] > 0]
    remap = np.full(len(sizes), UNASSIGNED, dtype=np.uint32)
    remap[order] = np.arange(len(order), dtype=np.uint32)
    out = np.full(sp.labels.shape, UNASSIGNED, dtype=np.uint32)
    assigned = sp.labels != UNASSIGNED
    out[assigned] = remap[sp.labels[assigned]]
    return SuperpixelMap(out)


def group_superevents(sp: SuperpixelMap, window: EventWindow,
                      min_events: int = 1) -> SupereventMap:
    if (sp.height, sp.width) != (window.height, window.width):
        raise ValueError(
            f"superpixel map is {sp.height}x{sp.width}, sensor is {window.height}x{window.width}")
    ev = window.events
    pix = ev["y"].astype(np.int64) * sp.width + ev["x"].astype(np.int64)
    seg = sp.labels.ravel()[pix]
    m = sp.num_segments
    assigned = seg != UNASSIGNED
    idx = np.flatnonzero(assigned)
    seg_a = seg[assigned].astype(np.int64)
    order = np.argsort(seg_a, kind="stable")
    bounds = np.concatenate([[0], np.cumsum(np.bincount(seg_a, minlength=m))])
    members = [idx[order[bounds[k]:bounds[k + 1]]] for k in range(m)]
    pixels = [np.unique(pix[mem]) for mem in members]
    return SupereventMap(members, pixels, int(len(ev) - idx.size), min_events)
