"""Synthetic event-camera scenes: moving textured shapes over a background.

Frames are rendered at ``render_rate`` Hz. A pixel fires an event whenever its
log intensity has moved by at least ``threshold`` from the level stored at its
previous event; the stored level then resets to the current value.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .events import EventStream, write_event_file
from .labelmap import write_labels, write_pgm

LOG_EPS = 1e-3
TEXTURES = ("flat", "stripes_v", "stripes_h", "checker", "noise")


@dataclass
class Shape:
    class_id: int
    kind: str  # "rect" or "disk"
    center: tuple[float, float]  # (x, y) pixels at t = 0
    size: tuple[float, float]  # (w, h) for rect, (r, r) for disk
    velocity: tuple[float, float] = (0.0, 0.0)  # px/s
    intensity: float = 200.0  # 0-255
    texture: str = "flat"
    period: float = 2.0  # texture period in pixels
    contrast: float = 0.5  # relative texture modulation
    bounce: bool = True

    def half_extent(self) -> tuple[float, float]:
        if self.kind == "disk":
            return self.size[0], self.size[0]
        return self.size[0] / 2, self.size[1] / 2


@dataclass
class SceneSpec:
    width: int = 64
    height: int = 64
    duration_us: int = 2_000_000
    frame_rate: float = 50.0
    shapes: list[Shape] = field(default_factory=list)
    background_intensity: float = 80.0
    background_texture: str = "flat"
    background_period: float = 2.0
    background_contrast: float = 0.5
    background_velocity: tuple[float, float] = (0.0, 0.0)
    background_class: int = 0
    num_classes: int = 3
    threshold: float = 0.2
    seed: int = 0
    render_rate: float = 1000.0
    noise_rate: float = 0.0  # noise events per pixel per second

    def validate(self) -> "SceneSpec":
        if self.width < 1 or self.height < 1:
            raise ValueError("canvas must be at least 1x1")
        if self.threshold <= 0:
            raise ValueError("contrast threshold must be > 0")
        if self.duration_us <= 0 or self.render_rate <= 0 or self.frame_rate <= 0:
            raise ValueError("duration and rates must be positive")
        if not 0 <= self.background_class < self.num_classes:
            raise ValueError("background class out of range")
        if self.background_texture not in TEXTURES:
            raise ValueError(f"unknown texture {self.background_texture!r}")
        for i, s in enumerate(self.shapes):
            if s.kind not in ("rect", "disk"):
                raise ValueError(f"shape {i}: unknown geometry {s.kind!r}")
            if s.texture not in TEXTURES:
                raise ValueError(f"shape {i}: unknown texture {s.texture!r}")
            if not 0 <= s.class_id < self.num_classes:
                raise ValueError(f"shape {i}: class id {s.class_id} >= {self.num_classes}")
            hx, hy = s.half_extent()
            cx, cy = s.center
            if cx - hx < 0 or cy - hy < 0 or cx + hx > self.width or cy + hy > self.height:
                raise ValueError(f"shape {i} is not inside the canvas at t=0")
        return self


@dataclass
class SynthResult:
    stream: EventStream
    frame_times: np.ndarray  # us
    frames: list[np.ndarray]  # (H, W) float intensities 0-255
    labels: list[np.ndarray]  # (H, W) uint8
    spec: SceneSpec


def _reflect(p: float, lo: float, hi: float) -> float:
    span = hi - lo
    if span <= 0:
        return lo
    u = (p - lo) % (2 * span)
    return lo + (u if u <= span else 2 * span - u)


def shape_center(shape: Shape, spec: SceneSpec, t: float) -> tuple[float, float]:
    cx = shape.center[0] + shape.velocity[0] * t
    cy = shape.center[1] + shape.velocity[1] * t
    if shape.bounce:
        hx, hy = shape.half_extent()
        cx = _reflect(cx, hx, spec.width - hx)
        cy = _reflect(cy, hy, spec.height - hy)
    return cx, cy


def _texture(kind: str, lx: np.ndarray, ly: np.ndarray, period: float, contrast: float,
             table: np.ndarray) -> np.ndarray:
    half = period / 2.0
    ix = np.floor(lx / half).astype(np.int64)
    iy = np.floor(ly / half).astype(np.int64)
    if kind == "flat":
        bit = np.zeros(lx.shape, dtype=np.int64)
    elif kind == "stripes_v":
        bit = ix % 2
    elif kind == "stripes_h":
        bit = iy % 2
    elif kind == "checker":
        bit = (ix + iy) % 2
    else:
        n = table.shape[0]
        bit = table[iy % n, ix % n]
    return np.where(bit == 1, 1.0 + contrast, 1.0 - contrast) if kind != "flat" else np.ones(lx.shape)


class _Renderer:
    def __init__(self, spec: SceneSpec):
        self.spec = spec
        ys, xs = np.mgrid[0:spec.height, 0:spec.width].astype(np.float64)
        self.px = xs + 0.5
        self.py = ys + 0.5
        rng = np.random.default_rng([spec.seed, 7])
        self.tables = [rng.integers(0, 2, size=(64, 64)) for _ in range(len(spec.shapes) + 1)]

    def masks(self, t: float) -> list[np.ndarray]:
        out = []
        for s in self.spec.shapes:
            cx, cy = shape_center(s, self.spec, t)
            if s.kind == "disk":
                m = (self.px - cx) ** 2 + (self.py - cy) ** 2 < s.size[0] ** 2
            else:
                m = (np.abs(self.px - cx) < s.size[0] / 2) & (np.abs(self.py - cy) < s.size[1] / 2)
            out.append((m, cx, cy))
        return out

    def render(self, t: float) -> tuple[np.ndarray, np.ndarray]:
        spec = self.spec
        bvx, bvy = spec.background_velocity
        img = spec.background_intensity * _texture(
            spec.background_texture, self.px - bvx * t, self.py - bvy * t,
            spec.background_period, spec.background_contrast, self.tables[-1])
        lab = np.full(img.shape, spec.background_class, dtype=np.uint8)
        for i, (s, (m, cx, cy)) in enumerate(zip(spec.shapes, self.masks(t))):
            tex = _texture(s.texture, self.px - cx, self.py - cy, s.period, s.contrast,
                           self.tables[i])
            img = np.where(m, s.intensity * tex, img)
            lab[m] = s.class_id
        return np.clip(img, 0.0, 255.0), lab


def render_frame(spec: SceneSpec, t_us: float) -> tuple[np.ndarray, np.ndarray]:
    return _Renderer(spec).render(t_us * 1e-6)


def render_times(spec: SceneSpec) -> np.ndarray:
    steps = int(math.floor(spec.duration_us * 1e-6 * spec.render_rate + 1e-9))
    return np.rint(np.arange(steps + 1) * 1e6 / spec.render_rate).astype(np.int64)


def generate(spec: SceneSpec) -> SynthResult:
    spec.validate()
    r = _Renderer(spec)
    _warn_silent_shapes(spec, r)
    rng = np.random.default_rng(spec.seed)
    times = render_times(spec)
    img, _ = r.render(0.0)
    ref = np.log(img + LOG_EPS)
    noise_p = spec.noise_rate / spec.render_rate
    ts, xs, ys, ps = [], [], [], []
    for t_us in times[1:]:
        img, _ = r.render(t_us * 1e-6)
        cur = np.log(img + LOG_EPS)
        diff = cur - ref
        fire = np.abs(diff) >= spec.threshold
        pol = np.sign(diff).astype(np.int8)
        ref = np.where(fire, cur, ref)
        if noise_p > 0:
            noisy = (rng.random(fire.shape) < noise_p) & ~fire
            pol = np.where(noisy, rng.choice(np.array([-1, 1], np.int8), fire.shape), pol)
            fire = fire | noisy
        yy, xx = np.nonzero(fire)
        if yy.size:
            ts.append(np.full(yy.size, t_us, np.int64))
            xs.append(xx)
            ys.append(yy)
            ps.append(pol[yy, xx])
    cat = (lambda a: np.concatenate(a)) if ts else (lambda a: np.zeros(0, np.int64))
    stream = EventStream.from_arrays(spec.width, spec.height, cat(ts), cat(xs), cat(ys), cat(ps))

    n_frames = int(math.floor(spec.duration_us * 1e-6 * spec.frame_rate + 1e-9)) + 1
    frame_times = np.rint(np.arange(n_frames) * 1e6 / spec.frame_rate).astype(np.int64)
    frames, labels = [], []
    for t_us in frame_times:
        img, lab = r.render(t_us * 1e-6)
        frames.append(img)
        labels.append(lab)
    return SynthResult(stream, frame_times, frames, labels, spec)


def _warn_silent_shapes(spec: SceneSpec, r: _Renderer) -> None:
    probe = np.linspace(0.0, spec.duration_us * 1e-6, 64)
    for i, s in enumerate(spec.shapes):
        if s.velocity == (0.0, 0.0) or s.velocity == (0, 0):
            warnings.warn(f"shape {i} is static and cannot produce events", stacklevel=3)
            continue
        if all(not r.masks(t)[i][0].any() for t in probe[1:]):
            warnings.warn(f"shape {i} leaves the canvas for the whole duration", stacklevel=3)


def replay_check(result: SynthResult) -> bool:
    """Re-render and confirm each event saw a log change of at least the threshold."""
    spec = result.spec
    r = _Renderer(spec)
    ref = np.log(r.render(0.0)[0] + LOG_EPS)
    ev = result.stream.events
    times = render_times(spec)
    pos = 0
    for t_us in times[1:]:
        cur = np.log(r.render(t_us * 1e-6)[0] + LOG_EPS)
        end = pos
        while end < len(ev) and ev["t"][end] == t_us:
            end += 1
        if end > pos:
            x = ev["x"][pos:end].astype(int)
            y = ev["y"][pos:end].astype(int)
            d = cur[y, x] - ref[y, x]
            if np.any(np.abs(d) < spec.threshold) or np.any(np.sign(d) != ev["p"][pos:end]):
                return False
            ref[y, x] = cur[y, x]
        pos = end
    return pos == len(ev)


def default_scene(seed: int = 0, width: int = 64, height: int = 64,
                  duration_us: int = 2_000_000, threshold: float = 0.2,
                  object_speed: tuple[float, float] = (25.0, 40.0),
                  background_speed: float = 30.0) -> SceneSpec:
    """Three classes: textured background (0), striped boxes (1), striped disks (2).

    Layout and velocities are drawn from ``seed``; each class has its own
    texture orientation so the classes are separable from local event patterns.
    """
    rng = np.random.default_rng([seed, 11])
    shapes = []
    for cls, kind, tex in ((1, "rect", "stripes_v"), (2, "disk", "stripes_h")):
        for _ in range(2):
            if kind == "rect":
                w, h = rng.uniform(12, 20, size=2)
                size = (float(w), float(h))
            else:
                r = float(rng.uniform(6, 10))
                size = (r, r)
            hx = size[0] if kind == "disk" else size[0] / 2
            hy = size[0] if kind == "disk" else size[1] / 2
            cx = float(rng.uniform(hx, width - hx))
            cy = float(rng.uniform(hy, height - hy))
            speed = float(rng.uniform(*object_speed))
            angle = float(rng.uniform(-0.5, 0.5))
            if tex == "stripes_v":
                v = (speed * math.cos(angle) * rng.choice([-1, 1]), speed * math.sin(angle))
            else:
                v = (speed * math.sin(angle), speed * math.cos(angle) * rng.choice([-1, 1]))
            shapes.append(Shape(cls, kind, (cx, cy), size, (float(v[0]), float(v[1])),
                                intensity=float(rng.uniform(150, 220)), texture=tex,
                                period=2.0, contrast=0.4))
    bg_angle = float(rng.uniform(0, 2 * math.pi))
    return SceneSpec(
        width=width, height=height, duration_us=duration_us, frame_rate=100.0,
        shapes=shapes, background_intensity=90.0, background_texture="checker",
        background_period=2.0, background_contrast=0.4,
        background_velocity=(background_speed * math.cos(bg_angle),
                             background_speed * math.sin(bg_angle)),
        background_class=0, num_classes=3, threshold=threshold, seed=seed,
    )


def write_run(result: SynthResult, out_dir, prefix: str = "") -> Path:
    """Write EVT1 events, PGM frames and LBL1 labels plus a ``kind path t_us`` manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = []
    evt = out / f"{prefix}events.evt"
    write_event_file(evt, result.stream)
    lines.append(f"events {evt.name} 0")
    for k, (t, img, lab) in enumerate(zip(result.frame_times, result.frames, result.labels)):
        fp = out / f"{prefix}frame_{k:04d}.pgm"
        lp = out / f"{prefix}label_{k:04d}.lbl"
        write_pgm(fp, img)
        write_labels(lp, lab)
        lines.append(f"frame {fp.name} {int(t)}")
        lines.append(f"label {lp.name} {int(t)}")
    manifest = out / f"{prefix}manifest.txt"
    manifest.write_text("\n".join(lines) + "\n")
    return manifest
