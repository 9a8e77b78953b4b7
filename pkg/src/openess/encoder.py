"""Trainable event encoder: a stride-1 stack of 3x3 convolutions with ReLU.

Forward caches im2col buffers so the backward pass is two matrix products
per layer. Everything runs in float64 with a fixed accumulation order.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

ENC_MAGIC = b"ENC1"
DEFAULT_WIDTHS = (32, 32)
DEFAULT_FEATURE_DIM = 64


class CheckpointError(ValueError):
    pass


@dataclass
class ConvLayer:
    weight: np.ndarray  # (C_out, C_in, k, k)
    bias: np.ndarray  # (C_out,)
    relu: bool = True

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    @property
    def kernel(self) -> int:
        return self.weight.shape[2]


@dataclass
class EncoderParams:
    layers: list[ConvLayer]

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.c_out != b.c_in:
                raise ValueError(f"layer widths do not chain: {a.c_out} -> {b.c_in}")
        for layer in self.layers:
            if layer.kernel % 2 != 1 or layer.weight.shape[2] != layer.weight.shape[3]:
                raise ValueError("kernels must be square with odd size")

    @property
    def c_in(self) -> int:
        return self.layers[0].c_in

    @property
    def c_out(self) -> int:
        return self.layers[-1].c_out

    def arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            out[f"conv{i}.weight"] = layer.weight
            out[f"conv{i}.bias"] = layer.bias
        return out

    def copy(self) -> "EncoderParams":
        return EncoderParams([ConvLayer(l.weight.copy(), l.bias.copy(), l.relu)
                              for l in self.layers])


@dataclass
class Activations:
    params_id: int
    shapes: tuple
    cols: list[np.ndarray] = field(default_factory=list)  # im2col input per layer
    masks: list[np.ndarray] = field(default_factory=list)  # ReLU pass-through per layer
    spatial: tuple[int, int] = (0, 0)


def init_encoder(c_in: int, widths=DEFAULT_WIDTHS, d_out: int = DEFAULT_FEATURE_DIM,
                 seed: int = 0, kernel: int = 3, final_relu: bool = True) -> EncoderParams:
    """He-uniform weights, zero biases. ``final_relu=False`` leaves the last layer linear."""
    rng = np.random.default_rng(seed)
    chans = [c_in, *widths, d_out]
    layers = []
    for a, b in zip(chans, chans[1:]):
        bound = np.sqrt(6.0 / (a * kernel * kernel))
        w = rng.uniform(-bound, bound, size=(b, a, kernel, kernel))
        layers.append(ConvLayer(w, np.zeros(b)))
    layers[-1].relu = final_relu
    return EncoderParams(layers)


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    r = k // 2
    c, h, w = x.shape
    pad = np.pad(x, ((0, 0), (r, r), (r, r)))
    win = sliding_window_view(pad, (k, k), axis=(1, 2))  # (C, H, W, k, k)
    return win.transpose(0, 3, 4, 1, 2).reshape(c * k * k, h * w)


def _col2im(cols: np.ndarray, c: int, h: int, w: int, k: int) -> np.ndarray:
    r = k // 2
    cols = cols.reshape(c, k, k, h, w)
    pad = np.zeros((c, h + 2 * r, w + 2 * r))
    for ky in range(k):
        for kx in range(k):
            pad[:, ky:ky + h, kx:kx + w] += cols[:, ky, kx]
    return pad[:, r:r + h, r:r + w]


def _shapes(params: EncoderParams) -> tuple:
    return tuple(l.weight.shape for l in params.layers)


def encoder_forward(params: EncoderParams, x: np.ndarray) -> tuple[np.ndarray, Activations]:
    """Map a (C_in, H, W) input to (D, H, W) features."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] != params.c_in:
        raise ValueError(f"expected ({params.c_in}, H, W) input, got {x.shape}")
    _, h, w = x.shape
    acts = Activations(id(params), _shapes(params), spatial=(h, w))
    out = x
    for layer in params.layers:
        cols = _im2col(out, layer.kernel)
        pre = layer.weight.reshape(layer.c_out, -1) @ cols + layer.bias[:, None]
        acts.cols.append(cols)
        if layer.relu:
            mask = pre > 0
            acts.masks.append(mask)
            pre = np.where(mask, pre, 0.0)
        else:
            acts.masks.append(None)
        out = pre.reshape(layer.c_out, h, w)
    return out, acts


def encoder_backward(params: EncoderParams, acts: Activations,
                     grad_out: np.ndarray) -> tuple[list[tuple[np.ndarray, np.ndarray]], np.ndarray]:
    """Return ``[(dW, db) per layer], d_input`` for upstream gradient ``grad_out``."""
    if acts.params_id != id(params) or acts.shapes != _shapes(params):
        raise ValueError("activations were produced by a different encoder")
    h, w = acts.spatial
    grad = np.asarray(grad_out, dtype=np.float64)
    if grad.shape != (params.c_out, h, w):
        raise ValueError(f"grad_out must be {(params.c_out, h, w)}, got {grad.shape}")
    grads = []
    g = grad.reshape(params.c_out, h * w)
    for layer, cols, mask in zip(reversed(params.layers), reversed(acts.cols), reversed(acts.masks)):
        if mask is not None:
            g = np.where(mask, g, 0.0)
        dw = (g @ cols.T).reshape(layer.weight.shape)
        db = g.sum(axis=1)
        grads.append((dw, db))
        dcols = layer.weight.reshape(layer.c_out, -1).T @ g
        g = _col2im(dcols, layer.c_in, h, w, layer.kernel).reshape(layer.c_in, h * w)
    grads.reverse()
    return grads, g.reshape(params.c_in, h, w)


def save_encoder(path, params: EncoderParams) -> None:
    Path(path).write_bytes(dump_encoder(params))


def dump_encoder(params: EncoderParams) -> bytes:
    parts = [ENC_MAGIC, struct.pack("<I", len(params.layers))]
    for layer in params.layers:
        parts.append(struct.pack("<5I", *layer.weight.shape, int(layer.relu)))
    for layer in params.layers:
        parts.append(layer.weight.astype("<f4").tobytes())
        parts.append(layer.bias.astype("<f4").tobytes())
    return b"".join(parts)


def parse_encoder(data: bytes) -> EncoderParams:
    if data[:4] != ENC_MAGIC or len(data) < 8:
        raise CheckpointError("malformed checkpoint header")
    (n,) = struct.unpack_from("<I", data, 4)
    pos = 8
    specs = []
    for _ in range(n):
        if pos + 20 > len(data):
            raise CheckpointError("truncated checkpoint")
        specs.append(struct.unpack_from("<5I", data, pos))
        pos += 20
    layers = []
    for co, ci, kh, kw, relu in specs:
        nw = co * ci * kh * kw
        if pos + 4 * (nw + co) > len(data):
            raise CheckpointError("truncated checkpoint")
        w = np.frombuffer(data, "<f4", nw, pos).reshape(co, ci, kh, kw).astype(np.float64)
        pos += 4 * nw
        b = np.frombuffer(data, "<f4", co, pos).astype(np.float64)
        pos += 4 * co
        layers.append(ConvLayer(w, b, bool(relu)))
    return EncoderParams(layers)


def load_encoder(path) -> EncoderParams:
    return parse_encoder(Path(path).read_bytes())
