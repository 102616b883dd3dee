"""Residual stack of 3x3 convolutions with parametric rectifiers, in numpy.

Activations are kept internally as ``(channels, batch, height, width)`` so a
convolution is a single matrix product against an im2col buffer.  Public
functions take ``(batch, channels, H, W)``; single images ``(C, H, W)`` and
bare ``(H, W)`` grids are accepted where noted.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import FormatViolation, IoFailure, ShapeMismatch, UnsupportedFilterSize

KERNEL = 3
HIDDEN_WIDTH = 64
INITIAL_SLOPE = 0.25

DNW_MAGIC = b"DNW1"
DNW_VERSION = 1
_DNW_HEADER = struct.Struct("<4sIII")
_DNW_STEP = struct.Struct("<Q")


@dataclass
class ConvLayer:
    kernel: np.ndarray            # (out, in, 3, 3)
    bias: np.ndarray              # (out,)
    slopes: np.ndarray | None     # (out,) or None on the output layer

    def __post_init__(self):
        if self.kernel.ndim != 4 or self.kernel.shape[2:] != (KERNEL, KERNEL):
            raise UnsupportedFilterSize(f"kernel must be (out, in, 3, 3), got {self.kernel.shape}")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ShapeMismatch("bias length must equal output channels")
        if self.slopes is not None:
            if self.slopes.shape != (self.kernel.shape[0],):
                raise ShapeMismatch("one prelu slope per output channel")
            if not np.all(np.isfinite(self.slopes)):
                raise ValueError("prelu slopes must be finite")

    @property
    def in_channels(self) -> int:
        return self.kernel.shape[1]

    @property
    def out_channels(self) -> int:
        return self.kernel.shape[0]

    def parameters(self) -> list:
        p = [self.kernel, self.bias]
        if self.slopes is not None:
            p.append(self.slopes)
        return p


@dataclass
class Network:
    """Ordered conv layers plus a fixed global skip: ``f(x) = x + stack(x)``."""

    layers: list
    step: int = 0
    residual_skip: bool = field(default=True, init=False)

    def __post_init__(self):
        if not self.layers:
            raise ShapeMismatch("network needs at least one layer")
        if self.layers[0].in_channels != 1 or self.layers[-1].out_channels != 1:
            raise ShapeMismatch("network must map one channel to one channel")
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_channels != b.in_channels:
                raise ShapeMismatch("consecutive layers disagree on channel count")
        if self.layers[-1].slopes is not None:
            raise ShapeMismatch("output layer carries no activation")
        if any(l.slopes is None for l in self.layers[:-1]):
            raise ShapeMismatch("every hidden layer needs prelu slopes")

    @property
    def depth(self) -> int:
        return len(self.layers)

    @property
    def width(self) -> int:
        return self.layers[0].out_channels if self.depth > 1 else 1

    @property
    def dtype(self):
        return self.layers[0].kernel.dtype

    def parameters(self) -> list:
        return [p for layer in self.layers for p in layer.parameters()]

    def parameter_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def astype(self, dtype) -> "Network":
        layers = [ConvLayer(l.kernel.astype(dtype), l.bias.astype(dtype),
                            None if l.slopes is None else l.slopes.astype(dtype))
                  for l in self.layers]
        return Network(layers, step=self.step)

    def copy(self) -> "Network":
        return self.astype(self.dtype)


def receptive_field(depth: int, filter_size: int = KERNEL) -> int:
    """Side length of the input patch seen by one output pixel: 2 * depth + 1."""
    if filter_size != KERNEL:
        raise UnsupportedFilterSize("only 3x3 filters are supported")
    if depth < 1:
        raise ValueError("depth must be >= 1")
    return 2 * depth + 1


def expected_parameter_count(depth: int, width: int = HIDDEN_WIDTH) -> int:
    if depth == 1:
        return 9 + 1
    kernels = 9 * (width + (depth - 2) * width * width + width)
    return kernels + (depth - 1) * width + 1 + (depth - 1) * width


def init_network(depth: int, seed: int, width: int = HIDDEN_WIDTH,
                 slope: float = INITIAL_SLOPE, dtype=np.float32) -> Network:
    """He initialization corrected for PReLU: var = 2 / (fan_in * (1 + a^2))."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    rng = np.random.default_rng(seed)
    chans = [1] + [width] * (depth - 1) + [1]
    layers = []
    for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
        std = np.sqrt(2.0 / (cin * KERNEL * KERNEL * (1.0 + slope ** 2)))
        kernel = (rng.standard_normal((cout, cin, KERNEL, KERNEL)) * std).astype(dtype)
        last = i == depth - 1
        slopes = None if last else np.full(cout, slope, dtype=dtype)
        layers.append(ConvLayer(kernel, np.zeros(cout, dtype=dtype), slopes))
    return Network(layers)


def zero_network(depth: int, width: int = HIDDEN_WIDTH, dtype=np.float32) -> Network:
    net = init_network(depth, 0, width, dtype=dtype)
    for layer in net.layers:
        layer.kernel[...] = 0
    return net


# -- primitives on (C, B, H, W) --------------------------------------------

def _im2col(x: np.ndarray) -> np.ndarray:
    c, b, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (KERNEL, KERNEL), axis=(2, 3))  # c, b, h, w, 3, 3
    return win.transpose(0, 4, 5, 1, 2, 3).reshape(c * KERNEL * KERNEL, b * h * w)


def _conv_forward(x, kernel, bias):
    c, b, h, w = x.shape
    out = kernel.reshape(kernel.shape[0], -1) @ _im2col(x)
    out = out.reshape(kernel.shape[0], b, h, w)
    if bias is not None:
        out += bias[:, None, None, None]
    return out


def _conv_backward(x, kernel, grad_out, need_input_grad=True):
    o = kernel.shape[0]
    g = grad_out.reshape(o, -1)
    d_kernel = (g @ _im2col(x).T).reshape(kernel.shape)
    d_bias = g.sum(axis=1)
    d_x = None
    if need_input_grad:
        # transposed same-padding conv = conv with the flipped, channel-swapped kernel
        flipped = np.ascontiguousarray(kernel[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        d_x = _conv_forward(grad_out, flipped, None)
    return d_x, d_kernel, d_bias


def _prelu_forward(z, slopes):
    return np.where(z > 0, z, slopes[:, None, None, None] * z)


def _prelu_backward(z, slopes, grad_out):
    pos = z > 0
    d_z = np.where(pos, grad_out, slopes[:, None, None, None] * grad_out)
    d_slopes = np.where(pos, 0, grad_out * z).sum(axis=(1, 2, 3))
    return d_z, d_slopes


def _to_internal(x):
    """Accept (H, W), (C, H, W) or (B, C, H, W); return (C, B, H, W) and a restore fn."""
    x = np.asarray(x)
    if x.ndim == 2:
        return x[None, None], lambda y: y[0, 0]
    if x.ndim == 3:
        return x[:, None], lambda y: y[:, 0]
    if x.ndim == 4:
        return x.transpose(1, 0, 2, 3), lambda y: y.transpose(1, 0, 2, 3)
    raise ShapeMismatch(f"expected 2 to 4 dimensions, got shape {x.shape}")


# -- public primitives -----------------------------------------------------

def conv2d(x, layer: ConvLayer, grad_out=None):
    """Same-size 3x3 convolution (zero padding 1), without the activation.

    Forward when ``grad_out`` is None.  Otherwise returns
    ``(d_input, d_kernel, d_bias)`` for upstream gradient ``grad_out``.
    ``x`` is ``(C, H, W)`` or ``(B, C, H, W)``.
    """
    xi, restore = _to_internal(x)
    if xi.shape[0] != layer.in_channels:
        raise ShapeMismatch(f"input has {xi.shape[0]} channels, kernel expects {layer.in_channels}")
    if grad_out is None:
        return restore(_conv_forward(xi, layer.kernel, layer.bias))
    gi, _ = _to_internal(grad_out)
    if gi.shape != (layer.out_channels,) + xi.shape[1:]:
        raise ShapeMismatch("grad_out shape does not match the layer output")
    d_x, d_k, d_b = _conv_backward(xi, layer.kernel, gi)
    return restore(d_x), d_k, d_b


def prelu(x, slopes, grad_out=None):
    """Per-channel parametric rectifier; backward returns ``(d_input, d_slopes)``."""
    xi, restore = _to_internal(x)
    slopes = np.asarray(slopes)
    if slopes.shape != (xi.shape[0],):
        raise ShapeMismatch("one slope per channel is required")
    if grad_out is None:
        return restore(_prelu_forward(xi, slopes))
    gi, _ = _to_internal(grad_out)
    if gi.shape != xi.shape:
        raise ShapeMismatch("grad_out shape does not match input")
    d_x, d_a = _prelu_backward(xi, slopes, gi)
    return restore(d_x), d_a


def _check_input(net: Network, x):
    x = np.asarray(x)
    if x.ndim == 2:
        x = x[None, None]
    elif x.ndim == 3:
        x = x[:, None] if x.shape[0] != 1 else x[None]
    if x.ndim != 4 or x.shape[1] != 1:
        raise ShapeMismatch(f"network expects single-channel input, got {x.shape}")
    if x.shape[2] < 3 or x.shape[3] < 3:
        raise ShapeMismatch("network input must be at least 3x3")
    return x


def _forward_cached(net: Network, x):
    """x: (B, 1, H, W).  Returns output (B, 1, H, W) and per-layer caches."""
    h = x.transpose(1, 0, 2, 3).astype(net.dtype, copy=False)
    inputs, preacts = [], []
    for layer in net.layers:
        inputs.append(h)
        z = _conv_forward(h, layer.kernel, layer.bias)
        preacts.append(z)
        h = z if layer.slopes is None else _prelu_forward(z, layer.slopes)
    out = x.transpose(1, 0, 2, 3) + h
    return out.transpose(1, 0, 2, 3), (inputs, preacts)


def network_forward(net: Network, noisy):
    """Denoised image ``x + stack(x)``; shape follows the input.

    Accepts ``(H, W)``, ``(B, H, W)`` or ``(B, 1, H, W)``.
    """
    arr = np.asarray(noisy)
    out, _ = _forward_cached(net, _check_input(net, arr))
    return out.reshape(arr.shape)


def _backward(net: Network, caches, grad_out):
    inputs, preacts = caches
    g = grad_out.transpose(1, 0, 2, 3).astype(net.dtype, copy=False)
    grads = []
    for idx in range(net.depth - 1, -1, -1):
        layer = net.layers[idx]
        layer_grads = []
        if layer.slopes is not None:
            g, d_a = _prelu_backward(preacts[idx], layer.slopes, g)
            layer_grads.append(d_a)
        d_x, d_k, d_b = _conv_backward(inputs[idx], layer.kernel, g, need_input_grad=idx > 0)
        grads.append([d_k, d_b] + layer_grads)
        g = d_x
    return [p for layer_grads in reversed(grads) for p in layer_grads]


def network_gradients(net: Network, noisy, loss_gradient):
    """Reverse-mode gradients of ``sum(loss_gradient * f(noisy))``.

    Returns a list aligned with :meth:`Network.parameters`.
    """
    x = _check_input(net, noisy)
    lg = np.asarray(loss_gradient)
    if lg.size != x.size:
        raise ShapeMismatch("loss gradient must match the output shape")
    _, caches = _forward_cached(net, x)
    return _backward(net, caches, lg.reshape(x.shape))


def forward_backward(net: Network, x, loss_fn):
    """One fused pass: ``loss_fn(output) -> (loss, d_output)``; returns (loss, output, grads)."""
    x = _check_input(net, x)
    out, caches = _forward_cached(net, x)
    loss, d_out = loss_fn(out)
    return loss, out, _backward(net, caches, np.asarray(d_out).reshape(x.shape))


def activation_stds(net: Network, x) -> list[float]:
    """Standard deviation of every layer's output activation (diagnostics)."""
    x = _check_input(net, x)
    h = x.transpose(1, 0, 2, 3).astype(net.dtype, copy=False)
    stds = []
    for layer in net.layers:
        z = _conv_forward(h, layer.kernel, layer.bias)
        h = z if layer.slopes is None else _prelu_forward(z, layer.slopes)
        stds.append(float(h.std()))
    return stds


# -- DNW1 checkpoints ------------------------------------------------------

def network_to_bytes(net: Network) -> bytes:
    parts = [_DNW_HEADER.pack(DNW_MAGIC, DNW_VERSION, net.depth, net.width)]
    for layer in net.layers:
        for p in layer.parameters():
            parts.append(np.ascontiguousarray(p, dtype="<f4").tobytes())
    parts.append(_DNW_STEP.pack(int(net.step)))
    return b"".join(parts)


def network_from_bytes(buf: bytes) -> Network:
    if len(buf) < _DNW_HEADER.size + _DNW_STEP.size:
        raise FormatViolation("truncated DNW1 checkpoint")
    magic, version, depth, width = _DNW_HEADER.unpack_from(buf, 0)
    if magic != DNW_MAGIC:
        raise FormatViolation(f"bad magic {magic!r}")
    if version != DNW_VERSION:
        raise FormatViolation(f"unsupported DNW1 version {version}")
    if depth < 1 or (depth > 1 and width < 1):
        raise FormatViolation("invalid depth or width")
    expected = expected_parameter_count(depth, width)
    body = len(buf) - _DNW_HEADER.size - _DNW_STEP.size
    if body != 4 * expected:
        raise FormatViolation(f"payload is {body} bytes, expected {4 * expected}")
    chans = [1] + [width] * (depth - 1) + [1]
    off = _DNW_HEADER.size

    def take(n):
        nonlocal off
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=off).astype(np.float32)
        off += 4 * n
        return arr

    layers = []
    for i, (cin, cout) in enumerate(zip(chans[:-1], chans[1:])):
        kernel = take(cout * cin * 9).reshape(cout, cin, 3, 3)
        bias = take(cout)
        slopes = None if i == depth - 1 else take(cout)
        layers.append(ConvLayer(kernel, bias, slopes))
    (step,) = _DNW_STEP.unpack_from(buf, off)
    for p in (p for l in layers for p in l.parameters()):
        if not np.all(np.isfinite(p)):
            raise FormatViolation("non-finite weights in checkpoint")
    return Network(layers, step=step)


def save_network(net: Network, path) -> None:
    """Atomic write: temp file then rename."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(network_to_bytes(net))
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_network(path) -> Network:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return network_from_bytes(buf)
