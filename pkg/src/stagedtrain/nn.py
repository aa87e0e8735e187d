"""Minimal feedforward network engine on top of numpy.

Public tensors are NCHW; inside the layer stack 4-D activations are kept
channels-last so convolutions reduce to contiguous matrix products.

Arrays are plain ``np.ndarray`` objects; training runs in float32 and
``Network.astype(np.float64)`` gives the shadow path used for gradient checks.
Only parameterized layers (conv2d, dense) count toward the layer index used by
the per-layer learning-rate machinery.
"""

from __future__ import annotations

import copy
from typing import Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import (
    ArchitectureMismatch,
    LabelOutOfRange,
    NoForwardState,
    NoSuchLayer,
    NotAConvActivation,
    RangeOutOfBounds,
    ShapeMismatch,
)

DTYPE = np.float32


class Layer:
    kind = "layer"

    def __init__(self):
        self.params: list[np.ndarray] = []
        self.lr_multiplier = 1.0
        self.frozen = False
        self._cache = None

    @property
    def has_params(self) -> bool:
        return bool(self.params)

    def forward(self, x: np.ndarray, record: bool) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray, need_input_grad: bool = True):
        """Return ``(input_grad, param_grads)``; ``input_grad`` may be None when not needed."""
        raise NotImplementedError

    def out_shape(self, in_shape: tuple) -> tuple:
        return in_shape

    def _need_cache(self):
        if self._cache is None:
            raise NoForwardState(f"{self.kind}: backward called without a recorded forward pass")
        return self._cache

    def __repr__(self):
        shapes = ",".join(str(tuple(p.shape)) for p in self.params)
        return f"{type(self).__name__}({shapes})"


class Conv2d(Layer):
    """Stride-1 convolution with zero same-padding.

    Weights are stored ``[out, in, kh, kw]``; activations flow through the
    network channels-last (NHWC), see :func:`forward`.
    """

    kind = "conv2d"

    def __init__(self, in_ch: int, out_ch: int, kernel: int = 3, rng=None, dtype=DTYPE):
        super().__init__()
        if kernel % 2 != 1:
            raise ValueError("conv2d kernel must be odd for same-padding")
        rng = np.random.default_rng() if rng is None else rng
        std = np.sqrt(2.0 / (in_ch * kernel * kernel))
        w = rng.standard_normal((out_ch, in_ch, kernel, kernel)) * std
        self.params = [w.astype(dtype), np.zeros(out_ch, dtype=dtype)]

    @property
    def in_ch(self) -> int:
        return self.params[0].shape[1]

    def out_shape(self, in_shape):
        if len(in_shape) != 3 or in_shape[0] != self.in_ch:
            raise ShapeMismatch(f"conv2d expects ({self.in_ch}, H, W), got {in_shape}")
        return (self.params[0].shape[0],) + tuple(in_shape[1:])

    def forward(self, x, record):
        w, b = self.params
        out_ch, in_ch, kh, kw = w.shape
        if x.ndim != 4 or x.shape[3] != in_ch:
            raise ShapeMismatch(f"conv2d expects {in_ch} input channels, got {x.shape[3]}")
        bsz, h, wd, _ = x.shape
        p = kh // 2
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0)))
        cols = np.empty((bsz, h, wd, kh, kw, in_ch), dtype=x.dtype)
        cols[...] = sliding_window_view(xp, (kh, kw), axis=(1, 2)).transpose(0, 1, 2, 4, 5, 3)
        cols = cols.reshape(-1, kh * kw * in_ch)
        wm = np.ascontiguousarray(w.transpose(2, 3, 1, 0)).reshape(-1, out_ch)
        out = cols @ wm + b
        if record:
            self._cache = (cols, x.shape)
        return out.reshape(bsz, h, wd, out_ch)

    def backward(self, grad, need_input_grad=True):
        cols, xshape = self._need_cache()
        w = self.params[0]
        out_ch, in_ch, kh, kw = w.shape
        bsz, h, wd, _ = xshape
        g = np.ascontiguousarray(grad).reshape(-1, out_ch)
        dw = (cols.T @ g).reshape(kh, kw, in_ch, out_ch).transpose(3, 2, 0, 1)
        grads = [np.ascontiguousarray(dw), g.sum(axis=0)]
        if not need_input_grad:
            return None, grads
        p = kh // 2
        taps = np.ascontiguousarray(w.transpose(2, 3, 0, 1))  # [kh, kw, out, in]
        dxp = np.zeros((bsz, h + 2 * p, wd + 2 * p, in_ch), dtype=grad.dtype)
        for i in range(kh):
            for j in range(kw):
                dxp[:, i:i + h, j:j + wd, :] += (g @ taps[i, j]).reshape(bsz, h, wd, in_ch)
        return dxp[:, p:p + h, p:p + wd, :], grads


class Dense(Layer):
    kind = "dense"

    def __init__(self, in_features: int, out_features: int, rng=None, dtype=DTYPE):
        super().__init__()
        rng = np.random.default_rng() if rng is None else rng
        std = np.sqrt(2.0 / in_features)
        w = rng.standard_normal((out_features, in_features)) * std
        self.params = [w.astype(dtype), np.zeros(out_features, dtype=dtype)]

    def out_shape(self, in_shape):
        if tuple(in_shape) != (self.params[0].shape[1],):
            raise ShapeMismatch(f"dense expects ({self.params[0].shape[1]},), got {in_shape}")
        return (self.params[0].shape[0],)

    def forward(self, x, record):
        w, b = self.params
        if x.ndim != 2 or x.shape[1] != w.shape[1]:
            raise ShapeMismatch(f"dense expects [B,{w.shape[1]}], got {list(x.shape)}")
        if record:
            self._cache = x
        return x @ w.T + b

    def backward(self, grad, need_input_grad=True):
        x = self._need_cache()
        w = self.params[0]
        return grad @ w, [grad.T @ x, grad.sum(axis=0)]


class ReLU(Layer):
    kind = "relu"

    def forward(self, x, record):
        if record:
            self._cache = x > 0
        return np.maximum(x, 0)

    def backward(self, grad, need_input_grad=True):
        return grad * self._need_cache(), []


class MaxPool2x2(Layer):
    """2x2 max pooling, stride 2, floor mode (odd trailing rows/cols dropped)."""

    kind = "maxpool2x2"

    def out_shape(self, in_shape):
        if len(in_shape) != 3:
            raise ShapeMismatch(f"maxpool2x2 expects (C, H, W), got {in_shape}")
        c, h, w = in_shape
        return (c, h // 2, w // 2)

    def forward(self, x, record):
        h2, w2 = x.shape[1] // 2, x.shape[2] // 2
        quads = [x[:, di:2 * h2:2, dj:2 * w2:2, :] for di in (0, 1) for dj in (0, 1)]
        out = np.maximum(np.maximum(quads[0], quads[1]), np.maximum(quads[2], quads[3]))
        if record:
            # route each gradient to the first maximal element only
            taken = np.zeros(out.shape, dtype=bool)
            masks = []
            for q in quads:
                m = (q == out) & ~taken
                taken |= m
                masks.append(m)
            self._cache = (masks, x.shape)
        return out

    def backward(self, grad, need_input_grad=True):
        masks, xshape = self._need_cache()
        h2, w2 = xshape[1] // 2, xshape[2] // 2
        dx = np.zeros(xshape, dtype=grad.dtype)
        for (di, dj), m in zip(((0, 0), (0, 1), (1, 0), (1, 1)), masks):
            dx[:, di:2 * h2:2, dj:2 * w2:2, :] = grad * m
        return dx, []


class Flatten(Layer):
    """Flattens in [C, H, W] order regardless of the internal layout."""

    kind = "flatten"

    def out_shape(self, in_shape):
        return (int(np.prod(in_shape)),)

    def forward(self, x, record):
        if record:
            self._cache = x.shape
        if x.ndim == 4:
            x = x.transpose(0, 3, 1, 2)
        return x.reshape(x.shape[0], -1)

    def backward(self, grad, need_input_grad=True):
        shape = self._need_cache()
        if len(shape) == 4:
            b, h, w, c = shape
            return grad.reshape(b, c, h, w).transpose(0, 2, 3, 1), []
        return grad.reshape(shape), []


class Network:
    """Ordered layer list with a dense classifier at the end."""

    def __init__(self, layers: Sequence[Layer], input_shape: tuple):
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        shape = self.input_shape
        for layer in self.layers:
            shape = layer.out_shape(shape)
        if len(shape) != 1:
            raise ArchitectureMismatch(f"network output must be a vector, got {shape}")
        self.num_classes = shape[0]
        pidx = self.param_layer_indices
        if not pidx or self.layers[pidx[-1]].kind != "dense":
            raise ArchitectureMismatch("last parameterized layer must be dense")
        self.classifier_index = pidx[-1]
        if self.classifier_index == 0:
            raise ArchitectureMismatch("network needs at least one layer before the classifier")
        self.penultimate_index = self.classifier_index - 1

    @property
    def param_layer_indices(self) -> list[int]:
        return [i for i, layer in enumerate(self.layers) if layer.has_params]

    @property
    def param_layers(self) -> list[Layer]:
        return [layer for layer in self.layers if layer.has_params]

    @property
    def depth_l(self) -> int:
        return len(self.param_layer_indices)

    @property
    def dtype(self):
        return self.param_layers[0].params[0].dtype

    def parameters(self) -> list[np.ndarray]:
        return [p for layer in self.param_layers for p in layer.params]

    def signature(self) -> list[tuple]:
        return [(layer.kind, tuple(p.shape)) for layer in self.layers for p in layer.params]

    def clear_state(self):
        for layer in self.layers:
            layer._cache = None

    def copy(self) -> "Network":
        self.clear_state()
        return copy.deepcopy(self)

    def astype(self, dtype) -> "Network":
        other = self.copy()
        for layer in other.param_layers:
            layer.params = [p.astype(dtype) for p in layer.params]
        return other

    def __call__(self, x):
        return forward(self, x)[0]

    def __repr__(self):
        body = ", ".join(repr(layer) for layer in self.layers)
        return f"Network(input={self.input_shape}, [{body}])"


def desknet(input_shape=(3, 28, 28), num_classes=10, seed=0, widths=(16, 32, 64), hidden=128) -> Network:
    """conv3x3-relu-pool x3, flatten, dense-relu, dense. depth_l = 5."""
    rng = np.random.default_rng(seed)
    c, h, w = input_shape
    layers: list[Layer] = []
    ch = c
    for width in widths:
        layers += [Conv2d(ch, width, 3, rng), ReLU(), MaxPool2x2()]
        ch = width
        h, w = h // 2, w // 2
    if h == 0 or w == 0:
        raise ShapeMismatch(f"input {input_shape} too small for {len(widths)} pooling stages")
    layers += [Flatten(), Dense(ch * h * w, hidden, rng), ReLU(), Dense(hidden, num_classes, rng)]
    return Network(layers, input_shape)


def forward(net: Network, batch: np.ndarray, record: bool = False):
    """Run the network; with ``record`` keep backward caches and return every layer output."""
    if batch.ndim != len(net.input_shape) + 1 or tuple(batch.shape[1:]) != net.input_shape:
        raise ShapeMismatch(f"batch shape {list(batch.shape)} incompatible with input {net.input_shape}")
    x = np.asarray(batch, dtype=net.dtype)
    if x.ndim == 4:
        x = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    acts = [] if record else None
    for layer in net.layers:
        x = layer.forward(x, record)
        if record:
            acts.append(_to_public(x))
    return x, acts


def _to_public(a: np.ndarray) -> np.ndarray:
    """Internal NHWC activations are exposed as NCHW views."""
    return a.transpose(0, 3, 1, 2) if a.ndim == 4 else a


def backward(net: Network, grad_out: np.ndarray, need_input_grad: bool = True):
    """Backpropagate ``grad_out`` (dLoss/dlogits).

    Returns ``(grads, input_grad)`` where ``grads[i]`` is ``[dW, db]`` for the
    i-th parameterized layer. Frozen layers still report gradients; the
    optimizer ignores them.
    """
    g = np.asarray(grad_out, dtype=net.dtype)
    grads = []
    for n in range(len(net.layers) - 1, -1, -1):
        g, pg = net.layers[n].backward(g, need_input_grad or n > 0)
        if net.layers[n].has_params:
            grads.append(pg)
    grads.reverse()
    return grads, (None if g is None else _to_public(g))


def cross_entropy(logits: np.ndarray, labels) -> tuple[float, np.ndarray]:
    """Mean softmax cross entropy and its gradient w.r.t. the logits."""
    labels = np.asarray(labels, dtype=np.int64)
    bsz, k = logits.shape
    if labels.shape != (bsz,):
        raise ShapeMismatch(f"expected {bsz} labels, got {labels.shape}")
    if bsz and (labels.min() < 0 or labels.max() >= k):
        raise LabelOutOfRange(f"labels must lie in [0, {k})")
    z = logits.astype(np.float64)
    z = z - z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(bsz)
    loss = float(np.mean(lse - z[rows, labels]))
    p = np.exp(z - lse[:, None])
    p[rows, labels] -= 1.0
    return max(loss, 0.0), (p / bsz).astype(logits.dtype)


def layer_grad_mean(grads, i: int) -> float:
    """GMV: mean absolute value over all parameter gradients of parameterized layer ``i``."""
    if not 0 <= i < len(grads):
        raise NoSuchLayer(f"no parameterized layer {i} (depth {len(grads)})")
    total = sum(float(np.abs(g).sum(dtype=np.float64)) for g in grads[i])
    count = sum(g.size for g in grads[i])
    return total / count if count else 0.0


def channel_mean_activation(net: Network, batches: Iterable[np.ndarray], layer: int) -> np.ndarray:
    """Mean of layer ``layer``'s output per channel over batch and spatial dims."""
    if not 0 <= layer < len(net.layers):
        raise NoSuchLayer(f"no layer {layer}")
    total = None
    count = 0
    for batch in batches:
        _, acts = forward(net, batch, record=True)
        a = acts[layer]
        if a.ndim != 4:
            raise NotAConvActivation(f"layer {layer} output has shape {list(a.shape)}")
        s = a.sum(axis=(0, 2, 3), dtype=np.float64)
        total = s if total is None else total + s
        count += a.shape[0] * a.shape[2] * a.shape[3]
    net.clear_state()
    if total is None:
        return np.zeros(0)
    return total / count


def _check_count(net: Network, count: int):
    if not 0 <= count <= net.depth_l:
        raise RangeOutOfBounds(f"count {count} outside [0, {net.depth_l}]")


def freeze_prefix(net: Network, count: int):
    _check_count(net, count)
    for layer in net.param_layers[:count]:
        layer.frozen = True


def freeze_suffix(net: Network, count: int):
    _check_count(net, count)
    for layer in net.param_layers[net.depth_l - count:]:
        layer.frozen = True


def transplant(dst: Network, src: Network, layers: range | Sequence[int], freeze: bool = True):
    """Copy parameters of the given parameterized layers from ``src`` into ``dst``."""
    if dst.signature() != src.signature() or dst.input_shape != src.input_shape:
        raise ArchitectureMismatch("transplant requires identical architectures")
    idx = list(layers)
    for i in idx:
        if not 0 <= i < dst.depth_l:
            raise RangeOutOfBounds(f"parameterized layer {i} outside [0, {dst.depth_l})")
    for i in idx:
        d, s = dst.param_layers[i], src.param_layers[i]
        d.params = [p.copy() for p in s.params]
        if freeze:
            d.frozen = True


def predict(net: Network, images: np.ndarray, batch_size: int = 500) -> np.ndarray:
    out = []
    for start in range(0, len(images), batch_size):
        logits, _ = forward(net, images[start:start + batch_size])
        out.append(logits.argmax(axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def accuracy(net: Network, images: np.ndarray, labels, batch_size: int = 500) -> float:
    labels = np.asarray(labels)
    if len(labels) == 0:
        return 0.0
    return float(np.mean(predict(net, images, batch_size) == labels))
