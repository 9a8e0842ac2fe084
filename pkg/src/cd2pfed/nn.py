"""Small sequential neural-network engine with analytical gradients.

Supports dense, conv2d (no padding), maxpool2d, relu and flatten layers,
plus per-layer channel masks so that sub-networks made of a subset of the
output channels can be evaluated with the same parameters.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .exceptions import ConfigurationError, TrainingError

LAYER_KINDS = ("dense", "conv2d", "maxpool2d", "relu", "flatten")
PARAMETRIC = ("dense", "conv2d")


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_units: int = 0
    out_units: int = 0
    in_channels: int = 0
    out_channels: int = 0
    kernel_size: int = 0
    stride: int = 1
    window: int = 0

    @classmethod
    def dense(cls, in_units: int, out_units: int) -> "LayerSpec":
        return cls("dense", in_units=in_units, out_units=out_units)

    @classmethod
    def conv2d(cls, in_channels: int, out_channels: int, kernel_size: int, stride: int = 1) -> "LayerSpec":
        return cls("conv2d", in_channels=in_channels, out_channels=out_channels,
                   kernel_size=kernel_size, stride=stride)

    @classmethod
    def maxpool2d(cls, window: int, stride: Optional[int] = None) -> "LayerSpec":
        return cls("maxpool2d", window=window, stride=window if stride is None else stride)

    @classmethod
    def relu(cls) -> "LayerSpec":
        return cls("relu")

    @classmethod
    def flatten(cls) -> "LayerSpec":
        return cls("flatten")

    @property
    def parametric(self) -> bool:
        return self.kind in PARAMETRIC

    @property
    def width(self) -> int:
        """Number of output channels of a parametric layer."""
        return self.out_units if self.kind == "dense" else self.out_channels

    def to_dict(self) -> dict:
        keys = {
            "dense": ("in_units", "out_units"),
            "conv2d": ("in_channels", "out_channels", "kernel_size", "stride"),
            "maxpool2d": ("window", "stride"),
            "relu": (),
            "flatten": (),
        }[self.kind]
        return {"kind": self.kind, **{k: getattr(self, k) for k in keys}}

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        d = dict(d)
        kind = d.pop("kind", None)
        if kind not in LAYER_KINDS:
            raise ConfigurationError(f"unknown layer kind {kind!r}")
        try:
            return cls(kind, **d)
        except TypeError as exc:
            raise ConfigurationError(f"bad {kind} layer fields: {exc}") from None


class Architecture:
    """A validated chain of layers with a known input shape.

    The last layer must be dense; it is the classifier head.  Every other
    parametric layer is a hidden layer whose output channels can be split
    into shared and private blocks.
    """

    def __init__(self, input_shape: Sequence[int], layers: Sequence[LayerSpec]):
        self.input_shape = tuple(int(s) for s in input_shape)
        self.layers = tuple(layers)
        if not self.layers or self.layers[-1].kind != "dense":
            raise ConfigurationError("the final layer must be a dense classifier head")
        self.shapes = self._chain_shapes()
        self.param_layers = tuple(i for i, l in enumerate(self.layers) if l.parametric)
        self.hidden_layers = self.param_layers[:-1]
        self.num_classes = self.layers[-1].out_units
        for i in self.hidden_layers:
            if self.layers[i].width < 2:
                raise ConfigurationError(f"layer {i} has fewer than 2 output channels")
        if self.num_classes < 2:
            raise ConfigurationError("classifier needs at least 2 classes")
        self.head_feature_channel = self._head_feature_channels()

    def _chain_shapes(self) -> list[tuple[int, ...]]:
        shape = self.input_shape
        shapes = [shape]
        for i, layer in enumerate(self.layers):
            k = layer.kind
            if k == "dense":
                if len(shape) != 1 or shape[0] != layer.in_units:
                    raise ConfigurationError(f"layer {i} (dense) expects ({layer.in_units},), got {shape}")
                if layer.out_units < 1:
                    raise ConfigurationError(f"layer {i} (dense) has no outputs")
                shape = (layer.out_units,)
            elif k == "conv2d":
                if len(shape) != 3 or shape[0] != layer.in_channels:
                    raise ConfigurationError(f"layer {i} (conv2d) expects {layer.in_channels} channels, got {shape}")
                if layer.kernel_size < 1 or layer.stride < 1:
                    raise ConfigurationError(f"layer {i} (conv2d) has invalid kernel/stride")
                h = (shape[1] - layer.kernel_size) // layer.stride + 1
                w = (shape[2] - layer.kernel_size) // layer.stride + 1
                if h < 1 or w < 1:
                    raise ConfigurationError(f"layer {i} (conv2d) kernel larger than input {shape}")
                shape = (layer.out_channels, h, w)
            elif k == "maxpool2d":
                if len(shape) != 3:
                    raise ConfigurationError(f"layer {i} (maxpool2d) needs a C×H×W input, got {shape}")
                if layer.window < 1 or layer.stride < 1:
                    raise ConfigurationError(f"layer {i} (maxpool2d) has invalid window/stride")
                h = (shape[1] - layer.window) // layer.stride + 1
                w = (shape[2] - layer.window) // layer.stride + 1
                if h < 1 or w < 1:
                    raise ConfigurationError(f"layer {i} (maxpool2d) window larger than input {shape}")
                shape = (shape[0], h, w)
            elif k == "flatten":
                shape = (int(np.prod(shape)),)
            elif k != "relu":
                raise ConfigurationError(f"unknown layer kind {k!r}")
            shapes.append(shape)
        return shapes

    def _head_feature_channels(self) -> Optional[np.ndarray]:
        """Map each head input feature to the channel of the last hidden layer it comes from."""
        if not self.hidden_layers:
            return None
        last = self.hidden_layers[-1]
        shape = self.shapes[last + 1]
        head_in = self.layers[-1].in_units
        if len(shape) == 1:
            return np.arange(head_in)
        # channel-major flatten of a C×H×W map
        spatial = head_in // self.layers[last].out_channels
        return np.arange(head_in) // spatial

    @property
    def widths(self) -> tuple[int, ...]:
        return tuple(self.layers[i].width for i in self.hidden_layers)

    def param_shapes(self) -> list[tuple[tuple[int, ...], tuple[int, ...]]]:
        out = []
        for i in self.param_layers:
            l = self.layers[i]
            if l.kind == "dense":
                out.append(((l.out_units, l.in_units), (l.out_units,)))
            else:
                k = l.kernel_size
                out.append(((l.out_channels, l.in_channels, k, k), (l.out_channels,)))
        return out

    def init_params(self, rng: np.random.Generator, dtype=np.float64) -> "ModelParams":
        """Kaiming-uniform (fan-in) weights, zero biases."""
        weights, biases = [], []
        for wshape, bshape in self.param_shapes():
            fan_in = int(np.prod(wshape[1:]))
            bound = math.sqrt(6.0 / fan_in)
            weights.append(rng.uniform(-bound, bound, size=wshape).astype(dtype))
            biases.append(np.zeros(bshape, dtype=dtype))
        return ModelParams(weights, biases)

    def to_dict(self) -> dict:
        return {"input_shape": list(self.input_shape), "layers": [l.to_dict() for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "Architecture":
        return cls(d["input_shape"], [LayerSpec.from_dict(l) for l in d["layers"]])

    def __eq__(self, other) -> bool:
        return isinstance(other, Architecture) and self.to_dict() == other.to_dict()

    def __repr__(self) -> str:
        return f"Architecture(input_shape={self.input_shape}, layers={len(self.layers)})"


def mlp(input_dim: int, hidden: Sequence[int], num_classes: int) -> Architecture:
    layers = []
    prev = input_dim
    for h in hidden:
        layers += [LayerSpec.dense(prev, h), LayerSpec.relu()]
        prev = h
    layers.append(LayerSpec.dense(prev, num_classes))
    return Architecture((input_dim,), layers)


def lenet5(num_classes: int = 10, in_channels: int = 3, size: int = 32) -> Architecture:
    s = ((size - 4) // 2 - 4) // 2
    return Architecture((in_channels, size, size), [
        LayerSpec.conv2d(in_channels, 6, 5), LayerSpec.relu(), LayerSpec.maxpool2d(2),
        LayerSpec.conv2d(6, 16, 5), LayerSpec.relu(), LayerSpec.maxpool2d(2),
        LayerSpec.flatten(),
        LayerSpec.dense(16 * s * s, 120), LayerSpec.relu(),
        LayerSpec.dense(120, 84), LayerSpec.relu(),
        LayerSpec.dense(84, num_classes),
    ])


@dataclass
class ModelParams:
    """Weights and biases of every parametric layer, in layer order."""

    weights: list
    biases: list

    def tensors(self) -> list[np.ndarray]:
        """Canonical order: W0, b0, W1, b1, ..."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    @classmethod
    def from_tensors(cls, tensors: Sequence[np.ndarray]) -> "ModelParams":
        return cls(list(tensors[0::2]), list(tensors[1::2]))

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> "ModelParams":
        return ModelParams([np.zeros_like(w) for w in self.weights], [np.zeros_like(b) for b in self.biases])

    def is_finite(self) -> bool:
        return all(np.isfinite(t).all() for t in self.tensors())

    def equals(self, other: "ModelParams") -> bool:
        """Bitwise equality."""
        return all(a.shape == b.shape and np.array_equal(a, b) for a, b in zip(self.tensors(), other.tensors()))

    def __add__(self, other: "ModelParams") -> "ModelParams":
        return ModelParams.from_tensors([a + b for a, b in zip(self.tensors(), other.tensors())])


ParamGrads = ModelParams


@dataclass(frozen=True)
class ForwardMask:
    """Per hidden layer channel selector; ``None`` entries keep every channel."""

    channels: tuple = ()

    @property
    def is_full(self) -> bool:
        return all(c is None for c in self.channels)


FULL = ForwardMask()


@dataclass
class Cache:
    arch: Architecture
    params: ModelParams
    mask: ForwardMask
    entries: list = field(default_factory=list)
    batch: int = 0


def _conv_cols(x: np.ndarray, k: int, stride: int) -> tuple[np.ndarray, int, int]:
    win = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, ho, wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)
    return cols, ho, wo


def forward(params: ModelParams, arch: Architecture, x: np.ndarray,
            mask: Optional[ForwardMask] = None) -> tuple[np.ndarray, Cache]:
    """Run the network; returns logits and the cache needed by :func:`backward`."""
    x = np.asarray(x)
    if x.ndim < 1 or tuple(x.shape[1:]) != arch.input_shape:
        raise ConfigurationError(f"input shape {x.shape[1:]} does not match {arch.input_shape}")
    mask = FULL if mask is None else mask
    if mask.channels and len(mask.channels) != len(arch.hidden_layers):
        raise ConfigurationError("mask does not match the number of hidden layers")
    cache = Cache(arch, params, mask, batch=x.shape[0])
    p = 0
    h = x
    for layer in arch.layers:
        k = layer.kind
        if k == "dense":
            w, b = params.weights[p], params.biases[p]
            out = h @ w.T + b
            m = _mask_for(mask, arch, p)
            if m is not None:
                out = out * m
            cache.entries.append((h, m))
            h = out
            p += 1
        elif k == "conv2d":
            w, b = params.weights[p], params.biases[p]
            cols, ho, wo = _conv_cols(h, layer.kernel_size, layer.stride)
            out = cols @ w.reshape(w.shape[0], -1).T + b
            out = out.reshape(h.shape[0], ho, wo, -1).transpose(0, 3, 1, 2)
            m = _mask_for(mask, arch, p)
            if m is not None:
                out = out * m[None, :, None, None]
            cache.entries.append((cols, h.shape, m))
            h = out
            p += 1
        elif k == "relu":
            pos = h > 0
            cache.entries.append(pos)
            h = h * pos
        elif k == "maxpool2d":
            win = sliding_window_view(h, (layer.window, layer.window), axis=(2, 3))[:, :, ::layer.stride, ::layer.stride]
            flat = win.reshape(*win.shape[:4], -1)
            arg = flat.argmax(axis=-1)
            cache.entries.append((arg, h.shape))
            h = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        elif k == "flatten":
            cache.entries.append(h.shape)
            h = h.reshape(h.shape[0], -1)
    return h, cache


def _mask_for(mask: ForwardMask, arch: Architecture, p: int) -> Optional[np.ndarray]:
    if p >= len(arch.hidden_layers) or not mask.channels:
        return None
    return mask.channels[p]


def backward(cache: Cache, logits: np.ndarray, labels: Optional[np.ndarray] = None,
             extra_logit_grads: Optional[np.ndarray] = None) -> ParamGrads:
    """Gradients of ``mean CE(logits, labels)`` plus any extra logit gradient.

    ``extra_logit_grads`` is added to the logit gradient as-is, so callers
    pass gradients already scaled for the batch reduction they use.
    """
    arch = cache.arch
    if logits.shape != (cache.batch, arch.num_classes):
        raise TrainingError("stale cache: logits shape does not match the forward pass")
    g = np.zeros_like(logits)
    if labels is not None:
        g = ce_logit_grad(logits, labels)
    if extra_logit_grads is not None:
        if extra_logit_grads.shape != logits.shape:
            raise TrainingError("extra logit gradient has the wrong shape")
        g = g + extra_logit_grads
    return backward_from_logit_grad(cache, g)


def backward_from_logit_grad(cache: Cache, g: np.ndarray) -> ParamGrads:
    arch, params = cache.arch, cache.params
    n_param = len(arch.param_layers)
    dw: list = [None] * n_param
    db: list = [None] * n_param
    p = n_param
    for layer, entry in zip(reversed(arch.layers), reversed(cache.entries)):
        k = layer.kind
        if k == "dense":
            p -= 1
            h, m = entry
            if m is not None:
                g = g * m
            dw[p] = g.T @ h
            db[p] = g.sum(axis=0)
            g = g @ params.weights[p] if p > 0 else None
        elif k == "conv2d":
            p -= 1
            cols, xshape, m = entry
            if m is not None:
                g = g * m[None, :, None, None]
            w = params.weights[p]
            go = g.transpose(0, 2, 3, 1).reshape(-1, w.shape[0])
            dw[p] = (go.T @ cols).reshape(w.shape)
            db[p] = go.sum(axis=0)
            if p > 0:
                g = _col2im(go @ w.reshape(w.shape[0], -1), xshape, layer)
            else:
                g = None
        elif k == "relu":
            g = g * entry
        elif k == "maxpool2d":
            arg, xshape = entry
            g = _unpool(g, arg, xshape, layer)
        elif k == "flatten":
            g = g.reshape(entry)
        if g is None:
            break
    return ModelParams(dw, db)


def _col2im(dcols: np.ndarray, xshape: tuple, layer: LayerSpec) -> np.ndarray:
    n, c, hh, ww = xshape
    k, s = layer.kernel_size, layer.stride
    ho = (hh - k) // s + 1
    wo = (ww - k) // s + 1
    d = dcols.reshape(n, ho, wo, c, k, k).transpose(0, 3, 1, 2, 4, 5)
    dx = np.zeros(xshape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += d[..., i, j]
    return dx


def _unpool(g: np.ndarray, arg: np.ndarray, xshape: tuple, layer: LayerSpec) -> np.ndarray:
    w, s = layer.window, layer.stride
    ho, wo = arg.shape[2:]
    dx = np.zeros(xshape, dtype=g.dtype)
    for i in range(w):
        for j in range(w):
            hit = arg == i * w + j
            dx[:, :, i:i + s * ho:s, j:j + s * wo:s] += g * hit
    return dx


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probs: np.ndarray, labels: np.ndarray, floor: float = 1e-12) -> float:
    """Mean negative log-likelihood of the true labels."""
    labels = np.asarray(labels)
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, floor)).mean())


def ce_logit_grad(logits: np.ndarray, labels: np.ndarray) -> np.ndarray:
    g = softmax(logits)
    g[np.arange(len(labels)), labels] -= 1.0
    return g / len(labels)


@dataclass
class OptimizerState:
    """Momentum buffers for SGD with Nesterov momentum."""

    buffers: list
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4

    @classmethod
    def for_params(cls, params: ModelParams, lr: float = 0.01, momentum: float = 0.9,
                   weight_decay: float = 5e-4) -> "OptimizerState":
        return cls([np.zeros_like(t) for t in params.tensors()], lr, momentum, weight_decay)


def sgd_step(params: ModelParams, grads: ParamGrads, opt: OptimizerState) -> ModelParams:
    """One Nesterov SGD step; updates ``opt`` buffers in place.

    v <- m*v + (g + wd*w);  w <- w - lr*((g + wd*w) + m*v)
    """
    new = []
    for i, (w, g) in enumerate(zip(params.tensors(), grads.tensors())):
        if not np.isfinite(g).all():
            raise TrainingError(f"non-finite gradient in tensor {i}")
        if w.shape != g.shape:
            raise TrainingError(f"gradient shape {g.shape} does not match parameter {w.shape}")
        gd = g + opt.weight_decay * w if opt.weight_decay else g
        v = opt.momentum * opt.buffers[i] + gd
        opt.buffers[i] = v
        new.append(w - opt.lr * (gd + opt.momentum * v))
    return ModelParams.from_tensors(new)
