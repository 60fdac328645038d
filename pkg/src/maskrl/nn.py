"""A small numpy neural-network engine: dense/conv layers, batch norm, dropout.

Networks are ordered lists of layer specs plus a :class:`NetworkParams`
container. ``forward`` returns a cache that ``backward`` consumes to produce
exact reverse-mode gradients.

Image tensors are channels-last, ``(batch, H, W, C)``, and convolution kernels
are stored as ``(out_channels, k, k, in_channels)``; this keeps the im2col
copies contiguous. ``to_channels_last`` converts ``(batch, C, H, W)`` input.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DEFAULT_DTYPE = np.float32
BN_EPS = 1e-5
BN_MOMENTUM = 0.1
PROB_CLAMP = 1e-7


class ShapeError(ValueError):
    pass


class StaleCacheError(RuntimeError):
    """The parameters changed between ``forward`` and ``backward``."""


class NonFiniteGradientError(FloatingPointError):
    pass


@dataclass(frozen=True)
class Dense:
    in_features: int
    out_features: int


@dataclass(frozen=True)
class Conv2d:
    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1


@dataclass(frozen=True)
class ReLU:
    pass


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dropout:
    rate: float

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {self.rate}")


@dataclass(frozen=True)
class BatchNorm:
    """Per-feature (2-D input) or per-channel (4-D input) batch normalization."""
    features: int


LayerSpec = Union[Dense, Conv2d, ReLU, Flatten, Dropout, BatchNorm]


def layer_to_dict(layer: LayerSpec) -> dict:
    d = {"kind": type(layer).__name__}
    d.update(layer.__dict__)
    return d


def layer_from_dict(d: dict) -> LayerSpec:
    kinds = {cls.__name__: cls for cls in (Dense, Conv2d, ReLU, Flatten, Dropout, BatchNorm)}
    d = dict(d)
    try:
        cls = kinds[d.pop("kind")]
    except KeyError as exc:
        raise ValueError(f"unknown layer kind {exc}") from None
    return cls(**d)


def output_shape(layers: list[LayerSpec], input_shape: tuple[int, ...]) -> tuple[int, ...]:
    """Per-sample output shape; raises :class:`ShapeError` on incompatible layers."""
    shape = tuple(input_shape)
    for i, layer in enumerate(layers):
        if isinstance(layer, Dense):
            if shape != (layer.in_features,):
                raise ShapeError(f"layer {i}: Dense expects ({layer.in_features},), got {shape}")
            shape = (layer.out_features,)
        elif isinstance(layer, Conv2d):
            if len(shape) != 3 or shape[2] != layer.in_channels:
                raise ShapeError(f"layer {i}: Conv2d expects {layer.in_channels} channels, got {shape}")
            h = (shape[0] - layer.kernel) // layer.stride + 1
            w = (shape[1] - layer.kernel) // layer.stride + 1
            if h < 1 or w < 1:
                raise ShapeError(f"layer {i}: input {shape} smaller than kernel {layer.kernel}")
            shape = (h, w, layer.out_channels)
        elif isinstance(layer, BatchNorm):
            if shape[-1] != layer.features:
                raise ShapeError(f"layer {i}: BatchNorm expects {layer.features} features, got {shape}")
        elif isinstance(layer, Flatten):
            shape = (int(np.prod(shape)),)
    return shape


def to_channels_last(x: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(np.moveaxis(x, -3, -1))


def conv_extractor(obs_shape: tuple[int, int, int], arch: str = "desk") -> list[LayerSpec]:
    """Convolutional feature extractor ending in ``Flatten``.

    ``obs_shape`` is ``(C, H, W)``. ``desk`` fits 8x8 grids; ``table1`` is the
    8/4, 4/2, 3/1 stack, which needs inputs of at least 36 pixels per side.
    """
    channels, height, width = obs_shape
    if arch == "desk":
        layers = [Conv2d(channels, 16, 3, 1), ReLU(), Conv2d(16, 32, 3, 1), ReLU(), Flatten()]
    elif arch == "table1":
        layers = [Conv2d(channels, 32, 8, 4), ReLU(), Conv2d(32, 64, 4, 2), ReLU(),
                  Conv2d(64, 64, 3, 1), ReLU(), Flatten()]
    else:
        raise ValueError(f"unknown extractor architecture {arch!r}")
    output_shape(layers, (height, width, channels))
    return layers


@dataclass
class NetworkParams:
    """Trainable tensors and batch-norm running statistics, one dict per layer."""
    weights: list[dict[str, np.ndarray]]
    buffers: list[dict[str, np.ndarray]]
    training: bool = False
    version: int = 0

    def copy(self) -> "NetworkParams":
        return copy.deepcopy(self)

    def n_parameters(self) -> int:
        return sum(v.size for w in self.weights for v in w.values())


def xavier_init(layers: list[LayerSpec], rng_seed: int | np.random.Generator,
                dtype=DEFAULT_DTYPE) -> NetworkParams:
    """Glorot-uniform weights, zero biases, identity batch norm."""
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    weights, buffers = [], []
    for layer in layers:
        w: dict[str, np.ndarray] = {}
        b: dict[str, np.ndarray] = {}
        if isinstance(layer, Dense):
            bound = np.sqrt(6.0 / (layer.in_features + layer.out_features))
            w["W"] = rng.uniform(-bound, bound, (layer.out_features, layer.in_features)).astype(dtype)
            w["b"] = np.zeros(layer.out_features, dtype=dtype)
        elif isinstance(layer, Conv2d):
            k2 = layer.kernel * layer.kernel
            bound = np.sqrt(6.0 / (layer.in_channels * k2 + layer.out_channels * k2))
            shape = (layer.out_channels, layer.kernel, layer.kernel, layer.in_channels)
            w["W"] = rng.uniform(-bound, bound, shape).astype(dtype)
            w["b"] = np.zeros(layer.out_channels, dtype=dtype)
        elif isinstance(layer, BatchNorm):
            w["gamma"] = np.ones(layer.features, dtype=dtype)
            w["beta"] = np.zeros(layer.features, dtype=dtype)
            b["running_mean"] = np.zeros(layer.features, dtype=dtype)
            b["running_var"] = np.ones(layer.features, dtype=dtype)
        weights.append(w)
        buffers.append(b)
    return NetworkParams(weights=weights, buffers=buffers)


@dataclass
class Cache:
    layers: list[LayerSpec]
    entries: list[tuple]
    params: NetworkParams = field(repr=False)
    version: int = 0


def _bn_axes(x: np.ndarray) -> tuple[int, ...]:
    return tuple(range(x.ndim - 1))


def forward(params: NetworkParams, layers: list[LayerSpec], x: np.ndarray,
            training: bool = False, rng: np.random.Generator | None = None) -> tuple[np.ndarray, Cache]:
    """Run ``x`` (batch first) through ``layers``.

    Dropout is active and batch norm uses batch statistics only when
    ``training`` is true; running statistics are updated in that case.
    """
    if len(params.weights) != len(layers):
        raise ShapeError("parameter list does not match layer list")
    entries = []
    for i, layer in enumerate(layers):
        w = params.weights[i]
        if isinstance(layer, Dense):
            if x.ndim != 2 or x.shape[1] != layer.in_features:
                raise ShapeError(f"layer {i}: Dense expects (batch, {layer.in_features}), got {x.shape}")
            entries.append((x,))
            x = x @ w["W"].T + w["b"]
        elif isinstance(layer, Conv2d):
            if x.ndim != 4 or x.shape[3] != layer.in_channels:
                raise ShapeError(f"layer {i}: Conv2d expects (batch, H, W, {layer.in_channels}), got {x.shape}")
            k, s = layer.kernel, layer.stride
            win = sliding_window_view(x, (k, k), axis=(1, 2))[:, ::s, ::s]
            bsz, ho, wo = win.shape[:3]
            # (batch, ho, wo, C, k, k) -> rows ordered (k, k, C) to match the kernel layout
            cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(bsz * ho * wo, -1)
            out = cols @ w["W"].reshape(layer.out_channels, -1).T + w["b"]
            entries.append((x.shape, cols, ho, wo))
            x = out.reshape(bsz, ho, wo, layer.out_channels)
        elif isinstance(layer, ReLU):
            positive = x > 0
            entries.append((positive,))
            x = x * positive
        elif isinstance(layer, Flatten):
            entries.append((x.shape,))
            x = x.reshape(x.shape[0], -1)
        elif isinstance(layer, Dropout):
            if training and layer.rate > 0:
                if rng is None:
                    raise ValueError("training-mode dropout needs a random generator")
                draw_dtype = x.dtype if x.dtype in (np.float32, np.float64) else np.float64
                keep = (rng.random(x.shape, dtype=draw_dtype) >= layer.rate).astype(x.dtype)
                keep *= x.dtype.type(1.0 / (1.0 - layer.rate))
                entries.append((keep,))
                x = x * keep
            else:
                entries.append((None,))
        elif isinstance(layer, BatchNorm):
            if x.shape[-1] != layer.features:
                raise ShapeError(f"layer {i}: BatchNorm expects {layer.features} features, got {x.shape}")
            axes = _bn_axes(x)
            buf = params.buffers[i]
            if training:
                mean = x.mean(axis=axes)
                centered = x - mean
                var = np.mean(centered * centered, axis=axes)
                n = x.size // layer.features
                unbiased = var * (n / max(n - 1, 1))
                buf["running_mean"] = ((1 - BN_MOMENTUM) * buf["running_mean"] + BN_MOMENTUM * mean).astype(x.dtype)
                buf["running_var"] = ((1 - BN_MOMENTUM) * buf["running_var"] + BN_MOMENTUM * unbiased).astype(x.dtype)
            else:
                mean, var = buf["running_mean"], buf["running_var"]
                centered = x - mean
            inv_std = 1.0 / np.sqrt(var + BN_EPS)
            xhat = centered * inv_std
            entries.append((xhat, inv_std, training))
            x = xhat * w["gamma"] + w["beta"]
        else:
            raise TypeError(f"unsupported layer {layer!r}")
    return x, Cache(layers=list(layers), entries=entries, params=params, version=params.version)


def backward(cache: Cache, grad_out: np.ndarray,
             input_grad: bool = True) -> tuple[list[dict[str, np.ndarray]], np.ndarray | None]:
    """Gradients of a scalar loss w.r.t. every trainable tensor and the input.

    With ``input_grad=False`` the first layer skips its input gradient and
    ``None`` is returned in its place.
    """
    params = cache.params
    if params.version != cache.version:
        raise StaleCacheError("parameters were updated after this forward pass")
    grads: list[dict[str, np.ndarray]] = [dict() for _ in cache.layers]
    g = grad_out
    for i in range(len(cache.layers) - 1, -1, -1):
        layer, entry, w = cache.layers[i], cache.entries[i], params.weights[i]
        need_dx = input_grad or i > 0
        if isinstance(layer, Dense):
            (x,) = entry
            grads[i]["W"] = g.T @ x
            grads[i]["b"] = g.sum(axis=0)
            g = g @ w["W"] if need_dx else None
        elif isinstance(layer, Conv2d):
            x_shape, cols, ho, wo = entry
            k, s = layer.kernel, layer.stride
            gr = g.reshape(-1, layer.out_channels)
            grads[i]["W"] = (gr.T @ cols).reshape(w["W"].shape)
            grads[i]["b"] = gr.sum(axis=0)
            if not need_dx:
                g = None
                continue
            dcols = (gr @ w["W"].reshape(layer.out_channels, -1)).reshape(x_shape[0], ho, wo, k, k, -1)
            dx = np.zeros(x_shape, dtype=g.dtype)
            for ki in range(k):
                for kj in range(k):
                    dx[:, ki:ki + s * (ho - 1) + 1:s, kj:kj + s * (wo - 1) + 1:s] += dcols[:, :, :, ki, kj]
            g = dx
        elif isinstance(layer, ReLU):
            g = g * entry[0]
        elif isinstance(layer, Flatten):
            g = g.reshape(entry[0])
        elif isinstance(layer, Dropout):
            if entry[0] is not None:
                g = g * entry[0]
        elif isinstance(layer, BatchNorm):
            xhat, inv_std, batch_stats = entry
            axes = _bn_axes(g)
            grads[i]["gamma"] = (g * xhat).sum(axis=axes)
            grads[i]["beta"] = g.sum(axis=axes)
            if not need_dx:
                g = None
                continue
            gx = g * w["gamma"]
            if batch_stats:
                mean_g = gx.mean(axis=axes)
                mean_gx = (gx * xhat).mean(axis=axes)
                g = (gx - mean_g - xhat * mean_gx) * inv_std
            else:
                g = gx * inv_std
    return grads, g


class Network:
    """A layer list bound to its parameters."""

    def __init__(self, layers: list[LayerSpec], params: NetworkParams):
        self.layers = list(layers)
        self.params = params

    @classmethod
    def create(cls, layers: list[LayerSpec], seed: int | np.random.Generator,
               dtype=DEFAULT_DTYPE) -> "Network":
        return cls(layers, xavier_init(layers, seed, dtype=dtype))

    def forward(self, x: np.ndarray, training: bool = False,
                rng: np.random.Generator | None = None) -> tuple[np.ndarray, Cache]:
        return forward(self.params, self.layers, x, training=training, rng=rng)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self.params, self.layers, x, training=False)[0]

    def backward(self, cache: Cache, grad_out: np.ndarray, input_grad: bool = True):
        return backward(cache, grad_out, input_grad=input_grad)

    def copy(self) -> "Network":
        return Network(self.layers, self.params.copy())


@dataclass
class AdamState:
    m: list[dict[str, np.ndarray]]
    v: list[dict[str, np.ndarray]]
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0

    @classmethod
    def for_params(cls, params: NetworkParams, lr: float = 3e-4, **kw) -> "AdamState":
        m = [{k: np.zeros_like(v) for k, v in w.items()} for w in params.weights]
        v = [{k: np.zeros_like(t) for k, t in w.items()} for w in params.weights]
        return cls(m=m, v=v, lr=lr, **kw)


def adam_step(state: AdamState, params: NetworkParams,
              grads: list[dict[str, np.ndarray]]) -> NetworkParams:
    """One bias-corrected Adam update, applied in place."""
    for i, g in enumerate(grads):
        for name, t in g.items():
            # a finite sum implies finite entries; overflow falls through to the full check
            if not np.isfinite(t.sum()) and not np.all(np.isfinite(t)):
                raise NonFiniteGradientError(f"non-finite gradient in layer {i}, parameter {name!r}")
            if t.shape != params.weights[i][name].shape:
                raise ShapeError(f"layer {i} {name}: gradient shape {t.shape} "
                                 f"!= parameter shape {params.weights[i][name].shape}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for i, g in enumerate(grads):
        for name, t in g.items():
            m = state.m[i][name]
            v = state.v[i][name]
            m += (1 - b1) * (t - m)
            v += (1 - b2) * (t * t - v)
            p = params.weights[i][name]
            denom = np.sqrt(v)
            denom *= 1.0 / np.sqrt(c2)
            denom += state.eps
            p -= ((state.lr / c1) * m / denom).astype(p.dtype, copy=False)
    params.version += 1
    return params


def grad_norm(*grad_lists: list[dict[str, np.ndarray]]) -> float:
    total = 0.0
    for grads in grad_lists:
        for g in grads:
            for t in g.values():
                flat = t.ravel()
                total += float(np.dot(flat, flat))
    return float(np.sqrt(total))


def clip_grads(max_norm: float, *grad_lists: list[dict[str, np.ndarray]]) -> float:
    """Scale all gradients jointly so their global L2 norm is at most ``max_norm``."""
    norm = grad_norm(*grad_lists)
    if norm > max_norm:
        scale = max_norm / (norm + 1e-6)
        for grads in grad_lists:
            for g in grads:
                for k in g:
                    g[k] = g[k] * g[k].dtype.type(scale)
    return norm


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    logits = np.asarray(logits)
    if logits.size == 0:
        raise ValueError("softmax of an empty vector")
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = logits - logits.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def sigmoid(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x)
    out = np.empty_like(x, dtype=np.result_type(x, np.float32))
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def bce_loss(p, y):
    """Binary cross-entropy of probability ``p`` against label ``y``, clamped."""
    p = np.clip(np.asarray(p, dtype=np.float64), PROB_CLAMP, 1.0 - PROB_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    loss = -(y * np.log(p) + (1.0 - y) * np.log(1.0 - p))
    return float(loss) if loss.ndim == 0 else loss


def bce_with_logits(logits: np.ndarray, y: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean BCE over a batch of logits and its gradient w.r.t. the logits."""
    p = sigmoid(logits)
    loss = bce_loss(p, y)
    grad = (p - y.astype(p.dtype)) / p.dtype.type(len(p))
    return float(np.mean(loss)), grad


def group_rows(keys: np.ndarray | None, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Representative rows and inverse index for rows sharing the same key.

    Rows with equal keys must hold identical inputs; per-sample layers then
    only need to run on the representatives. ``None`` keeps every row.
    """
    if keys is None:
        idx = np.arange(n)
        return idx, idx
    _, first, inverse = np.unique(np.asarray(keys), return_index=True, return_inverse=True)
    return first, inverse.reshape(-1)


def scatter_rows(g: np.ndarray, inverse: np.ndarray, n_groups: int) -> np.ndarray:
    """Sum the rows of ``g`` into their groups (adjoint of ``x[inverse]``)."""
    if n_groups == len(inverse) and np.array_equal(inverse, np.arange(n_groups)):
        return g
    out = np.zeros((n_groups,) + g.shape[1:], dtype=g.dtype)
    np.add.at(out, inverse, g)
    return out
