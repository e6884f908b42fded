"""Minimal tensor math: parameter storage, the convolution / pooling / linear
primitives, and the small convolutional backbones that stand in for large
pretrained feature extractors at desk scale.

Tensors are plain numpy arrays. Layers cache whatever the forward pass needs
and accumulate parameter gradients until the store is explicitly zeroed, so
analytic gradients can be checked coordinate-by-coordinate against finite
differences.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, ShapeError, StateError

Tensor = np.ndarray


class Param:
    """A parameter tensor paired with a same-shape gradient slot."""

    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = value
        self.grad = np.zeros_like(value)


class ParamStore:
    """Named parameters with gradient accumulation state."""

    def __init__(self):
        self._params: dict[str, Param] = {}
        self.grads_populated = False

    def register(self, name: str, init: np.ndarray | None) -> Param:
        """Create a parameter, or re-bind to an existing one of the same shape."""
        if name in self._params:
            p = self._params[name]
            if init is not None and p.value.shape != init.shape:
                raise ShapeError(f"parameter {name}: existing shape {p.value.shape} != {init.shape}")
            return p
        if init is None:
            raise StateError(f"parameter {name} does not exist and no initializer was given")
        p = Param(np.array(init, copy=True))
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Param:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def names(self) -> list[str]:
        return list(self._params)

    def items(self):
        return self._params.items()

    def zero_grads(self) -> None:
        for p in self._params.values():
            p.grad[...] = 0
        self.grads_populated = False

    def mark_grads_populated(self) -> None:
        self.grads_populated = True

    def n_parameters(self) -> int:
        return sum(p.value.size for p in self._params.values())

    def clone(self, dtype=None) -> "ParamStore":
        out = ParamStore()
        for name, p in self._params.items():
            value = p.value.astype(dtype) if dtype is not None else p.value.copy()
            out.register(name, value)
        return out


def he_uniform(shape, fan_in: int, rng: np.random.Generator, dtype=np.float32) -> np.ndarray:
    """Uniform init with variance 2/fan_in (bound sqrt(6/fan_in))."""
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


# ---------------------------------------------------------------------------
# Convolution internals (batched im2col)
# ---------------------------------------------------------------------------

def _conv_out_size(size: int, k: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - k) // stride + 1


def _im2col(x: np.ndarray, k: int, stride: int, pad: int):
    n, c, h, w = x.shape
    if pad > 0:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    hp, wp = x.shape[2:]
    oh = (hp - k) // stride + 1
    ow = (wp - k) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"input {h}x{w} too small for kernel {k}, stride {stride}, pad {pad}")
    s0, s1, s2, s3 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (n, c, oh, ow, k, k), (s0, s1, s2 * stride, s3 * stride, s2, s3))
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh * ow, c * k * k)
    return np.ascontiguousarray(cols), oh, ow


def _col2im(gcols: np.ndarray, x_shape, k: int, stride: int, pad: int, oh: int, ow: int) -> np.ndarray:
    n, c, h, w = x_shape
    gx = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=gcols.dtype)
    g6 = gcols.reshape(n, oh, ow, c, k, k)
    for i in range(k):
        for j in range(k):
            gx[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += \
                g6[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    return gx[:, :, pad:pad + h, pad:pad + w]


def _conv_forward(x, weight, bias, stride, pad):
    cout, cin, k, _ = weight.shape
    cols, oh, ow = _im2col(x, k, stride, pad)
    w_mat = weight.reshape(cout, cin * k * k)
    y = cols @ w_mat.T + bias
    return y.transpose(0, 2, 1).reshape(x.shape[0], cout, oh, ow), cols, oh, ow


# ---------------------------------------------------------------------------
# Contract-level ops (single image or batch)
# ---------------------------------------------------------------------------

def conv2d(input: Tensor, weight: Tensor, bias: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation plus bias. Output spatial size follows the usual
    floor convention: H' = (H + 2*pad - k) // stride + 1."""
    x = np.asarray(input)
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    if weight.ndim != 4 or weight.shape[2] != weight.shape[3]:
        raise ShapeError(f"weight must be (C_out, C_in, k, k), got {weight.shape}")
    k = weight.shape[2]
    if k % 2 == 0:
        raise ShapeError(f"kernel size must be odd, got {k}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"input shape {input.shape} incompatible with weight {weight.shape}")
    y, _, _, _ = _conv_forward(x, weight, bias, stride, pad)
    return y[0] if single else y


def relu(x: Tensor) -> Tensor:
    return np.maximum(np.asarray(x), 0)


def global_avg_pool(x: Tensor) -> Tensor:
    """Per-channel spatial mean, accumulated in 64-bit."""
    x = np.asarray(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"expected (C, H, W) or (N, C, H, W), got {x.shape}")
    return x.mean(axis=(-2, -1), dtype=np.float64).astype(x.dtype)


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """weight @ x + bias for a (D_in,) vector or row-wise for an (N, D_in) batch."""
    x = np.asarray(x)
    weight = np.asarray(weight)
    bias = np.asarray(bias)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"input shape {x.shape} incompatible with weight {weight.shape}")
    if bias.shape != (weight.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[0]},)")
    return x @ weight.T + bias


# ---------------------------------------------------------------------------
# Layers (batch-first, caching, gradient accumulation)
# ---------------------------------------------------------------------------

def _need_rng(rng):
    if rng is None:
        raise StateError("an rng is required to initialize new parameters")
    return rng


class Conv2dLayer:
    def __init__(self, store: ParamStore, name: str, in_ch: int, out_ch: int,
                 k: int = 3, stride: int = 1, pad: int = 0,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        init_w = None
        init_b = None
        if f"{name}.weight" not in store:
            init_w = he_uniform((out_ch, in_ch, k, k), in_ch * k * k, _need_rng(rng), dtype)
            init_b = np.zeros(out_ch, dtype=dtype)
        self.w = store.register(f"{name}.weight", init_w)
        self.b = store.register(f"{name}.bias", init_b)
        self.stride = stride
        self.pad = pad
        self._cache = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        y, cols, oh, ow = _conv_forward(x, self.w.value, self.b.value, self.stride, self.pad)
        self._cache = (cols, x.shape, oh, ow)
        return y

    def backward(self, gy: np.ndarray) -> np.ndarray:
        if self._cache is None:
            raise StateError("conv backward called before forward")
        cols, x_shape, oh, ow = self._cache
        cout, cin, k, _ = self.w.value.shape
        g_mat = gy.transpose(0, 2, 3, 1).reshape(gy.shape[0], oh * ow, cout)
        self.w.grad += np.tensordot(g_mat, cols, axes=([0, 1], [0, 1])).reshape(self.w.value.shape)
        self.b.grad += g_mat.sum(axis=(0, 1))
        gcols = g_mat @ self.w.value.reshape(cout, cin * k * k)
        return _col2im(gcols, x_shape, k, self.stride, self.pad, oh, ow)


class ReLULayer:
    def __init__(self):
        self._mask = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.maximum(x, 0)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        if self._mask is None:
            raise StateError("relu backward called before forward")
        return gy * self._mask


class GlobalAvgPoolLayer:
    def __init__(self):
        self._hw = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._hw = x.shape[2:]
        return x.mean(axis=(2, 3), dtype=np.float64).astype(x.dtype)

    def backward(self, gy: np.ndarray) -> np.ndarray:
        if self._hw is None:
            raise StateError("pool backward called before forward")
        h, w = self._hw
        scale = np.asarray(1.0 / (h * w), dtype=gy.dtype)
        return np.broadcast_to((gy * scale)[:, :, None, None], gy.shape + (h, w)).copy()


class LinearLayer:
    def __init__(self, store: ParamStore, name: str, d_in: int, d_out: int,
                 rng: np.random.Generator | None = None, dtype=np.float32, bias: bool = True):
        init_w = None
        if f"{name}.weight" not in store:
            init_w = he_uniform((d_out, d_in), d_in, _need_rng(rng), dtype)
        self.w = store.register(f"{name}.weight", init_w)
        self.b = None
        if bias:
            init_b = None if f"{name}.bias" in store else np.zeros(d_out, dtype=dtype)
            self.b = store.register(f"{name}.bias", init_b)
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        y = x @ self.w.value.T
        if self.b is not None:
            y = y + self.b.value
        return y

    def backward(self, gy: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise StateError("linear backward called before forward")
        self.w.grad += gy.T @ self._x
        if self.b is not None:
            self.b.grad += gy.sum(axis=0)
        return gy @ self.w.value


class SigmoidLayer:
    def __init__(self):
        self._out = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self._out = out
        return out

    def backward(self, gy: np.ndarray) -> np.ndarray:
        if self._out is None:
            raise StateError("sigmoid backward called before forward")
        return gy * self._out * (1.0 - self._out)


# ---------------------------------------------------------------------------
# Backbone
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BackboneConfig:
    input_size: int
    stage_channels: tuple[int, ...]
    feature_dim: int

    def __post_init__(self):
        if not self.stage_channels:
            raise InvalidInputError("stage_channels must be non-empty")
        if self.feature_dim < 1:
            raise InvalidInputError("feature_dim must be >= 1")
        if self.input_size < 2 ** len(self.stage_channels):
            raise InvalidInputError(
                f"input_size {self.input_size} too small for {len(self.stage_channels)} stride-2 stages")


class Backbone:
    """Stack of [3x3 stride-2 conv -> relu] stages, global average pooling,
    and a final linear projection to the branch feature vector."""

    def __init__(self, store: ParamStore, prefix: str, cfg: BackboneConfig,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        self.cfg = cfg
        self.layers = []
        in_ch = 3
        for i, ch in enumerate(cfg.stage_channels):
            self.layers.append(Conv2dLayer(store, f"{prefix}.stage{i}", in_ch, ch,
                                           k=3, stride=2, pad=1, rng=rng, dtype=dtype))
            self.layers.append(ReLULayer())
            in_ch = ch
        self.layers.append(GlobalAvgPoolLayer())
        self.layers.append(LinearLayer(store, f"{prefix}.fc", in_ch, cfg.feature_dim,
                                       rng=rng, dtype=dtype))

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 4 or x.shape[1] != 3 or x.shape[2] != self.cfg.input_size \
                or x.shape[3] != self.cfg.input_size:
            raise ShapeError(
                f"expected (N, 3, {self.cfg.input_size}, {self.cfg.input_size}), got {x.shape}")
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, g: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            g = layer.backward(g)
        return g


def init_params(cfg: BackboneConfig, seed: int) -> ParamStore:
    """Fresh parameter store for a standalone backbone under the prefix 'backbone'."""
    store = ParamStore()
    Backbone(store, "backbone", cfg, rng=np.random.default_rng(seed))
    return store


def backbone_forward(img: Tensor, params: ParamStore, cfg: BackboneConfig) -> Tensor:
    """Functional forward pass for a (3, S, S) image or an (N, 3, S, S) batch
    using parameters registered under the prefix 'backbone'."""
    bb = Backbone(params, "backbone", cfg)
    x = np.asarray(img)
    single = x.ndim == 3
    out = bb.forward(x[None] if single else x)
    return out[0] if single else out
