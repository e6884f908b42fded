"""Gated fusion of the two branch feature vectors: bias-free projections to a
shared width, concatenation, a learnable sigmoid gate, and the convex
per-channel combination fused = f0 * g + f3 * (1 - g)."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .coral import sigmoid
from .errors import ShapeError, StateError
from .nn import LinearLayer, ParamStore, ReLULayer, SigmoidLayer


@dataclass
class FusionParams:
    """proj0: (D, D0); proj3: (D, D3); gate_w: (D, 2D); gate_b: (D,)."""

    proj0: np.ndarray
    proj3: np.ndarray
    gate_w: np.ndarray
    gate_b: np.ndarray


def project_branches(f0: np.ndarray, f3: np.ndarray, p: FusionParams):
    """Bias-free linear maps of both branches onto the shared fused width."""
    f0 = np.asarray(f0)
    f3 = np.asarray(f3)
    if f0.shape[-1] != p.proj0.shape[1] or f3.shape[-1] != p.proj3.shape[1]:
        raise ShapeError(f"branch dims {f0.shape[-1]}/{f3.shape[-1]} do not match "
                         f"projections {p.proj0.shape}/{p.proj3.shape}")
    return f0 @ p.proj0.T, f3 @ p.proj3.T


def concat_features(f0p: np.ndarray, f3p: np.ndarray) -> np.ndarray:
    f0p = np.asarray(f0p)
    f3p = np.asarray(f3p)
    if f0p.shape != f3p.shape:
        raise ShapeError(f"projected feature shapes differ: {f0p.shape} vs {f3p.shape}")
    return np.concatenate([f0p, f3p], axis=-1)


def compute_gate(f_concat: np.ndarray, p: FusionParams) -> np.ndarray:
    """g = sigmoid(gate_w @ f_concat + gate_b), componentwise in (0, 1)."""
    f_concat = np.asarray(f_concat)
    if f_concat.shape[-1] != p.gate_w.shape[1]:
        raise ShapeError(f"concat length {f_concat.shape[-1]} != gate input {p.gate_w.shape[1]}")
    return sigmoid(f_concat @ p.gate_w.T + p.gate_b)


def fuse(f0p: np.ndarray, f3p: np.ndarray, g: np.ndarray) -> np.ndarray:
    f0p = np.asarray(f0p)
    f3p = np.asarray(f3p)
    g = np.asarray(g)
    if not (f0p.shape == f3p.shape == g.shape):
        raise ShapeError(f"length mismatch: {f0p.shape}, {f3p.shape}, {g.shape}")
    return f0p * g + f3p * (1.0 - g)


class GatedFusion:
    """Differentiable fusion block.

    The gate is a single affine layer + sigmoid by default; with
    ``hidden=True`` it becomes a squeeze-and-excitation style bottleneck
    (reduction ratio 4, relu) before the sigmoid.
    """

    def __init__(self, store: ParamStore, d0: int, d3: int, d: int,
                 hidden: bool = False, rng: np.random.Generator | None = None,
                 dtype=np.float32, prefix: str = "fusion"):
        self.d = d
        self.hidden = hidden
        self.proj0 = LinearLayer(store, f"{prefix}.proj0", d0, d, rng=rng, dtype=dtype, bias=False)
        self.proj3 = LinearLayer(store, f"{prefix}.proj3", d3, d, rng=rng, dtype=dtype, bias=False)
        if hidden:
            self.gate_hidden = LinearLayer(store, f"{prefix}.gate_hidden", 2 * d,
                                           max(1, (2 * d) // 4), rng=rng, dtype=dtype)
            self.gate_relu = ReLULayer()
            gate_in = max(1, (2 * d) // 4)
        else:
            self.gate_hidden = None
            self.gate_relu = None
            gate_in = 2 * d
        self.gate = LinearLayer(store, f"{prefix}.gate", gate_in, d, rng=rng, dtype=dtype)
        self.sigmoid = SigmoidLayer()
        self._cache = None

    def forward(self, f0: np.ndarray, f3: np.ndarray) -> np.ndarray:
        f0p = self.proj0.forward(f0)
        f3p = self.proj3.forward(f3)
        fc = np.concatenate([f0p, f3p], axis=1)
        h = fc
        if self.gate_hidden is not None:
            h = self.gate_relu.forward(self.gate_hidden.forward(fc))
        g = self.sigmoid.forward(self.gate.forward(h))
        self._cache = (f0p, f3p, g)
        return f0p * g + f3p * (1.0 - g)

    def backward(self, gout: np.ndarray):
        if self._cache is None:
            raise StateError("fusion backward called before forward")
        f0p, f3p, g = self._cache
        d_f0p = gout * g
        d_f3p = gout * (1.0 - g)
        d_g = gout * (f0p - f3p)
        d_h = self.gate.backward(self.sigmoid.backward(d_g))
        if self.gate_hidden is not None:
            d_fc = self.gate_hidden.backward(self.gate_relu.backward(d_h))
        else:
            d_fc = d_h
        d_f0p = d_f0p + d_fc[:, :self.d]
        d_f3p = d_f3p + d_fc[:, self.d:]
        return self.proj0.backward(d_f0p), self.proj3.backward(d_f3p)

    def as_params(self) -> FusionParams:
        """Snapshot view of the learned tensors for the functional ops above."""
        if self.gate_hidden is not None:
            raise ShapeError("FusionParams covers the single-layer gate only")
        return FusionParams(self.proj0.w.value, self.proj3.w.value,
                            self.gate.w.value, self.gate.b.value)
