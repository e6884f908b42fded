"""The dual-resolution model: two convolutional backbones, gated fusion, and
the ordinal head, wired into one parameter store with exact analytic
gradients, plus a finite-difference gradient checker."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import coral
from .errors import ShapeError, StateError
from .fusion import GatedFusion
from .nn import Backbone, BackboneConfig, ParamStore, he_uniform


@dataclass(frozen=True)
class ModelConfig:
    b0: BackboneConfig = field(default_factory=lambda: BackboneConfig(224, (16, 32, 64, 128), 128))
    b3: BackboneConfig = field(default_factory=lambda: BackboneConfig(300, (24, 48, 96, 160), 160))
    fused_dim: int = 128
    gate_hidden: bool = False
    n_grades: int = 5


class CoralLayer:
    """Differentiable ordinal head: z_k = w . x + b_k.

    Biases start as a descending ramp over [-1, 1] so the thresholds are
    rank-consistent (non-increasing) from the first step.
    """

    def __init__(self, store: ParamStore, d: int, n_grades: int,
                 rng: np.random.Generator | None = None, dtype=np.float32):
        init_w = None
        init_b = None
        if "head.w" not in store:
            if rng is None:
                raise StateError("an rng is required to initialize the head")
            init_w = he_uniform((d,), d, rng, dtype)
            init_b = np.linspace(1.0, -1.0, n_grades - 1).astype(dtype)
        self.w = store.register("head.w", init_w)
        self.b = store.register("head.b", init_b)
        self._x = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return (x @ self.w.value)[:, None] + self.b.value

    def backward(self, gz: np.ndarray) -> np.ndarray:
        if self._x is None:
            raise StateError("head backward called before forward")
        per_sample = gz.sum(axis=1)
        self.w.grad += self._x.T @ per_sample
        self.b.grad += gz.sum(axis=0)
        return per_sample[:, None] * self.w.value[None, :]


class DualBranchModel:
    def __init__(self, cfg: ModelConfig, seed: int = 0,
                 store: ParamStore | None = None, dtype=np.float32):
        self.cfg = cfg
        self.dtype = dtype
        rng = None if store is not None and "head.w" in store else np.random.default_rng(seed)
        self.store = store if store is not None else ParamStore()
        self.backbone0 = Backbone(self.store, "b0", cfg.b0, rng, dtype)
        self.backbone3 = Backbone(self.store, "b3", cfg.b3, rng, dtype)
        self.fusion = GatedFusion(self.store, cfg.b0.feature_dim, cfg.b3.feature_dim,
                                  cfg.fused_dim, hidden=cfg.gate_hidden, rng=rng, dtype=dtype)
        self.head = CoralLayer(self.store, cfg.fused_dim, cfg.n_grades, rng, dtype)

    def forward(self, x0: np.ndarray, x3: np.ndarray) -> np.ndarray:
        """Logits (N, K-1) for a batch of branch-0 and branch-3 input tensors."""
        if x0.shape[0] != x3.shape[0]:
            raise ShapeError(f"branch batch sizes differ: {x0.shape[0]} vs {x3.shape[0]}")
        f0 = self.backbone0.forward(np.ascontiguousarray(x0, dtype=self.dtype))
        f3 = self.backbone3.forward(np.ascontiguousarray(x3, dtype=self.dtype))
        fused = self.fusion.forward(f0, f3)
        return self.head.forward(fused)

    def backward(self, dz: np.ndarray) -> None:
        """Accumulate d(loss)/d(param) for every parameter given d(loss)/d(logits)."""
        gf = self.head.backward(dz.astype(self.dtype, copy=False))
        g0, g3 = self.fusion.backward(gf)
        self.backbone0.backward(g0)
        self.backbone3.backward(g3)
        self.store.mark_grads_populated()

    def zero_grads(self) -> None:
        self.store.zero_grads()

    def predict(self, x0: np.ndarray, x3: np.ndarray) -> np.ndarray:
        return coral.coral_decode(self.forward(x0, x3))

    def clone(self, dtype=None) -> "DualBranchModel":
        dtype = dtype or self.dtype
        return DualBranchModel(self.cfg, store=self.store.clone(dtype), dtype=dtype)


def batch_loss_and_grad(model: DualBranchModel, x0, x3, grades):
    """Logits, mean ordinal loss over the batch, and the loss gradient w.r.t.
    the logits (already divided by the batch size)."""
    z = model.forward(x0, x3)
    targets = np.stack([coral.encode_targets(int(g), model.cfg.n_grades) for g in grades])
    loss = coral.coral_loss_mean(z, targets)
    dz = coral.coral_loss_grad(z, targets) / z.shape[0]
    return z, loss, dz


def gradient_check(model: DualBranchModel, x0, x3, grades,
                   n_coords: int = 240, eps: float = 1e-3, seed: int = 0):
    """Compare analytic gradients against central finite differences.

    Runs a float64 clone of the model so truncation, not roundoff, dominates
    the comparison. Coordinates are sampled near-uniformly over all parameter
    entries with at least one from every tensor, and the result is a list of
    (name, flat_index, analytic, numeric, rel_err) tuples with
    rel_err = |a - n| / max(1e-8, |n|).
    """
    m = model.clone(np.float64)
    x0 = np.asarray(x0, dtype=np.float64)
    x3 = np.asarray(x3, dtype=np.float64)

    def loss_fn() -> float:
        z = m.forward(x0, x3)
        t = np.stack([coral.encode_targets(int(g), m.cfg.n_grades) for g in grades])
        return coral.coral_loss_mean(z, t)

    m.zero_grads()
    _, _, dz = batch_loss_and_grad(m, x0, x3, grades)
    m.backward(dz)

    rng = np.random.default_rng(seed)
    names = m.store.names()
    total = sum(m.store[n].value.size for n in names)
    results = []
    for name in names:
        p = m.store[name]
        k = max(1, int(round(n_coords * p.value.size / total)))
        k = min(k, p.value.size)
        idx = rng.choice(p.value.size, size=k, replace=False)
        flat = p.value.reshape(-1)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_fn()
            flat[i] = orig - eps
            down = loss_fn()
            flat[i] = orig
            numeric = (up - down) / (2.0 * eps)
            analytic = p.grad.reshape(-1)[i]
            rel = abs(analytic - numeric) / max(1e-8, abs(numeric))
            results.append((name, int(i), float(analytic), float(numeric), float(rel)))
    return results
