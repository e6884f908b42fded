"""Ordinal regression head: K-1 cumulative binary logits that share one
weight vector and differ only in their threshold biases, with the matching
binary cross-entropy loss, its gradient, and exceedance-count decoding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InvalidInputError, ShapeError

N_GRADES = 5


@dataclass
class CoralHead:
    """Shared weight vector plus per-threshold biases; len(b) == K - 1."""

    w: np.ndarray
    b: np.ndarray

    @property
    def n_grades(self) -> int:
        return len(self.b) + 1


def coral_logits(fused: np.ndarray, head: CoralHead) -> np.ndarray:
    """z_k = w . fused + b_k; accepts a (D,) vector or an (N, D) batch."""
    fused = np.asarray(fused)
    if fused.shape[-1] != head.w.shape[0]:
        raise ShapeError(f"feature length {fused.shape[-1]} != head weight length {head.w.shape[0]}")
    score = fused @ head.w
    if fused.ndim == 2:
        return score[:, None] + head.b
    return score + head.b


def encode_targets(y: int, k: int = N_GRADES) -> np.ndarray:
    """Cumulative binary targets: t_j = 1 if y >= j, for j = 1..k-1."""
    if not 0 <= y <= k - 1:
        raise InvalidInputError(f"grade {y} out of range 0..{k - 1}")
    return (np.arange(1, k) <= y).astype(np.float64)


def coral_loss(z: np.ndarray, t: np.ndarray) -> float:
    """Sum over thresholds of softplus(z_k) - t_k * z_k (stable BCE with logits)."""
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if z.shape != t.shape:
        raise ShapeError(f"logit shape {z.shape} != target shape {t.shape}")
    return float(np.sum(np.logaddexp(0.0, z) - t * z))


def coral_loss_mean(z: np.ndarray, t: np.ndarray) -> float:
    """Batch reduction: mean over samples of the per-sample threshold sums."""
    z = np.asarray(z, dtype=np.float64)
    if z.ndim != 2:
        raise ShapeError(f"expected a (N, K-1) batch, got shape {z.shape}")
    return coral_loss(z, t) / z.shape[0]


def coral_loss_grad(z: np.ndarray, t: np.ndarray) -> np.ndarray:
    """d(loss)/dz_k = sigmoid(z_k) - t_k."""
    z = np.asarray(z, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    if z.shape != t.shape:
        raise ShapeError(f"logit shape {z.shape} != target shape {t.shape}")
    return sigmoid(z) - t


def coral_decode(z: np.ndarray) -> np.ndarray | int:
    """Grade = number of strictly positive logits (z_k == 0 does not exceed)."""
    z = np.asarray(z)
    counts = (z > 0.0).sum(axis=-1)
    return int(counts) if z.ndim == 1 else counts.astype(np.int64)


def sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out
