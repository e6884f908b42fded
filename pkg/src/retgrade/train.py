"""Adam optimization, the weighted-sampling epoch loop, validation-QWK
checkpoint selection, and binary checkpoint serialization."""

from __future__ import annotations

import logging
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import coral, metrics
from .data import Manifest, ManifestRecord, load_manifest, sample_weights, weighted_sample
from .errors import (CheckpointChecksumError, CheckpointFormatError, CheckpointTruncatedError,
                     CheckpointVersionError, ImageIOError, InvalidInputError, NumericError,
                     StateError)
from .imgproc import IDENTITY_AUGMENT, AugmentConfig, augment, read_image, to_input_tensor
from .model import DualBranchModel, ModelConfig, batch_loss_and_grad
from .nn import BackboneConfig, ParamStore

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"RGCK"
CHECKPOINT_VERSION = 1


@dataclass
class TrainConfig:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 10
    batch_size: int = 16
    seed: int = 0
    steps_per_epoch: int = 0  # 0 = ceil(train_size / batch_size)

    def __post_init__(self):
        if self.lr < 0:
            raise InvalidInputError(f"lr must be >= 0, got {self.lr}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise InvalidInputError("beta1, beta2 must lie in [0, 1)")
        if self.epochs < 1 or self.batch_size < 1:
            raise InvalidInputError("epochs and batch_size must be >= 1")


class AdamState:
    """First/second moment buffers mirroring a parameter store."""

    def __init__(self, store: ParamStore):
        self.m = {name: np.zeros_like(p.value) for name, p in store.items()}
        self.v = {name: np.zeros_like(p.value) for name, p in store.items()}
        self.t = 0


def adam_step(store: ParamStore, state: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update over every parameter in the store."""
    if not store.grads_populated:
        raise StateError("adam_step called before any backward pass")
    state.t += 1
    bc1 = 1.0 - cfg.beta1 ** state.t
    bc2 = 1.0 - cfg.beta2 ** state.t
    for name, p in store.items():
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= cfg.beta1
        m += (1.0 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1.0 - cfg.beta2) * g * g
        p.value -= cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.eps)


# ---------------------------------------------------------------------------
# Datasets
# ---------------------------------------------------------------------------

@dataclass
class BranchDataset:
    """In-memory dataset of paired branch images plus normalization stats."""

    records: list[ManifestRecord]
    imgs0: list[np.ndarray]
    imgs3: list[np.ndarray]
    mean: tuple[float, float, float] = (0.5, 0.5, 0.5)
    std: tuple[float, float, float] = (0.25, 0.25, 0.25)

    def __len__(self) -> int:
        return len(self.records)

    def grades(self) -> np.ndarray:
        return np.array([r.grade for r in self.records], dtype=np.int64)

    def manifest(self) -> Manifest:
        return Manifest(list(self.records))


def _load_or_raise(path) -> np.ndarray:
    try:
        return read_image(path)
    except OSError as e:
        raise ImageIOError(f"cannot load image {path}: {e}") from e


def load_processed(proc_dir, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25)) -> BranchDataset:
    """Load a preprocessed tree written by the ``preprocess`` command: the
    manifest points at branch0/ images and branch3/ holds the mirror files."""
    proc_dir = Path(proc_dir)
    m = load_manifest(proc_dir / "manifest.csv")
    imgs0, imgs3 = [], []
    for r in m:
        p0 = Path(r.path)
        imgs0.append(_load_or_raise(p0))
        imgs3.append(_load_or_raise(p0.parent.parent / "branch3" / p0.name))
    return BranchDataset(list(m.records), imgs0, imgs3, tuple(mean), tuple(std))


def _batch_tensors(ds: BranchDataset, idx, aug_cfg: AugmentConfig | None, seed_tuple=None):
    """Stack normalized input tensors for both branches; when augmenting, the
    two branch variants of a record share one random draw."""
    t0, t3 = [], []
    for slot, i in enumerate(np.asarray(idx)):
        a0, a3 = ds.imgs0[i], ds.imgs3[i]
        if aug_cfg is not None:
            entropy = seed_tuple + (slot,)
            a0 = augment(a0, aug_cfg, np.random.default_rng(np.random.SeedSequence(entropy)))
            a3 = augment(a3, aug_cfg, np.random.default_rng(np.random.SeedSequence(entropy)))
        t0.append(to_input_tensor(a0, ds.mean, ds.std))
        t3.append(to_input_tensor(a3, ds.mean, ds.std))
    return np.stack(t0), np.stack(t3)


# ---------------------------------------------------------------------------
# Epoch loop / fit / evaluate
# ---------------------------------------------------------------------------

def train_epoch(model: DualBranchModel, ds: BranchDataset, weights: np.ndarray,
                cfg: TrainConfig, rng: np.random.Generator, state: AdamState,
                epoch: int, aug_cfg: AugmentConfig = IDENTITY_AUGMENT,
                inject_nan_at: int = -1) -> tuple[float, float]:
    """One epoch of weighted-with-replacement sampling and Adam steps.

    Returns the epoch mean loss and the QWK over the (augmented) training
    predictions made during the epoch.
    """
    steps = cfg.steps_per_epoch or math.ceil(len(ds) / cfg.batch_size)
    grades = ds.grades()
    losses = []
    preds_all, labels_all = [], []
    for step in range(steps):
        idx = weighted_sample(weights, cfg.batch_size, rng)
        x0, x3 = _batch_tensors(ds, idx, aug_cfg, (cfg.seed, 101, epoch, step))
        batch_grades = grades[idx]
        z, loss, dz = batch_loss_and_grad(model, x0, x3, batch_grades)
        if step == inject_nan_at:
            loss = float("nan")
        if not math.isfinite(loss):
            raise NumericError(f"non-finite loss at epoch {epoch}, step {step + 1}")
        model.zero_grads()
        model.backward(dz)
        adam_step(model.store, state, cfg)
        losses.append(loss)
        preds_all.extend(coral.coral_decode(z).tolist())
        labels_all.extend(batch_grades.tolist())
    return float(np.mean(losses)), metrics.qwk(preds_all, labels_all)


def evaluate_model(model, ds: BranchDataset,
                   batch_size: int = 32) -> tuple[float, np.ndarray]:
    """Deterministic evaluation (no augmentation): QWK and confusion matrix.
    Accepts either a live model or a Checkpoint."""
    if isinstance(model, Checkpoint):
        model = model_from_checkpoint(model)
    if len(ds) == 0:
        raise InvalidInputError("cannot evaluate on an empty dataset")
    preds = []
    for start in range(0, len(ds), batch_size):
        idx = range(start, min(start + batch_size, len(ds)))
        x0, x3 = _batch_tensors(ds, list(idx), None)
        preds.extend(model.predict(x0, x3).tolist())
    labels = ds.grades()
    return metrics.qwk(preds, labels), metrics.confusion(preds, labels)


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_qwk: float
    val_qwk: float


@dataclass
class Checkpoint:
    hyper: dict[str, str]
    param_names: list[str]
    params: dict[str, np.ndarray]
    best_val_qwk: float
    epoch: int
    format_version: int = CHECKPOINT_VERSION


def _model_hyper(cfg: ModelConfig, mean, std) -> dict[str, str]:
    def csv(values):
        return ",".join(repr(v) if isinstance(v, float) else str(v) for v in values)

    return {
        "n_grades": str(cfg.n_grades),
        "b0_input": str(cfg.b0.input_size),
        "b0_channels": csv(cfg.b0.stage_channels),
        "b0_dim": str(cfg.b0.feature_dim),
        "b3_input": str(cfg.b3.input_size),
        "b3_channels": csv(cfg.b3.stage_channels),
        "b3_dim": str(cfg.b3.feature_dim),
        "fused_dim": str(cfg.fused_dim),
        "gate_hidden": "1" if cfg.gate_hidden else "0",
        "norm_mean": csv(tuple(float(v) for v in mean)),
        "norm_std": csv(tuple(float(v) for v in std)),
    }


def model_config_from_hyper(hyper: dict[str, str]) -> ModelConfig:
    def ints(key):
        return tuple(int(v) for v in hyper[key].split(","))

    return ModelConfig(
        b0=BackboneConfig(int(hyper["b0_input"]), ints("b0_channels"), int(hyper["b0_dim"])),
        b3=BackboneConfig(int(hyper["b3_input"]), ints("b3_channels"), int(hyper["b3_dim"])),
        fused_dim=int(hyper["fused_dim"]),
        gate_hidden=hyper.get("gate_hidden", "0") == "1",
        n_grades=int(hyper.get("n_grades", "5")),
    )


def norm_from_hyper(hyper: dict[str, str]) -> tuple[tuple[float, ...], tuple[float, ...]]:
    mean = tuple(float(v) for v in hyper["norm_mean"].split(","))
    std = tuple(float(v) for v in hyper["norm_std"].split(","))
    return mean, std


def make_checkpoint(model: DualBranchModel, mean, std, val_qwk: float, epoch: int,
                    extra_hyper: dict[str, str] | None = None) -> Checkpoint:
    hyper = _model_hyper(model.cfg, mean, std)
    if extra_hyper:
        hyper.update(extra_hyper)
    names = model.store.names()
    params = {n: model.store[n].value.astype(np.float32, copy=True) for n in names}
    return Checkpoint(hyper, names, params, float(val_qwk), int(epoch))


def model_from_checkpoint(ck: Checkpoint) -> DualBranchModel:
    store = ParamStore()
    for name in ck.param_names:
        store.register(name, np.ascontiguousarray(ck.params[name], dtype=np.float32))
    return DualBranchModel(model_config_from_hyper(ck.hyper), store=store)


def fit(model: DualBranchModel, train_ds: BranchDataset, val_ds: BranchDataset | None,
        cfg: TrainConfig, aug_cfg: AugmentConfig = IDENTITY_AUGMENT,
        weight_exponent: float = 1.0, val_evaluator=None,
        extra_hyper: dict[str, str] | None = None,
        inject_nan_at: int = -1) -> tuple[Checkpoint, list[EpochStats]]:
    """Train for cfg.epochs epochs, evaluating validation QWK after each one
    and keeping the checkpoint of the best epoch (ties go to the earlier one).

    ``val_evaluator``, when given, replaces the real validation pass; it is
    called with the model and must return a QWK value.
    """
    if val_evaluator is None and (val_ds is None or len(val_ds) == 0):
        raise InvalidInputError("fit requires a non-empty validation set")
    weights = sample_weights(train_ds.manifest(), weight_exponent)
    rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, 2)))
    state = AdamState(model.store)
    history: list[EpochStats] = []
    best: Checkpoint | None = None
    for epoch in range(1, cfg.epochs + 1):
        mean_loss, train_qwk = train_epoch(model, train_ds, weights, cfg, rng, state,
                                           epoch, aug_cfg, inject_nan_at=inject_nan_at)
        if val_evaluator is not None:
            val_qwk = float(val_evaluator(model))
        else:
            val_qwk, _ = evaluate_model(model, val_ds)
        history.append(EpochStats(epoch, mean_loss, train_qwk, val_qwk))
        logger.info("epoch %d: loss=%.4f train_qwk=%.4f val_qwk=%.4f",
                    epoch, mean_loss, train_qwk, val_qwk)
        if best is None or val_qwk > best.best_val_qwk:
            best = make_checkpoint(model, train_ds.mean, train_ds.std, val_qwk, epoch,
                                   extra_hyper)
    return best, history


def write_history_csv(history: list[EpochStats], path) -> None:
    lines = ["epoch,train_loss,train_qwk,val_qwk"]
    for h in history:
        lines.append(f"{h.epoch},{h.train_loss!r},{h.train_qwk!r},{h.val_qwk!r}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


# ---------------------------------------------------------------------------
# Checkpoint serialization
# ---------------------------------------------------------------------------

def save_checkpoint(ck: Checkpoint, path) -> None:
    """Binary layout: magic, u32 version, u32 header length, UTF-8 key=value
    header with an ordered parameter table, raw little-endian float32 payload
    in table order, and a trailing CRC-32 of everything prior."""
    lines = [f"{k}={v}" for k, v in ck.hyper.items()]
    lines.append(f"best_val_qwk={ck.best_val_qwk!r}")
    lines.append(f"epoch={ck.epoch}")
    for name in ck.param_names:
        shape = ",".join(str(d) for d in ck.params[name].shape)
        lines.append(f"param={name}:{shape}")
    header = "\n".join(lines).encode("utf-8")
    body = bytearray()
    body += CHECKPOINT_MAGIC
    body += struct.pack("<II", ck.format_version, len(header))
    body += header
    for name in ck.param_names:
        body += ck.params[name].astype("<f4", copy=False).tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)))
    Path(path).write_bytes(bytes(body))


def load_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if len(data) < 12 or data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(f"{path}: bad magic bytes")
    version, header_len = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(f"{path}: unsupported format version {version}")
    if len(data) < 12 + header_len:
        raise CheckpointTruncatedError(f"{path}: file shorter than declared header")
    header = data[12:12 + header_len].decode("utf-8")
    hyper: dict[str, str] = {}
    table: list[tuple[str, tuple[int, ...]]] = []
    best_val_qwk = 0.0
    epoch = 0
    for line in header.splitlines():
        key, _, value = line.partition("=")
        if key == "param":
            name, _, shape_s = value.partition(":")
            shape = tuple(int(d) for d in shape_s.split(",")) if shape_s else ()
            table.append((name, shape))
        elif key == "best_val_qwk":
            best_val_qwk = float(value)
        elif key == "epoch":
            epoch = int(value)
        else:
            hyper[key] = value
    payload_len = sum(int(np.prod(shape, dtype=np.int64)) * 4 for _, shape in table)
    expected_len = 12 + header_len + payload_len + 4
    if len(data) < expected_len:
        raise CheckpointTruncatedError(
            f"{path}: file is {len(data)} bytes, expected {expected_len}")
    (stored_crc,) = struct.unpack("<I", data[expected_len - 4:expected_len])
    if zlib.crc32(data[:expected_len - 4]) != stored_crc or len(data) != expected_len:
        raise CheckpointChecksumError(f"{path}: CRC-32 mismatch")
    payload = data[12 + header_len:expected_len - 4]
    params = {}
    offset = 0
    for name, shape in table:
        n = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(payload, dtype="<f4", count=n, offset=offset).reshape(shape)
        params[name] = arr.astype(np.float32).copy()
        offset += n * 4
    return Checkpoint(hyper, [n for n, _ in table], params, best_val_qwk, epoch, version)
