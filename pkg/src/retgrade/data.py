"""Manifest handling: ingestion, stratified splitting, merging, and the
inverse-frequency weighted sampler used to balance training batches.

A manifest CSV has the header ``path,grade,domain`` with paths relative to
the file's own directory; records keep their file order.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError, ManifestError

N_GRADES = 5


@dataclass(frozen=True)
class ManifestRecord:
    path: str
    grade: int
    domain: str


@dataclass
class Manifest:
    records: list[ManifestRecord]

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __getitem__(self, i) -> ManifestRecord:
        return self.records[i]

    def grades(self) -> np.ndarray:
        return np.array([r.grade for r in self.records], dtype=np.int64)


def load_manifest(csv_path) -> Manifest:
    """Parse a manifest CSV; paths are resolved against the file's directory."""
    csv_path = Path(csv_path)
    base = csv_path.parent
    try:
        lines = csv_path.read_text(encoding="utf-8").splitlines()
    except OSError as e:
        raise ManifestError(f"cannot read manifest {csv_path}: {e}") from e
    if not lines or lines[0].strip() != "path,grade,domain":
        raise ManifestError(f"{csv_path}:1: expected header 'path,grade,domain'")
    records = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 3:
            raise ManifestError(f"{csv_path}:{lineno}: expected 3 fields, got {len(parts)}")
        path, grade_s, domain = (p.strip() for p in parts)
        if not path:
            raise ManifestError(f"{csv_path}:{lineno}: empty path")
        try:
            grade = int(grade_s)
        except ValueError:
            raise ManifestError(f"{csv_path}:{lineno}: grade '{grade_s}' is not an integer") from None
        if not 0 <= grade < N_GRADES:
            raise ManifestError(f"{csv_path}:{lineno}: grade {grade} out of range 0..{N_GRADES - 1}")
        records.append(ManifestRecord(str(base / path), grade, domain))
    return Manifest(records)


def save_manifest(m: Manifest, csv_path) -> None:
    """Write a manifest CSV with paths relative to the target directory."""
    csv_path = Path(csv_path)
    base = csv_path.parent
    lines = ["path,grade,domain"]
    for r in m.records:
        rel = os.path.relpath(r.path, base)
        lines.append(f"{rel},{r.grade},{r.domain}")
    csv_path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def stratified_split(m: Manifest, val_fraction: float, seed: int) -> tuple[Manifest, Manifest]:
    """Per-grade split: round(val_fraction * n_g) records of each grade go to
    the validation half, chosen by a seeded shuffle within the grade.

    Rounding is round-half-to-even; both halves keep the original record order.
    """
    if not 0.0 < val_fraction < 1.0:
        raise InvalidInputError(f"val_fraction must be in (0, 1), got {val_fraction}")
    rng = np.random.default_rng(seed)
    val_idx: set[int] = set()
    grades = m.grades()
    for g in range(N_GRADES):
        idx = np.nonzero(grades == g)[0]
        n_val = round(val_fraction * len(idx))
        if n_val == 0:
            continue
        perm = rng.permutation(len(idx))
        val_idx.update(int(idx[i]) for i in perm[:n_val])
    train = [r for i, r in enumerate(m.records) if i not in val_idx]
    val = [r for i, r in enumerate(m.records) if i in val_idx]
    return Manifest(train), Manifest(val)


def merge(a: Manifest, b: Manifest) -> Manifest:
    return Manifest(list(a.records) + list(b.records))


def class_counts(m: Manifest) -> np.ndarray:
    counts = np.zeros(N_GRADES, dtype=np.int64)
    for r in m.records:
        counts[r.grade] += 1
    return counts


def sample_weights(m: Manifest, exponent: float = 1.0) -> np.ndarray:
    """Per-record weights count(grade)^(-exponent); exponent 1 is inverse
    class frequency, which equalizes the expected draw mass per grade."""
    counts = class_counts(m)
    return np.array([counts[r.grade] ** (-exponent) for r in m.records], dtype=np.float64)


def weighted_sample(weights: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """n draws with replacement, P(i) proportional to weights[i], via the
    inverse-CDF method over the cumulative weight array."""
    weights = np.asarray(weights, dtype=np.float64)
    if n < 1:
        raise InvalidInputError(f"n must be >= 1, got {n}")
    if weights.ndim != 1 or len(weights) == 0 or np.any(weights <= 0):
        raise InvalidInputError("weights must be a non-empty 1-D array of positive values")
    cum = np.cumsum(weights)
    u = rng.random(n) * cum[-1]
    return np.minimum(np.searchsorted(cum, u, side="right"), len(weights) - 1)
