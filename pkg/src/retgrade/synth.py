"""Synthetic ordinal image corpus: dark circular discs with vessel-like
random walks and a grade-dependent number of bright elliptical blobs, plus a
controllable acquisition-shift transform for cross-domain experiments."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Manifest, ManifestRecord, save_manifest
from .errors import InvalidInputError
from .imgproc import _gaussian_blur_f64, _round_u8, read_image, write_ppm


@dataclass(frozen=True)
class DomainShift:
    """Per-channel gain, radial vignette strength, and blur sigma (0 = none)."""

    gain: tuple[float, float, float] = (1.35, 0.95, 0.7)
    vignette: float = 0.35
    blur_sigma: float = 0.5

    def is_identity(self) -> bool:
        return self.gain == (1.0, 1.0, 1.0) and self.vignette == 0.0 and self.blur_sigma == 0.0


@dataclass(frozen=True)
class SynthConfig:
    n_per_grade: int = 100
    image_size: int = 128
    blob_count_ranges: tuple[tuple[int, int], ...] = ((0, 0), (1, 2), (3, 5), (6, 9), (10, 15))
    shift: DomainShift = field(default_factory=DomainShift)
    seed: int = 0

    def __post_init__(self):
        if self.n_per_grade < 1 or self.image_size < 16:
            raise InvalidInputError("n_per_grade must be >= 1 and image_size >= 16")
        if len(self.blob_count_ranges) != 5:
            raise InvalidInputError("blob_count_ranges must have one (lo, hi) pair per grade")
        prev_hi = -1
        for lo, hi in self.blob_count_ranges:
            if lo > hi or lo <= prev_hi:
                raise InvalidInputError(
                    "blob_count_ranges must be well-ordered and strictly increasing across grades")
            prev_hi = hi


def _stamp_ellipse(img: np.ndarray, cx: float, cy: float, a: float, b: float,
                   theta: float, color) -> None:
    s = img.shape[0]
    r = max(a, b) + 1.0
    x0, x1 = max(0, int(cx - r)), min(s, int(cx + r) + 1)
    y0, y1 = max(0, int(cy - r)), min(s, int(cy + r) + 1)
    if x0 >= x1 or y0 >= y1:
        return
    yy, xx = np.mgrid[y0:y1, x0:x1]
    dx = xx + 0.5 - cx
    dy = yy + 0.5 - cy
    ct, st = math.cos(theta), math.sin(theta)
    u = (dx * ct + dy * st) / a
    v = (-dx * st + dy * ct) / b
    mask = u * u + v * v <= 1.0
    region = img[y0:y1, x0:x1]
    region[mask] = color


def _render_image(size: int, n_blobs: int, rng: np.random.Generator) -> np.ndarray:
    img = np.zeros((size, size, 3), dtype=np.float64)
    cx = size / 2.0 + rng.uniform(-0.02, 0.02) * size
    cy = size / 2.0 + rng.uniform(-0.02, 0.02) * size
    disc_r = rng.uniform(0.42, 0.46) * size
    brightness = rng.uniform(0.9, 1.1)

    yy, xx = np.mgrid[0:size, 0:size]
    d2 = ((xx + 0.5 - cx) ** 2 + (yy + 0.5 - cy) ** 2) / disc_r ** 2
    inside = d2 <= 1.0
    falloff = (1.0 - 0.35 * d2) * brightness
    base = np.array([150.0, 72.0, 38.0])
    for c in range(3):
        img[..., c][inside] = base[c] * falloff[inside]

    # vessel-like random walks radiating from near the disc centre
    for _ in range(rng.integers(4, 8)):
        px = cx + rng.uniform(-0.1, 0.1) * disc_r
        py = cy + rng.uniform(-0.1, 0.1) * disc_r
        ang = rng.uniform(0, 2 * math.pi)
        vessel = np.array([88.0, 30.0, 16.0]) * brightness
        for _ in range(int(size * 0.6)):
            ang += rng.uniform(-0.35, 0.35)
            px += 1.6 * math.cos(ang)
            py += 1.6 * math.sin(ang)
            if (px - cx) ** 2 + (py - cy) ** 2 > (0.95 * disc_r) ** 2:
                break
            _stamp_ellipse(img, px, py, 1.2, 1.2, 0.0, vessel)

    # bright lesion blobs. The count is the grade signal, but the TOTAL blob
    # area is held (nearly) constant per image, so the global intensity
    # histogram is grade independent for every grade with lesions: higher
    # grades mean many small spots, lower grades a few large ones. That keeps
    # the signal spatial, which survives monotone histogram remapping.
    if n_blobs > 0:
        blob_color = np.array([235.0, 212.0, 150.0]) * brightness
        total_area = 0.040 * size * size * rng.uniform(0.92, 1.08)
        area_each = total_area / n_blobs
        for _ in range(n_blobs):
            ang = rng.uniform(0, 2 * math.pi)
            rad = disc_r * 0.82 * math.sqrt(rng.uniform(0.03, 1.0))
            bx = cx + rad * math.cos(ang)
            by = cy + rad * math.sin(ang)
            aspect = rng.uniform(0.75, 1.0)
            a = math.sqrt(area_each / (math.pi * aspect)) * rng.uniform(0.92, 1.08)
            b = a * aspect
            _stamp_ellipse(img, bx, by, a, b, rng.uniform(0, math.pi),
                           np.clip(blob_color + rng.uniform(-12, 12, 3), 0, 255))

    return _round_u8(img)


def generate_corpus(cfg: SynthConfig, out_dir) -> Manifest:
    """Write n_per_grade images per grade as PPM files plus manifest.csv and a
    meta.csv sidecar recording each image's true blob count."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    meta_lines = ["path,blobs"]
    for grade, (lo, hi) in enumerate(cfg.blob_count_ranges):
        for i in range(cfg.n_per_grade):
            rng = np.random.default_rng(np.random.SeedSequence((cfg.seed, grade, i)))
            n_blobs = int(rng.integers(lo, hi + 1))
            img = _render_image(cfg.image_size, n_blobs, rng)
            name = f"g{grade}_{i:04d}.ppm"
            write_ppm(out_dir / name, img)
            records.append(ManifestRecord(str(out_dir / name), grade, "synthA"))
            meta_lines.append(f"{name},{n_blobs}")
    manifest = Manifest(records)
    save_manifest(manifest, out_dir / "manifest.csv")
    (out_dir / "meta.csv").write_text("\n".join(meta_lines) + "\n", encoding="utf-8")
    return manifest


def shift_image(img: np.ndarray, shift: DomainShift) -> np.ndarray:
    """Channel gains, then a radial vignette, then an optional mild blur; the
    result is rounded exactly once so identity parameters are a no-op."""
    f = img.astype(np.float64)
    f *= np.asarray(shift.gain, dtype=np.float64)
    if shift.vignette != 0.0:
        h, w = img.shape[:2]
        yy, xx = np.mgrid[0:h, 0:w]
        d2 = ((xx + 0.5 - w / 2.0) ** 2 + (yy + 0.5 - h / 2.0) ** 2) / ((min(h, w) / 2.0) ** 2)
        f *= (1.0 - shift.vignette * np.clip(d2, 0.0, 1.0))[..., None]
    if shift.blur_sigma > 0.0:
        f = _gaussian_blur_f64(f, shift.blur_sigma)
    return _round_u8(f)


def apply_domain_shift(m: Manifest, cfg: SynthConfig, out_dir) -> Manifest:
    """Re-render every image in the manifest under the acquisition shift;
    grades are carried over unchanged and the domain tag becomes 'synthB'."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    records = []
    for r in m:
        img = read_image(r.path)
        out = shift_image(img, cfg.shift)
        name = Path(r.path).name
        write_ppm(out_dir / name, out)
        records.append(ManifestRecord(str(out_dir / name), r.grade, "synthB"))
    shifted = Manifest(records)
    save_manifest(shifted, out_dir / "manifest.csv")
    return shifted
