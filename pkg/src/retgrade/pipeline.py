"""End-to-end preprocessing: disc isolation, optional histogram matching for
out-of-domain records, branch-specific enhancement, and resizing to the two
network input sizes. Shared by the preprocess, train, evaluate, and predict
commands."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import Manifest, ManifestRecord, save_manifest
from .errors import ImageIOError
from .imgproc import (ben_graham, circular_crop, clahe, detect_fundus_disc, histogram_match,
                      read_image, resize_bilinear, select_reference_path, write_ppm)
from .train import BranchDataset

ENV_THREADS = "RETGRADE_THREADS"


@dataclass(frozen=True)
class PreprocessParams:
    threshold: int = 20
    sigma_frac: float = 0.05
    alpha: float = 4.0
    beta: float = -4.0
    gamma: float = 128.0
    clahe_clip: float = 2.0
    clahe_tiles: tuple[int, int] = (8, 8)
    size0: int = 224
    size3: int = 300


def preproc_hyper(p: PreprocessParams) -> dict[str, str]:
    return {
        "pre_threshold": str(p.threshold),
        "pre_sigma_frac": repr(p.sigma_frac),
        "pre_alpha": repr(p.alpha),
        "pre_beta": repr(p.beta),
        "pre_gamma": repr(p.gamma),
        "pre_clahe_clip": repr(p.clahe_clip),
        "pre_clahe_tiles": f"{p.clahe_tiles[0]},{p.clahe_tiles[1]}",
        "pre_size0": str(p.size0),
        "pre_size3": str(p.size3),
    }


def preproc_from_hyper(hyper: dict[str, str]) -> PreprocessParams:
    tiles = tuple(int(v) for v in hyper["pre_clahe_tiles"].split(","))
    return PreprocessParams(
        threshold=int(hyper["pre_threshold"]),
        sigma_frac=float(hyper["pre_sigma_frac"]),
        alpha=float(hyper["pre_alpha"]),
        beta=float(hyper["pre_beta"]),
        gamma=float(hyper["pre_gamma"]),
        clahe_clip=float(hyper["pre_clahe_clip"]),
        clahe_tiles=(tiles[0], tiles[1]),
        size0=int(hyper["pre_size0"]),
        size3=int(hyper["pre_size3"]),
    )


def n_threads() -> int:
    env = os.environ.get(ENV_THREADS, "")
    if env.strip():
        return max(1, int(env))
    return min(4, os.cpu_count() or 1)


def crop_to_disc(img: np.ndarray, params: PreprocessParams) -> np.ndarray:
    return circular_crop(img, detect_fundus_disc(img, params.threshold))


def prepare_reference(path, params: PreprocessParams) -> np.ndarray:
    """Load and disc-crop the histogram-matching reference image."""
    return crop_to_disc(read_image(path), params)


def choose_reference(manifest: Manifest, ref_path: str | None, ref_domain: str) -> str | None:
    """The explicit path wins; otherwise pick the reference-domain image whose
    channel means sit nearest the corpus mean. None when no candidate exists."""
    if ref_path:
        return str(ref_path)
    candidates = [r.path for r in manifest if r.domain == ref_domain]
    if not candidates:
        return None
    return select_reference_path(candidates)


def preprocess_image(img: np.ndarray, params: PreprocessParams,
                     reference: np.ndarray | None = None):
    """Full per-image pipeline. Returns (branch0, branch3, stages) where
    stages is an ordered list of (label, image) snapshots for contact sheets."""
    stages = [("original", img)]
    cropped = crop_to_disc(img, params)
    stages.append(("cropped", cropped))
    base = cropped
    if reference is not None:
        base = histogram_match(cropped, reference)
        stages.append(("matched", base))
    enhanced0 = ben_graham(base, params.sigma_frac, params.alpha, params.beta, params.gamma)
    enhanced3 = clahe(base, params.clahe_clip, params.clahe_tiles)
    stages.append(("ben_graham", enhanced0))
    stages.append(("clahe", enhanced3))
    b0 = resize_bilinear(enhanced0, params.size0, params.size0)
    b3 = resize_bilinear(enhanced3, params.size3, params.size3)
    stages.append((f"branch0 {params.size0}", b0))
    stages.append((f"branch3 {params.size3}", b3))
    return b0, b3, stages


def _process_one(record: ManifestRecord, params: PreprocessParams,
                 reference: np.ndarray | None, ref_domain: str, match: bool):
    try:
        img = read_image(record.path)
    except OSError as e:
        raise ImageIOError(f"cannot read image {record.path}: {e}") from e
    ref = reference if (match and reference is not None and record.domain != ref_domain) else None
    return preprocess_image(img, params, ref)


def preprocess_manifest(manifest: Manifest, params: PreprocessParams,
                        reference: np.ndarray | None = None, ref_domain: str = "synthA",
                        match: bool = True, threads: int | None = None):
    """Preprocess every record, in manifest order, optionally in parallel.
    Yields (record, branch0, branch3, stages). Results come back in submission
    order, so output never depends on scheduling."""
    threads = threads or n_threads()
    if threads <= 1 or len(manifest) <= 1:
        for r in manifest:
            b0, b3, stages = _process_one(r, params, reference, ref_domain, match)
            yield r, b0, b3, stages
        return
    with ThreadPoolExecutor(max_workers=threads) as pool:
        futures = [pool.submit(_process_one, r, params, reference, ref_domain, match)
                   for r in manifest]
        for r, fut in zip(manifest, futures):
            b0, b3, stages = fut.result()
            yield r, b0, b3, stages


def preprocess_to_tree(manifest: Manifest, params: PreprocessParams, out_dir,
                       reference: np.ndarray | None = None, ref_domain: str = "synthA",
                       match: bool = True, threads: int | None = None):
    """Write branch0/ and branch3/ image trees plus the processed manifest.
    Returns (processed manifest, contact-sheet stages of the first records)."""
    out_dir = Path(out_dir)
    (out_dir / "branch0").mkdir(parents=True, exist_ok=True)
    (out_dir / "branch3").mkdir(parents=True, exist_ok=True)
    records = []
    first_stages = []
    for r, b0, b3, stages in preprocess_manifest(manifest, params, reference,
                                                 ref_domain, match, threads):
        name = Path(r.path).stem + ".ppm"
        write_ppm(out_dir / "branch0" / name, b0)
        write_ppm(out_dir / "branch3" / name, b3)
        records.append(ManifestRecord(str(out_dir / "branch0" / name), r.grade, r.domain))
        if len(first_stages) < 4:
            first_stages.append(stages)
    processed = Manifest(records)
    save_manifest(processed, out_dir / "manifest.csv")
    return processed, first_stages


def preprocess_to_dataset(manifest: Manifest, params: PreprocessParams,
                          reference: np.ndarray | None = None, ref_domain: str = "synthA",
                          match: bool = True, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25),
                          threads: int | None = None) -> BranchDataset:
    """In-memory variant used by evaluate and the test harnesses."""
    records, imgs0, imgs3 = [], [], []
    for r, b0, b3, _ in preprocess_manifest(manifest, params, reference,
                                            ref_domain, match, threads):
        records.append(r)
        imgs0.append(b0)
        imgs3.append(b3)
    return BranchDataset(records, imgs0, imgs3, tuple(mean), tuple(std))
