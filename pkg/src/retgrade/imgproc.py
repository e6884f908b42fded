"""Image preprocessing: retinal-disc isolation, enhancement, domain alignment,
augmentation, and 8-bit image I/O.

Images are numpy arrays of shape (H, W, 3), dtype uint8, RGB channel order.
Every function here is pure: the same inputs (and, where applicable, the same
seeded generator) produce bit-identical outputs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError

GRAY_WEIGHTS = (0.299, 0.587, 0.114)


def _round_u8(x: np.ndarray) -> np.ndarray:
    """Round half away from zero, then clamp to [0, 255] uint8."""
    return np.clip(np.floor(x + 0.5), 0, 255).astype(np.uint8)


def validate_image(img: np.ndarray) -> np.ndarray:
    if not isinstance(img, np.ndarray) or img.dtype != np.uint8:
        raise InvalidInputError("image must be a uint8 numpy array")
    if img.ndim != 3 or img.shape[2] != 3:
        raise InvalidInputError(f"image must have shape (H, W, 3), got {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise InvalidInputError("image must have at least one pixel")
    return img


def to_gray(img: np.ndarray) -> np.ndarray:
    """Rounded 0.299R + 0.587G + 0.114B luminance, uint8."""
    r, g, b = GRAY_WEIGHTS
    y = r * img[..., 0] + g * img[..., 1] + b * img[..., 2]
    return _round_u8(y)


@dataclass(frozen=True)
class CircleROI:
    """Circular region of interest in sub-pixel image coordinates."""

    cx: float
    cy: float
    radius: float

    def __post_init__(self):
        if self.radius <= 0:
            raise InvalidInputError(f"ROI radius must be > 0, got {self.radius}")


@dataclass(frozen=True)
class AugmentConfig:
    hflip_prob: float = 0.5
    brightness_delta_max: float = 0.1
    contrast_delta_max: float = 0.1
    gamma_range: tuple[float, float] = (0.9, 1.1)

    def __post_init__(self):
        if not 0.0 <= self.hflip_prob <= 1.0:
            raise InvalidInputError("hflip_prob must be in [0, 1]")
        if not 0.0 <= self.brightness_delta_max <= 1.0:
            raise InvalidInputError("brightness_delta_max must be in [0, 1]")
        if not 0.0 <= self.contrast_delta_max <= 1.0:
            raise InvalidInputError("contrast_delta_max must be in [0, 1]")
        lo, hi = self.gamma_range
        if not (0.0 < lo <= hi):
            raise InvalidInputError("gamma_range must satisfy 0 < lo <= hi")


IDENTITY_AUGMENT = AugmentConfig(hflip_prob=0.0, brightness_delta_max=0.0,
                                 contrast_delta_max=0.0, gamma_range=(1.0, 1.0))


# ---------------------------------------------------------------------------
# Disc detection and circular crop
# ---------------------------------------------------------------------------

def _circle_from_two(p, q):
    cx = (p[0] + q[0]) / 2.0
    cy = (p[1] + q[1]) / 2.0
    r = math.hypot(p[0] - q[0], p[1] - q[1]) / 2.0
    return cx, cy, r


def _circle_from_three(p, q, r):
    ax, ay = p
    bx, by = q
    cx, cy = r
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    if abs(d) < 1e-12:
        # collinear: fall back to the diametric circle of the farthest pair
        pairs = [(p, q), (p, r), (q, r)]
        far = max(pairs, key=lambda pq: (pq[0][0] - pq[1][0]) ** 2 + (pq[0][1] - pq[1][1]) ** 2)
        return _circle_from_two(*far)
    ux = ((ax * ax + ay * ay) * (by - cy) + (bx * bx + by * by) * (cy - ay)
          + (cx * cx + cy * cy) * (ay - by)) / d
    uy = ((ax * ax + ay * ay) * (cx - bx) + (bx * bx + by * by) * (ax - cx)
          + (cx * cx + cy * cy) * (bx - ax)) / d
    return ux, uy, math.hypot(ax - ux, ay - uy)


def _in_circle(c, p, eps=1e-7):
    cx, cy, r = c
    return math.hypot(p[0] - cx, p[1] - cy) <= r * (1.0 + eps) + eps


def _min_enclosing_circle(points: np.ndarray) -> tuple[float, float, float]:
    """Welzl's incremental algorithm; deterministic via a seeded shuffle."""
    pts = [tuple(p) for p in points]
    if len(pts) == 1:
        return pts[0][0], pts[0][1], 0.0
    order = np.random.default_rng(0).permutation(len(pts))
    pts = [pts[i] for i in order]
    c = _circle_from_two(pts[0], pts[1])
    for i in range(2, len(pts)):
        if _in_circle(c, pts[i]):
            continue
        c = (pts[i][0], pts[i][1], 0.0)
        for j in range(i):
            if _in_circle(c, pts[j]):
                continue
            c = _circle_from_two(pts[i], pts[j])
            for k in range(j):
                if not _in_circle(c, pts[k]):
                    c = _circle_from_three(pts[i], pts[j], pts[k])
    return c


def _convex_hull(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; points (n, 2) float, returns hull vertices."""
    pts = np.unique(points, axis=0)
    if len(pts) <= 2:
        return pts
    pts = pts[np.lexsort((pts[:, 1], pts[:, 0]))]

    def half(seq):
        out = []
        for p in seq:
            while len(out) >= 2:
                o, a = out[-2], out[-1]
                if (a[0] - o[0]) * (p[1] - o[1]) - (a[1] - o[1]) * (p[0] - o[0]) <= 0:
                    out.pop()
                else:
                    break
            out.append(p)
        return out

    lower = half(pts)
    upper = half(pts[::-1])
    return np.array(lower[:-1] + upper[:-1])


def detect_fundus_disc(img: np.ndarray, threshold: int = 20) -> CircleROI:
    """Smallest enclosing circle of pixels brighter than ``threshold``.

    Falls back to the full inscribed circle when fewer than 1% of pixels
    exceed the threshold, so fully dark frames still yield a usable ROI.
    """
    validate_image(img)
    if not 0 <= threshold <= 255:
        raise InvalidInputError(f"threshold must be in [0, 255], got {threshold}")
    h, w = img.shape[:2]
    mask = to_gray(img) > threshold
    n_bright = int(mask.sum())
    if n_bright < 0.01 * w * h:
        return CircleROI(w / 2.0, h / 2.0, min(w, h) / 2.0)
    ys, xs = np.nonzero(mask)
    pts = np.stack([xs + 0.5, ys + 0.5], axis=1).astype(np.float64)
    hull = _convex_hull(pts)
    cx, cy, r = _min_enclosing_circle(hull)
    return CircleROI(cx, cy, max(r, 0.5))


def circular_crop(img: np.ndarray, roi: CircleROI) -> np.ndarray:
    """Crop to the circle's bounding square (clamped) and zero pixels outside it."""
    validate_image(img)
    h, w = img.shape[:2]
    # nearest point of the image rectangle to the circle centre
    nx = min(max(roi.cx, 0.0), float(w))
    ny = min(max(roi.cy, 0.0), float(h))
    if math.hypot(nx - roi.cx, ny - roi.cy) >= roi.radius:
        raise InvalidInputError("ROI circle does not intersect the image")
    x0 = max(0, int(math.floor(roi.cx - roi.radius)))
    x1 = min(w, int(math.ceil(roi.cx + roi.radius)))
    y0 = max(0, int(math.floor(roi.cy - roi.radius)))
    y1 = min(h, int(math.ceil(roi.cy + roi.radius)))
    out = img[y0:y1, x0:x1].copy()
    yy = np.arange(y0, y1, dtype=np.float64) + 0.5 - roi.cy
    xx = np.arange(x0, x1, dtype=np.float64) + 0.5 - roi.cx
    outside = (xx[None, :] ** 2 + yy[:, None] ** 2) > roi.radius ** 2
    out[outside] = 0
    return out


# ---------------------------------------------------------------------------
# Enhancement
# ---------------------------------------------------------------------------

def _gauss_kernel(sigma: float) -> np.ndarray:
    radius = int(math.ceil(3.0 * sigma))
    taps = np.exp(-np.arange(-radius, radius + 1, dtype=np.float64) ** 2 / (2.0 * sigma * sigma))
    return taps / taps.sum()


def _blur1d(arr: np.ndarray, taps: np.ndarray, axis: int) -> np.ndarray:
    radius = len(taps) // 2
    padding = [(0, 0)] * arr.ndim
    padding[axis] = (radius, radius)
    padded = np.pad(arr, padding, mode="edge")
    out = np.zeros_like(arr, dtype=np.float64)
    n = arr.shape[axis]
    for i, t in enumerate(taps):
        sl = [slice(None)] * arr.ndim
        sl[axis] = slice(i, i + n)
        out += t * padded[tuple(sl)]
    return out


def _gaussian_blur_f64(img_f: np.ndarray, sigma: float) -> np.ndarray:
    taps = _gauss_kernel(sigma)
    return _blur1d(_blur1d(img_f, taps, axis=1), taps, axis=0)


def gaussian_blur(img: np.ndarray, sigma: float) -> np.ndarray:
    """Separable Gaussian blur with replicate borders, kernel half-width ceil(3*sigma)."""
    validate_image(img)
    if sigma <= 0:
        raise InvalidInputError(f"sigma must be > 0, got {sigma}")
    return _round_u8(_gaussian_blur_f64(img.astype(np.float64), sigma))


def ben_graham(img: np.ndarray, sigma_frac: float = 0.05, alpha: float = 4.0,
               beta: float = -4.0, gamma: float = 128.0) -> np.ndarray:
    """Background-subtracting contrast normalization:
    out = clamp(alpha * I + beta * Blur(I, sigma) + gamma).

    sigma = sigma_frac * min(H, W); the blur runs at float precision so the
    result is rounded exactly once.
    """
    validate_image(img)
    if not 0.0 < sigma_frac <= 0.5:
        raise InvalidInputError(f"sigma_frac must be in (0, 0.5], got {sigma_frac}")
    sigma = sigma_frac * min(img.shape[0], img.shape[1])
    f = img.astype(np.float64)
    blurred = _gaussian_blur_f64(f, sigma)
    return _round_u8(alpha * f + beta * blurred + gamma)


def _clahe_luma(luma: np.ndarray, clip_limit: float, tiles: tuple[int, int]) -> np.ndarray:
    h, w = luma.shape
    # never more tiles than pixels per axis, so every tile is non-empty
    nx = min(tiles[0], w)
    ny = min(tiles[1], h)
    xb = [(i * w) // nx for i in range(nx + 1)]
    yb = [(j * h) // ny for j in range(ny + 1)]

    # per-tile clipped-CDF lookup tables, kept as floats so the bilinear
    # blend below is rounded exactly once
    luts = np.zeros((ny, nx, 256), dtype=np.float64)
    centers_x = np.array([(xb[i] + xb[i + 1]) / 2.0 for i in range(nx)])
    centers_y = np.array([(yb[j] + yb[j + 1]) / 2.0 for j in range(ny)])
    for j in range(ny):
        for i in range(nx):
            tile = luma[yb[j]:yb[j + 1], xb[i]:xb[i + 1]]
            n_pix = tile.size
            hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
            limit = clip_limit * n_pix / 256.0
            excess = np.maximum(hist - limit, 0.0).sum()
            hist = np.minimum(hist, limit) + excess / 256.0
            cdf = np.cumsum(hist)
            luts[j, i] = 255.0 * cdf / n_pix

    # bilinear blend of the four surrounding tile mappings; pixels beyond the
    # outermost tile centres use the nearest tile
    px = np.arange(w, dtype=np.float64) + 0.5
    py = np.arange(h, dtype=np.float64) + 0.5

    def _coords(p, centers):
        i1 = np.searchsorted(centers, p)          # first centre >= p
        i0 = i1 - 1
        i0c = np.clip(i0, 0, len(centers) - 1)
        i1c = np.clip(i1, 0, len(centers) - 1)
        span = centers[i1c] - centers[i0c]
        with np.errstate(invalid="ignore", divide="ignore"):
            t = np.where(span > 0, (p - centers[i0c]) / np.where(span > 0, span, 1.0), 0.0)
        return i0c, i1c, np.clip(t, 0.0, 1.0)

    ix0, ix1, tx = _coords(px, centers_x)
    iy0, iy1, ty = _coords(py, centers_y)

    jj0 = np.broadcast_to(iy0[:, None], (h, w))
    jj1 = np.broadcast_to(iy1[:, None], (h, w))
    ii0 = np.broadcast_to(ix0[None, :], (h, w))
    ii1 = np.broadcast_to(ix1[None, :], (h, w))
    v00 = luts[jj0, ii0, luma]
    v01 = luts[jj0, ii1, luma]
    v10 = luts[jj1, ii0, luma]
    v11 = luts[jj1, ii1, luma]
    txg = tx[None, :]
    tyg = ty[:, None]
    top = v00 * (1.0 - txg) + v01 * txg
    bot = v10 * (1.0 - txg) + v11 * txg
    return _round_u8(top * (1.0 - tyg) + bot * tyg)


def clahe(img: np.ndarray, clip_limit: float = 2.0, tiles: tuple[int, int] = (8, 8)) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on the luminance channel.

    The luma delta is added back to all three channels, which preserves the
    chroma of the original pixel.
    """
    validate_image(img)
    nx, ny = tiles
    if nx < 1 or ny < 1 or nx != int(nx) or ny != int(ny):
        raise InvalidInputError(f"tile counts must be integers >= 1, got {tiles}")
    if clip_limit < 1.0:
        raise InvalidInputError(f"clip_limit must be >= 1, got {clip_limit}")
    luma = to_gray(img)
    eq = _clahe_luma(luma, float(clip_limit), (int(nx), int(ny)))
    delta = eq.astype(np.int16) - luma.astype(np.int16)
    return np.clip(img.astype(np.int16) + delta[..., None], 0, 255).astype(np.uint8)


def histogram_match(src: np.ndarray, reference: np.ndarray) -> np.ndarray:
    """Per-channel monotone quantile mapping of ``src`` onto ``reference``.

    Each intensity v maps to the smallest reference intensity whose CDF is
    at least the source CDF of v; computed in exact integer arithmetic.
    """
    validate_image(src)
    validate_image(reference)
    n_src = src.shape[0] * src.shape[1]
    n_ref = reference.shape[0] * reference.shape[1]
    out = np.empty_like(src)
    for c in range(3):
        cs = np.cumsum(np.bincount(src[..., c].ravel(), minlength=256)).astype(np.int64)
        cr = np.cumsum(np.bincount(reference[..., c].ravel(), minlength=256)).astype(np.int64)
        # smallest r with cr[r]/n_ref >= cs[v]/n_src, cross-multiplied to stay exact
        lut = np.searchsorted(cr * n_src, cs * n_ref, side="left")
        lut = np.clip(lut, 0, 255).astype(np.uint8)
        out[..., c] = lut[src[..., c]]
    return out


def resize_bilinear(img: np.ndarray, out_w: int, out_h: int) -> np.ndarray:
    """Bilinear resize with half-pixel-centre alignment."""
    validate_image(img)
    if out_w < 1 or out_h < 1:
        raise InvalidInputError(f"target size must be >= 1, got {out_w}x{out_h}")
    h, w = img.shape[:2]
    if (out_w, out_h) == (w, h):
        return img.copy()
    xs = np.clip((np.arange(out_w, dtype=np.float64) + 0.5) * w / out_w - 0.5, 0, w - 1)
    ys = np.clip((np.arange(out_h, dtype=np.float64) + 0.5) * h / out_h - 0.5, 0, h - 1)
    x0 = np.floor(xs).astype(np.intp)
    y0 = np.floor(ys).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (xs - x0)[None, :, None]
    fy = (ys - y0)[:, None, None]
    f = img.astype(np.float64)
    top = f[y0[:, None], x0[None, :]] * (1 - fx) + f[y0[:, None], x1[None, :]] * fx
    bot = f[y1[:, None], x0[None, :]] * (1 - fx) + f[y1[:, None], x1[None, :]] * fx
    return _round_u8(top * (1 - fy) + bot * fy)


# ---------------------------------------------------------------------------
# Augmentation and tensor conversion
# ---------------------------------------------------------------------------

def augment(img: np.ndarray, cfg: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Randomized flip, brightness, contrast and gamma jitter.

    The four random draws happen in a fixed order regardless of the config,
    so identical seeds always produce identical outputs. Each intensity stage
    rounds and clamps; the stages are fused into a single 256-entry LUT,
    which is equivalent to applying them one by one.
    """
    validate_image(img)
    do_flip = rng.random() < cfg.hflip_prob
    b = cfg.brightness_delta_max
    c = cfg.contrast_delta_max
    delta = rng.uniform(-b, b)
    eps = rng.uniform(-c, c)
    lo, hi = cfg.gamma_range
    gam = rng.uniform(lo, hi)

    v = np.arange(256, dtype=np.float64)
    v = np.clip(np.floor(v + delta * 255.0 + 0.5), 0, 255)
    v = np.clip(np.floor((v - 128.0) * (1.0 + eps) + 128.0 + 0.5), 0, 255)
    v = np.clip(np.floor(255.0 * (v / 255.0) ** gam + 0.5), 0, 255)
    lut = v.astype(np.uint8)

    out = img[:, ::-1, :] if do_flip else img
    return lut[out]


def to_input_tensor(img: np.ndarray, mean=(0.5, 0.5, 0.5), std=(0.25, 0.25, 0.25)) -> np.ndarray:
    """Scale to [0, 1], normalize per channel, and return a (3, H, W) float32 array."""
    validate_image(img)
    mean = np.asarray(mean, dtype=np.float32).reshape(3)
    std = np.asarray(std, dtype=np.float32).reshape(3)
    if np.any(std <= 0):
        raise InvalidInputError("std components must be > 0")
    x = img.astype(np.float32) / 255.0
    x = (x - mean) / std
    return np.ascontiguousarray(x.transpose(2, 0, 1))


# ---------------------------------------------------------------------------
# Image I/O (binary PPM is the canonical golden-test format)
# ---------------------------------------------------------------------------

def write_ppm(path, img: np.ndarray) -> None:
    validate_image(img)
    h, w = img.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(np.ascontiguousarray(img).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise InvalidInputError(f"{path}: not a binary PPM (P6) file")
    # header: magic, width, height, maxval, then a single whitespace byte
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        fields.append(data[start:pos])
    pos += 1  # the single whitespace after maxval
    w, h, maxval = (int(v) for v in fields)
    if maxval != 255:
        raise InvalidInputError(f"{path}: unsupported maxval {maxval}")
    n = w * h * 3
    raw = data[pos:pos + n]
    if len(raw) != n:
        raise InvalidInputError(f"{path}: truncated pixel data")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


def read_image(path) -> np.ndarray:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        return read_ppm(path)
    from PIL import Image
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8).copy()


def write_image(path, img: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() == ".ppm":
        write_ppm(path, img)
        return
    from PIL import Image
    validate_image(img)
    Image.fromarray(img, mode="RGB").save(path)


def select_reference_path(paths) -> str:
    """Pick the image whose per-channel mean vector is nearest the corpus mean.

    Deterministic helper for choosing a histogram-matching reference when the
    operator does not name one explicitly; ties resolve to the earliest path.
    """
    paths = list(paths)
    if not paths:
        raise InvalidInputError("cannot select a reference from an empty list")
    means = np.array([read_image(p).reshape(-1, 3).mean(axis=0) for p in paths])
    corpus = means.mean(axis=0)
    dist = np.linalg.norm(means - corpus, axis=1)
    return str(paths[int(np.argmin(dist))])
