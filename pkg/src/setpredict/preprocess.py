"""Document-image transforms: binarization, 2x2 dilation, and the smudge
darkness ramp, plus PNG/PGM reading and writing.

Gray images are (h, w) uint8 arrays; binary images are (h, w) bool arrays
with True marking ink. All transforms are pure per-image functions.
"""

from __future__ import annotations

import re

import numpy as np
from PIL import Image

MODES = ("raw", "dilation", "smudge", "dilation+smudge")
METRICS = ("l1", "linf", "l2")

GrayImage = np.ndarray
BinaryImage = np.ndarray


def as_gray(img: np.ndarray) -> GrayImage:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError(f"gray image must be 2-D, got shape {img.shape}")
    return img.astype(np.uint8, copy=False)


def binarize(img: GrayImage) -> BinaryImage:
    """Global Otsu threshold; pixels below it are ink.

    A constant image has no threshold and maps to all background.
    """
    img = as_gray(img)
    if img.size == 0:
        raise ValueError("empty image")
    lo, hi = int(img.min()), int(img.max())
    if lo == hi:
        return np.zeros(img.shape, dtype=bool)
    hist = np.bincount(img.ravel(), minlength=256).astype(np.float64)
    total = img.size
    levels = np.arange(256, dtype=np.float64)
    cum_count = np.cumsum(hist)
    cum_mass = np.cumsum(hist * levels)
    grand = cum_mass[-1]
    best_t, best_var = 1, -1.0
    for t in range(1, 256):
        n0 = cum_count[t - 1]
        n1 = total - n0
        if n0 == 0 or n1 == 0:
            continue
        mu0 = cum_mass[t - 1] / n0
        mu1 = (grand - cum_mass[t - 1]) / n1
        var = n0 * n1 * (mu0 - mu1) ** 2
        if var > best_var:
            best_var = var
            best_t = t
    return img < best_t


def dilate(img: BinaryImage) -> BinaryImage:
    """One iteration of 2x2 dilation anchored at the top-left.

    Output (x, y) is ink when any of (x, y), (x+1, y), (x, y+1),
    (x+1, y+1) is ink; pixels past the border read as background.
    """
    img = np.asarray(img, dtype=bool)
    padded = np.pad(img, ((0, 1), (0, 1)), constant_values=False)
    return (
        padded[:-1, :-1] | padded[:-1, 1:] | padded[1:, :-1] | padded[1:, 1:]
    )


def distance_transform(img: BinaryImage, metric: str) -> np.ndarray:
    """Exact distance from every pixel to the nearest ink pixel.

    Cityblock and chebyshev use two sequential chamfer passes; euclidean
    uses a parabola-envelope pass over exact squared column distances.
    Images with no ink return +inf everywhere.
    """
    img = np.asarray(img, dtype=bool)
    if metric == "l1":
        return _chamfer(img, diagonal=False)
    if metric == "linf":
        return _chamfer(img, diagonal=True)
    if metric == "l2":
        return np.sqrt(squared_euclidean_transform(img))
    raise ValueError(f"unknown metric {metric!r}; expected one of {METRICS}")


def _minplus_scan(row: np.ndarray) -> np.ndarray:
    # d[x] = min over k <= x of row[k] + (x - k)
    idx = np.arange(row.size, dtype=np.float64)
    return np.minimum.accumulate(row - idx) + idx


def _chamfer(img: BinaryImage, diagonal: bool) -> np.ndarray:
    h, w = img.shape
    d = np.where(img, 0.0, np.inf)
    for y in range(h):
        if y > 0:
            up = d[y - 1]
            cand = up.copy()
            if diagonal:
                cand[1:] = np.minimum(cand[1:], up[:-1])
                cand[:-1] = np.minimum(cand[:-1], up[1:])
            d[y] = np.minimum(d[y], cand + 1.0)
        d[y] = _minplus_scan(d[y])
    for y in range(h - 1, -1, -1):
        if y < h - 1:
            down = d[y + 1]
            cand = down.copy()
            if diagonal:
                cand[1:] = np.minimum(cand[1:], down[:-1])
                cand[:-1] = np.minimum(cand[:-1], down[1:])
            d[y] = np.minimum(d[y], cand + 1.0)
        d[y] = np.minimum(d[y], _minplus_scan(d[y][::-1])[::-1])
    return d


def squared_euclidean_transform(img: BinaryImage) -> np.ndarray:
    """Exact squared euclidean distance to the nearest ink pixel."""
    img = np.asarray(img, dtype=bool)
    h, w = img.shape
    if not img.any():
        return np.full((h, w), np.inf)
    big = float(h * h + w * w + 1)

    # vertical pass: exact |dy| per column via two linear scans
    vert = np.where(img, 0.0, np.inf)
    for y in range(1, h):
        vert[y] = np.minimum(vert[y], vert[y - 1] + 1.0)
    for y in range(h - 2, -1, -1):
        vert[y] = np.minimum(vert[y], vert[y + 1] + 1.0)
    f = np.where(np.isinf(vert), big, vert) ** 2

    out = np.empty((h, w))
    for y in range(h):
        out[y] = _envelope_1d(f[y])
    return out


def _envelope_1d(f: np.ndarray) -> np.ndarray:
    """min over q of f[q] + (x - q)^2 via the lower parabola envelope."""
    n = f.size
    d = np.empty(n)
    v = np.zeros(n, dtype=np.intp)
    z = np.empty(n + 1)
    k = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for x in range(n):
        while z[k + 1] < x:
            k += 1
        q = v[k]
        d[x] = f[q] + (x - q) * (x - q)
    return d


def smudge(img: BinaryImage, decay: float = 4.0, metric: str = "l2") -> GrayImage:
    """Spread ink as a darkness ramp: intensity 255 * min(1, d / decay).

    Ink pixels stay at 0; an all-background image maps to all 255.
    """
    if decay <= 0.0:
        raise ValueError("decay must be positive")
    img = np.asarray(img, dtype=bool)
    if not img.any():
        return np.full(img.shape, 255, dtype=np.uint8)
    d = distance_transform(img, metric)
    return np.rint(np.minimum(255.0, (255.0 * d) / decay)).astype(np.uint8)


def render_binary(img: BinaryImage) -> GrayImage:
    """Ink as 0, background as 255."""
    return np.where(np.asarray(img, dtype=bool), 0, 255).astype(np.uint8)


def preprocess_pipeline(img: GrayImage, mode: str, decay: float = 4.0, metric: str = "l2") -> GrayImage:
    """Apply one of the configured transform chains to a gray image."""
    img = as_gray(img)
    if mode == "raw":
        return img
    if mode == "dilation":
        return render_binary(dilate(binarize(img)))
    if mode == "smudge":
        return smudge(binarize(img), decay, metric)
    if mode == "dilation+smudge":
        return smudge(dilate(binarize(img)), decay, metric)
    raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")


# ---------------------------------------------------------------------------
# image files


def read_image(path: str) -> GrayImage:
    """Read PNG (RGB converted by luminance) or PGM (P2/P5) as gray."""
    if str(path).lower().endswith((".pgm",)):
        return _read_pgm(path)
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=np.uint8)


def write_image(path: str, img: GrayImage) -> None:
    img = as_gray(img)
    if str(path).lower().endswith(".pgm"):
        with open(path, "wb") as fh:
            fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode())
            fh.write(img.tobytes())
        return
    Image.fromarray(img, mode="L").save(path, format="PNG")


def _read_pgm(path: str) -> GrayImage:
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        m = re.match(rb"\s*(#[^\n]*\n|\S+)", blob[pos:])
        if not m:
            raise ValueError(f"truncated PGM header in {path}")
        pos += m.end()
        tok = m.group(1)
        if not tok.startswith(b"#"):
            tokens.append(tok)
    magic, width, height, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic not in (b"P2", b"P5"):
        raise ValueError(f"unsupported PGM magic {magic!r} in {path}")
    if not 0 < maxval < 65536:
        raise ValueError(f"bad PGM maxval {maxval} in {path}")
    count = width * height
    if magic == b"P5":
        if maxval > 255:
            raise ValueError("16-bit PGM not supported")
        # exactly one whitespace byte separates the header from the raster
        if count > len(blob) - (pos + 1):
            raise ValueError(f"truncated PGM data in {path}")
        data = np.frombuffer(blob, dtype=np.uint8, count=count, offset=pos + 1)
    else:
        values = blob[pos:].split()
        if len(values) < count:
            raise ValueError(f"truncated PGM data in {path}")
        data = np.array([int(v) for v in values[:count]], dtype=np.int64)
    img = data.reshape(height, width).astype(np.float64)
    if maxval != 255:
        img = np.rint(img * (255.0 / maxval))
    return img.astype(np.uint8)
