"""ImageNet-C style corruptions for segmentation inputs.

Parameter tables follow the published ImageNet-C definitions (the
resolution-agnostic variant for elastic transform and pixelate). Every
transform draws randomness from an explicit ``numpy.random.Generator`` so
(seed, kind, severity, image) fully determine the output. Label maps are
never touched.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
import math
import shutil
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage
from skimage.color import hsv2rgb, rgb2hsv

from . import _accel
from .datasets import IMAGE_SUFFIXES, read_image, write_image

log = logging.getLogger(__name__)

KINDS = (
    "gaussian_noise",
    "shot_noise",
    "impulse_noise",
    "defocus_blur",
    "glass_blur",
    "motion_blur",
    "zoom_blur",
    "snow",
    "frost",
    "fog",
    "brightness",
    "contrast",
    "elastic_transform",
    "pixelate",
    "jpeg_compression",
)

SEVERITY_PARAMS = {
    "gaussian_noise": [0.08, 0.12, 0.18, 0.26, 0.38],
    "shot_noise": [60, 25, 12, 5, 3],
    "impulse_noise": [0.03, 0.06, 0.09, 0.17, 0.27],
    "defocus_blur": [(3, 0.1), (4, 0.5), (6, 0.5), (8, 0.5), (10, 0.5)],
    "glass_blur": [(0.7, 1, 2), (0.9, 2, 1), (1, 2, 3), (1.1, 3, 2), (1.5, 4, 2)],
    "motion_blur": [(10, 3), (15, 5), (15, 8), (15, 12), (20, 15)],
    "zoom_blur": [
        np.arange(1, 1.11, 0.01),
        np.arange(1, 1.16, 0.01),
        np.arange(1, 1.21, 0.02),
        np.arange(1, 1.26, 0.02),
        np.arange(1, 1.31, 0.03),
    ],
    "snow": [
        (0.1, 0.3, 3, 0.5, 10, 4, 0.8),
        (0.2, 0.3, 2, 0.5, 12, 4, 0.7),
        (0.55, 0.3, 4, 0.9, 12, 8, 0.7),
        (0.55, 0.3, 4.5, 0.85, 12, 8, 0.65),
        (0.55, 0.3, 2.5, 0.85, 12, 12, 0.55),
    ],
    "frost": [(1, 0.4), (0.8, 0.6), (0.7, 0.7), (0.65, 0.7), (0.6, 0.75)],
    "fog": [(1.5, 2), (2.0, 2), (2.5, 1.7), (2.5, 1.5), (3.0, 1.4)],
    "brightness": [0.1, 0.2, 0.3, 0.4, 0.5],
    "contrast": [0.4, 0.3, 0.2, 0.1, 0.05],
    "elastic_transform": [250 * 0.05, 250 * 0.065, 250 * 0.085, 250 * 0.1, 250 * 0.12],
    "pixelate": [0.6, 0.5, 0.4, 0.3, 0.25],
    "jpeg_compression": [25, 18, 15, 10, 7],
}


@dataclass(frozen=True)
class CorruptionSpec:
    kind: str
    severity: int = 5
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown corruption {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        if not 1 <= int(self.severity) <= 5:
            raise ValueError(f"severity must be in 1..5, got {self.severity}")

    @property
    def params(self):
        return SEVERITY_PARAMS[self.kind][self.severity - 1]


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------


def _unit(x: np.ndarray) -> np.ndarray:
    return np.asarray(x, dtype=np.float64) / 255.0


def _gaussian_kernel1d(ksize: int, sigma: float) -> np.ndarray:
    r = np.arange(ksize) - (ksize - 1) / 2
    k = np.exp(-(r**2) / (2 * sigma**2))
    return k / k.sum()


def disk(radius: float, alias_blur: float = 0.1) -> np.ndarray:
    """Anti-aliased disk kernel used by defocus blur."""
    if radius <= 8:
        grid = np.arange(-8, 8 + 1)
        ksize = 3
    else:
        grid = np.arange(-radius, radius + 1)
        ksize = 5
    xx, yy = np.meshgrid(grid, grid)
    kernel = ((xx**2 + yy**2) <= radius**2).astype(np.float64)
    kernel /= kernel.sum()
    g = _gaussian_kernel1d(ksize, alias_blur)
    kernel = ndimage.convolve1d(kernel, g, axis=0, mode="mirror")
    return ndimage.convolve1d(kernel, g, axis=1, mode="mirror")


def plasma_fractal(rng: np.random.Generator, mapsize: int = 256, wibbledecay: float = 3) -> np.ndarray:
    """Diamond-square height map in [0, 1]; ``mapsize`` must be a power of two."""
    if mapsize & (mapsize - 1):
        raise ValueError(f"mapsize must be a power of two, got {mapsize}")
    maparray = np.zeros((mapsize, mapsize))
    stepsize = mapsize
    wibble = 100.0

    def wibbledmean(array):
        return array / 4 + wibble * rng.uniform(-wibble, wibble, array.shape)

    while stepsize >= 2:
        half = stepsize // 2
        corners = maparray[0:mapsize:stepsize, 0:mapsize:stepsize]
        sq = corners + np.roll(corners, shift=-1, axis=0)
        sq = sq + np.roll(sq, shift=-1, axis=1)
        maparray[half:mapsize:stepsize, half:mapsize:stepsize] = wibbledmean(sq)

        dr = maparray[half:mapsize:stepsize, half:mapsize:stepsize]
        ul = maparray[0:mapsize:stepsize, 0:mapsize:stepsize]
        lt = dr + np.roll(dr, 1, axis=0) + ul + np.roll(ul, -1, axis=1)
        maparray[0:mapsize:stepsize, half:mapsize:stepsize] = wibbledmean(lt)
        tt = dr + np.roll(dr, 1, axis=1) + ul + np.roll(ul, -1, axis=0)
        maparray[half:mapsize:stepsize, 0:mapsize:stepsize] = wibbledmean(tt)

        stepsize //= 2
        wibble /= wibbledecay
    maparray -= maparray.min()
    return maparray / maparray.max()


def _mapsize(h: int, w: int) -> int:
    return max(256, 1 << math.ceil(math.log2(max(h, w))))


def clipped_zoom(img: np.ndarray, zoom: float) -> np.ndarray:
    """Zoom into the centre of ``img`` by ``zoom`` keeping the original size."""
    h, w = img.shape[:2]
    ch, cw = int(math.ceil(h / zoom)), int(math.ceil(w / zoom))
    top, left = (h - ch) // 2, (w - cw) // 2
    crop = img[top:top + ch, left:left + cw]
    factors = (zoom, zoom) + (1,) * (img.ndim - 2)
    out = ndimage.zoom(crop, factors, order=1)
    th, tw = (out.shape[0] - h) // 2, (out.shape[1] - w) // 2
    out = out[th:th + h, tw:tw + w]
    if out.shape[:2] != (h, w):  # rounding in ndimage.zoom can leave us a pixel short
        pad = [(0, h - out.shape[0]), (0, w - out.shape[1])] + [(0, 0)] * (img.ndim - 2)
        out = np.pad(out, pad, mode="edge")
    return out


def _shift(img: np.ndarray, dx: int, dy: int) -> np.ndarray:
    """Translate with edge replication."""
    h, w = img.shape[:2]
    ys = np.clip(np.arange(h) - dy, 0, h - 1)
    xs = np.clip(np.arange(w) - dx, 0, w - 1)
    return img[ys[:, None], xs[None, :]]


def motion_kernel_offsets(radius: int, angle: float):
    width = 2 * radius + 1
    point = (width * math.sin(math.radians(angle)), width * math.cos(math.radians(angle)))
    hypot = math.hypot(*point)
    return [
        (-math.ceil((i * point[1]) / hypot - 0.5), -math.ceil((i * point[0]) / hypot - 0.5))
        for i in range(width)
    ]


def _motion_blur(img: np.ndarray, radius: int, sigma: float, angle: float) -> np.ndarray:
    width = 2 * radius + 1
    weights = np.exp(-(np.arange(width) ** 2) / (2 * sigma**2))
    weights /= weights.sum()
    out = np.zeros_like(img, dtype=np.float64)
    for wgt, (dx, dy) in zip(weights, motion_kernel_offsets(radius, angle)):
        if abs(dy) >= img.shape[0] or abs(dx) >= img.shape[1]:
            break
        out += wgt * _shift(img, dx, dy)
    return out


# ---------------------------------------------------------------------------
# the fifteen corruptions; each takes uint8 RGB and returns float in [0, 255]
# ---------------------------------------------------------------------------


def gaussian_noise(x, c, rng):
    x = _unit(x)
    return np.clip(x + rng.normal(scale=c, size=x.shape), 0, 1) * 255


def shot_noise(x, c, rng):
    x = _unit(x)
    return np.clip(rng.poisson(x * c) / c, 0, 1) * 255


def impulse_noise(x, c, rng):
    x = _unit(x).copy()
    hit = rng.random(x.shape) < c
    salt = rng.random(x.shape) < 0.5
    x[hit & salt] = 1.0
    x[hit & ~salt] = 0.0
    return x * 255


def defocus_blur(x, c, rng):
    kernel = disk(radius=c[0], alias_blur=c[1])
    x = _unit(x)
    out = np.stack([ndimage.convolve(x[..., ch], kernel, mode="mirror") for ch in range(3)], axis=-1)
    return np.clip(out, 0, 1) * 255


def glass_blur(x, c, rng):
    sigma, max_delta, iterations = c
    blurred = ndimage.gaussian_filter(_unit(x), sigma=(sigma, sigma, 0), mode="nearest", truncate=4.0)
    img = (blurred * 255).astype(np.uint8)
    h, w = img.shape[:2]
    n_sites = _accel.glass_sites(h, w, max_delta)
    offsets = rng.integers(-max_delta, max_delta, size=(iterations, n_sites, 2))
    img = _accel.glass_shuffle(img, offsets, max_delta)
    out = ndimage.gaussian_filter(img / 255.0, sigma=(sigma, sigma, 0), mode="nearest", truncate=4.0)
    return np.clip(out, 0, 1) * 255


def motion_blur(x, c, rng):
    radius, sigma = c
    angle = rng.uniform(-45, 45)
    return np.clip(_motion_blur(np.asarray(x, np.float64), radius, sigma, angle), 0, 255)


def zoom_blur(x, c, rng):
    x = _unit(x)
    out = np.zeros_like(x)
    for zoom in c:
        out += clipped_zoom(x, float(zoom))
    return np.clip((x + out) / (len(c) + 1), 0, 1) * 255


def _gray(x):
    return x[..., 0] * 0.299 + x[..., 1] * 0.587 + x[..., 2] * 0.114


def snow(x, c, rng):
    x = _unit(x)
    h, w = x.shape[:2]
    layer = rng.normal(loc=c[0], scale=c[1], size=(h, w))
    layer = clipped_zoom(layer, c[2])
    layer[layer < c[3]] = 0
    layer = np.clip(layer, 0, 1)
    layer = _motion_blur(layer, radius=c[4], sigma=c[5], angle=rng.uniform(-135, -45))
    layer = (np.round(layer * 255).astype(np.uint8) / 255.0)[..., None]
    x = c[6] * x + (1 - c[6]) * np.maximum(x, _gray(x)[..., None] * 1.5 + 0.5)
    return np.clip(x + layer + np.rot90(layer, k=2), 0, 1) * 255


def frost_texture(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    """Procedural ice texture in [0, 255]: thresholded fractal noise plus crystal streaks."""
    size = _mapsize(h, w)
    base = plasma_fractal(rng, size, wibbledecay=1.6)
    top, left = rng.integers(0, size - h + 1), rng.integers(0, size - w + 1)
    base = base[top:top + h, left:left + w]
    streaks = np.zeros((h, w))
    for _ in range(6):
        seed_field = (rng.random((h, w)) > 0.995).astype(np.float64)
        streaks += _motion_blur(seed_field, radius=8, sigma=6, angle=rng.uniform(-90, 90))
    streaks = streaks / max(streaks.max(), 1e-12)
    ice = np.clip((base - 0.35) / 0.65, 0, 1) ** 0.8 + 0.6 * streaks
    ice = np.clip(ice, 0, 1)
    tint = np.array([0.82, 0.9, 1.0])
    return ice[..., None] * tint * 255


def frost(x, c, rng):
    h, w = np.asarray(x).shape[:2]
    tex = frost_texture(rng, h, w)
    return np.clip(c[0] * np.asarray(x, np.float64) + c[1] * tex, 0, 255)


def fog(x, c, rng):
    x = _unit(x)
    max_val = x.max()
    h, w = x.shape[:2]
    layer = plasma_fractal(rng, _mapsize(h, w), wibbledecay=c[1])[:h, :w]
    x = x + c[0] * layer[..., None]
    return np.clip(x * max_val / (max_val + c[0]), 0, 1) * 255


def brightness(x, c, rng=None):
    hsv = rgb2hsv(_unit(x))
    hsv[..., 2] = np.clip(hsv[..., 2] + c, 0, 1)
    return np.clip(hsv2rgb(hsv), 0, 1) * 255


def contrast(x, c, rng=None):
    x = _unit(x)
    means = x.mean(axis=(0, 1), keepdims=True)
    return np.clip((x - means) * c + means, 0, 1) * 255


def elastic_transform(x, alpha, rng):
    x = _unit(x)
    h, w = x.shape[:2]
    sigma = np.array([h, w]) * 0.01
    max_d = h * 0.005
    dx = ndimage.gaussian_filter(rng.uniform(-max_d, max_d, size=(h, w)), sigma, mode="reflect", truncate=3) * alpha
    dy = ndimage.gaussian_filter(rng.uniform(-max_d, max_d, size=(h, w)), sigma, mode="reflect", truncate=3) * alpha
    yy, xx = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    out = np.stack(
        [
            ndimage.map_coordinates(x[..., ch], [yy + dy, xx + dx], order=1, mode="reflect")
            for ch in range(3)
        ],
        axis=-1,
    )
    return np.clip(out, 0, 1) * 255


def pixelate_size(h: int, w: int, factor: float):
    return max(1, int(w * factor)), max(1, int(h * factor))


def pixelate(x, c, rng=None):
    h, w = np.asarray(x).shape[:2]
    im = Image.fromarray(np.asarray(x, np.uint8))
    im = im.resize(pixelate_size(h, w, c), Image.BOX).resize((w, h), Image.BOX)
    return np.asarray(im, dtype=np.float64)


def jpeg_compression(x, c, rng=None):
    buf = io.BytesIO()
    Image.fromarray(np.asarray(x, np.uint8)).save(buf, "JPEG", quality=int(c))
    buf.seek(0)
    with Image.open(buf) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64)


_FUNCS = {name: globals()[name] for name in KINDS}


def quantize(x: np.ndarray) -> np.ndarray:
    x = np.nan_to_num(np.asarray(x, dtype=np.float64), nan=0.0, posinf=255.0, neginf=0.0)
    return np.rint(np.clip(x, 0, 255)).astype(np.uint8)


def apply(image: np.ndarray, kind: str, params, rng: Optional[np.random.Generator] = None) -> np.ndarray:
    """Run one corruption with explicit parameters (not a severity level)."""
    if kind not in _FUNCS:
        raise ValueError(f"unknown corruption {kind!r}; valid kinds: {', '.join(KINDS)}")
    _check_rgb(image)
    rng = rng if rng is not None else np.random.default_rng(0)
    return quantize(_FUNCS[kind](image, params, rng))


def _check_rgb(image) -> None:
    arr = np.asarray(image)
    if arr.dtype != np.uint8 or arr.ndim != 3 or arr.shape[-1] != 3:
        raise ValueError(f"expected an 8-bit RGB (H, W, 3) image, got {arr.dtype} {arr.shape}")


def corrupt(image: np.ndarray, spec: CorruptionSpec, key: str = "") -> np.ndarray:
    """Corrupt an 8-bit RGB image; ``key`` (e.g. a file path) decorrelates per-file noise."""
    _check_rgb(image)
    return apply(image, spec.kind, spec.params, corruption_rng(spec, key))


def corruption_rng(spec: CorruptionSpec, key: str = "") -> np.random.Generator:
    kind_id = zlib.crc32(spec.kind.encode())
    key_id = int.from_bytes(hashlib.sha256(key.encode()).digest()[:8], "little")
    return np.random.default_rng([int(spec.seed), kind_id, int(spec.severity), key_id])


# ---------------------------------------------------------------------------
# materialising "-C" datasets
# ---------------------------------------------------------------------------


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _corrupt_file(args):
    img_path, out_path, kind, severity, seed, key = args
    image = read_image(img_path)
    out = corrupt(image, CorruptionSpec(kind, severity, seed), key)
    write_image(out_path, out)
    return _sha256(Path(out_path).read_bytes())


def build_corrupted_dataset(
    src_root,
    dst_root,
    kinds: Sequence[str] = KINDS,
    severity: int = 5,
    seed: int = 0,
    workers: int = 1,
) -> Dict:
    """Write ``<dst>/<kind>/images`` (corrupted) and ``<dst>/<kind>/labels`` (verbatim copies).

    Returns the manifest, also written to ``<dst>/manifest.json``. Source
    images without a label (or unreadable) are listed under ``skipped``.
    """
    src, dst = Path(src_root), Path(dst_root)
    kinds = list(kinds)
    for k in kinds:
        CorruptionSpec(k, severity, seed)  # validates
    img_dir, lbl_dir = src / "images", src / "labels"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"{img_dir} does not exist")

    pairs, skipped = [], []
    for img in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        lbl = lbl_dir / f"{img.stem}.png"
        if lbl.exists():
            pairs.append((img, lbl))
        else:
            skipped.append({"file": img.name, "reason": "missing label"})
    if lbl_dir.is_dir():
        stems = {p.stem for p, _ in pairs} | {s["file"].rsplit(".", 1)[0] for s in skipped}
        for lbl in sorted(lbl_dir.glob("*.png")):
            if lbl.stem not in stems:
                skipped.append({"file": lbl.name, "reason": "missing image"})

    entries = []
    for kind in kinds:
        out_img, out_lbl = dst / kind / "images", dst / kind / "labels"
        out_img.mkdir(parents=True, exist_ok=True)
        out_lbl.mkdir(parents=True, exist_ok=True)
        jobs = [
            (str(img), str(out_img / f"{img.stem}.png"), kind, severity, seed, img.name)
            for img, _ in pairs
        ]
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                digests = list(pool.map(_corrupt_file, jobs))
        else:
            digests = [_corrupt_file(j) for j in jobs]
        for _, lbl in pairs:
            shutil.copyfile(lbl, out_lbl / lbl.name)
        entries.append(
            {
                "kind": kind,
                "severity": severity,
                "seed": seed,
                "file_count": len(digests),
                "label_count": len(pairs),
                "checksum": _sha256("".join(digests).encode()),
            }
        )
        log.info("%s: %d images", kind, len(digests))

    manifest = {
        "source": str(src),
        "source_count": len(pairs),
        "severity": severity,
        "seed": seed,
        "kinds": entries,
        "skipped": skipped,
        "deviations": {"frost": "procedural frost texture instead of photographic frost masks"}
        if "frost" in kinds
        else {},
    }
    dst.mkdir(parents=True, exist_ok=True)
    (dst / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest
