"""Label spaces, directory-layout loading, resizing and the toy fixture.

Dataset layout::

    <root>/images/<id>.png|jpg
    <root>/labels/<id>.png      single channel, class index per pixel, 255 = ignore
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterator, List, Optional, Sequence, Tuple

import numpy as np
from PIL import Image

IGNORE_INDEX = 255
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
DATASETS = ("v20", "v21", "p59", "p60", "cityscapes", "coco_stuff", "coco_object", "toy")

TOY_COLORS = {
    "background": (96, 128, 96),
    "square": (200, 40, 40),
    "disc": (40, 60, 210),
}


@dataclass(frozen=True)
class LabelSpace:
    name: str
    classes: Tuple[str, ...]
    has_background: bool
    ignore_index: int = IGNORE_INDEX

    def __post_init__(self):
        if not self.classes:
            raise ValueError("a label space needs at least one class")
        if len(set(self.classes)) != len(self.classes):
            raise ValueError(f"duplicate class names in {self.name}")

    @property
    def num_classes(self) -> int:
        return len(self.classes)


@dataclass
class SegSample:
    image: np.ndarray  # H, W, 3 uint8
    label: np.ndarray  # H, W uint8/int, 255 = ignore
    ident: str


def _read_class_file(name: str) -> Tuple[str, ...]:
    text = resources.files("mlmp").joinpath("data", "classes", f"{name}.txt").read_text()
    return tuple(
        line.strip() for line in text.splitlines() if line.strip() and not line.startswith("#")
    )


def registry(name: str) -> LabelSpace:
    """Canonical ordered class list for a benchmark dataset."""
    key = name.lower().replace("-", "_")
    if key not in DATASETS:
        raise KeyError(f"unknown dataset {name!r}; valid names: {', '.join(DATASETS)}")
    classes = _read_class_file(key)
    return LabelSpace(key, classes, has_background=classes[0] == "background")


# ---------------------------------------------------------------------------
# I/O and resizing
# ---------------------------------------------------------------------------


def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def read_label(path) -> np.ndarray:
    with Image.open(path) as im:
        if im.mode not in ("L", "P", "I", "I;16"):
            raise ValueError(f"{path}: label maps must be single-channel, got mode {im.mode}")
        return np.asarray(im if im.mode in ("L", "P") else im.convert("I")).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    Image.fromarray(np.asarray(image, dtype=np.uint8), mode="RGB").save(path)


def write_label(path, label: np.ndarray) -> None:
    Image.fromarray(np.asarray(label, dtype=np.uint8), mode="L").save(path)


def _size(size) -> Tuple[int, int]:
    if isinstance(size, int):
        return size, size
    h, w = size
    return int(h), int(w)


def resize_image(image: np.ndarray, size) -> np.ndarray:
    """Bilinear resize of a uint8 RGB image to ``size`` (int or ``(h, w)``)."""
    h, w = _size(size)
    if image.shape[:2] == (h, w):
        return np.asarray(image)
    return np.asarray(Image.fromarray(np.asarray(image, np.uint8)).resize((w, h), Image.BILINEAR))


def resize_label(label: np.ndarray, size) -> np.ndarray:
    """Nearest-neighbour resize; never creates label values absent from the input."""
    h, w = _size(size)
    label = np.asarray(label)
    if label.shape == (h, w):
        return label
    ys = np.minimum((np.arange(h) + 0.5) * label.shape[0] / h, label.shape[0] - 1).astype(int)
    xs = np.minimum((np.arange(w) + 0.5) * label.shape[1] / w, label.shape[1] - 1).astype(int)
    return label[ys[:, None], xs[None, :]]


def list_pairs(root) -> List[Tuple[str, Path, Path]]:
    root = Path(root)
    img_dir, lbl_dir = root / "images", root / "labels"
    if not img_dir.is_dir():
        raise FileNotFoundError(f"{img_dir} does not exist")
    pairs = []
    for img in sorted(p for p in img_dir.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES):
        lbl = lbl_dir / f"{img.stem}.png"
        if not lbl.exists():
            raise FileNotFoundError(f"missing label for {img.name}: expected {lbl}")
        pairs.append((img.stem, img, lbl))
    return pairs


def load(
    root,
    name: str,
    resize_to: Optional[int] = 224,
    batch_size: int = 2,
) -> Iterator[List[SegSample]]:
    """Yield batches of samples in lexicographic file order.

    Images are resized bilinearly, labels by nearest neighbour; pass
    ``resize_to=None`` to keep native resolution.
    """
    space = registry(name)
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    batch: List[SegSample] = []
    for ident, img_path, lbl_path in list_pairs(root):
        image, label = read_image(img_path), read_label(lbl_path)
        if image.shape[:2] != label.shape:
            raise ValueError(
                f"{img_path.name}: image {image.shape[:2]} and label {label.shape} sizes differ"
            )
        bad = np.setdiff1d(np.unique(label), [*range(space.num_classes), space.ignore_index])
        if bad.size:
            raise ValueError(f"{lbl_path.name}: label values {bad.tolist()} outside {space.name}")
        if resize_to is not None:
            image, label = resize_image(image, resize_to), resize_label(label, resize_to)
        batch.append(SegSample(image, label, ident))
        if len(batch) == batch_size:
            yield batch
            batch = []
    if batch:
        yield batch


# ---------------------------------------------------------------------------
# toy fixture
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ToyShapes:
    square: Tuple[int, int, int]  # top, left, side
    disc: Tuple[float, float, float]  # centre y, centre x, radius


def _toy_layout(rng: np.random.Generator, side: int) -> ToyShapes:
    half = side // 2
    sq = int(rng.integers(side // 5, side * 2 // 5))
    disc_r = float(rng.uniform(side / 10, side / 5))
    left_square = bool(rng.integers(0, 2))
    sq_x0 = 1 if left_square else half
    disc_x0 = half if left_square else 1
    top = int(rng.integers(1, side - sq - 1))
    left = int(rng.integers(sq_x0, sq_x0 + half - sq - 1))
    cy = float(rng.uniform(disc_r + 1, side - disc_r - 1))
    cx = float(rng.uniform(disc_x0 + disc_r, disc_x0 + half - 1 - disc_r))
    return ToyShapes((top, left, sq), (cy, cx, disc_r))


def rasterize_toy(shapes: ToyShapes, side: int) -> np.ndarray:
    """Exact label map: square cells, disc by pixel-centre test, 1px ignore frame."""
    label = np.zeros((side, side), dtype=np.uint8)
    top, left, sq = shapes.square
    label[top:top + sq, left:left + sq] = 1
    cy, cx, r = shapes.disc
    yy, xx = np.mgrid[0:side, 0:side]
    label[(yy + 0.5 - cy) ** 2 + (xx + 0.5 - cx) ** 2 <= r * r] = 2
    label[0, :] = label[-1, :] = IGNORE_INDEX
    label[:, 0] = label[:, -1] = IGNORE_INDEX
    return label


def render_toy(rng: np.random.Generator, side: int = 64) -> Tuple[np.ndarray, np.ndarray, ToyShapes]:
    shapes = _toy_layout(rng, side)
    label = rasterize_toy(shapes, side)
    palette = np.array([TOY_COLORS[c] for c in ("background", "square", "disc")], dtype=np.float64)
    palette = palette + rng.normal(0, 12, size=palette.shape)
    cls = np.where(label == IGNORE_INDEX, 0, label)
    image = palette[cls] + rng.normal(0, 6, size=(side, side, 3))
    return np.clip(np.rint(image), 0, 255).astype(np.uint8), label, shapes


def toy_samples(n: int, seed: int = 0, side: int = 64) -> List[SegSample]:
    """In-memory toy samples, identical to what :func:`make_toy_dataset` writes."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        image, label, _ = render_toy(rng, side)
        out.append(SegSample(image, label, f"toy_{i:04d}"))
    return out


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def make_toy_dataset(dst, n_images: int, seed: int = 0, side: int = 64) -> dict:
    """Write ``n_images`` seeded shape images + exact labels in the standard layout."""
    if n_images < 1:
        raise ValueError("n_images must be >= 1")
    dst = Path(dst)
    (dst / "images").mkdir(parents=True, exist_ok=True)
    (dst / "labels").mkdir(parents=True, exist_ok=True)
    files = []
    for sample in toy_samples(n_images, seed, side):
        ip = dst / "images" / f"{sample.ident}.png"
        lp = dst / "labels" / f"{sample.ident}.png"
        write_image(ip, sample.image)
        write_label(lp, sample.label)
        files.append({"id": sample.ident, "image_sha256": _sha256(ip), "label_sha256": _sha256(lp)})
    manifest = {
        "dataset": "toy",
        "seed": seed,
        "side": side,
        "count": n_images,
        "classes": list(registry("toy").classes),
        "files": files,
        "checksum": hashlib.sha256(
            "".join(f["image_sha256"] + f["label_sha256"] for f in files).encode()
        ).hexdigest(),
    }
    (dst / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return manifest


def stack_images(samples: Sequence[SegSample]) -> np.ndarray:
    return np.stack([s.image for s in samples])


def stack_labels(samples: Sequence[SegSample]) -> np.ndarray:
    return np.stack([s.label for s in samples])
