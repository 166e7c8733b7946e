"""Image I/O, face cropping, synthetic masks, segmentation, compositing and dataset indexing.

Images are ``float32`` arrays of shape ``(H, W, C)`` with values in ``[0, 1]``;
masks are boolean arrays of shape ``(H, W)`` where ``True`` marks a hidden pixel.
"""

from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .errors import BoundsError, DataError, GeometryError, ShapeError, StratificationError

IMAGE_EXTENSIONS = (".png", ".jpg", ".jpeg")
MIN_SIDE = 8

DEFAULT_FILL_COLOR = (0.35, 0.55, 0.85)
# (x, y) in normalized image coordinates: wide across the cheeks, narrower at the chin.
DEFAULT_MASK_VERTICES = ((0.15, 0.48), (0.85, 0.48), (0.70, 0.98), (0.30, 0.98))
DEFAULT_TAU = 0.05

LUMA = np.array([0.299, 0.587, 0.114])


class EmptyMaskWarning(UserWarning):
    pass


def as_image(arr, *, name: str = "image") -> np.ndarray:
    """Validate and normalize an image to a float32 ``(H, W, C)`` array."""
    img = np.asarray(arr)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3):
        raise ShapeError(f"{name} must be HxWx1 or HxWx3, got shape {img.shape}")
    if img.shape[0] < MIN_SIDE or img.shape[1] < MIN_SIDE:
        raise ShapeError(f"{name} must be at least {MIN_SIDE}x{MIN_SIDE}, got {img.shape[:2]}")
    img = img.astype(np.float32, copy=False)
    if not np.all(np.isfinite(img)) or img.min() < 0.0 or img.max() > 1.0:
        raise ValueError(f"{name} intensities must lie in [0, 1]")
    return img


def as_mask(arr, shape: tuple[int, int] | None = None) -> np.ndarray:
    mask = np.asarray(arr)
    if mask.ndim == 3 and mask.shape[2] == 1:
        mask = mask[:, :, 0]
    if mask.ndim != 2:
        raise ShapeError(f"mask must be HxW, got shape {mask.shape}")
    if mask.dtype != bool:
        if not np.isin(mask, (0, 1)).all():
            raise ValueError("mask values must be 0 or 1")
        mask = mask.astype(bool)
    if shape is not None and mask.shape != tuple(shape):
        raise ShapeError(f"mask shape {mask.shape} does not match image {tuple(shape)}")
    return mask


# --------------------------------------------------------------------------- I/O


def load_image(path, channels: int = 3) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"image not found: {path}")
    try:
        with Image.open(path) as im:
            im = im.convert("RGB" if channels == 3 else "L")
            data = np.asarray(im, dtype=np.float32) / 255.0
    except OSError as exc:
        raise DataError(f"cannot read image {path}: {exc}") from exc
    return as_image(data)


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def save_image(path, img: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = to_uint8(as_image(img))
    if data.shape[2] == 1:
        data = data[:, :, 0]
    Image.fromarray(data).save(path)


def load_mask(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"mask not found: {path}")
    with Image.open(path) as im:
        data = np.asarray(im.convert("L"))
    return data >= 128


def save_mask(path, mask: np.ndarray) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(as_mask(mask).astype(np.uint8) * 255).save(path)


# ---------------------------------------------------------------------- resampling


def _bilinear_axis(src_len: int, dst_len: int):
    # Half-pixel centres with edge clamping (the usual "align_corners=False" convention).
    pos = (np.arange(dst_len, dtype=np.float64) + 0.5) * (src_len / dst_len) - 0.5
    pos = np.clip(pos, 0.0, src_len - 1)
    lo = np.floor(pos).astype(np.int64)
    hi = np.minimum(lo + 1, src_len - 1)
    frac = pos - lo
    return lo, hi, frac


def resize(img: np.ndarray, height: int, width: int | None = None) -> np.ndarray:
    """Bilinear resize; returns a copy when the size already matches."""
    img = as_image(img)
    width = height if width is None else width
    if (height, width) == img.shape[:2]:
        return img.copy()
    if height < 1 or width < 1:
        raise ShapeError("target size must be positive")
    y0, y1, fy = _bilinear_axis(img.shape[0], height)
    x0, x1, fx = _bilinear_axis(img.shape[1], width)
    src = img.astype(np.float64)
    fy = fy[:, None, None]
    fx = fx[None, :, None]
    top = src[y0][:, x0] * (1 - fx) + src[y0][:, x1] * fx
    bottom = src[y1][:, x0] * (1 - fx) + src[y1][:, x1] * fx
    out = top * (1 - fy) + bottom * fy
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def resize_mask(mask: np.ndarray, height: int, width: int | None = None) -> np.ndarray:
    """Nearest-neighbour resize of a binary mask."""
    mask = as_mask(mask)
    width = height if width is None else width
    if (height, width) == mask.shape:
        return mask.copy()
    rows = np.minimum(((np.arange(height) + 0.5) * mask.shape[0] / height).astype(np.int64), mask.shape[0] - 1)
    cols = np.minimum(((np.arange(width) + 0.5) * mask.shape[1] / width).astype(np.int64), mask.shape[1] - 1)
    return mask[rows][:, cols]


def crop_face(img: np.ndarray, box: Sequence[int], target: int = 256) -> np.ndarray:
    """Crop ``box = (top, left, height, width)`` and resample it to ``target x target``.

    The pipeline stages use 224 (detection, recognition) and 256 (inpainting);
    smaller targets are accepted for desk-scale data.
    """
    img = as_image(img)
    top, left, height, width = (int(v) for v in box)
    H, W = img.shape[:2]
    if height < 1 or width < 1 or top < 0 or left < 0 or top + height > H or left + width > W:
        raise BoundsError(f"box {tuple(box)} outside image of size {H}x{W}")
    if target < MIN_SIDE:
        raise ShapeError(f"target must be at least {MIN_SIDE}")
    region = img[top : top + height, left : left + width]
    if (height, width) == (target, target):
        return region.copy()
    return resize(region, target, target)


# ----------------------------------------------------------------- synthetic masks


@dataclass(frozen=True)
class MaskGeometry:
    vertices: tuple[tuple[float, float], ...] = DEFAULT_MASK_VERTICES
    fill_color: tuple[float, float, float] = DEFAULT_FILL_COLOR
    jitter: float = 0.0

    def __post_init__(self):
        verts = tuple((float(x), float(y)) for x, y in self.vertices)
        object.__setattr__(self, "vertices", verts)
        if len(verts) < 3:
            raise GeometryError("mask polygon needs at least 3 vertices")
        if any(not (0.0 <= v <= 1.0) for xy in verts for v in xy):
            raise GeometryError("mask vertices must lie inside the unit square")
        if abs(polygon_area(verts)) < 1e-12:
            raise GeometryError("mask polygon has zero area")
        if len(self.fill_color) != 3 or any(not (0.0 <= c <= 1.0) for c in self.fill_color):
            raise GeometryError("fill color must be an RGB triple in [0, 1]")
        if not (0.0 <= self.jitter <= 0.05):
            raise GeometryError("color jitter must lie in [0, 0.05]")


def polygon_area(vertices: Sequence[tuple[float, float]]) -> float:
    xs = np.array([v[0] for v in vertices])
    ys = np.array([v[1] for v in vertices])
    return 0.5 * float(np.dot(xs, np.roll(ys, -1)) - np.dot(ys, np.roll(xs, -1)))


def rasterize_polygon(vertices: Sequence[tuple[float, float]], height: int, width: int) -> np.ndarray:
    """Even-odd fill of a normalized polygon, sampled at pixel centres."""
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    py, px = np.meshgrid(ys, xs, indexing="ij")
    inside = np.zeros((height, width), dtype=bool)
    n = len(vertices)
    for i in range(n):
        xa, ya = vertices[i]
        xb, yb = vertices[(i + 1) % n]
        if ya == yb:
            continue
        straddles = (ya > py) != (yb > py)
        x_cross = xa + (py - ya) * (xb - xa) / (yb - ya)
        inside ^= straddles & (px < x_cross)
    return inside


@dataclass
class MaskedPair:
    masked_image: np.ndarray
    mask: np.ndarray
    hidden_complement: np.ndarray
    ground_truth: np.ndarray | None = None


def fill_value(color: Sequence[float], channels: int) -> np.ndarray:
    color = np.asarray(color, dtype=np.float64)
    if channels == 1:
        return np.array([float(LUMA @ color)], dtype=np.float32)
    return color.astype(np.float32)


def synthesize_mask(img: np.ndarray, geom: MaskGeometry | None = None, seed: int = 0) -> MaskedPair:
    """Paint a synthetic face mask onto ``img``.

    ``geom=None`` means no occlusion: the masked image is the input and the mask is empty.
    Otherwise the polygon is filled with ``geom.fill_color`` (plus optional seeded jitter).
    """
    img = as_image(img)
    H, W, C = img.shape
    if geom is None:
        mask = np.zeros((H, W), dtype=bool)
        return MaskedPair(img.copy(), mask, np.zeros_like(img), img.copy())

    mask = rasterize_polygon(geom.vertices, H, W)
    color = np.asarray(geom.fill_color, dtype=np.float64)
    if geom.jitter > 0:
        rng = np.random.default_rng(seed)
        color = np.clip(color + rng.uniform(-geom.jitter, geom.jitter, size=3), 0.0, 1.0)
    masked = img.copy()
    masked[mask] = fill_value(color, C)
    hidden = np.where(mask[:, :, None], img, np.float32(0.0))
    return MaskedPair(masked, mask, hidden, img.copy())


def segment_mask(
    source,
    mode: str = "ground_truth",
    *,
    fill_color: Sequence[float] = DEFAULT_FILL_COLOR,
    tau: float = DEFAULT_TAU,
) -> np.ndarray:
    """Recover the occlusion mask of a masked face.

    ``ground_truth`` returns the mask stored with a :class:`MaskedPair`;
    ``color_threshold`` marks pixels within L-infinity distance ``tau`` of ``fill_color``.
    """
    if mode == "ground_truth":
        if not isinstance(source, MaskedPair):
            raise ValueError("ground_truth segmentation needs a MaskedPair with a stored mask")
        return source.mask.copy()
    if mode != "color_threshold":
        raise ValueError(f"unknown segmentation mode {mode!r}")

    img = source.masked_image if isinstance(source, MaskedPair) else as_image(source)
    target = fill_value(fill_color, img.shape[2]).astype(np.float64)
    dist = np.abs(img.astype(np.float64) - target).max(axis=2)
    mask = dist <= tau
    if not mask.any():
        warnings.warn("color-threshold segmentation found no mask pixels", EmptyMaskWarning, stacklevel=2)
    return mask


def composite(known: np.ndarray, generated: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """``known`` where mask is 0, ``generated`` where mask is 1."""
    known = np.asarray(known)
    generated = np.asarray(generated)
    if known.shape != generated.shape:
        raise ShapeError(f"known {known.shape} and generated {generated.shape} differ")
    mask = np.asarray(mask)
    if mask.shape != known.shape[:2]:
        raise ShapeError(f"mask {mask.shape} does not match images {known.shape[:2]}")
    mask = as_mask(mask)
    if known.ndim == 3:
        mask = mask[:, :, None]
    return np.where(mask, generated.astype(known.dtype, copy=False), known)


# ------------------------------------------------------------------------ datasets


@dataclass(frozen=True)
class Sample:
    path: str
    label: int
    masked: bool = False


@dataclass
class DatasetIndex:
    samples: list[Sample]
    class_names: list[str] = field(default_factory=list)

    def __post_init__(self):
        paths = [s.path for s in self.samples]
        if len(set(paths)) != len(paths):
            raise DataError("dataset paths must be unique")
        n = len(self.class_names)
        for s in self.samples:
            if not (0 <= s.label < n):
                raise DataError(f"label {s.label} out of range for {n} classes ({s.path})")

    def __len__(self):
        return len(self.samples)

    @property
    def labels(self) -> list[int]:
        return [s.label for s in self.samples]

    def counts(self) -> dict[int, int]:
        out: dict[int, int] = defaultdict(int)
        for s in self.samples:
            out[s.label] += 1
        return dict(out)


def scan_dataset(root, *, masked: bool = False) -> DatasetIndex:
    """Index ``<root>/<class_name>/<image>`` trees; classes are sorted by name."""
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root not found: {root}")
    class_dirs = sorted(p for p in root.iterdir() if p.is_dir())
    samples = []
    for label, d in enumerate(class_dirs):
        for f in sorted(d.iterdir()):
            if f.suffix.lower() in IMAGE_EXTENSIONS:
                samples.append(Sample(str(f), label, masked))
    if not samples:
        raise DataError(f"no images under {root}")
    return DatasetIndex(samples, [d.name for d in class_dirs])


def stratified_counts(class_sizes: dict[int, int], ratio: float) -> dict[int, int]:
    """Training-set size per class: floors plus largest-remainder top-up, kept in [1, n-1]."""
    r = Fraction(ratio).limit_denominator(10**6)
    total = sum(class_sizes.values())
    target = math.floor(total * r + Fraction(1, 2))
    exact = {c: n * r for c, n in class_sizes.items()}
    counts = {c: math.floor(v) for c, v in exact.items()}
    leftover = target - sum(counts.values())
    by_remainder = sorted(class_sizes, key=lambda c: (-(exact[c] - counts[c]), c))
    for c in by_remainder[: max(leftover, 0)]:
        counts[c] += 1
    return {c: min(max(k, 1), class_sizes[c] - 1) for c, k in counts.items()}


def split_dataset(idx: DatasetIndex, ratio: float = 0.8, seed: int = 0) -> tuple[DatasetIndex, DatasetIndex]:
    """Seeded, per-class stratified train/test split.

    Both partitions keep the original sample order.
    """
    if not (0.0 < ratio < 1.0):
        raise ValueError("ratio must lie strictly between 0 and 1")
    by_class: dict[int, list[int]] = defaultdict(list)
    for i, s in enumerate(idx.samples):
        by_class[s.label].append(i)
    sizes = {c: len(v) for c, v in sorted(by_class.items())}
    small = [idx.class_names[c] for c, n in sizes.items() if n < 2]
    if small:
        raise StratificationError(f"classes with fewer than 2 samples cannot be split: {small}")
    counts = stratified_counts(sizes, ratio)

    rng = np.random.default_rng(seed)
    train_ids: set[int] = set()
    for c in sorted(by_class):
        members = np.asarray(by_class[c])
        chosen = rng.permutation(members)[: counts[c]]
        train_ids.update(int(i) for i in chosen)
    train = [s for i, s in enumerate(idx.samples) if i in train_ids]
    test = [s for i, s in enumerate(idx.samples) if i not in train_ids]
    return DatasetIndex(train, list(idx.class_names)), DatasetIndex(test, list(idx.class_names))


def write_manifest(path, splits: dict[str, DatasetIndex]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["path", "label", "split"])
        for name, idx in splits.items():
            for s in idx.samples:
                w.writerow([s.path, s.label, name])


def read_manifest(path, class_names: Sequence[str] | None = None) -> dict[str, DatasetIndex]:
    """Inverse of :func:`write_manifest`.

    Class names default to each label's parent directory name.
    """
    path = Path(path)
    if not path.is_file():
        raise DataError(f"manifest not found: {path}")
    rows: dict[str, list[Sample]] = defaultdict(list)
    names: dict[int, str] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != ["path", "label", "split"]:
            raise DataError(f"{path}: expected header path,label,split")
        for row in reader:
            label = int(row["label"])
            rows[row["split"]].append(Sample(row["path"], label))
            names.setdefault(label, Path(row["path"]).parent.name)
    if class_names is None:
        class_names = [names[i] for i in range(max(names) + 1)] if names else []
    return {k: DatasetIndex(v, list(class_names)) for k, v in rows.items()}


def masked_tree(root) -> tuple[Path, Path]:
    """Sibling directories ``<root>_masked`` and ``<root>_masks``."""
    root = Path(root)
    return root.with_name(root.name + "_masked"), root.with_name(root.name + "_masks")


def counterpart_paths(image_path, root) -> tuple[Path, Path]:
    """Masked-image and mask paths for an image inside ``root``."""
    image_path, root = Path(image_path), Path(root)
    rel = image_path.relative_to(root).with_suffix(".png")
    masked_root, masks_root = masked_tree(root)
    return masked_root / rel, masks_root / rel


def make_masked_dataset(
    root,
    geom: MaskGeometry | None = MaskGeometry(),
    seed: int = 0,
    paths: Iterable[str] | None = None,
) -> int:
    """Write masked variants and 8-bit masks (255 = occluded) for every image under ``root``."""
    root = Path(root)
    if paths is None:
        paths = [s.path for s in scan_dataset(root).samples]
    n = 0
    for i, p in enumerate(paths):
        pair = synthesize_mask(load_image(p), geom, seed=seed + i)
        masked_path, mask_path = counterpart_paths(p, root)
        save_image(masked_path, pair.masked_image)
        save_mask(mask_path, pair.mask)
        n += 1
    return n
