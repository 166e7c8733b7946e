"""Procedural toy faces used as the desk-scale stand-in for real face datasets.

Each identity has fixed skin/hair tone and facial-feature geometry; samples of
one identity differ by small pose, lighting and noise perturbations.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .imaging import save_image


@dataclass(frozen=True)
class Identity:
    skin: tuple[float, float, float]
    hair: tuple[float, float, float]
    background: tuple[float, float, float]
    eye_gap: float
    eye_height: float
    face_width: float
    mouth_width: float
    brow_tilt: float


def make_identities(n: int, seed: int = 0) -> list[Identity]:
    rng = np.random.default_rng(seed)
    out = []
    for i in range(n):
        # Warm skin tones; backgrounds stay away from the bluish mask fill colour.
        skin = (rng.uniform(0.55, 0.95), rng.uniform(0.35, 0.7), rng.uniform(0.25, 0.5))
        hair = tuple(rng.uniform(0.02, 0.45, size=3))
        hue = (i + rng.uniform(0, 0.5)) / max(n, 1)
        background = (0.3 + 0.5 * hue, 0.75 - 0.4 * hue, 0.25 + 0.2 * rng.uniform())
        out.append(
            Identity(
                skin=tuple(float(v) for v in skin),
                hair=tuple(float(v) for v in hair),
                background=tuple(float(v) for v in background),
                eye_gap=float(rng.uniform(0.12, 0.22)),
                eye_height=float(rng.uniform(0.36, 0.44)),
                face_width=float(rng.uniform(0.30, 0.40)),
                mouth_width=float(rng.uniform(0.08, 0.18)),
                brow_tilt=float(rng.uniform(-0.04, 0.04)),
            )
        )
    return out


def render_face(ident: Identity, size: int, rng: np.random.Generator) -> np.ndarray:
    ys, xs = np.mgrid[0:size, 0:size]
    y = (ys + 0.5) / size
    x = (xs + 0.5) / size
    dx, dy = rng.normal(0, 0.015, size=2)
    light = rng.uniform(0.9, 1.05)
    cx, cy = 0.5 + dx, 0.52 + dy

    img = np.empty((size, size, 3))
    img[:] = ident.background
    face = ((x - cx) / ident.face_width) ** 2 + ((y - cy) / 0.42) ** 2 <= 1.0
    img[face] = ident.skin
    hair = face & (y < cy - 0.24)
    img[hair] = ident.hair

    def disc(px, py, r):
        return (x - px) ** 2 + (y - py) ** 2 <= r * r

    ey = cy - 0.52 + ident.eye_height
    for side in (-1, 1):
        ex = cx + side * ident.eye_gap
        img[disc(ex, ey, 0.035)] = (0.95, 0.95, 0.95)
        img[disc(ex, ey, 0.018)] = (0.08, 0.06, 0.05)
        brow = (np.abs(x - ex) < 0.05) & (np.abs(y - (ey - 0.06 + side * ident.brow_tilt * (x - ex) * 10)) < 0.012)
        img[brow] = ident.hair
    nose = (np.abs(x - cx) < 0.018) & (y > ey + 0.04) & (y < ey + 0.16)
    img[nose] = np.asarray(ident.skin) * 0.8
    mouth = ((x - cx) / ident.mouth_width) ** 2 + ((y - (ey + 0.25)) / 0.03) ** 2 <= 1.0
    img[mouth] = (0.6, 0.15, 0.2)

    img = img * light + rng.normal(0, 0.02, size=img.shape)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def make_faces(n_classes: int, per_class: int, size: int = 64, seed: int = 0):
    """Return ``(images, labels)`` with ``per_class`` renders of each identity, class-major order."""
    idents = make_identities(n_classes, seed)
    rng = np.random.default_rng(seed + 1)
    images, labels = [], []
    for label, ident in enumerate(idents):
        for _ in range(per_class):
            images.append(render_face(ident, size, rng))
            labels.append(label)
    return images, labels


def write_face_tree(root, n_classes: int = 5, per_class: int = 20, size: int = 64, seed: int = 0) -> int:
    """Write ``<root>/person_<k>/<nnnn>.png``; returns the number of files written."""
    root = Path(root)
    images, labels = make_faces(n_classes, per_class, size, seed)
    counters = [0] * n_classes
    for img, label in zip(images, labels):
        save_image(root / f"person_{label}" / f"{counters[label]:04d}.png", img)
        counters[label] += 1
    return len(images)
