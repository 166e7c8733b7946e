"""Conversions between HxWxC numpy images and NCHW torch tensors."""

from __future__ import annotations

from typing import Sequence

import numpy as np
import torch

from .imaging import as_image, resize


def images_to_tensor(images: Sequence[np.ndarray] | np.ndarray, size: int | None = None) -> torch.Tensor:
    """Stack images into a float32 ``(B, C, H, W)`` tensor, resizing to ``size`` if given."""
    if isinstance(images, torch.Tensor):
        return images.float()
    batch = []
    for img in images:
        img = as_image(img)
        if size is not None and img.shape[:2] != (size, size):
            img = resize(img, size, size)
        batch.append(img)
    arr = np.stack(batch).transpose(0, 3, 1, 2)
    return torch.from_numpy(np.ascontiguousarray(arr))


def tensor_to_images(t: torch.Tensor) -> list[np.ndarray]:
    arr = t.detach().cpu().numpy().transpose(0, 2, 3, 1)
    return [np.ascontiguousarray(a, dtype=np.float32) for a in arr]


def seeded(seed: int) -> torch.Generator:
    return torch.Generator().manual_seed(int(seed))
