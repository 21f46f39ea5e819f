"""Temporally consistent random crops."""

from __future__ import annotations

import numpy as np

from ..errors import UsageError


def crop_offsets(src: int, size: int, n: int, rng: np.random.Generator | None, mode: str) -> np.ndarray:
    if size > src:
        raise UsageError(f"crop size {size} exceeds source size {src}")
    if mode == "eval" or rng is None:
        c = (src - size) // 2
        return np.full((n, 2), c, dtype=np.int64)
    if mode != "train":
        raise UsageError(f"crop mode must be train or eval, got {mode!r}")
    return rng.integers(0, src - size + 1, size=(n, 2))


def crop_augment(images: np.ndarray, size: int, rng: np.random.Generator | None = None, mode: str = "train",
                 return_offsets: bool = False):
    """Crop (B, T, H, W, C) or (T, H, W, C) image sequences to ``size`` x ``size``.

    Training draws one offset per sequence and applies it at every step;
    evaluation always takes the center.
    """
    images = np.asarray(images)
    single = images.ndim == 4
    if single:
        images = images[None]
    b, t, h, w, c = images.shape
    if h != w:
        raise UsageError("only square images can be cropped")
    offs = crop_offsets(h, size, b, rng, mode)
    out = np.empty((b, t, size, size, c), dtype=images.dtype)
    for i, (y, x) in enumerate(offs):
        out[i] = images[i, :, y: y + size, x: x + size]
    out = out[0] if single else out
    return (out, offs) if return_offsets else out
