"""Reshape RGB images into 12 x 512 pseudo-signals.

The image is resized to 46 x 46 and cut into 23 x 23 non-overlapping 2 x 2 x 3
patches, taken in row-major order. Patch ``j`` becomes column ``j``; within a
patch the 12 values are ordered channel-fastest::

    row = (dy * 2 + dx) * 3 + channel

The last 17 of the 529 columns are dropped.
"""
from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

SIDE = 46
PATCH = 2
KEEP = 512


def resize_image(img: np.ndarray, side: int = SIDE) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        img = img.astype(np.float64) / 255.0
    img = img.astype(np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError(f"expected an H x W x 3 image, got {img.shape}")
    if img.shape[:2] == (side, side):
        return img
    t = torch.from_numpy(img).permute(2, 0, 1).unsqueeze(0)
    out = F.interpolate(t, size=(side, side), mode="bilinear", align_corners=False)
    return out[0].permute(1, 2, 0).numpy()


def patchify_resized(img: np.ndarray) -> np.ndarray:
    g = SIDE // PATCH
    # (gy, dy, gx, dx, c) -> (gy, gx, dy, dx, c)
    blocks = img.reshape(g, PATCH, g, PATCH, 3).transpose(0, 2, 1, 3, 4)
    cols = blocks.reshape(g * g, PATCH * PATCH * 3).T  # (12, 529)
    return np.ascontiguousarray(cols[:, :KEEP])


def patchify_image(img: np.ndarray) -> np.ndarray:
    """H x W x 3 image -> (12, 512)."""
    return patchify_resized(resize_image(img))


def unpatchify(x: np.ndarray) -> np.ndarray:
    """Inverse of :func:`patchify_resized` for the kept patches; pixels of the
    dropped patches are NaN."""
    g = SIDE // PATCH
    cols = np.full((PATCH * PATCH * 3, g * g), np.nan)
    cols[:, :x.shape[1]] = x
    blocks = cols.T.reshape(g, g, PATCH, PATCH, 3).transpose(0, 2, 1, 3, 4)
    return blocks.reshape(SIDE, SIDE, 3)


def patchify_batch(images) -> np.ndarray:
    return np.stack([patchify_image(im) for im in images]).astype(np.float32)
