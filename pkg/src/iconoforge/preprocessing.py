"""Image-to-tensor pipeline: square padding, resize, normalization, flips.

The full chain is pad-to-square (filled with the dataset mean so padding
normalizes to zero), bilinear resize to the model input size, scale to
[0, 1] and per-channel standardization. BW images are replicated to three
channels before anything else.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from .ingest import ChannelStats


def to_rgb_array(image: np.ndarray) -> np.ndarray:
    """Coerce HxW or HxWx1 grayscale input to HxWx3 uint8."""
    arr = np.asarray(image)
    if arr.ndim == 2:
        arr = np.repeat(arr[:, :, None], 3, axis=2)
    elif arr.ndim == 3 and arr.shape[2] == 1:
        arr = np.repeat(arr, 3, axis=2)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected HxW[x3] image, got shape {arr.shape}")
    return arr


def pad_to_square(image: np.ndarray,
                  fill: tuple[float, float, float] = (0.0, 0.0, 0.0),
                  ) -> np.ndarray:
    """Pad to side = max(width, height) with the content centered.

    ``fill`` is in the same scale as the image values. With an odd margin
    the extra row/column goes to the bottom/right.
    """
    arr = to_rgb_array(image)
    h, w = arr.shape[:2]
    if h < 1 or w < 1:
        raise ValueError("image must be at least 1x1")
    side = max(h, w)
    if h == side and w == side:
        return arr.copy()
    out = np.empty((side, side, 3), dtype=arr.dtype)
    out[:, :] = np.asarray(fill, dtype=arr.dtype)
    top = (side - h) // 2
    left = (side - w) // 2
    out[top:top + h, left:left + w] = arr
    return out


def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize (align_corners=False convention, no antialiasing).

    Interpolates in float64 so the result is the exact bilinear value
    rather than a float32 approximation of it.
    """
    tensor = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float64))
    tensor = tensor.permute(2, 0, 1).unsqueeze(0)
    resized = F.interpolate(tensor, size=(size, size), mode="bilinear",
                            align_corners=False, antialias=False)
    return resized.squeeze(0).permute(1, 2, 0).numpy()


def preprocess(image: np.ndarray, stats: ChannelStats, input_size: int,
               ) -> torch.Tensor:
    """uint8 HxW[x3] image -> normalized 3 x input_size x input_size tensor."""
    arr = to_rgb_array(image)
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError("cannot preprocess a zero-sized image")
    scaled = arr.astype(np.float64) / 255.0
    padded = pad_to_square(scaled, fill=stats.mean)
    resized = resize_bilinear(padded, input_size)
    mean = np.asarray(stats.mean, dtype=np.float64)
    std = np.asarray(stats.std, dtype=np.float64)
    normalized = ((resized - mean) / std).astype(np.float32)
    return torch.from_numpy(normalized).permute(2, 0, 1).contiguous()


def augment(tensor: torch.Tensor, hflip_prob: float,
            rng: np.random.Generator) -> torch.Tensor:
    """Training-time augmentation: horizontal mirror with the given
    probability, nothing else."""
    if not 0.0 <= hflip_prob <= 1.0:
        raise ValueError(f"hflip_prob must be in [0,1], got {hflip_prob}")
    if hflip_prob > 0 and rng.random() < hflip_prob:
        return torch.flip(tensor, dims=[-1])
    return tensor


def pad_geometry(width: int, height: int) -> tuple[int, int, int]:
    """(side, left_offset, top_offset) of the content after pad_to_square."""
    side = max(width, height)
    return side, (side - width) // 2, (side - height) // 2
