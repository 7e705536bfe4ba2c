"""Class activation maps: upsampling, normalization and overlay rendering.

The fully-convolutional head makes the per-class output map itself the
activation map, so extracting a CAM is a lookup plus bilinear upsampling
and a min-max rescale; no gradients involved.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .classes import by_code
from .model import Prediction
from .preprocessing import pad_to_square, resize_bilinear, to_rgb_array

# Normalized activation mapped through a fixed blue -> cyan -> yellow -> red
# ramp; deterministic by construction.
_COLOR_STOPS = (
    (0.0, (0, 0, 140)),
    (0.35, (0, 210, 210)),
    (0.65, (235, 235, 0)),
    (1.0, (210, 0, 0)),
)

FLAT_MAP_VALUE = 0.5  # convention for constant maps (avoids 0/0)


@dataclass
class CamMap:
    record_id: str | None
    icon_class: str
    raw_map: np.ndarray  # feature-resolution, pre-sigmoid
    upsampled: np.ndarray  # input-resolution, min-max normalized to [0,1]
    peak_location: tuple[int, int]  # (x, y) at input resolution


def _normalize_map(upsampled: np.ndarray) -> np.ndarray:
    lo = float(upsampled.min())
    hi = float(upsampled.max())
    if hi - lo < 1e-12:
        return np.full_like(upsampled, FLAT_MAP_VALUE)
    return (upsampled - lo) / (hi - lo)


def compute_cam(prediction: Prediction, class_code: str) -> CamMap:
    """CAM for one class of one prediction: bilinear upsample of the raw
    class map to the model input size, min-max normalized. A constant map
    normalizes to a flat 0.5 by convention. The peak is the argmax of the
    upsampled map, smallest row-major index on ties."""
    icon = by_code(class_code)
    raw = prediction.class_maps[icon.index].astype(np.float32)
    upsampled = resize_bilinear(raw[:, :, None].repeat(3, axis=2),
                                prediction.input_size)[:, :, 0]
    normalized = _normalize_map(upsampled)
    flat_idx = int(np.argmax(normalized))
    y, x = divmod(flat_idx, normalized.shape[1])
    return CamMap(record_id=prediction.record_id, icon_class=class_code,
                  raw_map=raw, upsampled=normalized.astype(np.float32),
                  peak_location=(x, y))


def colormap(values: np.ndarray) -> np.ndarray:
    """Map [0,1] activations to RGB uint8 through the fixed heat ramp."""
    values = np.clip(values, 0.0, 1.0)
    out = np.zeros(values.shape + (3,), dtype=np.float32)
    for (t0, c0), (t1, c1) in zip(_COLOR_STOPS, _COLOR_STOPS[1:]):
        mask = (values >= t0) & (values <= t1)
        frac = np.zeros_like(values)
        frac[mask] = (values[mask] - t0) / (t1 - t0)
        for ch in range(3):
            out[..., ch][mask] = c0[ch] + frac[mask] * (c1[ch] - c0[ch])
    return np.round(out).astype(np.uint8)


def render_overlay(image: np.ndarray, cam: CamMap, alpha: float = 0.5,
                   fill: tuple[float, float, float] = (0.0, 0.0, 0.0),
                   ) -> np.ndarray:
    """Blend the heat-colormapped CAM over the padded-square original.

    ``image`` is the original artwork (uint8, pre-normalization); ``fill``
    the padding color in 0..255 scale. alpha=0 returns the padded original
    bytes untouched; alpha=1 the pure colormap.
    """
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0,1], got {alpha}")
    padded = pad_to_square(to_rgb_array(image), fill=fill)
    if alpha == 0.0:
        return padded
    side = padded.shape[0]
    cam_resized = resize_bilinear(
        cam.upsampled[:, :, None].repeat(3, axis=2).astype(np.float32),
        side)[:, :, 0]
    heat = colormap(cam_resized).astype(np.float32)
    if alpha == 1.0:
        return heat.astype(np.uint8)
    blended = (1.0 - alpha) * padded.astype(np.float32) + alpha * heat
    return np.clip(np.round(blended), 0, 255).astype(np.uint8)


def overlay_png_bytes(image: np.ndarray, cam: CamMap, alpha: float = 0.5,
                      fill: tuple[float, float, float] = (0.0, 0.0, 0.0),
                      ) -> bytes:
    import io

    arr = render_overlay(image, cam, alpha=alpha, fill=fill)
    buffer = io.BytesIO()
    Image.fromarray(arr).save(buffer, format="PNG")
    return buffer.getvalue()


def write_raw_map(cam: CamMap, path) -> None:
    """Portable plain-text matrix dump of the feature-resolution map.

    Header line: ``iconoforge-cam-raw v1 <rows> <cols>``; then one
    whitespace-separated row of floats per line.
    """
    rows, cols = cam.raw_map.shape
    lines = [f"iconoforge-cam-raw v1 {rows} {cols}"]
    for r in range(rows):
        lines.append(" ".join(f"{v:.9g}" for v in cam.raw_map[r]))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def read_raw_map(path) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().split()
        if header[:2] != ["iconoforge-cam-raw", "v1"]:
            raise ValueError(f"{path} is not a cam-raw v1 file")
        rows, cols = int(header[2]), int(header[3])
        data = np.loadtxt(fh, dtype=np.float64)
    data = np.atleast_2d(data)
    if data.shape != (rows, cols):
        raise ValueError(f"{path}: header says {rows}x{cols}, data is {data.shape}")
    return data
