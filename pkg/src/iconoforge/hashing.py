"""Content hashes used for duplicate detection.

Exact duplicates are matched on the MD5 of the raw file bytes. Near
duplicates use a 64-bit difference hash: the image is reduced to a 9x8
grayscale thumbnail and each bit records whether a pixel is brighter than
its right neighbour.
"""

from __future__ import annotations

import hashlib
import io

import numpy as np
from PIL import Image

DHASH_BITS = 64


def md5_hex(data: bytes) -> str:
    return hashlib.md5(data).hexdigest()


def dhash64(image: Image.Image) -> int:
    gray = image.convert("L").resize((9, 8), Image.Resampling.LANCZOS)
    px = np.asarray(gray, dtype=np.int16)
    bits = (px[:, 1:] > px[:, :-1]).flatten()
    value = 0
    for i, bit in enumerate(bits):
        if bit:
            value |= 1 << i
    return value


def dhash64_from_bytes(data: bytes) -> int:
    with Image.open(io.BytesIO(data)) as img:
        return dhash64(img)


def phash_hex(value: int) -> str:
    return f"{value:016x}"


def phash_from_hex(text: str) -> int:
    return int(text, 16)


def hamming(a: int, b: int) -> int:
    return (a ^ b).bit_count()


def hamming_hex(a: str, b: str) -> int:
    return hamming(int(a, 16), int(b, 16))
