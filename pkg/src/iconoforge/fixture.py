"""Synthetic glyph corpus generator.

The real painting corpus cannot be bundled, so desk-scale experiments run
on generated images instead: each class gets a distinctive attribute glyph
(shape + color) composited at a random position onto a textured multicolor
background. Backgrounds span the whole palette, so pooled color statistics
alone cannot separate the classes — the glyph is the only reliable cue,
which is exactly what the activation maps should find.

The generator also plants the data-quality problems the curation stage
exists for: exact byte duplicates, JPEG re-encoded near duplicates,
fragment-keyword titles, over-broad title keywords and records whose
metadata contradicts the figure detector.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import numpy as np
from PIL import Image, ImageDraw

from .classes import CLASS_CODES, ICON_CLASSES

log = logging.getLogger(__name__)

IMAGE_SIDE = 128
N_EXACT_DUPS = 5
N_NEAR_DUPS = 5
NEAR_DUP_JPEG_QUALITY = 90

# Title keyword per class; chosen so no title triggers another class's
# keyword list (the broad "john" inside "John the Baptist" resolves to the
# same class and is superseded by the specific match).
_TITLE_NAMES = {
    "11H(ANTONY OF PADUA)": "Anthony of Padua",
    "11H(FRANCIS)": "Francis",
    "11H(JEROME)": "Jerome",
    "11H(JOHN THE BAPTIST)": "John the Baptist",
    "11HH(MARY MAGDALENE)": "Magdalene",
    "11H(PAUL)": "Paul",
    "11H(PETER)": "Peter",
    "11HH(DOMINIC)": "Dominic",
    "11H(SEBASTIAN)": "Sebastian",
    "11F": "Madonna",
}

_GLYPH_COLORS = (
    (220, 40, 40),    # red
    (40, 180, 40),    # green
    (50, 80, 230),    # blue
    (235, 215, 40),   # yellow
    (225, 60, 225),   # magenta
    (45, 215, 215),   # cyan
    (240, 140, 30),   # orange
    (140, 60, 220),   # purple
    (245, 245, 245),  # white
    (25, 25, 25),     # near-black
)

# Broad-titled records (no auto label, pose-mismatch candidates) and
# records whose stub detector reports zero figures despite a label.
_BROAD_TITLES = ("St. John", "Mary", "Mary in a landscape")
_BROAD_CLASS_INDICES = (3, 9, 4)  # drawn glyphs: John, Virgin, Magdalene
_NO_POSE_CLASS_INDICES = (0, 1)


@dataclass
class FixtureSummary:
    out_dir: str
    n_images: int
    n_exact_dups: int
    n_near_dups: int
    manifest_path: str
    truth_path: str

    def to_dict(self) -> dict[str, Any]:
        return self.__dict__.copy()


def _texture_background(rng: np.random.Generator) -> Image.Image:
    coarse = rng.integers(0, 256, size=(8, 8, 3), dtype=np.uint8)
    img = Image.fromarray(coarse).resize((IMAGE_SIDE, IMAGE_SIDE),
                                         Image.Resampling.BILINEAR)
    noise = rng.integers(-14, 15, size=(IMAGE_SIDE, IMAGE_SIDE, 3))
    arr = np.clip(np.asarray(img, dtype=np.int16) + noise, 0, 255)
    return Image.fromarray(arr.astype(np.uint8))


def _draw_glyph(draw: ImageDraw.ImageDraw, class_index: int,
                x0: int, y0: int, size: int) -> None:
    color = _GLYPH_COLORS[class_index]
    outline = (0, 0, 0) if sum(color) > 150 else (255, 255, 255)
    x1, y1 = x0 + size, y0 + size
    cx, cy = (x0 + x1) // 2, (y0 + y1) // 2
    if class_index == 0:  # triangle
        draw.polygon([(cx, y0), (x1, y1), (x0, y1)], fill=color, outline=outline)
    elif class_index == 1:  # plus cross
        w = max(3, size // 4)
        draw.rectangle([cx - w // 2, y0, cx + w // 2, y1], fill=color, outline=outline)
        draw.rectangle([x0, cy - w // 2, x1, cy + w // 2], fill=color, outline=outline)
    elif class_index == 2:  # five-point star
        pts = []
        for k in range(10):
            ang = -np.pi / 2 + k * np.pi / 5
            r = size / 2 if k % 2 == 0 else size / 4.5
            pts.append((cx + r * np.cos(ang), cy + r * np.sin(ang)))
        draw.polygon(pts, fill=color, outline=outline)
    elif class_index == 3:  # disc
        draw.ellipse([x0, y0, x1, y1], fill=color, outline=outline)
    elif class_index == 4:  # diamond
        draw.polygon([(cx, y0), (x1, cy), (cx, y1), (x0, cy)],
                     fill=color, outline=outline)
    elif class_index == 5:  # tall bar with pommel
        w = max(3, size // 5)
        draw.rectangle([cx - w // 2, y0, cx + w // 2, y1], fill=color, outline=outline)
        draw.ellipse([cx - w, y0, cx + w, y0 + 2 * w], fill=color, outline=outline)
    elif class_index == 6:  # ring
        draw.ellipse([x0, y0, x1, y1], fill=color, outline=outline)
        hole = size // 3
        draw.ellipse([cx - hole // 2, cy - hole // 2,
                      cx + hole // 2, cy + hole // 2], fill=(128, 128, 128))
    elif class_index == 7:  # crescent
        draw.ellipse([x0, y0, x1, y1], fill=color, outline=outline)
        off = size // 3
        draw.ellipse([x0 + off, y0 - off // 2, x1 + off, y1 - off // 2],
                     fill=(128, 128, 128))
    elif class_index == 8:  # arrow
        w = max(3, size // 6)
        draw.line([(x0, y1), (x1 - size // 4, y0 + size // 4)],
                  fill=color, width=w)
        draw.polygon([(x1, y0), (x1 - size // 2, y0 + size // 6),
                      (x1 - size // 6, y0 + size // 2)],
                     fill=color, outline=outline)
    else:  # square
        draw.rectangle([x0, y0, x1, y1], fill=color, outline=outline)


def render_glyph_image(rng: np.random.Generator, class_index: int,
                       ) -> tuple[Image.Image, tuple[int, int, int, int]]:
    """One composited image plus the glyph bounding box (x0, y0, x1, y1)."""
    img = _texture_background(rng)
    size = int(rng.integers(28, 49))
    margin = 6
    x0 = int(rng.integers(margin, IMAGE_SIDE - size - margin))
    y0 = int(rng.integers(margin, IMAGE_SIDE - size - margin))
    draw = ImageDraw.Draw(img)
    _draw_glyph(draw, class_index, x0, y0, size)
    return img, (x0, y0, x0 + size, y0 + size)


def make_synthetic_fixture(out_dir: str | Path, n_per_class: int,
                           seed: int = 0) -> FixtureSummary:
    """Generate the corpus: images, a JSONL source manifest and a ground
    truth file with class codes and glyph bounding boxes.

    Composition: 10 * n_per_class base images, plus 5 exact byte
    duplicates and 5 JPEG near duplicates. Deterministic byte-for-byte
    given the seed.
    """
    if n_per_class < 10:
        raise ValueError("n_per_class must be at least 10")
    out_dir = Path(out_dir)
    images_dir = out_dir / "source_images"
    images_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)

    manifest_rows: list[dict[str, Any]] = []
    truth_rows: list[dict[str, Any]] = []

    broad_slots = {(_BROAD_CLASS_INDICES[i], 2): _BROAD_TITLES[i]
                   for i in range(len(_BROAD_TITLES))}

    for class_index, icon in enumerate(ICON_CLASSES):
        name = _TITLE_NAMES[icon.code]
        for i in range(n_per_class):
            img, bbox = render_glyph_image(rng, class_index)
            filename = f"img_{class_index}_{i:03d}.png"
            img.save(images_dir / filename, format="PNG")
            uri = f"source_images/{filename}"

            role = "base"
            stub_figures = "1"
            if (class_index, i) in broad_slots:
                title = broad_slots[(class_index, i)]
                role = "broad_title"
            elif class_index in _NO_POSE_CLASS_INDICES and i == n_per_class - 1:
                title = f"{name} altarpiece no. {i}"
                role = "no_pose"
                stub_figures = "0"
            elif i == 3:
                title = f"{name} polyptych (detail)"
                role = "fragment_title"
            else:
                title = f"{name} altarpiece no. {i}"
            manifest_rows.append({
                "uri": uri,
                "title": title,
                "description": f"synthetic panel {class_index}-{i}",
                "tags": ["synthetic", f"palette{class_index}"],
                "metadata": {"stub_figures": stub_figures},
            })
            truth_rows.append({"uri": uri, "class_code": icon.code,
                               "bbox": list(bbox), "role": role})

    # Exact duplicates: byte-identical copies of the first image of the
    # first five classes, under a different uri.
    for k in range(N_EXACT_DUPS):
        src = images_dir / f"img_{k}_000.png"
        dst = images_dir / f"dup_exact_{k}.png"
        dst.write_bytes(src.read_bytes())
        base = manifest_rows[k * n_per_class]
        manifest_rows.append({**base, "uri": f"source_images/dup_exact_{k}.png"})
        truth_rows.append({"uri": f"source_images/dup_exact_{k}.png",
                           "class_code": CLASS_CODES[k], "bbox": None,
                           "role": "exact_dup",
                           "duplicate_of": base["uri"]})

    # Near duplicates: JPEG re-encodes of the second image of the last five
    # classes.
    for k in range(N_NEAR_DUPS):
        class_index = 5 + k
        src = images_dir / f"img_{class_index}_001.png"
        dst = images_dir / f"dup_near_{k}.jpg"
        with Image.open(src) as img:
            img.convert("RGB").save(dst, format="JPEG",
                                    quality=NEAR_DUP_JPEG_QUALITY)
        base = manifest_rows[class_index * n_per_class + 1]
        manifest_rows.append({**base, "uri": f"source_images/dup_near_{k}.jpg"})
        truth_rows.append({"uri": f"source_images/dup_near_{k}.jpg",
                           "class_code": CLASS_CODES[class_index], "bbox": None,
                           "role": "near_dup",
                           "duplicate_of": base["uri"]})

    manifest_path = out_dir / "manifest.jsonl"
    with manifest_path.open("w", encoding="utf-8") as fh:
        for row in manifest_rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
    truth_path = out_dir / "truth.jsonl"
    with truth_path.open("w", encoding="utf-8") as fh:
        for row in truth_rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")

    summary = FixtureSummary(
        out_dir=str(out_dir),
        n_images=10 * n_per_class,
        n_exact_dups=N_EXACT_DUPS,
        n_near_dups=N_NEAR_DUPS,
        manifest_path=str(manifest_path),
        truth_path=str(truth_path))
    log.info("fixture: %d base images + %d exact + %d near duplicates at %s",
             summary.n_images, N_EXACT_DUPS, N_NEAR_DUPS, out_dir)
    return summary


def load_truth(truth_path: str | Path) -> list[dict[str, Any]]:
    rows = []
    with Path(truth_path).open("r", encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                rows.append(json.loads(line))
    return rows
