"""Manifest loading, record normalization, hashing and corpus statistics.

Sources publish their inventories in very different shapes; everything is
funnelled through two formats here: JSON Lines (canonical) and CSV
(convenience). Actual museum scraping is out of scope — the uri of a
manifest entry must point at a local file (optionally ``file://``).
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Any, Callable, Iterable

import numpy as np
from PIL import Image

from .hashing import dhash64, md5_hex, phash_hex
from .records import STATUS_REMOVED_FILTERED, ImageRecord
from .store import Workspace, _read_jsonl

log = logging.getLogger(__name__)

# Channels closer than this (0..255) count as equal when deciding whether a
# file is a grayscale painting saved as RGB. Tolerant of JPEG chroma noise.
BW_CHANNEL_TOLERANCE = 2

STD_CLAMP = 1e-6


class ManifestError(Exception):
    """Unreadable manifest or too many malformed rows to trust the file."""


class RejectedEntry(ValueError):
    """A single manifest row that cannot become a record."""


@dataclass
class SourceManifest:
    source_name: str
    entries: list[dict[str, Any]]
    rejects: list[dict[str, Any]] = field(default_factory=list)
    expected_count: int | None = None

    def __post_init__(self) -> None:
        if not self.source_name:
            raise ValueError("source_name must be non-empty")
        if not self.entries:
            raise ValueError("manifest has no entries")


@dataclass(frozen=True)
class ChannelStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    n_images: int

    def __post_init__(self) -> None:
        if self.n_images < 1:
            raise ValueError("channel stats need at least one image")
        if any(s <= 0 for s in self.std):
            raise ValueError("std components must be strictly positive")

    def to_dict(self) -> dict[str, Any]:
        return {"mean": list(self.mean), "std": list(self.std),
                "n_images": self.n_images}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ChannelStats":
        return cls(mean=tuple(data["mean"]), std=tuple(data["std"]),
                   n_images=data["n_images"])


def _parse_jsonl_manifest(path: Path) -> tuple[list[dict[str, Any]], list[dict[str, Any]]]:
    entries, rejects = [], []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                row = json.loads(line)
                if not isinstance(row, dict):
                    raise ValueError("row is not an object")
                if not str(row.get("uri", "")).strip():
                    raise ValueError("missing uri")
                entries.append(row)
            except (json.JSONDecodeError, ValueError) as exc:
                rejects.append({"line": lineno, "raw": line[:500], "reason": str(exc)})
    return entries, rejects


def _parse_csv_manifest(path: Path) -> tuple[list[dict[str, Any]], list[dict[str, Any]]]:
    entries, rejects = [], []
    with path.open("r", encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "uri" not in reader.fieldnames:
            raise ManifestError(f"{path}: CSV manifest needs a 'uri' header column")
        for lineno, row in enumerate(reader, start=2):
            uri = (row.get("uri") or "").strip()
            if not uri:
                rejects.append({"line": lineno, "raw": json.dumps(row)[:500],
                                "reason": "missing uri"})
                continue
            entry: dict[str, Any] = {"uri": uri}
            if row.get("title"):
                entry["title"] = row["title"]
            if row.get("description"):
                entry["description"] = row["description"]
            if row.get("tags"):
                entry["tags"] = row["tags"]
            extra = {k: v for k, v in row.items()
                     if k not in ("uri", "title", "description", "tags") and v}
            if extra:
                entry["metadata"] = extra
            entries.append(entry)
    return entries, rejects


def load_manifest(path: str | Path, source_name: str) -> SourceManifest:
    """Parse a JSONL or CSV manifest. Malformed rows land in the rejects
    report instead of being silently dropped; more than half malformed is a
    fatal parse."""
    path = Path(path)
    if not source_name:
        raise ValueError("source_name must be non-empty")
    if not path.exists():
        raise ManifestError(f"manifest not found: {path}")
    try:
        if path.suffix.lower() == ".csv":
            entries, rejects = _parse_csv_manifest(path)
        else:
            entries, rejects = _parse_jsonl_manifest(path)
    except ManifestError:
        raise
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc

    total = len(entries) + len(rejects)
    if total == 0:
        raise ManifestError(f"manifest {path} is empty")
    if len(rejects) * 2 > total:
        raise ManifestError(
            f"manifest {path}: {len(rejects)}/{total} rows malformed; "
            f"first reject: {rejects[0]}")
    return SourceManifest(source_name=source_name, entries=entries, rejects=rejects)


def _normalize_tags(value: Any) -> list[str]:
    # CSV manifests carry tags as one ";"-joined string.
    if value is None:
        return []
    if isinstance(value, str):
        parts = value.split(";")
    else:
        parts = []
        for item in value:
            parts.extend(str(item).split(";"))
    return [p.strip().lower() for p in parts if p.strip()]


def stable_record_id(source_name: str, uri: str) -> str:
    digest = hashlib.md5(uri.encode("utf-8")).hexdigest()[:16]
    return f"{source_name}/{digest}"


def normalize_record(entry: dict[str, Any], source_name: str) -> ImageRecord:
    """Turn one manifest entry into an ImageRecord with a deterministic id.

    Hashes and dimensions stay unset until the bytes are fetched.
    """
    uri = str(entry.get("uri", "")).strip()
    if not uri:
        raise RejectedEntry("empty uri")
    metadata = entry.get("metadata") or {}
    if not isinstance(metadata, dict):
        raise RejectedEntry("metadata must be a map")
    return ImageRecord(
        id=stable_record_id(source_name, uri),
        source=source_name,
        uri=uri,
        title=str(entry.get("title", "") or ""),
        description=str(entry.get("description", "") or ""),
        tags=_normalize_tags(entry.get("tags")),
        extra_metadata={str(k).lower(): str(v) for k, v in metadata.items()},
    )


def fetch_and_hash(record: ImageRecord, data: bytes) -> ImageRecord:
    """Fill hashes, dimensions and color mode from raw image bytes.

    Undecodable bytes mark the record removed_filtered ("damaged") rather
    than raising: damaged files are a normal occurrence in scraped corpora.
    Damaged records keep no hashes — hashes exist iff usable bytes do.
    """
    try:
        with Image.open(io.BytesIO(data)) as img:
            img.load()
            rgb = img.convert("RGB")
    except Exception:
        return replace(record, status=STATUS_REMOVED_FILTERED,
                       removed_reason="damaged")
    md5 = md5_hex(data)
    width, height = rgb.size
    px = np.asarray(rgb, dtype=np.int16)
    spread = int(np.max(px.max(axis=2) - px.min(axis=2))) if px.size else 0
    color_mode = "BW" if spread <= BW_CHANNEL_TOLERANCE else "RGB"
    return replace(record, md5=md5, phash=phash_hex(dhash64(rgb)),
                   width=width, height=height, color_mode=color_mode)


def resolve_uri_bytes(uri: str, base_dir: str | Path | None = None) -> bytes:
    """Read image bytes for a manifest uri. Only local files are supported;
    remote schemes need a source adapter which this toolkit deliberately
    does not ship."""
    if uri.startswith("file://"):
        path = Path(uri[len("file://"):])
    elif "://" in uri:
        raise RejectedEntry(f"remote uri not supported without an adapter: {uri}")
    else:
        path = Path(uri)
    if not path.is_absolute() and base_dir is not None:
        path = Path(base_dir) / path
    return path.read_bytes()


def compute_channel_stats(records: Iterable[ImageRecord],
                          load_pixels: Callable[[ImageRecord], np.ndarray],
                          ) -> ChannelStats:
    """Per-channel mean/std over all pixels of all given records, streamed.

    ``load_pixels`` must return an HxWx3 uint8 array. Pixels are scaled to
    [0, 1]; the variance is the population variance over every pixel. A
    zero-variance channel is clamped to 1e-6 with a warning.
    """
    total = np.zeros(3, dtype=np.float64)
    total_sq = np.zeros(3, dtype=np.float64)
    n_pixels = 0
    n_images = 0
    for record in records:
        px = load_pixels(record).astype(np.float64) / 255.0
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"expected HxWx3 pixels for {record.id}, got {px.shape}")
        total += px.sum(axis=(0, 1))
        total_sq += (px * px).sum(axis=(0, 1))
        n_pixels += px.shape[0] * px.shape[1]
        n_images += 1
    if n_images == 0:
        raise ValueError("channel stats need at least one active record with bytes")
    mean = total / n_pixels
    var = total_sq / n_pixels - mean * mean
    std = np.sqrt(np.maximum(var, 0.0))
    clamped = std < STD_CLAMP
    if clamped.any():
        log.warning("zero-variance channel(s) %s clamped to %g",
                    np.nonzero(clamped)[0].tolist(), STD_CLAMP)
        std = np.where(clamped, STD_CLAMP, std)
    return ChannelStats(mean=tuple(float(m) for m in mean),
                        std=tuple(float(s) for s in std),
                        n_images=n_images)


@dataclass
class IngestReport:
    source: str
    entries: int = 0
    stored: int = 0
    unchanged: int = 0
    rejected: int = 0
    damaged: int = 0
    missing_bytes: int = 0


def ingest_manifest(workspace: Workspace, manifest_path: str | Path,
                    source_name: str, workers: int = 4) -> IngestReport:
    """Full ingest pass: parse, normalize, fetch local bytes, hash, store.

    Re-running over the same manifest is idempotent: records whose stored
    row would be identical are not re-appended, so the record store file is
    byte-identical afterwards.
    """
    manifest = load_manifest(manifest_path, source_name)
    workspace.ensure_dirs()
    base_dir = Path(manifest_path).parent

    report = IngestReport(source=source_name, entries=len(manifest.entries))
    rejects = list(manifest.rejects)

    normalized: list[ImageRecord] = []
    for entry in manifest.entries:
        try:
            normalized.append(normalize_record(entry, source_name))
        except RejectedEntry as exc:
            rejects.append({"entry": entry, "reason": str(exc)})

    def fetch(record: ImageRecord) -> tuple[ImageRecord, bytes | None, str | None]:
        try:
            data = resolve_uri_bytes(record.uri, base_dir)
        except (OSError, RejectedEntry) as exc:
            return record, None, str(exc)
        return fetch_and_hash(record, data), data, None

    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        fetched = list(pool.map(fetch, normalized))

    existing = workspace.load_records()
    to_append: list[ImageRecord] = []
    for record, data, error in fetched:
        if error is not None:
            report.missing_bytes += 1
            log.warning("no bytes for %s (%s): %s", record.id, record.uri, error)
        elif data is not None and record.status != STATUS_REMOVED_FILTERED:
            local_path = workspace.put_image_bytes(record, data)
            record = replace(record, local_path=local_path)
        if record.status == STATUS_REMOVED_FILTERED:
            report.damaged += 1
        prev = existing.get(record.id)
        if prev is not None and prev.to_dict() == record.to_dict():
            report.unchanged += 1
            continue
        to_append.append(record)

    # Deterministic store order regardless of fetch concurrency.
    to_append.sort(key=lambda r: r.id)
    report.stored = workspace.append_records(to_append)
    if rejects:
        seen = {json.dumps(r, sort_keys=True)
                for r in _read_jsonl(workspace.rejects_path)}
        fresh = [r for r in rejects if json.dumps(r, sort_keys=True) not in seen]
        workspace.append_rejects(fresh)
    report.rejected = len(rejects)
    log.info("ingest %s: %d entries, %d stored, %d unchanged, %d rejected",
             source_name, report.entries, report.stored, report.unchanged,
             report.rejected)
    return report
