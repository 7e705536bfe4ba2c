"""On-disk workspace: append-only JSONL stores plus an image directory.

Layout under the workspace root:

    records.jsonl       image records; append-only, the last row per id wins
    images/             image bytes, keyed by record id
    labels.jsonl        annotation sets; last row per record_id wins
    review_items.jsonl  review queue; last row per item_id wins
    decisions.jsonl     decision log; append-only, never rewritten
    rejects.jsonl       manifest rows that failed to normalize
    splits.jsonl        one split assignment per record
    stats.json          corpus channel statistics

State files never delete image bytes; removal is a status change on the
record. Replaying decisions.jsonl over a pre-decision copy of the state
files reconstructs the exact store state (see curate.replay_decisions).
"""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Iterable

from .records import AnnotationSet, ImageRecord, ReviewItem

log = logging.getLogger(__name__)


def _append_jsonl(path: Path, rows: Iterable[dict[str, Any]]) -> int:
    path.parent.mkdir(parents=True, exist_ok=True)
    n = 0
    with path.open("a", encoding="utf-8") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, ensure_ascii=False) + "\n")
            n += 1
    return n


def _read_jsonl(path: Path) -> list[dict[str, Any]]:
    if not path.exists():
        return []
    rows = []
    with path.open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                rows.append(json.loads(line))
    return rows


class Workspace:
    """Single-writer store over one directory. Readers see a consistent
    snapshot because every load re-reads whole files."""

    def __init__(self, root: str | Path, images_dir: str | Path | None = None):
        self.root = Path(root)
        self.records_path = self.root / "records.jsonl"
        self.labels_path = self.root / "labels.jsonl"
        self.review_items_path = self.root / "review_items.jsonl"
        self.decisions_path = self.root / "decisions.jsonl"
        self.rejects_path = self.root / "rejects.jsonl"
        self.splits_path = self.root / "splits.jsonl"
        self.stats_path = self.root / "stats.json"
        self.images_dir = Path(images_dir) if images_dir else self.root / "images"

    def ensure_dirs(self) -> None:
        self.root.mkdir(parents=True, exist_ok=True)
        self.images_dir.mkdir(parents=True, exist_ok=True)

    # -- records ---------------------------------------------------------

    def append_records(self, records: Iterable[ImageRecord]) -> int:
        return _append_jsonl(self.records_path, (r.to_dict() for r in records))

    def load_records(self) -> dict[str, ImageRecord]:
        out: dict[str, ImageRecord] = {}
        for row in _read_jsonl(self.records_path):
            rec = ImageRecord.from_dict(row)
            out[rec.id] = rec
        return out

    def active_records(self) -> dict[str, ImageRecord]:
        return {rid: r for rid, r in self.load_records().items() if r.is_active}

    # -- image bytes -----------------------------------------------------

    def image_path(self, record: ImageRecord) -> Path:
        if record.local_path:
            return self.root / record.local_path
        suffix = Path(record.uri).suffix.lower() or ".img"
        return self.images_dir / f"{record.id}{suffix}"

    def put_image_bytes(self, record: ImageRecord, data: bytes) -> str:
        """Store bytes for a record, returning the workspace-relative path."""
        path = self.image_path(record)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        return str(path.relative_to(self.root))

    def read_image_bytes(self, record: ImageRecord) -> bytes:
        return self.image_path(record).read_bytes()

    def has_image_bytes(self, record: ImageRecord) -> bool:
        return record.local_path is not None and self.image_path(record).exists()

    # -- annotations -----------------------------------------------------

    def append_annotations(self, sets: Iterable[AnnotationSet]) -> int:
        return _append_jsonl(self.labels_path, (s.to_dict() for s in sets))

    def load_annotations(self) -> dict[str, AnnotationSet]:
        out: dict[str, AnnotationSet] = {}
        for row in _read_jsonl(self.labels_path):
            ann = AnnotationSet.from_dict(row)
            out[ann.record_id] = ann
        return out

    # -- review items ----------------------------------------------------

    def append_review_items(self, items: Iterable[ReviewItem],
                            skip_existing: bool = True) -> int:
        """Append review items; by default item_ids already present are
        skipped so that re-running candidate generation is idempotent."""
        existing = set(self.load_review_items()) if skip_existing else set()
        fresh = [i for i in items if i.item_id not in existing]
        return _append_jsonl(self.review_items_path, (i.to_dict() for i in fresh))

    def load_review_items(self) -> dict[str, ReviewItem]:
        out: dict[str, ReviewItem] = {}
        for row in _read_jsonl(self.review_items_path):
            item = ReviewItem.from_dict(row)
            out[item.item_id] = item
        return out

    # -- decisions (append-only log) --------------------------------------

    def append_decision(self, event: dict[str, Any]) -> None:
        _append_jsonl(self.decisions_path, [event])

    def load_decisions(self) -> list[dict[str, Any]]:
        return _read_jsonl(self.decisions_path)

    # -- rejects ----------------------------------------------------------

    def append_rejects(self, rows: Iterable[dict[str, Any]]) -> int:
        return _append_jsonl(self.rejects_path, rows)

    # -- splits ------------------------------------------------------------

    def save_splits(self, assignment: dict[str, str]) -> None:
        self.splits_path.parent.mkdir(parents=True, exist_ok=True)
        with self.splits_path.open("w", encoding="utf-8") as fh:
            for rid in sorted(assignment):
                fh.write(json.dumps({"record_id": rid, "split": assignment[rid]},
                                    sort_keys=True) + "\n")

    def load_splits(self) -> dict[str, str]:
        return {row["record_id"]: row["split"]
                for row in _read_jsonl(self.splits_path)}

    # -- channel stats -----------------------------------------------------

    def save_stats(self, stats: dict[str, Any]) -> None:
        self.stats_path.parent.mkdir(parents=True, exist_ok=True)
        self.stats_path.write_text(json.dumps(stats, sort_keys=True, indent=2))

    def load_stats(self) -> dict[str, Any] | None:
        if not self.stats_path.exists():
            return None
        return json.loads(self.stats_path.read_text())

    # -- snapshots ---------------------------------------------------------

    def canonical_state_bytes(self) -> bytes:
        """Canonical serialization of the mutable store state, used to check
        that decision-log replay reconstructs the store exactly."""
        state = {
            "records": [self.load_records()[rid].to_dict()
                        for rid in sorted(self.load_records())],
            "labels": [self.load_annotations()[rid].to_dict()
                       for rid in sorted(self.load_annotations())],
            "review_items": [self.load_review_items()[iid].to_dict()
                             for iid in sorted(self.load_review_items())],
            "splits": self.load_splits(),
        }
        return json.dumps(state, sort_keys=True, ensure_ascii=False).encode("utf-8")
