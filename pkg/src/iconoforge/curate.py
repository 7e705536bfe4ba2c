"""Duplicate removal, suspect-image flagging and the human decision log.

Candidate generation (exact dups, near dups, fragments, pose mismatches)
is read-only over a store snapshot and fully deterministic, so review item
ids are stable across runs. All mutations triggered by humans flow through
``apply_decision``, which appends one event to ``decisions.jsonl``;
replaying that log over a pre-decision copy of the state reconstructs the
store exactly.
"""

from __future__ import annotations

import hashlib
import json
import logging
import re
import shlex
import subprocess
from dataclasses import dataclass, replace
from datetime import datetime, timezone
from typing import Any, Iterable, Mapping, Protocol

from .hashing import hamming_hex
from .records import (
    STATUS_REMOVED_DUPLICATE,
    STATUS_REMOVED_FILTERED,
    AnnotationSet,
    ImageRecord,
    Label,
    ReviewItem,
)
from .store import Workspace

log = logging.getLogger(__name__)

DEFAULT_FRAGMENT_KEYWORDS = ("detail", "fragment", "portion")
DEFAULT_NEAR_DUP_THRESHOLD = 10


class DecisionError(ValueError):
    """Base class for rejected decision attempts."""


class UnknownItemError(DecisionError):
    pass


class AlreadyDecidedError(DecisionError):
    pass


class MalformedPayloadError(DecisionError):
    pass


class ProposalVoidedError(DecisionError):
    """Label proposal whose subject record was removed in the meantime."""


def _short_hash(text: str) -> str:
    return hashlib.md5(text.encode("utf-8")).hexdigest()[:12]


def near_dup_item_id(id_a: str, id_b: str) -> str:
    lo, hi = sorted((id_a, id_b))
    return "nd-" + _short_hash(f"{lo}|{hi}")


def fragment_item_id(record_id: str) -> str:
    return "fr-" + _short_hash(record_id)


def pose_item_id(record_id: str) -> str:
    return "pm-" + _short_hash(record_id)


def proposal_item_id(record_id: str, class_code: str) -> str:
    return "lp-" + _short_hash(f"{record_id}|{class_code}")


# ---------------------------------------------------------------------------
# candidate generation


@dataclass
class DedupGroup:
    md5: str
    survivor: str
    removed: list[str]


def remove_exact_duplicates(records: Mapping[str, ImageRecord],
                            ) -> tuple[list[ImageRecord], list[DedupGroup]]:
    """Collapse groups of byte-identical active records.

    Within each MD5 group the record with the lexicographically smallest id
    stays active; the others become removed_duplicate with a pointer to the
    survivor. Returns the changed records and the group report.
    """
    by_md5: dict[str, list[str]] = {}
    for rec in records.values():
        if rec.is_active and rec.md5:
            by_md5.setdefault(rec.md5, []).append(rec.id)
    changed: list[ImageRecord] = []
    groups: list[DedupGroup] = []
    for md5 in sorted(by_md5):
        ids = sorted(by_md5[md5])
        if len(ids) < 2:
            continue
        survivor, losers = ids[0], ids[1:]
        groups.append(DedupGroup(md5=md5, survivor=survivor, removed=losers))
        for rid in losers:
            changed.append(records[rid].with_status(
                STATUS_REMOVED_DUPLICATE, reason="exact_duplicate",
                duplicate_of=survivor))
    groups.sort(key=lambda g: g.survivor)
    return changed, groups


def find_near_duplicates(records: Mapping[str, ImageRecord],
                         threshold: int = DEFAULT_NEAR_DUP_THRESHOLD,
                         ) -> list[ReviewItem]:
    """One near_dup_pair item per unordered active pair within the Hamming
    threshold. All-pairs scan; fine at curation scale, and it is exactly
    what the review queue needs to be exhaustive."""
    if not 0 <= threshold <= 64:
        raise ValueError(f"threshold must be within [0, 64], got {threshold}")
    hashed = sorted(
        (rec.id, rec.phash) for rec in records.values()
        if rec.is_active and rec.phash)
    pairs: list[tuple[int, str, str]] = []
    for i in range(len(hashed)):
        id_a, ph_a = hashed[i]
        for j in range(i + 1, len(hashed)):
            id_b, ph_b = hashed[j]
            dist = hamming_hex(ph_a, ph_b)
            if dist <= threshold:
                pairs.append((dist, id_a, id_b))
    pairs.sort()
    return [
        ReviewItem(
            item_id=near_dup_item_id(id_a, id_b),
            kind="near_dup_pair",
            subject_ids=[id_a, id_b],
            evidence={"hamming_distance": str(dist)},
        )
        for dist, id_a, id_b in pairs
    ]


def _keyword_pattern(keyword: str) -> re.Pattern[str]:
    return re.compile(r"\b" + re.escape(keyword.lower()) + r"\b", re.IGNORECASE)


def _searchable_fields(record: ImageRecord) -> list[tuple[str, str]]:
    fields = [("title", record.title), ("description", record.description)]
    fields.extend(("tags", tag) for tag in record.tags)
    fields.extend((f"metadata:{key}", record.extra_metadata[key])
                  for key in sorted(record.extra_metadata))
    return fields


def flag_fragments(records: Mapping[str, ImageRecord],
                   keywords: Iterable[str] = DEFAULT_FRAGMENT_KEYWORDS,
                   ) -> list[ReviewItem]:
    """Flag active records whose metadata mentions a fragment keyword.

    Matching is case-insensitive on word boundaries, so "Detailed study"
    does not trigger "detail".
    """
    keywords = list(keywords)
    if not keywords:
        raise ValueError("fragment keyword list must be non-empty")
    patterns = [(kw, _keyword_pattern(kw)) for kw in keywords]
    items: list[ReviewItem] = []
    for rid in sorted(records):
        rec = records[rid]
        if not rec.is_active:
            continue
        hit: tuple[str, str] | None = None
        for field_name, text in _searchable_fields(rec):
            for kw, pattern in patterns:
                if text and pattern.search(text):
                    hit = (kw, field_name)
                    break
            if hit:
                break
        if hit:
            items.append(ReviewItem(
                item_id=fragment_item_id(rid),
                kind="fragment",
                subject_ids=[rid],
                evidence={"matched_keyword": hit[0], "field": hit[1]},
            ))
    return items


@dataclass(frozen=True)
class FigureDetection:
    record_id: str
    n_figures: int | None  # None means the detector skipped this record
    detector_name: str

    def __post_init__(self) -> None:
        if self.n_figures is not None and self.n_figures < 0:
            raise ValueError("n_figures must be non-negative")


class FigureDetector(Protocol):
    name: str

    def detect(self, record: ImageRecord, image_path: str | None) -> int | None:
        ...


class StubFigureDetector:
    """Deterministic detector for tests and fixtures: reads the figure count
    from the record's own metadata instead of running a pose model."""

    name = "stub"

    def __init__(self, metadata_key: str = "stub_figures", default: int | None = 1):
        self.metadata_key = metadata_key
        self.default = default

    def detect(self, record: ImageRecord, image_path: str | None) -> int | None:
        raw = record.extra_metadata.get(self.metadata_key)
        if raw is None:
            return self.default
        try:
            return int(raw)
        except ValueError:
            return None


class SubprocessFigureDetector:
    """Adapter for an external pose/figure detector.

    Contract: the command receives ``{"image_path": ...}`` on stdin and
    must print ``{"n_figures": <int>}`` on stdout.
    """

    def __init__(self, command: str, timeout: float = 60.0):
        self.name = command
        self.command = shlex.split(command)
        self.timeout = timeout

    def detect(self, record: ImageRecord, image_path: str | None) -> int | None:
        if image_path is None:
            return None
        request = json.dumps({"image_path": str(image_path)})
        try:
            proc = subprocess.run(self.command, input=request.encode("utf-8"),
                                  capture_output=True, timeout=self.timeout)
            response = json.loads(proc.stdout.decode("utf-8"))
            return int(response["n_figures"])
        except Exception as exc:
            log.warning("detector %s failed on %s: %s", self.name, record.id, exc)
            return None


def run_detection(workspace: Workspace, records: Mapping[str, ImageRecord],
                  detector: FigureDetector) -> list[FigureDetection]:
    detections = []
    for rid in sorted(records):
        rec = records[rid]
        if not rec.is_active:
            continue
        path = str(workspace.image_path(rec)) if workspace.has_image_bytes(rec) else None
        detections.append(FigureDetection(
            record_id=rid, n_figures=detector.detect(rec, path),
            detector_name=detector.name))
    return detections


def flag_pose_mismatches(records: Mapping[str, ImageRecord],
                         annotations: Mapping[str, AnnotationSet],
                         detections: Iterable[FigureDetection],
                         ) -> tuple[list[ImageRecord], list[ReviewItem], list[str]]:
    """Cross-check annotations against detected figure counts.

    Annotated records with zero detected figures are removed outright;
    records with figures but no annotation become review items. Records
    without a detection (or a skipping detector) are left alone with a
    warning.
    """
    by_id = {d.record_id: d for d in detections}
    auto_removed: list[ImageRecord] = []
    items: list[ReviewItem] = []
    skipped: list[str] = []
    for rid in sorted(records):
        rec = records[rid]
        if not rec.is_active:
            continue
        det = by_id.get(rid)
        if det is None or det.n_figures is None:
            skipped.append(rid)
            continue
        n_labels = len(annotations[rid].labels) if rid in annotations else 0
        if n_labels >= 1 and det.n_figures == 0:
            auto_removed.append(rec.with_status(
                STATUS_REMOVED_FILTERED, reason="no_pose"))
        elif n_labels == 0 and det.n_figures >= 1:
            items.append(ReviewItem(
                item_id=pose_item_id(rid),
                kind="pose_mismatch",
                subject_ids=[rid],
                evidence={"n_figures": str(det.n_figures),
                          "detector": det.detector_name},
            ))
    if skipped:
        log.warning("pose check skipped %d record(s) without a detection",
                    len(skipped))
    return auto_removed, items, skipped


# ---------------------------------------------------------------------------
# decisions


def _utc_now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="microseconds")


def _apply_event(records: dict[str, ImageRecord],
                 annotations: dict[str, AnnotationSet],
                 items: dict[str, ReviewItem],
                 event: Mapping[str, Any],
                 ) -> tuple[list[ImageRecord], list[AnnotationSet], ReviewItem]:
    """Apply one decision event to in-memory state. Pure given its inputs;
    both live decisions and log replay run through here."""
    item_id = event["item_id"]
    decision = event["decision"]
    payload = event.get("payload") or None
    decided_at = event["decided_at"]

    item = items.get(item_id)
    if item is None:
        raise UnknownItemError(f"unknown review item: {item_id}")
    if not item.is_pending:
        raise AlreadyDecidedError(f"item {item_id} already {item.status}")
    if decision not in ("accept", "reject"):
        raise MalformedPayloadError(f"decision must be accept or reject, got {decision!r}")

    changed_records: list[ImageRecord] = []
    changed_annotations: list[AnnotationSet] = []

    if decision == "accept":
        if item.kind == "near_dup_pair":
            keep = _near_dup_survivor(item, payload)
            for rid in item.subject_ids:
                if rid == keep:
                    continue
                rec = records.get(rid)
                if rec is not None and rec.is_active:
                    changed_records.append(rec.with_status(
                        STATUS_REMOVED_DUPLICATE, reason="near_duplicate",
                        duplicate_of=keep))
        elif item.kind == "fragment":
            action = (payload or {}).get("action", "keep")
            rid = item.subject_ids[0]
            rec = records.get(rid)
            if rec is None:
                raise MalformedPayloadError(f"fragment subject {rid} not in store")
            if action == "keep":
                if rec.is_active:
                    meta = dict(rec.extra_metadata)
                    meta["kept_fragment"] = "true"
                    changed_records.append(replace(rec, extra_metadata=meta))
            elif action == "remove":
                if rec.is_active:
                    changed_records.append(rec.with_status(
                        STATUS_REMOVED_FILTERED, reason="fragment"))
            else:
                raise MalformedPayloadError(
                    f"fragment action must be keep or remove, got {action!r}")
        elif item.kind == "pose_mismatch":
            codes = (payload or {}).get("labels")
            if not codes:
                raise MalformedPayloadError(
                    "pose_mismatch accept needs payload {labels: [codes]}")
            rid = item.subject_ids[0]
            ann = annotations.get(rid) or AnnotationSet(record_id=rid)
            try:
                for code in codes:
                    ann.add(Label(code=code, provenance="manual"))
            except ValueError as exc:
                raise MalformedPayloadError(str(exc)) from exc
            annotations[rid] = ann
            changed_annotations.append(ann)
        elif item.kind == "label_proposal":
            rid = item.subject_ids[0]
            rec = records.get(rid)
            if rec is None or not rec.is_active:
                raise ProposalVoidedError(
                    f"record {rid} is no longer active; proposal voided")
            code = item.evidence.get("code")
            if not code:
                raise MalformedPayloadError("proposal item lacks a class code")
            provenance = ("manual" if item.evidence.get("source") == "broad_keyword"
                          else "model_proposed")
            ann = annotations.get(rid) or AnnotationSet(record_id=rid)
            ann.add(Label(code=code, provenance=provenance,
                          keyword=item.evidence.get("matched_keyword")))
            annotations[rid] = ann
            changed_annotations.append(ann)

    decided = ReviewItem(
        item_id=item.item_id, kind=item.kind, subject_ids=list(item.subject_ids),
        evidence=dict(item.evidence),
        status="accepted" if decision == "accept" else "rejected",
        decision_payload=payload, decided_at=decided_at)

    for rec in changed_records:
        records[rec.id] = rec
    items[item_id] = decided
    return changed_records, changed_annotations, decided


def _near_dup_survivor(item: ReviewItem, payload: Mapping[str, Any] | None) -> str:
    subjects = set(item.subject_ids)
    if payload:
        keep = payload.get("keep")
        drop = payload.get("drop")
        if keep is not None:
            if keep not in subjects:
                raise MalformedPayloadError(f"keep target {keep!r} is not a subject")
            return keep
        if drop is not None:
            if drop not in subjects:
                raise MalformedPayloadError(f"drop target {drop!r} is not a subject")
            (other,) = subjects - {drop}
            return other
    return min(subjects)


def _persist_changes(workspace: Workspace,
                     changed_records: list[ImageRecord],
                     changed_annotations: list[AnnotationSet],
                     item: ReviewItem) -> None:
    # Deterministic write order so replay reproduces files byte for byte.
    if changed_records:
        workspace.append_records(sorted(changed_records, key=lambda r: r.id))
    if changed_annotations:
        workspace.append_annotations(
            sorted(changed_annotations, key=lambda a: a.record_id))
    workspace.append_review_items([item], skip_existing=False)


def apply_decision(workspace: Workspace, item_id: str, decision: str,
                   payload: Mapping[str, Any] | None = None,
                   decided_at: str | None = None) -> ReviewItem:
    """Record one human decision: validate, apply, persist and log.

    Raises DecisionError subclasses on unknown items, repeated decisions or
    malformed payloads; a voided proposal is logged as a rejection before
    the error propagates.
    """
    records = workspace.load_records()
    annotations = workspace.load_annotations()
    items = workspace.load_review_items()
    event = {
        "item_id": item_id,
        "decision": decision,
        "payload": dict(payload) if payload else None,
        "decided_at": decided_at or _utc_now_iso(),
    }
    try:
        changed_records, changed_annotations, item = _apply_event(
            records, annotations, items, event)
    except ProposalVoidedError:
        void_event = {**event, "decision": "reject",
                      "payload": {"voided": "record_removed"}}
        _, _, voided = _apply_event(records, annotations, items, void_event)
        _persist_changes(workspace, [], [], voided)
        workspace.append_decision(void_event)
        raise
    _persist_changes(workspace, changed_records, changed_annotations, item)
    workspace.append_decision(event)
    return item


def replay_decisions(workspace: Workspace,
                     events: Iterable[Mapping[str, Any]] | None = None) -> int:
    """Re-apply a decision log over pre-decision state files.

    Writes the same state rows as the original session but never touches
    the log itself. Returns the number of events applied.
    """
    if events is None:
        events = workspace.load_decisions()
    records = workspace.load_records()
    annotations = workspace.load_annotations()
    items = workspace.load_review_items()
    n = 0
    for event in events:
        changed_records, changed_annotations, item = _apply_event(
            records, annotations, items, event)
        _persist_changes(workspace, changed_records, changed_annotations, item)
        n += 1
    return n
