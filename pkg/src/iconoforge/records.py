"""Domain records shared across the pipeline: images, annotations, review items."""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Any

from .classes import is_valid_code

# Record lifecycle. "active" may move to a removed_* state or to
# review_pending; removed_* states are terminal.
STATUS_ACTIVE = "active"
STATUS_REMOVED_DUPLICATE = "removed_duplicate"
STATUS_REMOVED_FILTERED = "removed_filtered"
STATUS_REVIEW_PENDING = "review_pending"

RECORD_STATUSES = (
    STATUS_ACTIVE,
    STATUS_REMOVED_DUPLICATE,
    STATUS_REMOVED_FILTERED,
    STATUS_REVIEW_PENDING,
)
_TERMINAL_STATUSES = {STATUS_REMOVED_DUPLICATE, STATUS_REMOVED_FILTERED}

REVIEW_KINDS = ("near_dup_pair", "fragment", "pose_mismatch", "label_proposal")
PROVENANCES = ("keyword", "manual", "model_proposed")


class StatusTransitionError(ValueError):
    """Raised on an attempt to resurrect a removed record."""


@dataclass
class ImageRecord:
    id: str
    source: str
    uri: str
    local_path: str | None = None
    title: str = ""
    description: str = ""
    tags: list[str] = field(default_factory=list)
    extra_metadata: dict[str, str] = field(default_factory=dict)
    md5: str | None = None
    phash: str | None = None
    width: int | None = None
    height: int | None = None
    color_mode: str | None = None  # "RGB" | "BW"
    status: str = STATUS_ACTIVE
    removed_reason: str | None = None
    duplicate_of: str | None = None

    def with_status(self, status: str, *, reason: str | None = None,
                    duplicate_of: str | None = None) -> "ImageRecord":
        if status not in RECORD_STATUSES:
            raise ValueError(f"unknown status {status!r}")
        if self.status in _TERMINAL_STATUSES and status != self.status:
            raise StatusTransitionError(
                f"record {self.id} is {self.status}; cannot move to {status}")
        return replace(self, status=status,
                       removed_reason=reason if reason is not None else self.removed_reason,
                       duplicate_of=duplicate_of if duplicate_of is not None else self.duplicate_of)

    @property
    def is_active(self) -> bool:
        return self.status == STATUS_ACTIVE

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "source": self.source,
            "uri": self.uri,
            "local_path": self.local_path,
            "title": self.title,
            "description": self.description,
            "tags": list(self.tags),
            "extra_metadata": dict(self.extra_metadata),
            "md5": self.md5,
            "phash": self.phash,
            "width": self.width,
            "height": self.height,
            "color_mode": self.color_mode,
            "status": self.status,
            "removed_reason": self.removed_reason,
            "duplicate_of": self.duplicate_of,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ImageRecord":
        return cls(
            id=data["id"],
            source=data["source"],
            uri=data["uri"],
            local_path=data.get("local_path"),
            title=data.get("title", ""),
            description=data.get("description", ""),
            tags=list(data.get("tags") or []),
            extra_metadata=dict(data.get("extra_metadata") or {}),
            md5=data.get("md5"),
            phash=data.get("phash"),
            width=data.get("width"),
            height=data.get("height"),
            color_mode=data.get("color_mode"),
            status=data.get("status", STATUS_ACTIVE),
            removed_reason=data.get("removed_reason"),
            duplicate_of=data.get("duplicate_of"),
        )


@dataclass(frozen=True)
class Label:
    code: str
    provenance: str
    keyword: str | None = None

    def __post_init__(self) -> None:
        if not is_valid_code(self.code):
            raise ValueError(f"unknown icon class code: {self.code!r}")
        if self.provenance not in PROVENANCES:
            raise ValueError(f"unknown provenance: {self.provenance!r}")

    def to_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {"code": self.code, "provenance": self.provenance}
        if self.keyword is not None:
            d["keyword"] = self.keyword
        return d

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "Label":
        return cls(code=data["code"], provenance=data["provenance"],
                   keyword=data.get("keyword"))


@dataclass
class AnnotationSet:
    """Labels attached to one image. At most one entry per class."""

    record_id: str
    labels: list[Label] = field(default_factory=list)

    def codes(self) -> set[str]:
        return {label.code for label in self.labels}

    def add(self, label: Label) -> bool:
        """Add a label; returns False (no change) if the class is already present."""
        if label.code in self.codes():
            return False
        self.labels.append(label)
        return True

    def to_dict(self) -> dict[str, Any]:
        return {"record_id": self.record_id,
                "labels": [label.to_dict() for label in self.labels]}

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "AnnotationSet":
        return cls(record_id=data["record_id"],
                   labels=[Label.from_dict(x) for x in data.get("labels", [])])


@dataclass
class ReviewItem:
    """A pending human decision. Decisions are append-only: once a decision
    lands the item never returns to pending."""

    item_id: str
    kind: str
    subject_ids: list[str]
    evidence: dict[str, str] = field(default_factory=dict)
    status: str = "pending"  # pending | accepted | rejected
    decision_payload: dict[str, Any] | None = None
    decided_at: str | None = None

    def __post_init__(self) -> None:
        if self.kind not in REVIEW_KINDS:
            raise ValueError(f"unknown review kind: {self.kind!r}")
        expected = 2 if self.kind == "near_dup_pair" else 1
        if len(self.subject_ids) != expected:
            raise ValueError(
                f"{self.kind} items need exactly {expected} subject(s), "
                f"got {len(self.subject_ids)}")
        if self.status == "pending" and self.decision_payload is not None:
            raise ValueError("pending items cannot carry a decision payload")

    @property
    def is_pending(self) -> bool:
        return self.status == "pending"

    def to_dict(self) -> dict[str, Any]:
        return {
            "item_id": self.item_id,
            "kind": self.kind,
            "subject_ids": list(self.subject_ids),
            "evidence": dict(self.evidence),
            "status": self.status,
            "decision_payload": self.decision_payload,
            "decided_at": self.decided_at,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ReviewItem":
        return cls(
            item_id=data["item_id"],
            kind=data["kind"],
            subject_ids=list(data["subject_ids"]),
            evidence=dict(data.get("evidence") or {}),
            status=data.get("status", "pending"),
            decision_payload=data.get("decision_payload"),
            decided_at=data.get("decided_at"),
        )
