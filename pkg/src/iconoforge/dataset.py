"""Annotation derivation, class statistics, balanced splits and epoch plans.

Everything here is a pure function over a store snapshot: safe to run
concurrently with curation reads, never with the store writer.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Mapping

import numpy as np
import yaml

from .classes import CLASS_CODES, ICON_CLASSES, N_CLASSES, by_code
from .curate import proposal_item_id
from .records import AnnotationSet, ImageRecord, Label, ReviewItem

log = logging.getLogger(__name__)

DEFAULT_SPLIT_RATIOS = (0.8, 0.1, 0.1)
SPLIT_NAMES = ("train", "val", "test")

# Per-class seed keywords: saint names and the variants that show up in
# museum titles. Bare given names that are ambiguous across saints
# ("john", "mary") are listed as broad: they never auto-label, they emit
# review suggestions instead.
DEFAULT_KEYWORD_CONFIG: dict[str, dict[str, list[str]]] = {
    "11H(ANTONY OF PADUA)": {
        "keywords": ["anthony of padua", "antony of padua", "antonio di padova"],
        "broad": ["anthony", "antony"],
    },
    "11H(FRANCIS)": {
        "keywords": ["francis", "francesco", "francis of assisi"],
        "broad": [],
    },
    "11H(JEROME)": {
        "keywords": ["jerome", "girolamo", "hieronymus"],
        "broad": [],
    },
    "11H(JOHN THE BAPTIST)": {
        "keywords": ["john the baptist", "giovanni battista", "baptist"],
        "broad": ["john"],
    },
    "11HH(MARY MAGDALENE)": {
        "keywords": ["magdalene", "maddalena", "magdalen"],
        "broad": ["mary"],
    },
    "11H(PAUL)": {
        "keywords": ["paul", "paolo di tarso", "st. paul"],
        "broad": [],
    },
    "11H(PETER)": {
        "keywords": ["peter", "pietro"],
        "broad": [],
    },
    "11HH(DOMINIC)": {
        "keywords": ["dominic", "domenico di guzman"],
        "broad": [],
    },
    "11H(SEBASTIAN)": {
        "keywords": ["sebastian", "sebastiano"],
        "broad": [],
    },
    "11F": {
        "keywords": ["virgin mary", "madonna", "virgin"],
        "broad": ["mary"],
    },
}


def load_keyword_config(path: str | Path) -> dict[str, dict[str, list[str]]]:
    raw = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    config: dict[str, dict[str, list[str]]] = {}
    for code, section in raw.items():
        by_code(code)  # validate
        config[code] = {
            "keywords": [str(k).lower() for k in (section.get("keywords") or [])],
            "broad": [str(k).lower() for k in (section.get("broad") or [])],
        }
    return config


def write_keyword_config(path: str | Path,
                         config: Mapping[str, Mapping[str, list[str]]] | None = None,
                         ) -> None:
    config = config or DEFAULT_KEYWORD_CONFIG
    Path(path).write_text(
        yaml.safe_dump({k: dict(v) for k, v in config.items()},
                       sort_keys=True, allow_unicode=True),
        encoding="utf-8")


def _word_pattern(keyword: str) -> re.Pattern[str]:
    return re.compile(r"\b" + re.escape(keyword) + r"\b", re.IGNORECASE)


def _record_fields(record: ImageRecord,
                   fields: Iterable[str]) -> list[tuple[str, str]]:
    out: list[tuple[str, str]] = []
    for name in fields:
        if name == "title":
            out.append(("title", record.title))
        elif name == "description":
            out.append(("description", record.description))
        elif name == "tags":
            out.extend(("tags", tag) for tag in record.tags)
        elif name == "metadata":
            out.extend((f"metadata:{k}", record.extra_metadata[k])
                       for k in sorted(record.extra_metadata))
        else:
            raise ValueError(f"unknown metadata field {name!r}")
    return out


def apply_keyword_labels(records: Mapping[str, ImageRecord],
                         keyword_map: Mapping[str, Mapping[str, list[str]]],
                         fields: tuple[str, ...] = ("title", "description",
                                                    "tags", "metadata"),
                         ) -> tuple[dict[str, AnnotationSet], list[ReviewItem]]:
    """Derive keyword labels for every active record.

    Returns the annotation sets plus review suggestions for broad-keyword
    matches that must not be applied automatically. Matching is
    case-insensitive on word boundaries and deterministic in field and
    keyword order.
    """
    if not keyword_map:
        raise ValueError("keyword map must be non-empty")
    if not fields:
        raise ValueError("field list must be non-empty")

    compiled: list[tuple[str, str, bool, re.Pattern[str]]] = []
    for code in CLASS_CODES:
        section = keyword_map.get(code)
        if not section:
            continue
        for kw in section.get("keywords", []):
            compiled.append((code, kw, False, _word_pattern(kw)))
        for kw in section.get("broad", []):
            compiled.append((code, kw, True, _word_pattern(kw)))

    annotations: dict[str, AnnotationSet] = {}
    suggestions: list[ReviewItem] = []
    for rid in sorted(records):
        rec = records[rid]
        if not rec.is_active:
            continue
        ann = AnnotationSet(record_id=rid)
        suggested: set[str] = set()
        for field_name, text in _record_fields(rec, fields):
            if not text:
                continue
            for code, kw, broad, pattern in compiled:
                if not pattern.search(text):
                    continue
                if broad:
                    if code not in suggested and code not in ann.codes():
                        suggested.add(code)
                        suggestions.append(ReviewItem(
                            item_id=proposal_item_id(rid, code),
                            kind="label_proposal",
                            subject_ids=[rid],
                            evidence={"code": code, "matched_keyword": kw,
                                      "field": field_name,
                                      "source": "broad_keyword"},
                        ))
                else:
                    ann.add(Label(code=code, provenance="keyword", keyword=kw))
        if ann.labels:
            annotations[rid] = ann
    # A specific keyword elsewhere in the metadata supersedes a broad
    # suggestion for the same class.
    suggestions = [s for s in suggestions
                   if s.evidence["code"] not in
                   (annotations.get(s.subject_ids[0]).codes()
                    if s.subject_ids[0] in annotations else set())]
    return annotations, suggestions


# ---------------------------------------------------------------------------
# statistics


@dataclass
class CoOccurrenceMatrix:
    """values[x, y] = fraction of class-x images that also carry class y."""

    values: np.ndarray  # 10x10 float
    class_counts: dict[str, int]
    empty_classes: list[str] = field(default_factory=list)

    def value(self, code_x: str, code_y: str) -> float:
        return float(self.values[by_code(code_x).index, by_code(code_y).index])

    def to_dict(self) -> dict[str, Any]:
        return {"classes": list(CLASS_CODES),
                "values": self.values.tolist(),
                "class_counts": self.class_counts,
                "empty_classes": self.empty_classes}


def cooccurrence(annotations: Mapping[str, AnnotationSet],
                 restrict_ids: Iterable[str] | None = None) -> CoOccurrenceMatrix:
    """Pairwise label co-occurrence over the given records (e.g. one split)."""
    ids = set(restrict_ids) if restrict_ids is not None else set(annotations)
    label_sets = [annotations[rid].codes() for rid in annotations if rid in ids]
    if not any(label_sets):
        raise ValueError("co-occurrence needs at least one annotated record")
    counts = np.zeros((N_CLASSES, N_CLASSES), dtype=np.int64)
    for codes in label_sets:
        idx = sorted(by_code(c).index for c in codes)
        for i in idx:
            for j in idx:
                counts[i, j] += 1
    diagonal = counts.diagonal().astype(np.float64)
    values = np.zeros_like(counts, dtype=np.float64)
    nonzero = diagonal > 0
    values[nonzero, :] = counts[nonzero, :] / diagonal[nonzero, None]
    empty = [ICON_CLASSES[i].code for i in range(N_CLASSES) if not nonzero[i]]
    class_counts = {ICON_CLASSES[i].code: int(diagonal[i]) for i in range(N_CLASSES)}
    return CoOccurrenceMatrix(values=values, class_counts=class_counts,
                              empty_classes=empty)


# ---------------------------------------------------------------------------
# splits


def stratified_split(annotations: Mapping[str, AnnotationSet],
                     record_ids: Iterable[str],
                     ratios: tuple[float, float, float] = DEFAULT_SPLIT_RATIOS,
                     seed: int = 0) -> dict[str, str]:
    """Assign every record to train/val/test, keeping each class near its
    exact proportion.

    Multi-label records are placed once, rarest class first (iterative
    greedy stratification); unlabeled records are distributed
    proportionally as their own population. Deterministic given the seed.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must sum to 1, got {ratios}")
    rng = np.random.default_rng(seed)
    record_ids = sorted(set(record_ids))
    labels_of: dict[str, set[str]] = {
        rid: (annotations[rid].codes() if rid in annotations else set())
        for rid in record_ids}

    totals: dict[str, int] = {code: 0 for code in CLASS_CODES}
    for codes in labels_of.values():
        for code in codes:
            totals[code] += 1

    # Remaining per-class quota for each split, consumed as records land.
    quota: dict[str, list[float]] = {
        code: [ratios[s] * totals[code] for s in range(3)]
        for code in CLASS_CODES}
    unlabeled_total = sum(1 for codes in labels_of.values() if not codes)
    quota["__none__"] = [ratios[s] * unlabeled_total for s in range(3)]

    assignment: dict[str, str] = {}
    unassigned = set(record_ids)

    tiny_classes = {code for code, n in totals.items() if 0 < n < 3}
    for code in sorted(tiny_classes):
        log.warning("class %s has %d images; assigning all to train",
                    code, totals[code])

    remaining_count = {code: totals[code] for code in CLASS_CODES}

    def place(rid: str, keys: list[str]) -> None:
        if any(k in tiny_classes for k in keys if k != "__none__"):
            split_idx = 0
        else:
            split_idx = max(range(3),
                            key=lambda s: (min(quota[k][s] for k in keys), -s))
        assignment[rid] = SPLIT_NAMES[split_idx]
        for k in keys:
            quota[k][split_idx] -= 1.0
            if k != "__none__":
                remaining_count[k] -= 1
        unassigned.discard(rid)

    while True:
        candidates = [code for code in CLASS_CODES if remaining_count[code] > 0]
        if not candidates:
            break
        # Rarest class first; ties broken by class order.
        code = min(candidates, key=lambda c: (remaining_count[c],
                                              by_code(c).index))
        members = [rid for rid in sorted(unassigned) if code in labels_of[rid]]
        order = rng.permutation(len(members))
        for i in order:
            rid = members[int(i)]
            place(rid, sorted(labels_of[rid]) or ["__none__"])

    leftovers = sorted(unassigned)
    order = rng.permutation(len(leftovers))
    for i in order:
        place(leftovers[int(i)], ["__none__"])
    return assignment


def split_counts(assignment: Mapping[str, str],
                 annotations: Mapping[str, AnnotationSet],
                 ) -> dict[str, dict[str, int]]:
    counts = {code: {s: 0 for s in SPLIT_NAMES} for code in CLASS_CODES}
    counts["__none__"] = {s: 0 for s in SPLIT_NAMES}
    for rid, split in assignment.items():
        codes = annotations[rid].codes() if rid in annotations else set()
        if not codes:
            counts["__none__"][split] += 1
        for code in codes:
            counts[code][split] += 1
    return counts


def single_label_subset(annotations: Mapping[str, AnnotationSet],
                        assignment: Mapping[str, str],
                        ) -> dict[str, list[str]]:
    """Record ids with exactly one label, grouped per split."""
    out: dict[str, list[str]] = {s: [] for s in SPLIT_NAMES}
    for rid in sorted(assignment):
        ann = annotations.get(rid)
        if ann is not None and len(ann.labels) == 1:
            out[assignment[rid]].append(rid)
    return out


# ---------------------------------------------------------------------------
# oversampling


@dataclass
class EpochPlan:
    """Per-class sample lists for one training epoch after oversampling
    minority classes up to the majority class count."""

    per_class: dict[str, list[str]]
    target_count: int
    epoch_order: list[str]


def plan_oversampled_epoch(class_members: Mapping[str, list[str]],
                           seed: int = 0) -> EpochPlan:
    """Replicate every class list up to the majority count.

    Each class contributes its whole membership floor(t/n) times plus a
    seeded sample of (t mod n) distinct members, so every member appears
    floor(t/n) or ceil(t/n) times.
    """
    for code, members in class_members.items():
        if not members:
            raise ValueError(f"class {code} has no training images")
    rng = np.random.default_rng(seed)
    target = max(len(m) for m in class_members.values())
    per_class: dict[str, list[str]] = {}
    for code in sorted(class_members):
        members = sorted(class_members[code])
        n = len(members)
        reps, extra = divmod(target, n)
        sampled = members * reps
        if extra:
            picks = rng.choice(n, size=extra, replace=False)
            sampled.extend(members[int(i)] for i in sorted(picks))
        per_class[code] = sampled
    concat = [rid for code in sorted(per_class) for rid in per_class[code]]
    order = rng.permutation(len(concat))
    epoch_order = [concat[int(i)] for i in order]
    return EpochPlan(per_class=per_class, target_count=target,
                     epoch_order=epoch_order)


def plan_epochs(class_members: Mapping[str, list[str]], n_epochs: int,
                seed: int = 0) -> list[EpochPlan]:
    return [plan_oversampled_epoch(class_members, seed=seed + i)
            for i in range(n_epochs)]
