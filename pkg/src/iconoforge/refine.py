"""Label proposals: high-confidence predictions on images missing that label.

Closes the refinement loop: strong classifier outputs absent from the
ground truth become review items, and an accepted proposal lands as a
model_proposed annotation so downstream training can choose whether to
trust it.
"""

from __future__ import annotations

import logging
from typing import Callable, Mapping

import numpy as np

from .classes import CLASS_CODES
from .curate import apply_decision, proposal_item_id
from .model import TrainedModel, predict
from .records import AnnotationSet, ImageRecord, ReviewItem
from .store import Workspace

log = logging.getLogger(__name__)

DEFAULT_PROPOSAL_THRESHOLD = 0.9


def propose_labels(model: TrainedModel,
                   records: Mapping[str, ImageRecord],
                   annotations: Mapping[str, AnnotationSet],
                   load_image: Callable[[ImageRecord], np.ndarray],
                   threshold: float = DEFAULT_PROPOSAL_THRESHOLD,
                   ) -> list[ReviewItem]:
    """One label_proposal item per (active record, class) whose score clears
    the threshold and whose class is not already annotated. Ordering is
    deterministic: record id, then class index."""
    if not model.is_trained:
        raise ValueError("cannot propose labels from an untrained model")
    if not 0.5 < threshold <= 1.0:
        raise ValueError(f"proposal threshold must be in (0.5, 1], got {threshold}")
    checkpoint_id = model.checkpoint_id
    items: list[ReviewItem] = []
    for rid in sorted(records):
        rec = records[rid]
        if not rec.is_active:
            continue
        existing = annotations[rid].codes() if rid in annotations else set()
        prediction = predict(model, load_image(rec), record_id=rid)
        for index, code in enumerate(CLASS_CODES):
            score = float(prediction.scores[index])
            if score >= threshold and code not in existing:
                items.append(ReviewItem(
                    item_id=proposal_item_id(rid, code),
                    kind="label_proposal",
                    subject_ids=[rid],
                    evidence={
                        "code": code,
                        "confidence": f"{score:.6f}",
                        "source": "model",
                        "created_from": checkpoint_id,
                        "cam_ref": f"/api/cam/{rid}/{code}.png",
                    },
                ))
    return items


def accept_proposal(workspace: Workspace, item_id: str) -> ReviewItem:
    """Accept one pending proposal; the label lands with provenance
    model_proposed and dependent statistics become stale. A proposal whose
    record has been removed is voided (logged as a rejection) and raises."""
    return apply_decision(workspace, item_id, "accept")


def reject_proposal(workspace: Workspace, item_id: str) -> ReviewItem:
    return apply_decision(workspace, item_id, "reject")
