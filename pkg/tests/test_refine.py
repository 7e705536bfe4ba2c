"""Label proposals and the human acceptance loop."""

from __future__ import annotations

import numpy as np
import pytest

from iconoforge import refine
from iconoforge.classes import CLASS_CODES
from iconoforge.curate import ProposalVoidedError, apply_decision
from iconoforge.model import ModelConfig, build_model
from iconoforge.records import (
    STATUS_REMOVED_DUPLICATE,
    AnnotationSet,
    ImageRecord,
    Label,
    ReviewItem,
)
from iconoforge.store import Workspace

from conftest import TEST_STATS


def _rec(rid, status="active") -> ImageRecord:
    return ImageRecord(id=rid, source="s", uri=rid, status=status)


class TestProposeLabels:
    def _setup(self, small_model, glyph_examples, n=12):
        examples, _ = glyph_examples
        ids = sorted(examples)[:n]
        records = {rid: _rec(rid) for rid in ids}
        loader = {rid: examples[rid][0] for rid in ids}
        return records, loader

    def test_high_score_missing_label_proposed(self, small_model,
                                               glyph_examples):
        records, loader = self._setup(small_model, glyph_examples)
        items = refine.propose_labels(small_model, records, {},
                                      lambda r: loader[r.id], threshold=0.9)
        assert items, "trained model should be confident somewhere"
        for item in items:
            assert item.kind == "label_proposal"
            assert float(item.evidence["confidence"]) >= 0.9
            assert item.evidence["source"] == "model"
            assert item.evidence["created_from"] == small_model.checkpoint_id
            assert item.evidence["cam_ref"].startswith("/api/cam/")

    def test_existing_label_not_proposed(self, small_model, glyph_examples):
        records, loader = self._setup(small_model, glyph_examples)
        bare = refine.propose_labels(small_model, records, {},
                                     lambda r: loader[r.id], threshold=0.9)
        annotations = {
            item.subject_ids[0]: AnnotationSet(
                record_id=item.subject_ids[0],
                labels=[Label(item.evidence["code"], "keyword")])
            for item in bare}
        again = refine.propose_labels(small_model, records, annotations,
                                      lambda r: loader[r.id], threshold=0.9)
        proposed_pairs = {(i.subject_ids[0], i.evidence["code"])
                          for i in again}
        for item in bare:
            assert (item.subject_ids[0], item.evidence["code"]) \
                not in proposed_pairs

    def test_threshold_one_no_perfect_scores(self, small_model,
                                             glyph_examples):
        records, loader = self._setup(small_model, glyph_examples, n=6)
        items = refine.propose_labels(small_model, records, {},
                                      lambda r: loader[r.id], threshold=1.0)
        assert items == []

    def test_untrained_model_error(self, tiny_weights):
        config = ModelConfig(backbone="tiny", weights_source=str(tiny_weights),
                             input_size=96, channel_stats=TEST_STATS,
                             head_lr=0.5, backbone_lr=0.05)
        model = build_model(config)
        with pytest.raises(ValueError, match="untrained"):
            refine.propose_labels(model, {}, {}, lambda r: None)

    def test_threshold_range(self, small_model):
        with pytest.raises(ValueError):
            refine.propose_labels(small_model, {}, {}, lambda r: None,
                                  threshold=0.5)
        with pytest.raises(ValueError):
            refine.propose_labels(small_model, {}, {}, lambda r: None,
                                  threshold=1.5)

    def test_deterministic_rerun(self, small_model, glyph_examples):
        records, loader = self._setup(small_model, glyph_examples)
        a = refine.propose_labels(small_model, records, {},
                                  lambda r: loader[r.id])
        b = refine.propose_labels(small_model, records, {},
                                  lambda r: loader[r.id])
        assert [i.to_dict() for i in a] == [i.to_dict() for i in b]

    def test_ordering_by_record_then_class(self, small_model, glyph_examples):
        records, loader = self._setup(small_model, glyph_examples)
        items = refine.propose_labels(small_model, records, {},
                                      lambda r: loader[r.id], threshold=0.6)
        keys = [(i.subject_ids[0], CLASS_CODES.index(i.evidence["code"]))
                for i in items]
        assert keys == sorted(keys)


class TestAcceptProposal:
    def _seed(self, ws: Workspace, record_status="active"):
        ws.ensure_dirs()
        ws.append_records([_rec("s/a", status=record_status)])
        item = ReviewItem(item_id="lp-1", kind="label_proposal",
                          subject_ids=["s/a"],
                          evidence={"code": "11H(JEROME)",
                                    "confidence": "0.92", "source": "model"})
        ws.append_review_items([item])
        return item

    def test_accept_adds_model_proposed_label(self, tmp_path):
        ws = Workspace(tmp_path)
        self._seed(ws)
        refine.accept_proposal(ws, "lp-1")
        ann = ws.load_annotations()["s/a"]
        assert [(label.code, label.provenance) for label in ann.labels] == [
            ("11H(JEROME)", "model_proposed")]
        assert ws.load_review_items()["lp-1"].status == "accepted"

    def test_reject_leaves_annotations(self, tmp_path):
        ws = Workspace(tmp_path)
        self._seed(ws)
        refine.reject_proposal(ws, "lp-1")
        assert ws.load_annotations() == {}

    def test_accept_on_removed_record_voids(self, tmp_path):
        ws = Workspace(tmp_path)
        self._seed(ws, record_status=STATUS_REMOVED_DUPLICATE)
        with pytest.raises(ProposalVoidedError):
            refine.accept_proposal(ws, "lp-1")
        item = ws.load_review_items()["lp-1"]
        assert item.status == "rejected"
        assert item.decision_payload == {"voided": "record_removed"}
        assert ws.load_annotations() == {}

    def test_monotone_completeness(self, tmp_path, small_model,
                                   glyph_examples):
        """propose -> accept never decreases the labeled-image count."""
        examples, _ = glyph_examples
        ids = sorted(examples)[:10]
        ws = Workspace(tmp_path)
        ws.ensure_dirs()
        ws.append_records([_rec(rid) for rid in ids])
        before = len(ws.load_annotations())
        items = refine.propose_labels(small_model, ws.load_records(), {},
                                      lambda r: examples[r.id][0],
                                      threshold=0.8)
        ws.append_review_items(items)
        for item in items:
            refine.accept_proposal(ws, item.item_id)
        after = len(ws.load_annotations())
        assert after >= before
        assert after == len({i.subject_ids[0] for i in items})
