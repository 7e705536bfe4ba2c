"""Shared fixtures: a small synthetic corpus, a pipeline-built workspace and
a pretrained reduced-depth backbone. Session-scoped where expensive;
tests that mutate state copy the workspace first."""

from __future__ import annotations

import shutil
from pathlib import Path

import numpy as np
import pytest
from PIL import Image

from iconoforge import curate, dataset
from iconoforge.backbones import pretrain_tiny_backbone
from iconoforge.classes import CLASS_CODES
from iconoforge.fixture import FixtureSummary, load_truth, make_synthetic_fixture
from iconoforge.ingest import ChannelStats, ingest_manifest
from iconoforge.store import Workspace

TEST_STATS = ChannelStats(mean=(0.5, 0.5, 0.5), std=(0.289, 0.289, 0.289),
                          n_images=1)

# Acceptance criteria report one line each; collected here and echoed after
# the run so they survive pytest's output capture.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def corpus(tmp_path_factory) -> FixtureSummary:
    out = tmp_path_factory.mktemp("corpus")
    return make_synthetic_fixture(out, n_per_class=20, seed=11)


@pytest.fixture(scope="session")
def corpus_truth(corpus):
    return load_truth(corpus.truth_path)


@pytest.fixture(scope="session")
def pipeline_workspace(tmp_path_factory, corpus) -> Workspace:
    """Workspace after ingest -> dedup -> filter -> label -> split."""
    root = tmp_path_factory.mktemp("pipeline-ws")
    ws = Workspace(root)
    ingest_manifest(ws, corpus.manifest_path, "fx")

    records = ws.load_records()
    changed, _ = curate.remove_exact_duplicates(records)
    if changed:
        ws.append_records(sorted(changed, key=lambda r: r.id))
        for rec in changed:
            records[rec.id] = rec
    ws.append_review_items(curate.find_near_duplicates(records, 10))
    ws.append_review_items(curate.flag_fragments(records))

    annotations, suggestions = dataset.apply_keyword_labels(
        records, dataset.DEFAULT_KEYWORD_CONFIG)
    ws.append_annotations(annotations[rid] for rid in sorted(annotations))
    ws.append_review_items(suggestions)

    detections = curate.run_detection(ws, records, curate.StubFigureDetector())
    removed, pose_items, _ = curate.flag_pose_mismatches(
        records, annotations, detections)
    if removed:
        ws.append_records(sorted(removed, key=lambda r: r.id))
    ws.append_review_items(pose_items)

    annotations = ws.load_annotations()
    assignment = dataset.stratified_split(
        annotations, ws.active_records().keys(), seed=42)
    ws.save_splits(assignment)
    return ws


@pytest.fixture()
def workspace_copy(pipeline_workspace, tmp_path) -> Workspace:
    """Private mutable copy of the pipeline workspace."""
    dst = tmp_path / "ws"
    shutil.copytree(pipeline_workspace.root, dst)
    return Workspace(dst)


@pytest.fixture(scope="session")
def tiny_weights(tmp_path_factory) -> Path:
    path = tmp_path_factory.mktemp("weights") / "tiny_backbone.pt"
    return pretrain_tiny_backbone(path, seed=0)


def load_examples(corpus: FixtureSummary, roles=("base", "fragment_title"),
                  ) -> tuple[dict, dict]:
    """(uri -> (pixels, class index), uri -> bbox) for the given truth roles."""
    examples, bboxes = {}, {}
    for row in load_truth(corpus.truth_path):
        if row["role"] not in roles:
            continue
        path = Path(corpus.out_dir) / row["uri"]
        arr = np.asarray(Image.open(path).convert("RGB"))
        examples[row["uri"]] = (arr, CLASS_CODES.index(row["class_code"]))
        bboxes[row["uri"]] = row["bbox"]
    return examples, bboxes


@pytest.fixture(scope="session")
def glyph_examples(corpus):
    return load_examples(corpus)


@pytest.fixture(scope="session")
def small_model(tiny_weights, glyph_examples):
    """A quickly trained 10-class model; good enough for plumbing tests."""
    from iconoforge.dataset import plan_epochs
    from iconoforge.model import ModelConfig, build_model, train

    examples, _ = glyph_examples
    ids = sorted(examples)
    rng = np.random.default_rng(0)
    rng.shuffle(ids)
    train_ids, val_ids = ids[:160], ids[160:190]
    members: dict[str, list[str]] = {}
    for rid in train_ids:
        members.setdefault(CLASS_CODES[examples[rid][1]], []).append(rid)
    config = ModelConfig(backbone="tiny", weights_source=str(tiny_weights),
                         freeze_level="stem+block2", input_size=96,
                         head_lr=0.5, backbone_lr=0.05,
                         channel_stats=TEST_STATS, batch_size=16, seed=0)
    model = build_model(config)
    return train(model, plan_epochs(members, 6, seed=0),
                 {rid: examples[rid] for rid in train_ids},
                 {rid: examples[rid] for rid in val_ids})


@pytest.fixture(scope="session")
def small_checkpoint(small_model, tmp_path_factory) -> Path:
    from iconoforge.model import save_checkpoint

    path = tmp_path_factory.mktemp("ckpt") / "model.ckpt"
    save_checkpoint(small_model, path)
    return path
