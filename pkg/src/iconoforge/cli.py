"""Command-line entry point wiring the whole workflow:

    fixture -> ingest -> dedup -> filter -> label -> split -> stats
            -> train -> eval / ablation -> cam / predict -> propose -> serve

Every command writes a run manifest (command, arguments, seed, input
hashes) beside its outputs and never mutates its inputs in place.
"""

from __future__ import annotations

import hashlib
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Mapping

import click
import numpy as np
import yaml
from PIL import Image

from . import curate, dataset, evaluation, fixture, refine
from .backbones import pretrain_tiny_backbone
from .classes import CLASS_CODES, by_code
from .ingest import ChannelStats, compute_channel_stats, ingest_manifest
from .model import (
    ModelConfig,
    TrainedModel,
    build_model,
    load_checkpoint,
    predict,
    predict_scores_batch,
    save_checkpoint,
    train,
)
from .records import ImageRecord
from .store import Workspace

log = logging.getLogger(__name__)


def _md5_file(path: Path) -> str:
    h = hashlib.md5()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_run_manifest(workspace: Workspace, command: str,
                       args: Mapping[str, Any], seed: int | None,
                       inputs: list[Path] = ()) -> None:
    manifest_dir = workspace.root / "run_manifests"
    manifest_dir.mkdir(parents=True, exist_ok=True)
    payload = {
        "command": command,
        "args": {k: str(v) for k, v in args.items() if v is not None},
        "seed": seed,
        "input_hashes": {str(p): _md5_file(Path(p))
                         for p in inputs if Path(p).is_file()},
        "written_at": datetime.now(timezone.utc).isoformat(timespec="seconds"),
    }
    (manifest_dir / f"{command}.json").write_text(
        json.dumps(payload, sort_keys=True, indent=2))


def _load_pixels(workspace: Workspace, record: ImageRecord) -> np.ndarray:
    with Image.open(workspace.image_path(record)) as img:
        return np.asarray(img.convert("RGB"))


def _channel_stats_or_compute(workspace: Workspace) -> ChannelStats:
    stored = workspace.load_stats()
    if stored is not None:
        return ChannelStats.from_dict(stored)
    records = [r for r in workspace.active_records().values()
               if workspace.has_image_bytes(r)]
    stats = compute_channel_stats(records, lambda r: _load_pixels(workspace, r))
    workspace.save_stats(stats.to_dict())
    return stats


def _single_label_examples(workspace: Workspace, split: str,
                           ) -> dict[str, tuple[np.ndarray, int]]:
    annotations = workspace.load_annotations()
    assignment = workspace.load_splits()
    if not assignment:
        raise click.ClickException(
            "no splits.jsonl found; run `iconoforge split` first")
    subset = dataset.single_label_subset(annotations, assignment)
    records = workspace.load_records()
    examples: dict[str, tuple[np.ndarray, int]] = {}
    for rid in subset[split]:
        record = records.get(rid)
        if record is None or not record.is_active:
            continue
        if not workspace.has_image_bytes(record):
            continue
        code = annotations[rid].labels[0].code
        examples[rid] = (_load_pixels(workspace, record), by_code(code).index)
    return examples


def _make_config(ctx_config: Mapping[str, Any], **overrides: Any) -> ModelConfig:
    merged: dict[str, Any] = dict(ctx_config.get("model", {}))
    merged.update({k: v for k, v in overrides.items() if v is not None})
    if "channel_stats" in merged and isinstance(merged["channel_stats"], dict):
        merged["channel_stats"] = ChannelStats.from_dict(merged["channel_stats"])
    return ModelConfig(**merged)


@click.group()
@click.option("--workdir", type=click.Path(path_type=Path),
              default=Path("workspace"), show_default=True,
              help="Workspace directory holding the record store.")
@click.option("--config", "config_path", type=click.Path(path_type=Path),
              default=None, help="Optional YAML config with defaults.")
@click.option("--seed", type=int, default=42, show_default=True)
@click.option("-v", "--verbose", is_flag=True)
@click.pass_context
def main(ctx: click.Context, workdir: Path, config_path: Path | None,
         seed: int, verbose: bool) -> None:
    logging.basicConfig(
        level=logging.DEBUG if verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s")
    config: dict[str, Any] = {}
    if config_path is not None:
        config = yaml.safe_load(Path(config_path).read_text()) or {}
    ctx.obj = {"workspace": Workspace(workdir), "seed": seed, "config": config}


def _ws(ctx: click.Context) -> Workspace:
    return ctx.obj["workspace"]


@main.command("fixture")
@click.option("--out", "out_dir", type=click.Path(path_type=Path), required=True)
@click.option("--n-per-class", type=int, default=20, show_default=True)
@click.option("--seed", type=int, default=None)
@click.pass_context
def fixture_cmd(ctx: click.Context, out_dir: Path, n_per_class: int,
                seed: int | None) -> None:
    """Generate the synthetic glyph corpus."""
    seed = ctx.obj["seed"] if seed is None else seed
    summary = fixture.make_synthetic_fixture(out_dir, n_per_class, seed=seed)
    write_run_manifest(_ws(ctx), "fixture",
                       {"out": out_dir, "n_per_class": n_per_class}, seed)
    click.echo(json.dumps(summary.to_dict(), indent=2))


@main.command()
@click.option("--manifest", "manifest_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--source", "source_name", required=True)
@click.option("--images-dir", type=click.Path(path_type=Path), default=None,
              help="Store images here instead of <workdir>/images.")
@click.pass_context
def ingest(ctx: click.Context, manifest_path: Path, source_name: str,
           images_dir: Path | None) -> None:
    """Load a source manifest into the record store."""
    workspace = _ws(ctx)
    if images_dir is not None:
        workspace.images_dir = images_dir
    report = ingest_manifest(workspace, manifest_path, source_name)
    write_run_manifest(workspace, "ingest",
                       {"manifest": manifest_path, "source": source_name},
                       ctx.obj["seed"], [manifest_path])
    click.echo(json.dumps(report.__dict__, indent=2))


@main.command()
@click.option("--threshold", type=int, default=curate.DEFAULT_NEAR_DUP_THRESHOLD,
              show_default=True, help="Near-duplicate Hamming threshold.")
@click.pass_context
def dedup(ctx: click.Context, threshold: int) -> None:
    """Remove exact duplicates and queue near-duplicate pairs for review."""
    workspace = _ws(ctx)
    records = workspace.load_records()
    changed, groups = curate.remove_exact_duplicates(records)
    if changed:
        workspace.append_records(sorted(changed, key=lambda r: r.id))
        for rec in changed:
            records[rec.id] = rec
    items = curate.find_near_duplicates(records, threshold)
    appended = workspace.append_review_items(items)
    write_run_manifest(workspace, "dedup", {"threshold": threshold},
                       ctx.obj["seed"])
    click.echo(json.dumps({
        "exact_groups": len(groups),
        "removed": len(changed),
        "near_dup_items": len(items),
        "newly_queued": appended,
    }, indent=2))


@main.command("filter")
@click.option("--fragments/--no-fragments", default=True, show_default=True)
@click.option("--pose/--no-pose", default=False, show_default=True)
@click.option("--detector", default="stub", show_default=True,
              help="'stub' or a shell command implementing the JSON contract.")
@click.pass_context
def filter_cmd(ctx: click.Context, fragments: bool, pose: bool,
               detector: str) -> None:
    """Queue fragment candidates and cross-check annotations against poses."""
    workspace = _ws(ctx)
    records = workspace.load_records()
    out: dict[str, Any] = {}
    if fragments:
        items = curate.flag_fragments(records)
        out["fragment_items"] = len(items)
        out["fragments_queued"] = workspace.append_review_items(items)
    if pose:
        annotations = workspace.load_annotations()
        if not annotations:
            raise click.ClickException(
                "the pose cross-check compares annotations against detected "
                "figures, but no labels exist yet; run `iconoforge label` "
                "first, then `filter --pose`")
        det = (curate.StubFigureDetector() if detector == "stub"
               else curate.SubprocessFigureDetector(detector))
        detections = curate.run_detection(workspace, records, det)
        removed, items, skipped = curate.flag_pose_mismatches(
            records, annotations, detections)
        if removed:
            workspace.append_records(sorted(removed, key=lambda r: r.id))
        out["pose_auto_removed"] = len(removed)
        out["pose_items"] = len(items)
        out["pose_queued"] = workspace.append_review_items(items)
        out["pose_skipped"] = len(skipped)
    write_run_manifest(workspace, "filter",
                       {"fragments": fragments, "pose": pose,
                        "detector": detector}, ctx.obj["seed"])
    click.echo(json.dumps(out, indent=2))


@main.command()
@click.option("--keywords", "keywords_path", type=click.Path(path_type=Path),
              default=None, help="Keyword config YAML; defaults built in.")
@click.pass_context
def label(ctx: click.Context, keywords_path: Path | None) -> None:
    """Derive keyword annotations; broad matches go to the review queue."""
    workspace = _ws(ctx)
    keyword_map = (dataset.load_keyword_config(keywords_path)
                   if keywords_path else dataset.DEFAULT_KEYWORD_CONFIG)
    records = workspace.load_records()
    annotations, suggestions = dataset.apply_keyword_labels(records, keyword_map)
    existing = workspace.load_annotations()
    fresh = [ann for rid, ann in sorted(annotations.items())
             if rid not in existing or existing[rid].to_dict() != ann.to_dict()]
    workspace.append_annotations(fresh)
    queued = workspace.append_review_items(suggestions)
    write_run_manifest(workspace, "label", {"keywords": keywords_path},
                       ctx.obj["seed"],
                       [keywords_path] if keywords_path else [])
    click.echo(json.dumps({
        "labeled_records": len(annotations),
        "updated": len(fresh),
        "broad_suggestions": len(suggestions),
        "newly_queued": queued,
    }, indent=2))


@main.command()
@click.option("--ratios", default="0.8,0.1,0.1", show_default=True)
@click.option("--seed", type=int, default=None)
@click.pass_context
def split(ctx: click.Context, ratios: str, seed: int | None) -> None:
    """Assign every active record to train/val/test, class-balanced."""
    workspace = _ws(ctx)
    seed = ctx.obj["seed"] if seed is None else seed
    parts = tuple(float(x) for x in ratios.split(","))
    if len(parts) != 3:
        raise click.ClickException("--ratios needs three comma-separated values")
    annotations = workspace.load_annotations()
    active = workspace.active_records()
    assignment = dataset.stratified_split(annotations, active.keys(),
                                          ratios=parts, seed=seed)
    workspace.save_splits(assignment)
    counts = dataset.split_counts(assignment, annotations)
    write_run_manifest(workspace, "split", {"ratios": ratios}, seed)
    click.echo(json.dumps({"assigned": len(assignment),
                           "per_class": counts}, indent=2))


@main.command()
@click.option("--cooccurrence", "show_cooc", is_flag=True)
@click.pass_context
def stats(ctx: click.Context, show_cooc: bool) -> None:
    """Compute corpus channel statistics (and optionally co-occurrence)."""
    workspace = _ws(ctx)
    records = [r for r in workspace.active_records().values()
               if workspace.has_image_bytes(r)]
    channel = compute_channel_stats(records,
                                    lambda r: _load_pixels(workspace, r))
    workspace.save_stats(channel.to_dict())
    out: dict[str, Any] = {"channel_stats": channel.to_dict()}
    if show_cooc:
        annotations = workspace.load_annotations()
        assignment = workspace.load_splits()
        train_ids = ([rid for rid, s in assignment.items() if s == "train"]
                     if assignment else None)
        matrix = dataset.cooccurrence(annotations, restrict_ids=train_ids)
        out["cooccurrence"] = matrix.to_dict()
    write_run_manifest(workspace, "stats", {"cooccurrence": show_cooc},
                       ctx.obj["seed"])
    click.echo(json.dumps(out, indent=2))


@main.command("pretrain-backbone")
@click.option("--out", "out_path", type=click.Path(path_type=Path), required=True)
@click.option("--seed", type=int, default=None)
@click.pass_context
def pretrain_backbone_cmd(ctx: click.Context, out_path: Path,
                          seed: int | None) -> None:
    """Pretrain the reduced-depth backbone on procedural textures."""
    seed = ctx.obj["seed"] if seed is None else seed
    pretrain_tiny_backbone(out_path, seed=seed)
    write_run_manifest(_ws(ctx), "pretrain-backbone", {"out": out_path}, seed)
    click.echo(str(out_path))


@main.command("train")
@click.option("--backbone", default=None)
@click.option("--weights", "weights_source", default=None,
              help="Backbone weights: a state-dict path or 'torchvision'.")
@click.option("--freeze", "freeze_level", default=None)
@click.option("--input-size", type=int, default=None)
@click.option("--head-lr", type=float, default=None)
@click.option("--backbone-lr", type=float, default=None)
@click.option("--batch-size", type=int, default=None)
@click.option("--epochs", type=int, default=10, show_default=True)
@click.option("--out", "out_path", type=click.Path(path_type=Path),
              default=None, help="Checkpoint path; default <workdir>/model.ckpt")
@click.pass_context
def train_cmd(ctx: click.Context, backbone: str | None,
              weights_source: str | None, freeze_level: str | None,
              input_size: int | None, head_lr: float | None,
              backbone_lr: float | None, batch_size: int | None,
              epochs: int, out_path: Path | None) -> None:
    """Fine-tune the classifier on the oversampled single-label train split."""
    workspace = _ws(ctx)
    seed = ctx.obj["seed"]
    stats_ = _channel_stats_or_compute(workspace)
    config = _make_config(ctx.obj["config"], backbone=backbone,
                          weights_source=weights_source,
                          freeze_level=freeze_level, input_size=input_size,
                          head_lr=head_lr, backbone_lr=backbone_lr,
                          batch_size=batch_size, channel_stats=stats_,
                          seed=seed)
    train_examples = _single_label_examples(workspace, "train")
    val_examples = _single_label_examples(workspace, "val")
    if not train_examples:
        raise click.ClickException("no single-label training images available")
    class_members: dict[str, list[str]] = {}
    annotations = workspace.load_annotations()
    for rid in train_examples:
        code = annotations[rid].labels[0].code
        class_members.setdefault(code, []).append(rid)
    plans = dataset.plan_epochs(class_members, epochs, seed=seed)
    model = build_model(config)
    model = train(model, plans, train_examples, val_examples)
    out_path = out_path or (workspace.root / "model.ckpt")
    checkpoint_id = save_checkpoint(model, out_path)
    write_run_manifest(workspace, "train",
                       {"backbone": config.backbone,
                        "freeze": config.freeze_level, "epochs": epochs,
                        "out": out_path, "checkpoint_id": checkpoint_id},
                       seed)
    click.echo(json.dumps({"checkpoint": str(out_path),
                           "checkpoint_id": checkpoint_id,
                           "training_log": model.training_log}, indent=2))


def _require_model(model_path: Path) -> TrainedModel:
    if not Path(model_path).exists():
        raise click.ClickException(f"model checkpoint not found: {model_path}")
    return load_checkpoint(model_path)


@main.command("eval")
@click.option("--model", "model_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--split", "split_name", default="test", show_default=True,
              type=click.Choice(["train", "val", "test"]))
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.pass_context
def eval_cmd(ctx: click.Context, model_path: Path, split_name: str,
             threshold: float) -> None:
    """Per-class metrics and the None-aware confusion matrix on one split."""
    workspace = _ws(ctx)
    model = _require_model(model_path)
    examples = _single_label_examples(workspace, split_name)
    if not examples:
        raise click.ClickException(
            f"no single-label {split_name} examples; run label/split first")
    ids = sorted(examples)
    scores = predict_scores_batch(model, [examples[rid][0] for rid in ids])
    score_map = {rid: scores[i].tolist() for i, rid in enumerate(ids)}
    truths = {rid: CLASS_CODES[examples[rid][1]] for rid in ids}
    report = evaluation.evaluate(score_map, truths, threshold=threshold)
    matrix = evaluation.confusion(
        evaluation.predictions_as_codes(score_map, threshold), truths)
    out = {"report": report.to_dict(), "confusion": matrix.to_dict()}
    reports_dir = workspace.root / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    out_path = reports_dir / f"eval_{split_name}.json"
    out_path.write_text(json.dumps(out, indent=2, sort_keys=True))
    write_run_manifest(workspace, "eval",
                       {"model": model_path, "split": split_name,
                        "threshold": threshold},
                       ctx.obj["seed"], [model_path])
    click.echo(json.dumps({"report_path": str(out_path),
                           "means": report.means,
                           "accuracy": report.accuracy}, indent=2))


@main.command("ablation")
@click.option("--levels", default="all_backbone,stem+block2", show_default=True)
@click.option("--backbone", default=None)
@click.option("--weights", "weights_source", default=None)
@click.option("--input-size", type=int, default=None)
@click.option("--epochs", type=int, default=5, show_default=True)
@click.pass_context
def ablation_cmd(ctx: click.Context, levels: str, backbone: str | None,
                 weights_source: str | None, input_size: int | None,
                 epochs: int) -> None:
    """Train one model per freeze level (identical seeds) and compare."""
    workspace = _ws(ctx)
    seed = ctx.obj["seed"]
    stats_ = _channel_stats_or_compute(workspace)
    train_examples = _single_label_examples(workspace, "train")
    val_examples = _single_label_examples(workspace, "val")
    if not train_examples or not val_examples:
        raise click.ClickException("train/val splits are empty; run the "
                                   "pipeline through `split` first")
    annotations = workspace.load_annotations()
    class_members: dict[str, list[str]] = {}
    for rid in train_examples:
        class_members.setdefault(annotations[rid].labels[0].code, []).append(rid)
    plans = dataset.plan_epochs(class_members, epochs, seed=seed)

    def run_level(level: str) -> dict[str, Any]:
        config = _make_config(ctx.obj["config"], backbone=backbone,
                              weights_source=weights_source,
                              input_size=input_size, freeze_level=level,
                              channel_stats=stats_, seed=seed)
        model = build_model(config)
        model = train(model, plans, train_examples, val_examples)
        final = model.training_log[-1]
        return {"val_mean_ap": final.get("val_mean_ap"),
                "val_accuracy": final.get("val_accuracy"),
                "training_log": model.training_log}

    results = evaluation.ablation_sweep(
        [lvl.strip() for lvl in levels.split(",") if lvl.strip()], run_level)
    reports_dir = workspace.root / "reports"
    reports_dir.mkdir(parents=True, exist_ok=True)
    (reports_dir / "ablation.json").write_text(
        json.dumps(results, indent=2, sort_keys=True))
    (reports_dir / "ablation.csv").write_text(
        "\n".join(evaluation.ablation_csv_rows(results)) + "\n")
    write_run_manifest(workspace, "ablation",
                       {"levels": levels, "epochs": epochs}, seed)
    click.echo(json.dumps({lvl: r["val_mean_ap"] for lvl, r in results.items()},
                          indent=2))


@main.command("predict")
@click.option("--model", "model_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--image", "image_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--threshold", type=float, default=0.5, show_default=True)
@click.pass_context
def predict_cmd(ctx: click.Context, model_path: Path, image_path: Path,
                threshold: float) -> None:
    """Classify a single image file."""
    model = _require_model(model_path)
    with Image.open(image_path) as img:
        pixels = np.asarray(img.convert("RGB"))
    prediction = predict(model, pixels, threshold=threshold)
    write_run_manifest(_ws(ctx), "predict",
                       {"model": model_path, "image": image_path,
                        "threshold": threshold},
                       ctx.obj["seed"], [model_path, image_path])
    click.echo(json.dumps({
        "predicted": prediction.predicted,
        "scores": {code: float(prediction.scores[i])
                   for i, code in enumerate(CLASS_CODES)},
        "threshold": threshold,
    }, indent=2))


@main.command("cam")
@click.option("--model", "model_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--image", "image_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--class", "class_code", required=True)
@click.option("--out", "out_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--alpha", type=float, default=0.5, show_default=True)
@click.option("--raw-out", type=click.Path(path_type=Path), default=None,
              help="Plain-text dump of the feature-resolution map; "
                   "defaults to OUT with a .cam.txt suffix.")
@click.pass_context
def cam_cmd(ctx: click.Context, model_path: Path, image_path: Path,
            class_code: str, out_path: Path, alpha: float,
            raw_out: Path | None) -> None:
    """Write the CAM overlay PNG plus the raw map for one image."""
    from .explain import compute_cam, render_overlay, write_raw_map

    model = _require_model(model_path)
    if raw_out is None:
        raw_out = out_path.with_suffix(".cam.txt")
    with Image.open(image_path) as img:
        pixels = np.asarray(img.convert("RGB"))
    prediction = predict(model, pixels)
    cam = compute_cam(prediction, class_code)
    fill = tuple(m * 255.0 for m in model.config.channel_stats.mean)
    overlay = render_overlay(pixels, cam, alpha=alpha, fill=fill)
    Image.fromarray(overlay).save(out_path, format="PNG")
    write_raw_map(cam, raw_out)
    write_run_manifest(_ws(ctx), "cam",
                       {"model": model_path, "image": image_path,
                        "class": class_code, "out": out_path},
                       ctx.obj["seed"], [model_path, image_path])
    click.echo(json.dumps({
        "out": str(out_path),
        "raw_out": str(raw_out),
        "score": float(prediction.scores[by_code(class_code).index]),
        "peak_location": list(cam.peak_location),
    }, indent=2))


@main.command("propose")
@click.option("--model", "model_path", type=click.Path(path_type=Path),
              required=True)
@click.option("--threshold", type=float,
              default=refine.DEFAULT_PROPOSAL_THRESHOLD, show_default=True)
@click.pass_context
def propose_cmd(ctx: click.Context, model_path: Path, threshold: float) -> None:
    """Queue high-confidence missing-label proposals for review."""
    workspace = _ws(ctx)
    model = _require_model(model_path)
    records = workspace.load_records()
    annotations = workspace.load_annotations()
    items = refine.propose_labels(
        model, records, annotations,
        lambda rec: _load_pixels(workspace, rec), threshold=threshold)
    queued = workspace.append_review_items(items)
    export = workspace.root / "proposals.jsonl"
    with export.open("w", encoding="utf-8") as fh:
        for item in items:
            fh.write(json.dumps(item.to_dict(), sort_keys=True) + "\n")
    write_run_manifest(workspace, "propose",
                       {"model": model_path, "threshold": threshold},
                       ctx.obj["seed"], [model_path])
    click.echo(json.dumps({"proposals": len(items), "newly_queued": queued,
                           "export": str(export)}, indent=2))


@main.command("serve")
@click.option("--port", type=int, default=8630, show_default=True)
@click.option("--model", "model_path", type=click.Path(path_type=Path),
              default=None)
@click.option("--ui-dir", type=click.Path(path_type=Path), default=None,
              help="Static review-UI assets; defaults to ./frontend/dist")
@click.option("--host", default="127.0.0.1", show_default=True)
@click.pass_context
def serve_cmd(ctx: click.Context, port: int, model_path: Path | None,
              ui_dir: Path | None, host: str) -> None:
    """Serve the review API (and UI when built) over HTTP."""
    from .service import serve

    workspace = _ws(ctx)
    if ui_dir is None:
        candidate = Path("frontend/dist")
        ui_dir = candidate if candidate.exists() else None
    try:
        serve(workspace, port=port, model_path=model_path, ui_dir=ui_dir,
              host=host)
    except RuntimeError as exc:
        raise click.ClickException(str(exc))


if __name__ == "__main__":
    sys.exit(main())
