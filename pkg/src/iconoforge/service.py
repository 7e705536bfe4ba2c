"""HTTP facade for the review UI and scripted clients.

Read endpoints are safe under concurrency because every request reloads
the store snapshot; decision writes are serialized through a single lock.
Decision POSTs are idempotent by item id: repeating an identical decision
is a 200 no-op, a conflicting one is a 409. All error bodies are
``{"code": ..., "message": ...}``.
"""

from __future__ import annotations

import base64
import logging
import threading
from pathlib import Path
from typing import Any

import numpy as np
from fastapi import FastAPI, Query, Request
from fastapi.responses import FileResponse, JSONResponse, Response
from fastapi.staticfiles import StaticFiles
from PIL import Image

from . import curate
from .classes import CLASS_CODES, by_code
from .dataset import cooccurrence, split_counts
from .explain import compute_cam, overlay_png_bytes
from .model import TrainedModel, load_checkpoint, predict
from .records import ImageRecord, ReviewItem
from .store import Workspace

log = logging.getLogger(__name__)

DEFAULT_QUEUE_LIMIT = 20


class ApiError(Exception):
    def __init__(self, status_code: int, code: str, message: str):
        super().__init__(message)
        self.status_code = status_code
        self.code = code
        self.message = message


def _encode_cursor(item_id: str) -> str:
    return base64.urlsafe_b64encode(item_id.encode("utf-8")).decode("ascii")


def _decode_cursor(cursor: str) -> str:
    try:
        return base64.urlsafe_b64decode(cursor.encode("ascii")).decode("utf-8")
    except Exception:
        raise ApiError(400, "bad_cursor", f"malformed cursor: {cursor!r}")


def _item_summary(item: ReviewItem) -> dict[str, Any]:
    # Links only; review items never embed image bytes.
    return {**item.to_dict(),
            "images": [f"/api/images/{rid}" for rid in item.subject_ids]}


class ServiceState:
    def __init__(self, workspace: Workspace, model: TrainedModel | None):
        self.workspace = workspace
        self.model = model
        self.write_lock = threading.Lock()
        # Bounded concurrency for model inference.
        self.inference_slots = threading.Semaphore(2)
        self._prediction_cache: dict[str, Any] = {}
        self._cache_lock = threading.Lock()

    def require_model(self) -> TrainedModel:
        if self.model is None:
            raise ApiError(409, "model_not_loaded",
                           "no model checkpoint is loaded; start the service "
                           "with --model PATH")
        return self.model

    def load_record(self, record_id: str) -> ImageRecord:
        record = self.workspace.load_records().get(record_id)
        if record is None:
            raise ApiError(404, "unknown_record",
                           f"no record with id {record_id!r}")
        return record

    def record_pixels(self, record: ImageRecord) -> np.ndarray:
        if not self.workspace.has_image_bytes(record):
            raise ApiError(404, "missing_bytes",
                           f"record {record.id} has no stored image bytes")
        with Image.open(self.workspace.image_path(record)) as img:
            return np.asarray(img.convert("RGB"))

    def prediction_for(self, record: ImageRecord):
        model = self.require_model()
        with self._cache_lock:
            cached = self._prediction_cache.get(record.id)
        if cached is not None:
            return cached
        pixels = self.record_pixels(record)
        with self.inference_slots:
            prediction = predict(model, pixels, record_id=record.id)
        with self._cache_lock:
            self._prediction_cache[record.id] = prediction
        return prediction


def validate_workspace(workspace: Workspace) -> None:
    """Fail fast on a corrupt store instead of serving garbage."""
    if not workspace.records_path.exists():
        raise RuntimeError(f"record store not found: {workspace.records_path}")
    try:
        workspace.load_records()
        workspace.load_review_items()
        workspace.load_annotations()
    except Exception as exc:
        raise RuntimeError(f"corrupt store under {workspace.root}: {exc}") from exc


def create_app(workspace: Workspace, model_path: str | Path | None = None,
               ui_dir: str | Path | None = None) -> FastAPI:
    validate_workspace(workspace)
    model = load_checkpoint(model_path) if model_path else None
    state = ServiceState(workspace, model)
    app = FastAPI(title="iconoforge review service")

    @app.exception_handler(ApiError)
    async def on_api_error(_request: Request, exc: ApiError) -> JSONResponse:
        return JSONResponse(status_code=exc.status_code,
                            content={"code": exc.code, "message": exc.message})

    @app.get("/api/queue")
    def queue(kind: str | None = None, status: str = "pending",
              limit: int = Query(DEFAULT_QUEUE_LIMIT, ge=1, le=500),
              cursor: str | None = None) -> dict[str, Any]:
        items = state.workspace.load_review_items()
        selected = sorted(
            (i for i in items.values()
             if (kind is None or i.kind == kind) and i.status == status),
            key=lambda i: i.item_id)
        total_pending = sum(
            1 for i in items.values()
            if (kind is None or i.kind == kind) and i.is_pending)
        start = 0
        if cursor:
            last_id = _decode_cursor(cursor)
            start = next((idx + 1 for idx, it in enumerate(selected)
                          if it.item_id == last_id), 0)
        page = selected[start:start + limit]
        next_cursor = (_encode_cursor(page[-1].item_id)
                       if len(selected) > start + limit and page else None)
        return {"items": [_item_summary(i) for i in page],
                "total_pending": total_pending,
                "next_cursor": next_cursor}

    @app.get("/api/items/{item_id}")
    def get_item(item_id: str) -> dict[str, Any]:
        item = state.workspace.load_review_items().get(item_id)
        if item is None:
            raise ApiError(404, "unknown_item", f"no review item {item_id!r}")
        return _item_summary(item)

    @app.post("/api/items/{item_id}/decision")
    def post_decision(item_id: str, body: dict[str, Any]) -> dict[str, Any]:
        decision = body.get("decision")
        payload = body.get("payload") or None
        if decision not in ("accept", "reject"):
            raise ApiError(400, "bad_decision",
                           "decision must be 'accept' or 'reject'")
        with state.write_lock:
            items = state.workspace.load_review_items()
            existing = items.get(item_id)
            if existing is None:
                raise ApiError(404, "unknown_item", f"no review item {item_id!r}")
            if not existing.is_pending:
                same_decision = (existing.status ==
                                 ("accepted" if decision == "accept" else "rejected"))
                same_payload = (existing.decision_payload or None) == payload
                if same_decision and same_payload:
                    decided = existing  # idempotent repeat
                else:
                    raise ApiError(409, "conflicting_decision",
                                   f"item {item_id} already {existing.status} "
                                   f"with a different decision")
            else:
                try:
                    decided = curate.apply_decision(
                        state.workspace, item_id, decision, payload)
                except curate.ProposalVoidedError as exc:
                    raise ApiError(409, "proposal_voided", str(exc))
                except curate.MalformedPayloadError as exc:
                    raise ApiError(400, "bad_payload", str(exc))
            fresh = state.workspace.load_review_items()
            pending_same_kind = sorted(
                (i for i in fresh.values()
                 if i.kind == decided.kind and i.is_pending),
                key=lambda i: i.item_id)
            next_item = pending_same_kind[0] if pending_same_kind else None
            total_pending = sum(1 for i in fresh.values() if i.is_pending)
        return {"item": _item_summary(decided),
                "next_item": _item_summary(next_item) if next_item else None,
                "total_pending": total_pending}

    @app.get("/api/images/{record_id:path}")
    def get_image(record_id: str) -> FileResponse:
        for suffix in (".jpg", ".jpeg", ".png"):
            if record_id.endswith(suffix):
                record_id = record_id[:-len(suffix)]
                break
        record = state.load_record(record_id)
        if not state.workspace.has_image_bytes(record):
            raise ApiError(404, "missing_bytes",
                           f"record {record_id} has no stored image bytes")
        path = state.workspace.image_path(record)
        media = "image/png" if path.suffix.lower() == ".png" else "image/jpeg"
        return FileResponse(path, media_type=media)

    @app.get("/api/predictions/{record_id:path}")
    def get_prediction(record_id: str) -> dict[str, Any]:
        record = state.load_record(record_id)
        prediction = state.prediction_for(record)
        return {
            "record_id": record_id,
            "scores": {code: float(prediction.scores[i])
                       for i, code in enumerate(CLASS_CODES)},
            "predicted": prediction.predicted,
            "threshold": prediction.threshold,
        }

    @app.get("/api/cam/{record_id:path}/{class_code}.png")
    def get_cam(record_id: str, class_code: str,
                alpha: float = Query(0.5, ge=0.0, le=1.0)) -> Response:
        try:
            by_code(class_code)
        except KeyError:
            raise ApiError(404, "unknown_class",
                           f"unknown class code {class_code!r}")
        record = state.load_record(record_id)
        prediction = state.prediction_for(record)
        cam = compute_cam(prediction, class_code)
        stats = state.require_model().config.channel_stats
        fill = tuple(m * 255.0 for m in stats.mean)
        png = overlay_png_bytes(state.record_pixels(record), cam,
                                alpha=alpha, fill=fill)
        return Response(content=png, media_type="image/png")

    @app.get("/api/stats")
    def get_stats() -> dict[str, Any]:
        records = state.workspace.load_records()
        annotations = state.workspace.load_annotations()
        splits = state.workspace.load_splits()
        items = state.workspace.load_review_items()
        status_counts: dict[str, int] = {}
        for record in records.values():
            status_counts[record.status] = status_counts.get(record.status, 0) + 1
        class_counts = {code: 0 for code in CLASS_CODES}
        for ann in annotations.values():
            for code in ann.codes():
                class_counts[code] += 1
        split_sizes: dict[str, int] = {}
        for split in splits.values():
            split_sizes[split] = split_sizes.get(split, 0) + 1
        pending_by_kind: dict[str, int] = {}
        for item in items.values():
            if item.is_pending:
                pending_by_kind[item.kind] = pending_by_kind.get(item.kind, 0) + 1
        cooc = None
        active_annotated = [rid for rid, ann in annotations.items()
                            if ann.labels and rid in records
                            and records[rid].is_active]
        if active_annotated:
            cooc = cooccurrence(annotations, restrict_ids=active_annotated).to_dict()
        per_class_splits = (split_counts(splits, annotations)
                            if splits else None)
        return {"records": status_counts,
                "class_counts": class_counts,
                "split_sizes": split_sizes,
                "per_class_splits": per_class_splits,
                "pending_by_kind": pending_by_kind,
                "cooccurrence": cooc,
                "model_loaded": state.model is not None}

    ui_path = Path(ui_dir) if ui_dir else None
    if ui_path and ui_path.exists():
        app.mount("/ui", StaticFiles(directory=str(ui_path), html=True),
                  name="ui")

    app.state.service = state
    return app


def serve(workspace: Workspace, port: int = 8630,
          model_path: str | Path | None = None,
          ui_dir: str | Path | None = None, host: str = "127.0.0.1") -> None:
    import uvicorn

    app = create_app(workspace, model_path=model_path, ui_dir=ui_dir)
    uvicorn.run(app, host=host, port=port, log_level="info")
